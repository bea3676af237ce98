mod common;

use common::gmm_setup;
use ttsem::models::gmm::gmm_exact_expectation;
use ttsem::{run, run_with_observer, RunConfig, StatVec, StepSchedule, Variant};

fn config(variant: Variant, n: usize, epochs: f64, seed: u64) -> RunConfig {
    let mut c = RunConfig::defaults(variant, n, epochs);
    c.seed = seed;
    c
}

#[test]
fn vrttem_without_variance_reduction_is_saem() {
    let (model, theta0) = gmm_setup(100, 11);
    let mut saem = config(Variant::Saem, 100, 20.0, 3);
    saem.gamma = StepSchedule::polynomial(1.0, 0.5).unwrap();
    let mut vr = saem.clone();
    vr.variant = Variant::VrTtem;
    vr.rho = 1.0;
    vr.epoch_len = 1;
    let a = run(&model, &saem, &theta0).unwrap().trajectory;
    let b = run(&model, &vr, &theta0).unwrap().trajectory;
    assert_eq!(a.records.len(), 21);
    assert!(a.same_iterates(&b));
}

#[test]
fn saem_with_unit_steps_is_mcem() {
    let (model, theta0) = gmm_setup(100, 12);
    let mcem = config(Variant::Mcem, 100, 15.0, 4);
    let mut saem = mcem.clone();
    saem.variant = Variant::Saem;
    let a = run(&model, &mcem, &theta0).unwrap().trajectory;
    let b = run(&model, &saem, &theta0).unwrap().trajectory;
    assert!(a.same_iterates(&b));
}

#[test]
fn exact_batch_saem_with_unit_steps_is_em() {
    let (model, theta0) = gmm_setup(100, 13);
    let em = config(Variant::Em, 100, 30.0, 5);
    let mut saem = em.clone();
    saem.variant = Variant::Saem;
    let a = run(&model, &em, &theta0).unwrap();
    let b = run(&model, &saem, &theta0).unwrap();
    assert!(a.trajectory.same_iterates(&b.trajectory));

    // and with the hand-written EM loop in the model
    let s0 = model.mean_expectation(&theta0);
    let start = ttsem::LatentModel::m_step(&model, &s0).unwrap();
    let (reference, _) = model.fit_em(&start, 0.0, 30).unwrap();
    assert_eq!(a.theta, reference);
}

#[test]
fn delta_s_vanishes_iff_rho_is_one() {
    let (model, theta0) = gmm_setup(100, 14);
    for v in [Variant::Saem, Variant::ISaem, Variant::Mcem] {
        let t = run(&model, &config(v, 100, 3.0, 1), &theta0).unwrap().trajectory;
        assert!(t.records.iter().all(|r| r.delta_s_sq == 0.0), "{v}");
    }
    for v in [Variant::FiTtem, Variant::VrTtem] {
        let mut c = config(v, 100, 3.0, 1);
        c.rho = 1.0;
        let t = run(&model, &c, &theta0).unwrap().trajectory;
        assert!(t.records.iter().all(|r| r.delta_s_sq == 0.0), "{v}");
    }
    let t = run(&model, &config(Variant::FiTtem, 100, 3.0, 1), &theta0).unwrap().trajectory;
    assert!(t.records.iter().any(|r| r.delta_s_sq > 0.0));
}

#[test]
fn isaem_is_a_running_mean_sa_step() {
    let (model, theta0) = gmm_setup(50, 15);
    let mut worst = 0.0f64;
    let mut steps = 0;
    run_with_observer(&model, &config(Variant::ISaem, 50, 10.0, 2), &theta0, |view| {
        let mean = view.table.unwrap().recomputed_mean();
        for d in 0..mean.dim() {
            let expect = view.s_hat_prev[d] + view.gamma * (mean[d] - view.s_hat_prev[d]);
            let scale = expect.abs().max(1e-300);
            worst = worst.max((view.s_hat[d] - expect).abs() / scale);
        }
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, 500);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn fittem_table_holds_statistics_from_the_refresh_iteration() {
    let (model, theta0) = gmm_setup(40, 16);
    let mut c = config(Variant::FiTtem, 40, 6.0, 9);
    c.exact_estep = true;
    let init_theta = {
        let s0 = model.mean_expectation(&theta0);
        ttsem::LatentModel::m_step(&model, &s0).unwrap()
    };
    // theta used at iteration k is thetas[k]
    let mut thetas = vec![init_theta];
    let mut checked = 0;
    run_with_observer(&model, &c, &theta0, |view| {
        let table = view.table.unwrap();
        for (j, (entry, &r)) in table.entries().iter().zip(table.refresh_iters()).enumerate() {
            let expect = if r == 0 {
                gmm_exact_expectation(model.data()[j], &theta0)
            } else {
                gmm_exact_expectation(model.data()[j], &thetas[r as usize - 1])
            };
            assert!(entry.bit_eq(&expect), "slot {j} refreshed at {r}");
        }
        if let Some(j) = view.j_k {
            assert_eq!(table.refresh_iters()[j], view.k + 1);
        }
        thetas.push(view.theta.clone());
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, 240);
}

#[test]
fn fittem_proxy_uses_the_table_before_the_j_update() {
    let (model, theta0) = gmm_setup(30, 17);
    let mut c = config(Variant::FiTtem, 30, 2.0, 10);
    c.exact_estep = true;
    let mut prev_mean: Option<StatVec> = None;
    let mut prev_entries: Option<Vec<StatVec>> = None;
    let mut thetas = Vec::new();
    run_with_observer(&model, &c, &theta0, |view| {
        let table = view.table.unwrap();
        if let (Some(mean), Some(entries), Some(theta)) = (&prev_mean, &prev_entries, thetas.last()) {
            let i = view.i_k.unwrap();
            let fresh = gmm_exact_expectation(model.data()[i], theta);
            for d in 0..mean.dim() {
                let expect = mean[d] + (fresh[d] - entries[i][d]);
                assert!((view.proxy[d] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
        prev_mean = Some(table.mean().clone());
        prev_entries = Some(table.entries().to_vec());
        thetas.push(view.theta.clone());
    })
    .unwrap();
}

#[test]
fn runs_are_deterministic_and_seed_sensitive() {
    let (model, theta0) = gmm_setup(60, 18);
    for v in Variant::ALL {
        let c = config(v, 60, 2.0, 21);
        let a = run(&model, &c, &theta0).unwrap().trajectory;
        let b = run(&model, &c, &theta0).unwrap().trajectory;
        assert!(a.same_iterates(&b), "{v}");
        if !v.requires_exact_estep() {
            let other = run(&model, &config(v, 60, 2.0, 22), &theta0).unwrap().trajectory;
            assert!(!a.same_iterates(&other), "{v}");
        }
    }
}

#[test]
fn zero_iterations_return_the_initial_m_step_image() {
    let (model, theta0) = gmm_setup(20, 19);
    let mut c = config(Variant::Em, 20, 0.0, 0);
    c.total_iters = 0;
    let out = run(&model, &c, &theta0).unwrap();
    let expect = ttsem::LatentModel::m_step(&model, &model.mean_expectation(&theta0)).unwrap();
    assert_eq!(out.trajectory.records.len(), 1);
    assert_eq!(out.trajectory.terminal_k, 0);
    assert_eq!(out.theta, expect);
}

#[test]
fn single_sample_dataset_runs_every_variant() {
    let (model, theta0) = gmm_setup(1, 20);
    for v in Variant::ALL {
        let out = run(&model, &config(v, 1, 5.0, 1), &theta0).unwrap();
        assert_eq!(out.trajectory.records.len(), 6, "{v}");
    }
}

#[test]
fn epoch_column_matches_the_cost_model() {
    let (model, theta0) = gmm_setup(10, 21);
    let t = run(&model, &config(Variant::VrTtem, 10, 2.0, 1), &theta0).unwrap().trajectory;
    let last = t.records.last().unwrap();
    assert_eq!(last.k, 20);
    assert_eq!(last.epoch, 4.0);
    let t = run(&model, &config(Variant::Saem, 10, 2.0, 1), &theta0).unwrap().trajectory;
    assert_eq!(t.records.last().unwrap().epoch, 2.0);
}

#[test]
fn randomized_termination_picks_a_recorded_iterate() {
    let (model, theta0) = gmm_setup(30, 22);
    let mut c = config(Variant::FiTtem, 30, 3.0, 5);
    c.randomized_termination = true;
    let a = run(&model, &c, &theta0).unwrap();
    let b = run(&model, &c, &theta0).unwrap();
    let k = a.trajectory.terminal_k;
    assert_eq!(k, b.trajectory.terminal_k);
    assert!(k < c.total_iters);
    assert_eq!(a.trajectory.terminal_theta, a.trajectory.records[k as usize].theta);
    assert_eq!(ttsem::LatentModel::param_values(&model, &a.theta), a.trajectory.terminal_theta);
}

#[test]
fn invalid_configurations_are_rejected_before_running() {
    let (model, theta0) = gmm_setup(10, 23);
    let mut c = config(Variant::Saem, 10, 1.0, 0);
    c.rho = 0.5;
    assert!(matches!(run(&model, &c, &theta0), Err(ttsem::EngineError::Config(_))));
}
