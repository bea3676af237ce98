#![allow(dead_code)]

use ttsem::models::gmm::{gmm_initial_params, gmm_simulate, GmmModel, GmmParams, GmmRegularizer};
use ttsem::{Domain, SeedTree};

pub fn gmm_truth() -> GmmParams {
    GmmParams::new(vec![0.5], vec![0.5, -0.5]).unwrap()
}

/// Synthetic two-component GMM dataset and its data-driven starting point.
pub fn gmm_setup(n: usize, seed: u64) -> (GmmModel, GmmParams) {
    let mut rng = SeedTree::new(seed).stream(Domain::Data, 0, 0);
    let data = gmm_simulate(n, &gmm_truth(), &mut rng).unwrap();
    let theta0 = gmm_initial_params(&data, 2).unwrap();
    (GmmModel::new(data, 2, GmmRegularizer::default()).unwrap(), theta0)
}
