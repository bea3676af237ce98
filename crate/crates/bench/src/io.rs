//! Dataset files, trajectory CSV and content hashing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use ttsem::models::pk::PkIndividual;
use ttsem::Trajectory;

/// Shortest round-trip decimal for `x`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One observation per line.
pub fn gmm_to_text(data: &[f64]) -> String {
    let mut out = String::with_capacity(data.len() * 20);
    for y in data {
        out.push_str(&fmt_f64(*y));
        out.push('\n');
    }
    out
}

pub fn gmm_from_text(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, l)| {
            let y: f64 = l.trim().parse().with_context(|| format!("line {}: not a number: {l:?}", no + 1))?;
            if !y.is_finite() {
                bail!("line {}: non-finite observation", no + 1);
            }
            Ok(y)
        })
        .collect()
}

pub const PK_HEADER: &str = "id,dose,time,obs";

/// `id,dose,time,obs`, one row per observation, ids numbered from 1.
pub fn pk_to_csv(cohort: &[PkIndividual]) -> String {
    let mut out = String::from(PK_HEADER);
    out.push('\n');
    for (id, p) in cohort.iter().enumerate() {
        for (t, y) in p.times.iter().zip(&p.obs) {
            writeln!(out, "{},{},{},{}", id + 1, fmt_f64(p.dose), fmt_f64(*t), fmt_f64(*y)).unwrap();
        }
    }
    out
}

/// Parses a cohort file. Rows of one patient must be contiguous with strictly
/// increasing times and a constant dose.
pub fn pk_from_csv(text: &str) -> Result<Vec<PkIndividual>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == PK_HEADER => {}
        Some((_, h)) => bail!("expected header {PK_HEADER:?}, found {h:?}"),
        None => bail!("empty cohort file"),
    }
    let mut cohort = Vec::new();
    let mut current: Option<(String, f64, Vec<f64>, Vec<f64>)> = None;
    let mut seen = std::collections::HashSet::new();
    let finish = |c: (String, f64, Vec<f64>, Vec<f64>), cohort: &mut Vec<PkIndividual>| -> Result<()> {
        let (id, dose, times, obs) = c;
        let p = PkIndividual::new(dose, times, obs).with_context(|| format!("patient {id}"))?;
        cohort.push(p);
        Ok(())
    };
    for (no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            bail!("line {}: expected 4 fields, found {}", no + 1, fields.len());
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().with_context(|| format!("line {}: bad {what} {s:?}", no + 1))
        };
        let (id, dose, t, y) = (fields[0].to_string(), num(fields[1], "dose")?, num(fields[2], "time")?, num(fields[3], "obs")?);
        match &mut current {
            Some((cid, cdose, times, obs)) if *cid == id => {
                if dose != *cdose {
                    bail!("line {}: dose changes within patient {id}", no + 1);
                }
                if t <= *times.last().unwrap() {
                    bail!("line {}: times for patient {id} not strictly increasing", no + 1);
                }
                times.push(t);
                obs.push(y);
            }
            _ => {
                if !seen.insert(id.clone()) {
                    bail!("line {}: rows for patient {id} are not contiguous", no + 1);
                }
                if let Some(done) = current.take() {
                    finish(done, &mut cohort)?;
                }
                current = Some((id, dose, vec![t], vec![y]));
            }
        }
    }
    if let Some(done) = current.take() {
        finish(done, &mut cohort)?;
    }
    Ok(cohort)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Trajectory CSV: `iter,epoch,<params>,delta_s_sq,nll`. Rows follow the
/// engine's row plan for `n` samples; wall-clock time is left out so the
/// output is reproducible byte for byte.
pub fn trajectory_csv(traj: &Trajectory, n: usize) -> String {
    let mut out = String::from("iter,epoch");
    for name in &traj.param_names {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",delta_s_sq,nll\n");
    for r in traj.csv_records(n) {
        write!(out, "{},{}", r.k, fmt_f64(r.epoch)).unwrap();
        for v in &r.theta {
            write!(out, ",{}", fmt_f64(*v)).unwrap();
        }
        write!(out, ",{},", fmt_f64(r.delta_s_sq)).unwrap();
        if let Some(nll) = r.nll {
            out.push_str(&fmt_f64(nll));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmm_round_trip_is_exact() {
        let data = vec![0.1, -1e-7, 3.0, 1.0 / 3.0, -2.5e300];
        let text = gmm_to_text(&data);
        assert_eq!(text.lines().count(), 5);
        assert_eq!(gmm_from_text(&text).unwrap(), data);
    }

    #[test]
    fn gmm_parse_reports_the_line() {
        let err = gmm_from_text("1.0\nabc\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn pk_round_trip_is_exact() {
        let cohort = vec![
            PkIndividual::new(100.0, vec![0.5, 1.0, 2.0], vec![0.0, 3.25, 7.1]).unwrap(),
            PkIndividual::new(50.0, vec![1.0, 4.0], vec![1.5, -0.2]).unwrap(),
        ];
        let text = pk_to_csv(&cohort);
        assert_eq!(text.lines().count(), 6);
        assert_eq!(pk_from_csv(&text).unwrap(), cohort);
    }

    #[test]
    fn pk_parse_rejects_bad_files() {
        assert!(pk_from_csv("").is_err());
        assert!(pk_from_csv("id,time,obs\n1,1,1\n").is_err());
        assert!(pk_from_csv("id,dose,time,obs\n1,100,2,1\n1,100,1,1\n").is_err());
        assert!(pk_from_csv("id,dose,time,obs\n1,100,1,1\n2,100,1,1\n1,100,2,1\n").is_err());
        assert!(pk_from_csv("id,dose,time,obs\n1,100,1\n").is_err());
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            content_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
