//! Synthetic epidemic data with known ground-truth dynamics.
//!
//! Patches sit on a circle, the mobility graph comes from the usual gravity
//! construction, and the trajectory is rolled out from fixed per-patch rates.
//! Observation noise is multiplicative and bounded, so the generated counts
//! stay within a known relative band of the noiseless truth — which is kept
//! alongside the dataset for verification.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    EpidemicDataset, CH_ACTIVE, CH_RECOVERED, CH_SUSCEPTIBLE, N_CHANNELS,
};
use crate::dynamics::{rollout, CompartmentState, EpiParams, Rollout};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GravityHyper, PatchGraph, PatchMeta};

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub days: usize,
    pub seed: u64,
    /// Census population of every patch.
    pub population: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d_s: f64,
    pub d_i: f64,
    pub d_r: f64,
    /// Initial infected in patch k is `base + step * k`.
    pub initial_infected_base: f64,
    pub initial_infected_step: f64,
    /// Relative observation-noise amplitude (uniform in `[-noise, +noise]`).
    pub noise: f64,
    pub hyper: GravityHyper,
    pub start_date: NaiveDate,
}

impl Default for SyntheticSpec {
    /// Ten patches, 200 days, slow epidemic whose late phase still carries
    /// thousands of active cases, 1% observation noise.
    fn default() -> Self {
        Self {
            n: 10,
            days: 200,
            seed: 0,
            population: 1.0e6,
            beta: 0.13,
            gamma: 0.10,
            d_s: 0.03,
            d_i: 0.03,
            d_r: 0.03,
            initial_infected_base: 2000.0,
            initial_infected_step: 300.0,
            noise: 0.01,
            hyper: GravityHyper::default(),
            start_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
        }
    }
}

/// A generated dataset together with the dynamics that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub dataset: EpidemicDataset,
    pub graph: PatchGraph,
    pub params: EpiParams,
    /// Noiseless trajectory; `truth.states[d]` matches day `d`.
    pub truth: Rollout,
}

/// Simulate the metapopulation dynamics and wrap them as observed data.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticTruth> {
    if spec.n < 2 {
        return Err(Error::Config("need at least 2 patches".into()));
    }
    if spec.days < 2 {
        return Err(Error::Config("need at least 2 days".into()));
    }
    if !(0.0..1.0).contains(&spec.noise) {
        return Err(Error::Config(format!(
            "noise amplitude {} outside [0, 1)",
            spec.noise
        )));
    }

    // Patches on a circle of ~2.5 degrees radius: distinct pairwise
    // distances, so the gravity ranking is unambiguous.
    let patches: Vec<PatchMeta> = (0..spec.n)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / spec.n as f64;
            PatchMeta {
                patch_id: format!("s{k:02}"),
                name: format!("synthetic patch {k}"),
                population: spec.population,
                latitude: 20.0 + 2.5 * theta.sin(),
                longitude: 30.0 + 2.5 * theta.cos(),
            }
        })
        .collect();
    let graph = build_graph(&patches, &spec.hyper, None)?;

    let params = EpiParams::constant(
        spec.n, spec.beta, spec.gamma, spec.d_s, spec.d_i, spec.d_r,
    );
    params.validate(spec.n)?;

    let i0 = Array1::from_iter(
        (0..spec.n).map(|k| spec.initial_infected_base + spec.initial_infected_step * k as f64),
    );
    let n_pop = Array1::from_elem(spec.n, spec.population);
    let s0 = &n_pop - &i0;
    let x0 = CompartmentState::new(s0, i0, Array1::zeros(spec.n), n_pop)?;
    let truth = rollout(&x0, Some(&graph), &params, spec.days - 1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Array3::zeros((spec.n, spec.days, N_CHANNELS));
    for d in 0..spec.days {
        let state = &truth.states[d];
        for k in 0..spec.n {
            let mut jitter = || {
                if spec.noise > 0.0 {
                    1.0 + rng.gen_range(-spec.noise..=spec.noise)
                } else {
                    1.0
                }
            };
            features[[k, d, CH_ACTIVE]] = state.i[k] * jitter();
            features[[k, d, CH_RECOVERED]] = state.r[k] * jitter();
            features[[k, d, CH_SUSCEPTIBLE]] = state.s[k] * jitter();
        }
    }
    let dates: Vec<NaiveDate> = (0..spec.days)
        .map(|d| spec.start_date + chrono::Days::new(d as u64))
        .collect();

    Ok(SyntheticTruth {
        dataset: EpidemicDataset {
            patches,
            dates,
            features,
        },
        graph,
        params,
        truth,
    })
}

/// Write a dataset out as the two ingest CSVs (`cases.csv`, `meta.csv`).
pub fn write_fixture_csvs(
    dataset: &EpidemicDataset,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let meta_path = dir.join("meta.csv");
    let mut meta = csv::Writer::from_path(&meta_path)?;
    meta.write_record(["patch_id", "name", "population", "latitude", "longitude"])?;
    for p in &dataset.patches {
        meta.write_record([
            p.patch_id.clone(),
            p.name.clone(),
            p.population.to_string(),
            p.latitude.to_string(),
            p.longitude.to_string(),
        ])?;
    }
    meta.flush()?;

    let cases_path = dir.join("cases.csv");
    let mut cases = csv::Writer::from_path(&cases_path)?;
    cases.write_record(["date", "patch_id", "active", "recovered", "susceptible"])?;
    for (d, date) in dataset.dates.iter().enumerate() {
        for (k, p) in dataset.patches.iter().enumerate() {
            cases.write_record([
                date.to_string(),
                p.patch_id.clone(),
                dataset.features[[k, d, CH_ACTIVE]].to_string(),
                dataset.features[[k, d, CH_RECOVERED]].to_string(),
                dataset.features[[k, d, CH_SUSCEPTIBLE]].to_string(),
            ])?;
        }
    }
    cases.flush()?;
    Ok((cases_path, meta_path))
}
