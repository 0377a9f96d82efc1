//! Acceptance suite. Each test covers one numbered criterion and ends by
//! printing a single `criterion NN: PASS/SKIP` line (visible with
//! `--nocapture`); a failed assertion is the corresponding FAIL.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpstan_core::data::{
    chronological_split, make_windows, EpidemicDataset, Scaler, SplitRatios, N_CHANNELS,
};
use mpstan_core::dynamics::{mpsir_step, rollout, sir_step, CompartmentState, EpiParams};
use mpstan_core::graph::{build_graph, GravityHyper, PatchGraph, PatchMeta};
use mpstan_core::metrics::{compute_metrics_flat, forecast_arrays};
use mpstan_core::model::{
    init_weights, tape_gat_layer, AblationMode, ForwardCtx, GatHeadIds, GatLayerIds, GraphIndex,
    ModelDims, ModelWeights, ATTENTION_LEAKY_SLOPE,
};
use mpstan_core::tape::Tape;
use mpstan_core::train::{
    ablation_config, loss_and_grads, train, TrainConfig, TrainOutcome,
};

// ---------------------------------------------------------------- helpers

fn random_metas(rng: &mut ChaCha8Rng, n: usize) -> Vec<PatchMeta> {
    (0..n)
        .map(|k| PatchMeta {
            patch_id: format!("r{k:02}"),
            name: format!("region {k}"),
            population: rng.gen_range(5.0e4..1.0e6),
            latitude: rng.gen_range(-60.0..60.0),
            longitude: rng.gen_range(-170.0..170.0),
        })
        .collect()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> PatchGraph {
    loop {
        let metas = random_metas(rng, n);
        let hyper = GravityHyper {
            top_e: rng.gen_range(2..=4.min(n - 1)),
            r: rng.gen_range(500.0..3000.0),
            ..GravityHyper::default()
        };
        if let Ok(g) = build_graph(&metas, &hyper, None) {
            return g;
        }
    }
}

/// Dataset of per-patch case curves (offset Gaussian bumps plus bounded
/// noise), mirroring nothing but generic epidemic shape.
fn bump_dataset(n: usize, t: usize, seed: u64) -> (EpidemicDataset, PatchGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches: Vec<PatchMeta> = (0..n)
        .map(|k| PatchMeta {
            patch_id: format!("p{k:02}"),
            name: format!("patch {k}"),
            population: 1.0e5,
            latitude: 10.0 + 3.0 * k as f64,
            longitude: 20.0 + 2.0 * (k as f64).sin(),
        })
        .collect();
    let graph = build_graph(
        &patches,
        &GravityHyper {
            top_e: 2.min(n - 1),
            r: 700.0,
            ..GravityHyper::default()
        },
        None,
    )
    .unwrap();
    let dates: Vec<chrono::NaiveDate> = (0..t)
        .map(|d| chrono::NaiveDate::from_ymd_opt(2020, 3, 1).unwrap() + chrono::Days::new(d as u64))
        .collect();
    let mut features = ndarray::Array3::zeros((n, t, N_CHANNELS));
    for k in 0..n {
        let peak = (t / 2) as f64 + rng.gen_range(-3.0..3.0);
        let width = t as f64 / 4.0;
        for d in 0..t {
            let z = (d as f64 - peak) / width;
            let active = 5000.0 * (-z * z).exp() + rng.gen_range(0.0..50.0);
            let recovered = 40.0 * d as f64;
            features[[k, d, mpstan_core::data::CH_ACTIVE]] = active;
            features[[k, d, mpstan_core::data::CH_RECOVERED]] = recovered;
            features[[k, d, mpstan_core::data::CH_SUSCEPTIBLE]] = 1.0e5 - active - recovered;
        }
    }
    (
        EpidemicDataset {
            patches,
            dates,
            features,
        },
        graph,
    )
}

/// Pooled test-span metrics of the neural forecast of a trained model.
fn test_set_metrics(
    dataset: &EpidemicDataset,
    graph: &PatchGraph,
    dims: &ModelDims,
    mode: &AblationMode,
    outcome: &TrainOutcome,
    t_in: usize,
    t_out: usize,
) -> mpstan_core::metrics::MetricSet {
    let windows = make_windows(dataset, &outcome.scaler, &outcome.spans.test, t_in, t_out).unwrap();
    let gi = GraphIndex::build(graph).unwrap();
    let n_pop = dataset.populations();
    let ctx = ForwardCtx {
        graph: &gi,
        scaler: &outcome.scaler,
        n_pop: &n_pop,
    };
    let arrays = forecast_arrays(dims, &outcome.weights, mode, &ctx, &windows).unwrap();
    let p: Vec<f64> = arrays.pred_st.iter().cloned().collect();
    let t: Vec<f64> = arrays.truth.iter().cloned().collect();
    compute_metrics_flat(&p, &t).unwrap()
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mpstan")
}

fn run_bin(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

// ---------------------------------------------------------------- criteria

#[test]
fn criterion_01_scope_of_acceptance() {
    // Exact reproduction of externally reported benchmark numbers is out of
    // scope: the dataset snapshots, seeds, and graph hyperparameters behind
    // such numbers are not bundled here. Acceptance rests on the oracle,
    // property, and directional checks in criteria 02-11 (plus the module
    // test suites).
    println!(
        "criterion 01: PASS — acceptance defined by oracle/property/directional checks, \
         not benchmark-number reproduction"
    );
}

#[test]
fn criterion_02_population_conservation() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_drift = 0.0f64;
    for trial in 0..10 {
        let n = rng.gen_range(10..=50);
        let graph = random_graph(&mut rng, n);
        assert!(graph.is_symmetric(), "trial {trial}: graph must be symmetric");
        let params = EpiParams {
            beta: Array1::from_iter((0..n).map(|_| rng.gen_range(0.01..0.35))),
            gamma: Array1::from_iter((0..n).map(|_| rng.gen_range(0.01..0.35))),
            d_s: Array1::from_iter((0..n).map(|_| rng.gen_range(0.005..0.15))),
            d_i: Array1::from_iter((0..n).map(|_| rng.gen_range(0.005..0.15))),
            d_r: Array1::from_iter((0..n).map(|_| rng.gen_range(0.005..0.15))),
        };
        params.validate(n).unwrap();
        let n_pop = Array1::from_elem(n, 1.0e6);
        let i0 = Array1::from_iter((0..n).map(|_| rng.gen_range(1.0e3..2.0e4)));
        let r0 = Array1::from_iter((0..n).map(|_| rng.gen_range(0.0..1.0e4)));
        let s0 = &n_pop - &i0 - &r0;
        let x0 = CompartmentState::new(s0, i0, r0, n_pop).unwrap();
        let total0 = x0.total();
        let traj = rollout(&x0, Some(&graph), &params, 100).unwrap();
        assert_eq!(
            traj.clamp_events, 0,
            "trial {trial}: trajectory must stay clamp-free"
        );
        let drift = (traj.states.last().unwrap().total() - total0).abs() / total0;
        max_drift = max_drift.max(drift);
        assert!(
            drift < 1e-9,
            "trial {trial}: relative drift {drift} over 100 steps"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}, budget 5 s");
    println!(
        "criterion 02: PASS — 10 graphs (N=10..50), 100 steps, max relative drift {max_drift:.3e}, {elapsed:?}"
    );
}

#[test]
fn criterion_03_mobility_free_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut max_abs = 0.0f64;
    for trial in 0..1000 {
        let n = rng.gen_range(3..=20);
        let graph = if trial % 50 == 0 {
            random_graph(&mut rng, n.max(4))
        } else {
            // Cheap fixed-shape graph so 1000 trials stay fast.
            let metas = random_metas(&mut rng, n);
            build_graph(
                &metas,
                &GravityHyper {
                    top_e: 2.min(n - 1),
                    ..GravityHyper::default()
                },
                None,
            )
            .unwrap()
        };
        let m = graph.n;
        let beta = Array1::from_iter((0..m).map(|_| rng.gen_range(0.0..1.0)));
        let gamma = Array1::from_iter((0..m).map(|_| rng.gen_range(0.0..1.0)));
        let params = EpiParams::without_mobility(beta.clone(), gamma.clone());
        let n_pop = Array1::from_iter((0..m).map(|_| rng.gen_range(1.0e4..1.0e6)));
        let i = Array1::from_iter((0..m).map(|k| rng.gen_range(0.0..n_pop[k] / 3.0)));
        let r = Array1::from_iter((0..m).map(|k| rng.gen_range(0.0..n_pop[k] / 3.0)));
        let s = &n_pop - &i - &r;
        let x = CompartmentState::new(s, i, r, n_pop).unwrap();
        let full = mpsir_step(&x, &graph, &params).unwrap();
        let plain = sir_step(&x, &beta, &gamma).unwrap();
        for k in 0..m {
            for (a, b) in [
                (full.ds[k], plain.ds[k]),
                (full.di[k], plain.di[k]),
                (full.dr[k], plain.dr[k]),
            ] {
                let d = (a - b).abs();
                max_abs = max_abs.max(d);
                assert!(d <= 1e-15, "trial {trial}, patch {k}: |{a} - {b}| = {d}");
            }
        }
    }
    println!(
        "criterion 03: PASS — 1000 random states, zero-mobility step equals plain step \
         (max |diff| = {max_abs:.1e})"
    );
}

#[test]
fn criterion_04_gradient_check_tiny_model() {
    let start = Instant::now();
    // Exactly the stated shape: 3 patches, 4 input days, widths 4/4, one
    // attention head, 2-day horizon, everything enabled.
    let (dataset, graph) = bump_dataset(3, 30, 44);
    let t_in = 4;
    let t_out = 2;
    let spans = chronological_split(dataset.t(), &SplitRatios::default(), t_in, t_out).unwrap();
    let scaler = Scaler::fit(&dataset, &spans.train).unwrap();
    let windows = make_windows(&dataset, &scaler, &spans.train, t_in, t_out).unwrap();
    let gi = GraphIndex::build(&graph).unwrap();
    let n_pop = dataset.populations();
    let ctx = ForwardCtx {
        graph: &gi,
        scaler: &scaler,
        n_pop: &n_pop,
    };
    let dims = ModelDims::new(4, 4, 1, t_out).unwrap();
    let mode = AblationMode::full();
    let weights = init_weights(&dims, 7).unwrap();
    let window = &windows[1];
    let (_, analytic) = loss_and_grads(&dims, &weights, &mode, &ctx, window).unwrap();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for pi in 0..weights.params().len() {
        let dim = weights.params()[pi].raw_dim();
        for r in 0..dim[0] {
            for c in 0..dim[1] {
                let mut wp = weights.clone();
                wp.params_mut()[pi][[r, c]] += h;
                let (lp, _) = loss_and_grads(&dims, &wp, &mode, &ctx, window).unwrap();
                let mut wm = weights.clone();
                wm.params_mut()[pi][[r, c]] -= h;
                let (lm, _) = loss_and_grads(&dims, &wm, &mode, &ctx, window).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let an = analytic[pi][[r, c]];
                let denom = an.abs().max(numeric.abs()).max(1e-6);
                max_rel = max_rel.max((an - numeric).abs() / denom);
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 04: PASS — {checked} weight entries, max relative error {max_rel:.3e} vs \
         central differences (h=1e-5), {elapsed:?}"
    );
}

#[test]
fn criterion_05_attention_normalization_and_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst_row = 0.0f64;
    let mut worst_layer = 0.0f64;
    for trial in 0..100 {
        let n = rng.gen_range(3..=12);
        let graph = random_graph(&mut rng, n.max(4));
        let n = graph.n;
        let gi = GraphIndex::build(&graph).unwrap();
        let d_in = rng.gen_range(2..=6);
        let d_out = rng.gen_range(1..=5);
        let heads = rng.gen_range(1..=3);

        let mut tape = Tape::new();
        let h_in =
            Array2::from_shape_fn((n, d_in), |_| rng.gen_range(-2.0..2.0));
        let h_id = tape.leaf(h_in.clone());
        let mut w_temps = Vec::new();
        let mut w_atts = Vec::new();
        let layer = GatLayerIds {
            heads: (0..heads)
                .map(|_| {
                    let w_temp =
                        Array2::from_shape_fn((d_in, d_out), |_| rng.gen_range(-1.5..1.5));
                    let w_att =
                        Array2::from_shape_fn((2 * d_out, 1), |_| rng.gen_range(-1.5..1.5));
                    let ids = GatHeadIds {
                        w_temp: tape.leaf(w_temp.clone()),
                        w_att: tape.leaf(w_att.clone()),
                    };
                    w_temps.push(w_temp);
                    w_atts.push(w_att);
                    ids
                })
                .collect(),
        };
        let (out_id, atts) = tape_gat_layer(&mut tape, &layer, &gi, h_id);

        // Row normalization: attention over each destination's neighborhood
        // sums to one.
        for att_id in &atts {
            let att = tape.value(*att_id);
            for (dst, &(lo, hi)) in gi.segments.iter().enumerate() {
                let s: f64 = (lo..hi).map(|e| att[[e, 0]]).sum();
                worst_row = worst_row.max((s - 1.0).abs());
                assert!(
                    (s - 1.0).abs() < 1e-6,
                    "trial {trial}: attention row {dst} sums to {s}"
                );
            }
        }

        // Independent dense oracle: full N x N score matrix, -inf outside
        // the neighbor mask, ordinary row softmax, head-averaged output.
        let mut expect = Array2::<f64>::zeros((n, d_out));
        for head in 0..heads {
            let proj = h_in.dot(&w_temps[head]);
            let wa = &w_atts[head];
            let mut scores = Array2::from_elem((n, n), f64::NEG_INFINITY);
            for i in 0..n {
                for &j in &graph.neighbor_sets[i] {
                    let mut s = 0.0;
                    for c in 0..d_out {
                        s += wa[[c, 0]] * proj[[i, c]];
                        s += wa[[d_out + c, 0]] * proj[[j, c]];
                    }
                    scores[[i, j]] = if s >= 0.0 { s } else { ATTENTION_LEAKY_SLOPE * s };
                }
            }
            for i in 0..n {
                let row_max = (0..n)
                    .map(|j| scores[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = (0..n)
                    .map(|j| {
                        if scores[[i, j]].is_finite() {
                            (scores[[i, j]] - row_max).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let z: f64 = exps.iter().sum();
                for j in 0..n {
                    let a = exps[j] / z;
                    for c in 0..d_out {
                        expect[[i, c]] += a * proj[[j, c]] / heads as f64;
                    }
                }
            }
        }
        let got = tape.value(out_id);
        for i in 0..n {
            for c in 0..d_out {
                let d = (got[[i, c]] - expect[[i, c]]).abs();
                worst_layer = worst_layer.max(d);
                assert!(d < 1e-10, "trial {trial}: output[{i},{c}] off by {d}");
            }
        }
    }
    println!(
        "criterion 05: PASS — 100 random graphs/inputs; worst row-sum error {worst_row:.2e}, \
         worst layer-vs-dense-oracle error {worst_layer:.2e}"
    );
}

#[test]
fn criterion_06_metrics_against_independent_implementation() {
    // Straightforward reimplementation, written against the definitions.
    fn naive(pred: &[f64], truth: &[f64]) -> (f64, f64, Option<f64>, f64, f64) {
        let n = pred.len() as f64;
        let mae = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        let rmse = (pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n)
            .sqrt();
        let kept: Vec<(f64, f64)> = pred
            .iter()
            .zip(truth)
            .filter(|(_, t)| **t >= 1.0)
            .map(|(p, t)| (*p, *t))
            .collect();
        let mape = if kept.is_empty() {
            None
        } else {
            Some(
                100.0 * kept.iter().map(|(p, t)| ((p - t) / t).abs()).sum::<f64>()
                    / kept.len() as f64,
            )
        };
        let mx = pred.iter().sum::<f64>() / n;
        let my = truth.iter().sum::<f64>() / n;
        let vx = pred.iter().map(|p| (p - mx) * (p - mx)).sum::<f64>() / n;
        let vy = truth.iter().map(|t| (t - my) * (t - my)).sum::<f64>() / n;
        let cov = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (p - mx) * (t - my))
            .sum::<f64>()
            / n;
        let pcc = cov / (vx.sqrt() * vy.sqrt());
        let ccc = 2.0 * cov / (vx + vy + (mx - my) * (mx - my));
        (mae, rmse, mape, pcc, ccc)
    }

    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for pair in 0..20 {
        let len = rng.gen_range(5..=60);
        let pred: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0e4)).collect();
        let truth: Vec<f64> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    rng.gen_range(0.0..1.0) // exercise the MAPE skip rule
                } else {
                    rng.gen_range(1.0..2.0e4)
                }
            })
            .collect();
        let ours = compute_metrics_flat(&pred, &truth).unwrap();
        let (mae, rmse, mape, pcc, ccc) = naive(&pred, &truth);
        assert!((ours.mae - mae).abs() < 1e-9, "pair {pair}: MAE");
        assert!((ours.rmse - rmse).abs() < 1e-9, "pair {pair}: RMSE");
        match (ours.mape, mape) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "pair {pair}: MAPE"),
            (a, b) => assert_eq!(a, b, "pair {pair}: MAPE presence"),
        }
        assert!((ours.pcc.unwrap() - pcc).abs() < 1e-9, "pair {pair}: PCC");
        assert!((ours.ccc.unwrap() - ccc).abs() < 1e-9, "pair {pair}: CCC");
        assert!(ours.mae <= ours.rmse * (1.0 + 1e-12), "pair {pair}: MAE <= RMSE");
        assert!(
            ours.ccc.unwrap().abs() <= ours.pcc.unwrap().abs() + 1e-12,
            "pair {pair}: |CCC| <= |PCC|"
        );
    }
    println!(
        "criterion 06: PASS — 20 random pairs match the independent implementation within 1e-9; \
         MAE<=RMSE and |CCC|<=|PCC| held throughout"
    );
}

#[test]
fn criterion_07_synthetic_recovery() {
    let start = Instant::now();
    let dims = ModelDims::defaults(5).unwrap();
    let mut mape_ok = 0usize;
    let mut ordering_ok = 0usize;
    let mut detail = String::new();
    for seed in [0u64, 1, 2] {
        let spec = mpstan_core::synthetic::SyntheticSpec {
            seed,
            ..mpstan_core::synthetic::SyntheticSpec::default()
        };
        let truth = mpstan_core::synthetic::generate(&spec).unwrap();
        let base_cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };

        let full_cfg = TrainConfig {
            ablation: ablation_config("full").unwrap(),
            ..base_cfg.clone()
        };
        let full = train(&truth.dataset, &truth.graph, &dims, &full_cfg).unwrap();
        let m_full = test_set_metrics(
            &truth.dataset,
            &truth.graph,
            &dims,
            &full_cfg.ablation,
            &full,
            full_cfg.t_in,
            full_cfg.t_out,
        );

        let abl_cfg = TrainConfig {
            ablation: ablation_config("phy-all-off").unwrap(),
            ..base_cfg
        };
        let abl = train(&truth.dataset, &truth.graph, &dims, &abl_cfg).unwrap();
        let m_abl = test_set_metrics(
            &truth.dataset,
            &truth.graph,
            &dims,
            &abl_cfg.ablation,
            &abl,
            abl_cfg.t_in,
            abl_cfg.t_out,
        );

        let mape = m_full.mape.expect("synthetic truth is >= 1e3 on the test span");
        if mape <= 15.0 {
            mape_ok += 1;
        }
        if m_full.mae < m_abl.mae {
            ordering_ok += 1;
        }
        detail.push_str(&format!(
            "[seed {seed}: full MAPE {:.2}%, full MAE {:.1}, ablated MAE {:.1}] ",
            mape, m_full.mae, m_abl.mae
        ));
    }
    let elapsed = start.elapsed();
    assert!(
        mape_ok >= 2,
        "full-model test MAPE <= 15% held only {mape_ok}/3 times: {detail}"
    );
    assert!(
        ordering_ok >= 2,
        "full model beat the fully ablated variant only {ordering_ok}/3 times: {detail}"
    );
    assert!(
        elapsed.as_secs_f64() < 600.0,
        "took {elapsed:?}, budget 10 min"
    );
    println!(
        "criterion 07: PASS — {detail}majority on both checks ({mape_ok}/3 MAPE, {ordering_ok}/3 ordering), {elapsed:?}"
    );
}

#[test]
fn criterion_08_single_window_overfit() {
    // Train span of exactly t_in + t_out days -> one window -> one
    // optimizer step per epoch, so 200 epochs = 200 steps.
    let (dataset, graph) = bump_dataset(2, 12, 100);
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 1e-2,
        t_in: 2,
        t_out: 1,
        seed: 0,
        split: SplitRatios {
            train: 0.26,
            val: 0.37,
            test: 0.37,
        },
        ablation: ablation_config("phy-loss-off").unwrap(),
        ..TrainConfig::default()
    };
    let dims = ModelDims::new(2, 1, 1, 1).unwrap();
    let outcome = train(&dataset, &graph, &dims, &cfg).unwrap();
    let (step, best) = outcome
        .history
        .train_loss
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let first_crossing = outcome.history.train_loss.iter().position(|&l| l < 1e-3);
    assert!(
        *best < 1e-3,
        "train loss only reached {best} within 200 steps"
    );
    println!(
        "criterion 08: PASS — one-window train loss fell below 1e-3 (first at step {:?}, best {best:.2e} at step {step})",
        first_crossing.unwrap()
    );
}

#[test]
fn criterion_09_ablation_machinery() {
    // Part 1: through the binary — six table rows, shared dataset hash,
    // bit-identical to separately run evaluations.
    let tmp = tempfile::tempdir().unwrap();
    let spec = mpstan_core::synthetic::SyntheticSpec {
        n: 6,
        days: 60,
        ..mpstan_core::synthetic::SyntheticSpec::default()
    };
    let truth = mpstan_core::synthetic::generate(&spec).unwrap();
    let (cases, meta) =
        mpstan_core::synthetic::write_fixture_csvs(&truth.dataset, tmp.path()).unwrap();
    let dir: PathBuf = tmp.path().join("ablate");
    let out = run_bin(&[
        "ablate",
        "--cases",
        cases.to_str().unwrap(),
        "--meta",
        meta.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--epochs",
        "2",
        "--d-gru",
        "6",
        "--d-gat",
        "4",
        "--heads",
        "1",
        "--t-in",
        "3",
        "--t-out",
        "2",
    ]);
    assert_ok(&out);
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ablation_table.json")).unwrap())
            .unwrap();
    let rows = table.as_array().unwrap();
    assert_eq!(rows.len(), 6, "six rows: five variants plus the full model");
    let shared = rows[0]["dataset_hash"].as_str().unwrap();
    for row in rows {
        assert_eq!(row["dataset_hash"].as_str().unwrap(), shared);
        let name = row["variant"].as_str().unwrap();
        let edir = tmp.path().join(format!("re-{name}"));
        let ckpt = dir.join(name).join("checkpoint.json");
        let out = run_bin(&[
            "evaluate",
            "--cases",
            cases.to_str().unwrap(),
            "--meta",
            meta.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            edir.to_str().unwrap(),
        ]);
        assert_ok(&out);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(edir.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(
            report["metrics"], row["metrics"],
            "variant {name}: table row must equal the standalone evaluation bit-for-bit"
        );
    }

    // Part 2: with everything physical ablated, the neural forecast is
    // independent of the dynamics stack — perturbing the rate-generator
    // weights changes the physical rollout but not one bit of Y^st.
    let mode = ablation_config("phy-all-off").unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        t_in: 3,
        t_out: 2,
        seed: 3,
        ablation: mode,
        ..TrainConfig::default()
    };
    let dims = ModelDims::new(6, 4, 1, 2).unwrap();
    let outcome = train(&truth.dataset, &truth.graph, &dims, &cfg).unwrap();
    let windows = make_windows(
        &truth.dataset,
        &outcome.scaler,
        &outcome.spans.test,
        cfg.t_in,
        cfg.t_out,
    )
    .unwrap();
    let gi = GraphIndex::build(&truth.graph).unwrap();
    let n_pop = truth.dataset.populations();
    let ctx = ForwardCtx {
        graph: &gi,
        scaler: &outcome.scaler,
        n_pop: &n_pop,
    };
    let before = forecast_arrays(&dims, &outcome.weights, &mode, &ctx, &windows).unwrap();
    let mut perturbed: ModelWeights = outcome.weights.clone();
    perturbed.gen_intra.w += 0.37;
    perturbed.gen_intra.b += 0.11;
    perturbed.gen_inter.w -= 0.81;
    perturbed.gen_single.w += 0.53;
    let after = forecast_arrays(&dims, &perturbed, &mode, &ctx, &windows).unwrap();
    assert_eq!(
        before.pred_st, after.pred_st,
        "Y^st must be bit-identical under dynamics-side perturbations"
    );
    assert!(
        before.pred_phy != after.pred_phy,
        "the perturbation must actually reach the physical rollout"
    );
    println!(
        "criterion 09: PASS — six bit-identical table rows sharing dataset hash {}…; \
         Y^st invariant under rate-generator perturbation while Y^phy changed",
        &shared[..12]
    );
}

#[test]
fn criterion_10_determinism() {
    let spec = mpstan_core::synthetic::SyntheticSpec {
        n: 6,
        days: 70,
        seed: 9,
        ..mpstan_core::synthetic::SyntheticSpec::default()
    };
    let truth = mpstan_core::synthetic::generate(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        t_in: 3,
        t_out: 2,
        seed: 42,
        ..TrainConfig::default()
    };
    let dims = ModelDims::new(8, 4, 2, 2).unwrap();
    let run = || {
        let outcome = train(&truth.dataset, &truth.graph, &dims, &cfg).unwrap();
        test_set_metrics(
            &truth.dataset,
            &truth.graph,
            &dims,
            &cfg.ablation,
            &outcome,
            cfg.t_in,
            cfg.t_out,
        )
    };
    let a = run();
    let b = run();
    assert!((a.mae - b.mae).abs() <= 1e-10, "MAE {} vs {}", a.mae, b.mae);
    assert!((a.rmse - b.rmse).abs() <= 1e-10);
    assert!((a.mape.unwrap() - b.mape.unwrap()).abs() <= 1e-10);
    assert!((a.pcc.unwrap() - b.pcc.unwrap()).abs() <= 1e-10);
    assert!((a.ccc.unwrap() - b.ccc.unwrap()).abs() <= 1e-10);
    println!(
        "criterion 10: PASS — two identical runs, evaluation metrics agree within 1e-10 \
         (MAE {:.6} both)",
        a.mae
    );
}

#[test]
fn criterion_11_directional_real_data_check() {
    let Some(dir) = std::env::var_os("MPSTAN_REAL_DATA_DIR") else {
        println!(
            "criterion 11: SKIP — optional; set MPSTAN_REAL_DATA_DIR to a directory with \
             cases.csv and meta.csv to run the directional real-data check"
        );
        return;
    };
    let dir = Path::new(&dir);
    let dataset =
        mpstan_core::data::ingest(&dir.join("cases.csv"), &dir.join("meta.csv")).unwrap();
    let graph = build_graph(&dataset.patches, &GravityHyper::default(), None).unwrap();
    let dims = ModelDims::defaults(15).unwrap();
    let mut mae_full = 0.0;
    let mut mae_abl = 0.0;
    for seed in [0u64, 1, 2] {
        let base = TrainConfig {
            seed,
            t_out: 15,
            ..TrainConfig::default()
        };
        let full_cfg = TrainConfig {
            ablation: ablation_config("full").unwrap(),
            ..base.clone()
        };
        let full = train(&dataset, &graph, &dims, &full_cfg).unwrap();
        mae_full += test_set_metrics(&dataset, &graph, &dims, &full_cfg.ablation, &full, 5, 15).mae;
        let abl_cfg = TrainConfig {
            ablation: ablation_config("phy-all-off").unwrap(),
            ..base
        };
        let abl = train(&dataset, &graph, &dims, &abl_cfg).unwrap();
        mae_abl += test_set_metrics(&dataset, &graph, &dims, &abl_cfg.ablation, &abl, 5, 15).mae;
    }
    mae_full /= 3.0;
    mae_abl /= 3.0;
    assert!(
        mae_full <= mae_abl,
        "full model MAE {mae_full} should not exceed the fully ablated {mae_abl}"
    );
    println!(
        "criterion 11: PASS — 3-seed average test MAE: full {mae_full:.2} <= fully ablated {mae_abl:.2}"
    );
}
