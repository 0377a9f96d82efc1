//! Forecast quality metrics and test-set evaluation.
//!
//! All metrics are computed on raw (denormalized) case counts. Correlation
//! measures use the fully flattened prediction/truth arrays; a constant
//! array makes them undefined, which is reported as a missing value rather
//! than an error.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{EpidemicDataset, Scaler, WindowSample, CH_ACTIVE};
use crate::dynamics::{rollout, CompartmentState, EpiParams, SirFit};
use crate::error::{Error, Result};
use crate::model::{forward, AblationMode, ForwardCtx, ModelDims, ModelWeights};
use crate::train::ablation_name;

/// The five headline metrics plus MAPE bookkeeping.
///
/// `mape` is a percentage. Entries whose truth is below one person are
/// excluded from it and counted in `mape_skipped`; if nothing remains, or a
/// correlation is undefined (constant input), the field is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    pub pcc: Option<f64>,
    pub ccc: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Metrics over flattened prediction/truth slices of equal length.
pub fn compute_metrics_flat(pred: &[f64], truth: &[f64]) -> Result<MetricSet> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "prediction has {} entries, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("cannot compute metrics of nothing".into()));
    }
    if pred.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in metric input".into()));
    }
    let n = pred.len() as f64;

    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut ape_count = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p - t;
        abs_sum += e.abs();
        sq_sum += e * e;
        if t >= 1.0 {
            ape_sum += (e / t).abs();
            ape_count += 1;
        }
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).sqrt();
    let mape_skipped = pred.len() - ape_count;
    let mape = (ape_count > 0).then(|| 100.0 * ape_sum / ape_count as f64);

    let mu_x = mean(pred);
    let mu_y = mean(truth);
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        var_x += (p - mu_x) * (p - mu_x);
        var_y += (t - mu_y) * (t - mu_y);
        cov += (p - mu_x) * (t - mu_y);
    }
    // Population variances.
    var_x /= n;
    var_y /= n;
    cov /= n;
    let (pcc, ccc) = if var_x > 0.0 && var_y > 0.0 {
        let rho = cov / (var_x.sqrt() * var_y.sqrt());
        let ccc = 2.0 * cov / (var_x + var_y + (mu_x - mu_y) * (mu_x - mu_y));
        (Some(rho), Some(ccc))
    } else {
        (None, None)
    };

    Ok(MetricSet {
        mae,
        rmse,
        mape,
        mape_skipped,
        pcc,
        ccc,
    })
}

/// Metrics over equally shaped prediction/truth matrices.
pub fn compute_metrics(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<MetricSet> {
    if pred.dim() != truth.dim() {
        return Err(Error::Input(format!(
            "prediction shape {:?} does not match truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let p: Vec<f64> = pred.iter().cloned().collect();
    let t: Vec<f64> = truth.iter().cloned().collect();
    compute_metrics_flat(&p, &t)
}

/// Pooled raw-unit forecasts over a set of windows, patch-major: patch k,
/// window w, horizon step t lands in column `w * t_out + t`.
#[derive(Debug, Clone)]
pub struct EvalArrays {
    pub pred_st: Array2<f64>,
    pub pred_phy: Array2<f64>,
    pub truth: Array2<f64>,
}

/// Run the model over every window and pool denormalized forecasts.
pub fn forecast_arrays(
    dims: &ModelDims,
    weights: &ModelWeights,
    mode: &AblationMode,
    ctx: &ForwardCtx,
    windows: &[WindowSample],
) -> Result<EvalArrays> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let n = ctx.graph.n;
    let t_out = dims.t_out;
    let cols = windows.len() * t_out;
    let mut pred_st = Array2::zeros((n, cols));
    let mut pred_phy = Array2::zeros((n, cols));
    let mut truth = Array2::zeros((n, cols));
    for (w, window) in windows.iter().enumerate() {
        let pass = forward(dims, weights, mode, ctx, window)?;
        let y_st = pass.tape.value(pass.y_st);
        for k in 0..n {
            for t in 0..t_out {
                let col = w * t_out + t;
                pred_st[[k, col]] = ctx.scaler.denormalize_value(k, CH_ACTIVE, y_st[[k, t]]);
                pred_phy[[k, col]] =
                    ctx.scaler.denormalize_value(k, CH_ACTIVE, pass.y_phy[[k, t]]);
                truth[[k, col]] =
                    ctx.scaler.denormalize_value(k, CH_ACTIVE, window.target[[k, t]]);
            }
        }
    }
    Ok(EvalArrays {
        pred_st,
        pred_phy,
        truth,
    })
}

/// Per-patch slice of the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMetrics {
    pub patch_id: String,
    pub metrics: MetricSet,
}

/// Evaluation summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    /// Label of the evaluated dataset (the CLI passes its content hash).
    pub dataset: String,
    pub t_out: usize,
    pub ablation: String,
    /// Neural-forecast metrics pooled over all windows.
    pub metrics: MetricSet,
    /// Physical-rollout metrics over the same pool.
    pub phy_metrics: MetricSet,
    pub per_patch: Vec<PatchMetrics>,
}

/// Evaluate the model over every window (pooled) and per patch.
pub fn evaluate(
    dims: &ModelDims,
    weights: &ModelWeights,
    mode: &AblationMode,
    ctx: &ForwardCtx,
    windows: &[WindowSample],
    patch_ids: &[String],
    dataset_label: &str,
) -> Result<ForecastReport> {
    if patch_ids.len() != ctx.graph.n {
        return Err(Error::Input(format!(
            "{} patch ids for {} patches",
            patch_ids.len(),
            ctx.graph.n
        )));
    }
    let arrays = forecast_arrays(dims, weights, mode, ctx, windows)?;
    let metrics = compute_metrics(&arrays.pred_st, &arrays.truth)?;
    let phy_metrics = compute_metrics(&arrays.pred_phy, &arrays.truth)?;
    let per_patch = patch_ids
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let p: Vec<f64> = arrays.pred_st.row(k).to_vec();
            let t: Vec<f64> = arrays.truth.row(k).to_vec();
            Ok(PatchMetrics {
                patch_id: id.clone(),
                metrics: compute_metrics_flat(&p, &t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForecastReport {
        dataset: dataset_label.to_string(),
        t_out: dims.t_out,
        ablation: ablation_name(mode),
        metrics,
        phy_metrics,
        per_patch,
    })
}

/// Write one CSV per requested patch with a daily forecast series:
/// `date,truth,pred_st,pred_phy`.
///
/// Each day in the window range takes its prediction from the window
/// anchored one day earlier (one-step-ahead); the final window also
/// contributes the rest of its horizon so the series reaches the span's end.
pub fn emit_series(
    dims: &ModelDims,
    weights: &ModelWeights,
    mode: &AblationMode,
    ctx: &ForwardCtx,
    dataset: &EpidemicDataset,
    windows: &[WindowSample],
    patch_ids: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to render".into()));
    }
    let indices: Vec<usize> = patch_ids
        .iter()
        .map(|id| {
            dataset
                .patches
                .iter()
                .position(|p| &p.patch_id == id)
                .ok_or_else(|| Error::Input(format!("unknown patch id {id:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    // (day index, window index, horizon offset) for the series.
    let t_out = dims.t_out;
    let mut schedule: Vec<(usize, usize, usize)> = Vec::new();
    for (w, window) in windows.iter().enumerate() {
        let first_target = window.start_index + window.input.dim().1;
        schedule.push((first_target, w, 0));
        if w + 1 == windows.len() {
            for t in 1..t_out {
                schedule.push((first_target + t, w, t));
            }
        }
    }

    let arrays = forecast_arrays(dims, weights, mode, ctx, windows)?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(indices.len());
    for (id, &k) in patch_ids.iter().zip(&indices) {
        let path = out_dir.join(format!("series_{id}.csv"));
        let mut wtr = csv::Writer::from_path(&path)?;
        wtr.write_record(["date", "truth", "pred_st", "pred_phy"])?;
        for &(day, w, t) in &schedule {
            let col = w * t_out + t;
            wtr.write_record([
                dataset.dates[day].to_string(),
                dataset.features[[k, day, CH_ACTIVE]].to_string(),
                arrays.pred_st[[k, col]].to_string(),
                arrays.pred_phy[[k, col]].to_string(),
            ])?;
        }
        wtr.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Forecasts of the plain per-patch SIR baseline over the same windows:
/// roll each patch's fitted rates forward from the window's last observed
/// day. Returns raw-unit (prediction, truth) pools shaped like
/// [`forecast_arrays`].
pub fn sir_baseline_arrays(
    windows: &[WindowSample],
    scaler: &Scaler,
    n_pop: &Array1<f64>,
    fits: &[SirFit],
    t_out: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if windows.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let n = n_pop.len();
    if fits.len() != n {
        return Err(Error::Input(format!(
            "{} fits for {} patches",
            fits.len(),
            n
        )));
    }
    let beta = Array1::from_iter(fits.iter().map(|f| f.beta));
    let gamma = Array1::from_iter(fits.iter().map(|f| f.gamma));
    let params = EpiParams::without_mobility(beta, gamma);
    let cols = windows.len() * t_out;
    let mut pred = Array2::zeros((n, cols));
    let mut truth = Array2::zeros((n, cols));
    for (w, window) in windows.iter().enumerate() {
        let raw = &window.raw_last_day;
        let x0 = CompartmentState::new(
            raw.column(crate::data::CH_SUSCEPTIBLE).to_owned(),
            raw.column(CH_ACTIVE).to_owned(),
            raw.column(crate::data::CH_RECOVERED).to_owned(),
            n_pop.clone(),
        )?;
        let ro = rollout(&x0, None, &params, t_out)?;
        for k in 0..n {
            for t in 0..t_out {
                let col = w * t_out + t;
                pred[[k, col]] = ro.infected[[t, k]];
                truth[[k, col]] = scaler.denormalize_value(k, CH_ACTIVE, window.target[[k, t]]);
            }
        }
    }
    Ok((pred, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chronological_split, make_windows, SplitRatios, N_CHANNELS};
    use crate::graph::{build_graph, GravityHyper, PatchMeta};
    use crate::model::{init_weights, GraphIndex};
    use chrono::NaiveDate;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_prediction_is_perfect() {
        let t = ndarray::arr2(&[[3.0, 5.0, 9.0]]);
        let m = compute_metrics(&t, &t).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mape, Some(0.0));
        assert_eq!(m.mape_skipped, 0);
        assert!((m.pcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.ccc.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_keeps_pcc_but_penalizes_ccc() {
        let truth = ndarray::arr2(&[[3.0, 5.0, 9.0, 4.0]]);
        let pred = &truth + 10.0;
        let m = compute_metrics(&pred, &truth).unwrap();
        assert!((m.pcc.unwrap() - 1.0).abs() < 1e-12);
        assert!(m.ccc.unwrap() < 1.0);
        assert_eq!(m.mae, 10.0);
        assert_eq!(m.rmse, 10.0);
    }

    #[test]
    fn hand_oracle_triple() {
        let pred = ndarray::arr2(&[[1.0, 2.0, 3.0]]);
        let truth = ndarray::arr2(&[[2.0, 2.0, 5.0]]);
        let m = compute_metrics(&pred, &truth).unwrap();
        assert!((m.mae - 1.0).abs() < 1e-15);
        assert!((m.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.mape.unwrap() - 30.0).abs() < 1e-12);
        assert_eq!(m.mape_skipped, 0);
        assert!((m.pcc.unwrap() - 3.0f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((m.ccc.unwrap() - 6.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn mape_skips_tiny_truth() {
        let pred = ndarray::arr2(&[[1.0, 4.0, 3.0, 7.0]]);
        let truth = ndarray::arr2(&[[0.0, 2.0, 0.5, 7.0]]);
        let m = compute_metrics(&pred, &truth).unwrap();
        assert_eq!(m.mape_skipped, 2);
        // Remaining entries: |4-2|/2 = 1, |7-7|/7 = 0 -> 50%.
        assert!((m.mape.unwrap() - 50.0).abs() < 1e-12);

        let all_zero = ndarray::arr2(&[[0.0, 0.9]]);
        let m = compute_metrics(&pred.slice(ndarray::s![.., ..2]).to_owned(), &all_zero).unwrap();
        assert_eq!(m.mape, None);
        assert_eq!(m.mape_skipped, 2);
    }

    #[test]
    fn constant_arrays_flag_correlations_missing() {
        let c = ndarray::arr2(&[[4.0, 4.0, 4.0]]);
        let v = ndarray::arr2(&[[1.0, 2.0, 3.0]]);
        for (a, b) in [(&c, &v), (&v, &c), (&c, &c)] {
            let m = compute_metrics(a, b).unwrap();
            assert_eq!(m.pcc, None);
            assert_eq!(m.ccc, None);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = ndarray::arr2(&[[1.0, 2.0]]);
        let b = ndarray::arr2(&[[1.0, 2.0, 3.0]]);
        assert!(compute_metrics(&a, &b).is_err());
        assert!(compute_metrics_flat(&[], &[]).is_err());
        let nan = ndarray::arr2(&[[f64::NAN, 1.0]]);
        assert!(matches!(
            compute_metrics(&a, &nan).unwrap_err(),
            Error::Numeric(_)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn metric_inequalities_hold(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..40);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0e4)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0e4)).collect();
            let m = compute_metrics_flat(&pred, &truth).unwrap();
            prop_assert!(m.mae <= m.rmse * (1.0 + 1e-12));
            if let (Some(p), Some(c)) = (m.pcc, m.ccc) {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&p));
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
                prop_assert!(c.abs() <= p.abs() + 1e-12);
            }
        }

        #[test]
        fn positive_scaling_behaves(seed in 0u64..2000, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..20);
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..1.0e3)).collect();
            let truth: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..1.0e3)).collect();
            let m1 = compute_metrics_flat(&pred, &truth).unwrap();
            let pred2: Vec<f64> = pred.iter().map(|&x| x * scale).collect();
            let truth2: Vec<f64> = truth.iter().map(|&x| x * scale).collect();
            let m2 = compute_metrics_flat(&pred2, &truth2).unwrap();
            prop_assert!((m2.mae - scale * m1.mae).abs() < 1e-9 * m1.mae.max(1.0) * scale);
            prop_assert!((m2.rmse - scale * m1.rmse).abs() < 1e-9 * m1.rmse.max(1.0) * scale);
            prop_assert!((m2.mape.unwrap() - m1.mape.unwrap()).abs() < 1e-9 * m1.mape.unwrap().max(1.0));
            prop_assert!((m2.pcc.unwrap() - m1.pcc.unwrap()).abs() < 1e-9);
            prop_assert!((m2.ccc.unwrap() - m1.ccc.unwrap()).abs() < 1e-9);
        }
    }

    fn toy_setup(
        n: usize,
        t: usize,
        seed: u64,
    ) -> (EpidemicDataset, crate::graph::PatchGraph) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches: Vec<PatchMeta> = (0..n)
            .map(|k| PatchMeta {
                patch_id: format!("p{k:02}"),
                name: format!("patch {k}"),
                population: 2.0e5,
                latitude: 5.0 + 4.0 * k as f64,
                longitude: 10.0 + 3.0 * (k as f64).cos(),
            })
            .collect();
        let graph = build_graph(
            &patches,
            &GravityHyper {
                top_e: 2.min(n - 1),
                r: 900.0,
                ..GravityHyper::default()
            },
            None,
        )
        .unwrap();
        let dates: Vec<NaiveDate> = (0..t)
            .map(|d| NaiveDate::from_ymd_opt(2021, 1, 1).unwrap() + chrono::Days::new(d as u64))
            .collect();
        let mut features = Array3::zeros((n, t, N_CHANNELS));
        for k in 0..n {
            for d in 0..t {
                let z = (d as f64 - t as f64 / 2.0) / (t as f64 / 5.0);
                let active = 8000.0 * (-z * z).exp() + 100.0 + rng.gen_range(0.0..80.0);
                let recovered = 30.0 * d as f64;
                features[[k, d, crate::data::CH_ACTIVE]] = active;
                features[[k, d, crate::data::CH_RECOVERED]] = recovered;
                features[[k, d, crate::data::CH_SUSCEPTIBLE]] = 2.0e5 - active - recovered;
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

    struct EvalHarness {
        dataset: EpidemicDataset,
        gi: GraphIndex,
        scaler: Scaler,
        n_pop: Array1<f64>,
        windows: Vec<WindowSample>,
        dims: ModelDims,
        weights: ModelWeights,
        span: std::ops::Range<usize>,
    }

    fn eval_harness(t_out: usize) -> EvalHarness {
        let (dataset, graph) = toy_setup(4, 40, 77);
        let spans =
            chronological_split(dataset.t(), &SplitRatios::default(), 3, t_out).unwrap();
        let scaler = Scaler::fit(&dataset, &spans.train).unwrap();
        let windows = make_windows(&dataset, &scaler, &spans.test, 3, t_out).unwrap();
        let gi = GraphIndex::build(&graph).unwrap();
        let n_pop = dataset.populations();
        let dims = ModelDims::new(6, 4, 1, t_out).unwrap();
        let weights = init_weights(&dims, 3).unwrap();
        EvalHarness {
            dataset,
            gi,
            scaler,
            n_pop,
            windows,
            dims,
            weights,
            span: spans.test,
        }
    }

    #[test]
    fn evaluate_pools_windows_like_concatenation() {
        let h = eval_harness(2);
        let ctx = ForwardCtx {
            graph: &h.gi,
            scaler: &h.scaler,
            n_pop: &h.n_pop,
        };
        let mode = AblationMode::full();
        let ids: Vec<String> = h.dataset.patches.iter().map(|p| p.patch_id.clone()).collect();
        let report = evaluate(&h.dims, &h.weights, &mode, &ctx, &h.windows, &ids, "toy").unwrap();
        assert_eq!(report.t_out, 2);
        assert_eq!(report.ablation, "full");
        assert_eq!(report.per_patch.len(), 4);

        // Pooling identity: metrics over the two halves concatenated equal
        // metrics over all windows at once.
        let half = h.windows.len() / 2;
        let a = forecast_arrays(&h.dims, &h.weights, &mode, &ctx, &h.windows[..half]).unwrap();
        let b = forecast_arrays(&h.dims, &h.weights, &mode, &ctx, &h.windows[half..]).unwrap();
        let mut pred: Vec<f64> = a.pred_st.iter().cloned().collect();
        pred.extend(b.pred_st.iter());
        let mut truth: Vec<f64> = a.truth.iter().cloned().collect();
        truth.extend(b.truth.iter());
        let pooled = compute_metrics_flat(&pred, &truth).unwrap();
        let full = forecast_arrays(&h.dims, &h.weights, &mode, &ctx, &h.windows).unwrap();
        let direct = compute_metrics(&full.pred_st, &full.truth).unwrap();
        // Same multiset of entries, different order: identical sums up to
        // float re-association.
        assert!((pooled.mae - direct.mae).abs() < 1e-9);
        assert!((pooled.rmse - direct.rmse).abs() < 1e-9);
        assert!((pooled.pcc.unwrap() - direct.pcc.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn evaluate_report_serializes_with_missing_values() {
        let h = eval_harness(2);
        let ctx = ForwardCtx {
            graph: &h.gi,
            scaler: &h.scaler,
            n_pop: &h.n_pop,
        };
        let ids: Vec<String> = h.dataset.patches.iter().map(|p| p.patch_id.clone()).collect();
        let report = evaluate(
            &h.dims,
            &h.weights,
            &AblationMode::full(),
            &ctx,
            &h.windows,
            &ids,
            "toy",
        )
        .unwrap();
        let js = serde_json::to_string(&report).unwrap();
        let back: ForecastReport = serde_json::from_str(&js).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn emit_series_writes_consistent_files() {
        let h = eval_harness(3);
        let ctx = ForwardCtx {
            graph: &h.gi,
            scaler: &h.scaler,
            n_pop: &h.n_pop,
        };
        let mode = AblationMode::full();
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["p00".to_string(), "p02".to_string()];
        let paths = emit_series(
            &h.dims,
            &h.weights,
            &mode,
            &ctx,
            &h.dataset,
            &h.windows,
            &ids,
            dir.path(),
        )
        .unwrap();
        assert_eq!(paths.len(), 2);

        let arrays = forecast_arrays(&h.dims, &h.weights, &mode, &ctx, &h.windows).unwrap();
        let t_in = 3;
        let t_out = 3;
        for (pi, path) in paths.iter().enumerate() {
            let k: usize = if pi == 0 { 0 } else { 2 };
            let mut rdr = csv::Reader::from_path(path).unwrap();
            let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
            // One row per window plus the tail of the last horizon.
            assert_eq!(rows.len(), h.windows.len() + (t_out - 1));
            for (ri, row) in rows.iter().enumerate() {
                let (w, t) = if ri < h.windows.len() {
                    (ri, 0)
                } else {
                    (h.windows.len() - 1, ri - h.windows.len() + 1)
                };
                let day = h.windows[w].start_index + t_in + t;
                assert_eq!(row[0], h.dataset.dates[day].to_string());
                let truth: f64 = row[1].parse().unwrap();
                assert_eq!(truth, h.dataset.features[[k, day, crate::data::CH_ACTIVE]]);
                let st: f64 = row[2].parse().unwrap();
                assert_eq!(st, arrays.pred_st[[k, w * t_out + t]]);
                let phy: f64 = row[3].parse().unwrap();
                assert_eq!(phy, arrays.pred_phy[[k, w * t_out + t]]);
            }
        }

        let missing = emit_series(
            &h.dims,
            &h.weights,
            &mode,
            &ctx,
            &h.dataset,
            &h.windows,
            &["nope".to_string()],
            dir.path(),
        );
        assert!(missing.is_err());
    }

    #[test]
    fn sir_baseline_arrays_match_manual_rollout() {
        let h = eval_harness(2);
        let fits: Vec<SirFit> = (0..4)
            .map(|k| SirFit {
                beta: 0.1 + 0.05 * k as f64,
                gamma: 0.05,
                degenerate: false,
            })
            .collect();
        let (pred, truth) =
            sir_baseline_arrays(&h.windows, &h.scaler, &h.n_pop, &fits, 2).unwrap();
        assert_eq!(pred.dim(), (4, h.windows.len() * 2));
        assert_eq!(truth.dim(), pred.dim());
        // Check one window by hand.
        let w0 = &h.windows[0];
        let x0 = CompartmentState::new(
            w0.raw_last_day.column(crate::data::CH_SUSCEPTIBLE).to_owned(),
            w0.raw_last_day.column(CH_ACTIVE).to_owned(),
            w0.raw_last_day.column(crate::data::CH_RECOVERED).to_owned(),
            h.n_pop.clone(),
        )
        .unwrap();
        let params = EpiParams::without_mobility(
            Array1::from_iter(fits.iter().map(|f| f.beta)),
            Array1::from_iter(fits.iter().map(|f| f.gamma)),
        );
        let ro = rollout(&x0, None, &params, 2).unwrap();
        for k in 0..4 {
            for t in 0..2 {
                assert_eq!(pred[[k, t]], ro.infected[[t, k]]);
            }
        }
        let _ = h.span;
    }
}
