//! Implementations of the six subcommands plus the shared plumbing that
//! resolves config-file values and flag overrides into concrete settings.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use mpstan_core::artifacts::{
    file_hash, json_hash, save_json, Checkpoint, CHECKPOINT_FORMAT_VERSION,
};
use mpstan_core::data::{
    chronological_split, ingest, make_windows, read_meta_csv, EpidemicDataset, WindowSample,
    CH_ACTIVE, CH_RECOVERED, CH_SUSCEPTIBLE, N_CHANNELS,
};
use mpstan_core::dynamics::{fit_sir_baseline, rollout, CompartmentState, EpiParams};
use mpstan_core::graph::{build_graph, GravityHyper, PatchGraph, PatchMeta};
use mpstan_core::metrics::{
    compute_metrics_flat, emit_series, evaluate, sir_baseline_arrays, ForecastReport, MetricSet,
};
use mpstan_core::model::{forward, ForwardCtx, GraphIndex, ModelDims};
use mpstan_core::train::{
    ablation_config, ablation_name, train, TrainConfig, ABLATION_VARIANTS,
};

use crate::config::FileConfig;
use crate::{DataArgs, SimulateArgs, TrainOverrides};

/// Hashes of the raw inputs a run consumed, embedded in its artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct InputHashes {
    pub cases: String,
    pub meta: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distances: Option<String>,
}

pub struct DataInputs {
    pub dataset: EpidemicDataset,
    pub graph: PatchGraph,
    pub hashes: InputHashes,
    pub dataset_hash: String,
}

fn required_path(
    flag: Option<&PathBuf>,
    file: Option<&PathBuf>,
    what: &str,
    hint: &str,
) -> Result<PathBuf> {
    flag.or(file)
        .cloned()
        .ok_or_else(|| anyhow!("no {what} given (use --{hint} or [paths].{hint} in the config)"))
}

/// Headerless square matrix of pairwise distances (km), meta-file order.
fn read_distance_csv(path: &Path, n: usize) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("reading distances {}", path.display()))?;
    let mut out = Array2::zeros((n, n));
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if i >= n || record.len() != n {
            bail!(
                "distance matrix must be {n}x{n} to match the meta file (row {i} has {} cells)",
                record.len()
            );
        }
        for (j, cell) in record.iter().enumerate() {
            out[[i, j]] = cell
                .trim()
                .parse::<f64>()
                .with_context(|| format!("distance row {i}, column {j}"))?;
        }
        rows = i + 1;
    }
    if rows != n {
        bail!("distance matrix has {rows} rows, expected {n}");
    }
    Ok(out)
}

pub fn resolve_hyper(file: &FileConfig) -> GravityHyper {
    let mut h = GravityHyper::default();
    if let Some(v) = file.gravity.alpha1 {
        h.alpha1 = v;
    }
    if let Some(v) = file.gravity.alpha2 {
        h.alpha2 = v;
    }
    if let Some(v) = file.gravity.r {
        h.r = v;
    }
    if let Some(v) = file.gravity.top_e {
        h.top_e = v;
    }
    h
}

/// Load the dataset and build its mobility graph from resolved paths.
pub fn load_inputs(file: &FileConfig, data: &DataArgs) -> Result<DataInputs> {
    let cases = required_path(
        data.cases.as_ref(),
        file.paths.cases.as_ref(),
        "cases CSV",
        "cases",
    )?;
    let meta = required_path(
        data.meta.as_ref(),
        file.paths.meta.as_ref(),
        "metadata CSV",
        "meta",
    )?;
    let distances = data
        .distances
        .clone()
        .or_else(|| file.paths.distances.clone());

    let dataset = ingest(&cases, &meta)?;
    let hyper = resolve_hyper(file);
    let override_matrix = distances
        .as_deref()
        .map(|p| read_distance_csv(p, dataset.n()))
        .transpose()?;
    let graph = build_graph(&dataset.patches, &hyper, override_matrix.as_ref())?;
    let hashes = InputHashes {
        cases: file_hash(&cases)?,
        meta: file_hash(&meta)?,
        distances: distances.as_deref().map(file_hash).transpose()?,
    };
    let dataset_hash = json_hash(&dataset)?;
    Ok(DataInputs {
        dataset,
        graph,
        hashes,
        dataset_hash,
    })
}

/// Merge file config, flag overrides, and the global seed into the final
/// training configuration and model dimensions.
pub fn resolve_train_config(
    file: &FileConfig,
    over: &TrainOverrides,
    ablation_flag: Option<&str>,
    seed_flag: Option<u64>,
) -> Result<(TrainConfig, ModelDims)> {
    let mut cfg = TrainConfig::default();
    let t = &file.train;
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = t.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = t.adam_beta1 {
        cfg.adam_beta1 = v;
    }
    if let Some(v) = t.adam_beta2 {
        cfg.adam_beta2 = v;
    }
    if let Some(v) = t.adam_eps {
        cfg.adam_eps = v;
    }
    if let Some(v) = t.seed {
        cfg.seed = v;
    }
    if let Some(v) = t.t_in {
        cfg.t_in = v;
    }
    if let Some(v) = t.t_out {
        cfg.t_out = v;
    }
    if let Some(v) = t.split {
        cfg.split = v;
    }
    if let Some(name) = &t.ablation {
        cfg.ablation = ablation_config(name)?;
    }
    if let Some(v) = t.grad_clip {
        cfg.grad_clip = Some(v);
    }

    // Flags win over file values.
    if let Some(v) = over.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = over.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = over.t_in {
        cfg.t_in = v;
    }
    if let Some(v) = over.t_out {
        cfg.t_out = v;
    }
    if let Some(v) = over.grad_clip {
        cfg.grad_clip = Some(v);
    }
    if let Some(name) = ablation_flag {
        cfg.ablation = ablation_config(name)?;
    }
    if let Some(v) = seed_flag {
        cfg.seed = v;
    }

    let defaults = ModelDims::defaults(cfg.t_out)?;
    let dims = ModelDims::new(
        over.d_gru.or(file.dims.d_gru).unwrap_or(defaults.d_gru),
        over.d_gat.or(file.dims.d_gat).unwrap_or(defaults.d_gat),
        over.heads.or(file.dims.heads).unwrap_or(defaults.heads),
        cfg.t_out,
    )?;
    cfg.validate()?;
    Ok((cfg, dims))
}

pub fn resolve_out(out_flag: Option<&PathBuf>, file: &FileConfig) -> PathBuf {
    out_flag
        .cloned()
        .or_else(|| file.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Serialize)]
struct IngestArtifact {
    dataset_hash: String,
    inputs: InputHashes,
    summary: mpstan_core::data::DatasetSummary,
}

pub fn cmd_ingest(out_dir: &Path, inputs: &DataInputs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    inputs.dataset.save_snapshot(&out_dir.join("snapshot.json"))?;
    let artifact = IngestArtifact {
        dataset_hash: inputs.dataset_hash.clone(),
        inputs: inputs.hashes.clone(),
        summary: inputs.dataset.summary(),
    };
    save_json(&artifact, &out_dir.join("summary.json"))?;
    outln!("{}", serde_json::to_string_pretty(&artifact)?);
    Ok(())
}

/// Train, write `checkpoint.json` + `history.json`, return the checkpoint.
pub fn train_to_dir(
    out_dir: &Path,
    inputs: &DataInputs,
    dims: &ModelDims,
    cfg: &TrainConfig,
    hyper: &GravityHyper,
) -> Result<Checkpoint> {
    fs::create_dir_all(out_dir)?;
    let outcome = train(&inputs.dataset, &inputs.graph, dims, cfg)?;
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dataset_hash: inputs.dataset_hash.clone(),
        config: cfg.clone(),
        dims: *dims,
        hyper: hyper.clone(),
        patches: inputs.dataset.patches.clone(),
        graph: inputs.graph.clone(),
        spans: outcome.spans.clone(),
        scaler: outcome.scaler.clone(),
        weights: outcome.weights.clone(),
        history: outcome.history.clone(),
    };
    ckpt.save(&out_dir.join("checkpoint.json"))?;
    save_json(&outcome.history, &out_dir.join("history.json"))?;
    Ok(ckpt)
}

pub fn cmd_train(
    out_dir: &Path,
    inputs: &DataInputs,
    dims: &ModelDims,
    cfg: &TrainConfig,
    hyper: &GravityHyper,
) -> Result<()> {
    let echo = serde_json::json!({
        "t_in": cfg.t_in,
        "t_out": cfg.t_out,
        "d_gru": dims.d_gru,
        "d_gat": dims.d_gat,
        "heads": dims.heads,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "seed": cfg.seed,
        "ablation": ablation_name(&cfg.ablation),
    });
    outln!("{echo}");
    let ckpt = train_to_dir(out_dir, inputs, dims, cfg, hyper)?;
    let best = ckpt.history.best_epoch;
    outln!(
        "best epoch {} of {}, validation MAE {:.6}",
        best,
        ckpt.history.val_mae.len(),
        ckpt.history.val_mae[best]
    );
    Ok(())
}

/// Build the single forecasting window from the dataset's trailing days.
fn tail_window(
    dataset: &EpidemicDataset,
    scaler: &mpstan_core::data::Scaler,
    t_in: usize,
    t_out: usize,
) -> Result<WindowSample> {
    let t = dataset.t();
    if t < t_in {
        bail!("dataset has {t} day(s), shorter than the input window {t_in}");
    }
    let start = t - t_in;
    let n = dataset.n();
    let mut input = Array3::zeros((n, t_in, N_CHANNELS));
    for step in 0..t_in {
        let day = start + step;
        for k in 0..n {
            for c in 0..N_CHANNELS {
                input[[k, step, c]] =
                    scaler.normalize_value(k, c, dataset.features[[k, day, c]]);
            }
        }
    }
    let mut raw_last_day = Array2::zeros((n, N_CHANNELS));
    for k in 0..n {
        for c in 0..N_CHANNELS {
            raw_last_day[[k, c]] = dataset.features[[k, t - 1, c]];
        }
    }
    Ok(WindowSample {
        input,
        target: Array2::zeros((n, t_out)),
        raw_last_day,
        anchor_date: dataset.dates[t - 1],
        start_index: start,
    })
}

pub fn cmd_forecast(out_dir: &Path, inputs: &DataInputs, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let t_in = ckpt.config.t_in;
    let t_out = ckpt.config.t_out;
    let dataset = &inputs.dataset;
    if dataset.n() != ckpt.graph.n {
        bail!(
            "dataset has {} patches but the checkpoint was trained on {}",
            dataset.n(),
            ckpt.graph.n
        );
    }
    let window = tail_window(dataset, &ckpt.scaler, t_in, t_out)?;
    let gi = GraphIndex::build(&ckpt.graph)?;
    let n_pop = dataset.populations();
    let ctx = ForwardCtx {
        graph: &gi,
        scaler: &ckpt.scaler,
        n_pop: &n_pop,
    };
    let mode = ckpt.ablation();
    let pass = forward(&ckpt.dims, &ckpt.weights, &mode, &ctx, &window)?;
    let y_st = pass.tape.value(pass.y_st);

    let path = out_dir.join("forecast.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["date", "patch_id", "pred_st", "pred_phy"])?;
    let last_date = *dataset.dates.last().expect("nonempty dataset");
    for t in 0..t_out {
        let date = last_date + chrono::Days::new(1 + t as u64);
        for (k, p) in dataset.patches.iter().enumerate() {
            let st = ckpt.scaler.denormalize_value(k, CH_ACTIVE, y_st[[k, t]]);
            let phy = ckpt
                .scaler
                .denormalize_value(k, CH_ACTIVE, pass.y_phy[[k, t]]);
            wtr.write_record([
                date.to_string(),
                p.patch_id.clone(),
                st.to_string(),
                phy.to_string(),
            ])?;
        }
    }
    wtr.flush()?;

    save_json(
        &serde_json::json!({
            "checkpoint_hash": ckpt.content_hash()?,
            "dataset_hash": inputs.dataset_hash,
            "inputs": inputs.hashes,
            "rows": dataset.n() * t_out,
        }),
        &out_dir.join("forecast_meta.json"),
    )?;
    outln!(
        "wrote {} forecast rows ({} patches x {} days) to {}",
        dataset.n() * t_out,
        dataset.n(),
        t_out,
        path.display()
    );
    Ok(())
}

/// Evaluation artifact: the report plus provenance and optional baseline.
#[derive(Debug, Serialize)]
pub struct EvaluationArtifact {
    pub checkpoint_hash: String,
    #[serde(flatten)]
    pub report: ForecastReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sir_baseline: Option<MetricSet>,
}

/// Shared by `evaluate` and `ablate` so their numbers are identical by
/// construction.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    inputs: &DataInputs,
    sir_baseline: bool,
) -> Result<EvaluationArtifact> {
    let dataset = &inputs.dataset;
    if inputs.dataset_hash != ckpt.dataset_hash {
        log::warn!(
            "dataset hash {} differs from the checkpoint's training data {}",
            inputs.dataset_hash,
            ckpt.dataset_hash
        );
    }
    let t_in = ckpt.config.t_in;
    let t_out = ckpt.config.t_out;
    let spans = chronological_split(dataset.t(), &ckpt.config.split, t_in, t_out)?;
    let windows = make_windows(dataset, &ckpt.scaler, &spans.test, t_in, t_out)?;
    let gi = GraphIndex::build(&ckpt.graph)?;
    let n_pop = dataset.populations();
    let ctx = ForwardCtx {
        graph: &gi,
        scaler: &ckpt.scaler,
        n_pop: &n_pop,
    };
    let ids: Vec<String> = dataset.patches.iter().map(|p| p.patch_id.clone()).collect();
    let mode = ckpt.ablation();
    let report = evaluate(
        &ckpt.dims,
        &ckpt.weights,
        &mode,
        &ctx,
        &windows,
        &ids,
        &inputs.dataset_hash,
    )?;

    let sir = if sir_baseline {
        let span = &spans.train;
        let days = span.len();
        let n = dataset.n();
        let mut s = Array2::zeros((days, n));
        let mut i = Array2::zeros((days, n));
        let mut r = Array2::zeros((days, n));
        for (row, day) in span.clone().enumerate() {
            for k in 0..n {
                s[[row, k]] = dataset.features[[k, day, CH_SUSCEPTIBLE]];
                i[[row, k]] = dataset.features[[k, day, CH_ACTIVE]];
                r[[row, k]] = dataset.features[[k, day, CH_RECOVERED]];
            }
        }
        let fits = fit_sir_baseline(&s, &i, &r, &n_pop)?;
        let (pred, truth) = sir_baseline_arrays(&windows, &ckpt.scaler, &n_pop, &fits, t_out)?;
        let p: Vec<f64> = pred.iter().cloned().collect();
        let t: Vec<f64> = truth.iter().cloned().collect();
        Some(compute_metrics_flat(&p, &t)?)
    } else {
        None
    };

    Ok(EvaluationArtifact {
        checkpoint_hash: ckpt.content_hash()?,
        report,
        sir_baseline: sir,
    })
}

pub fn cmd_evaluate(
    out_dir: &Path,
    inputs: &DataInputs,
    ckpt: &Checkpoint,
    sir_baseline: bool,
    emit_ids: &[String],
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let artifact = evaluate_checkpoint(ckpt, inputs, sir_baseline)?;
    save_json(&artifact, &out_dir.join("report.json"))?;
    outln!("{}", serde_json::to_string_pretty(&artifact)?);

    if !emit_ids.is_empty() {
        let dataset = &inputs.dataset;
        let spans = chronological_split(
            dataset.t(),
            &ckpt.config.split,
            ckpt.config.t_in,
            ckpt.config.t_out,
        )?;
        let windows = make_windows(
            dataset,
            &ckpt.scaler,
            &spans.test,
            ckpt.config.t_in,
            ckpt.config.t_out,
        )?;
        let gi = GraphIndex::build(&ckpt.graph)?;
        let n_pop = dataset.populations();
        let ctx = ForwardCtx {
            graph: &gi,
            scaler: &ckpt.scaler,
            n_pop: &n_pop,
        };
        let mode = ckpt.ablation();
        let paths = emit_series(
            &ckpt.dims,
            &ckpt.weights,
            &mode,
            &ctx,
            dataset,
            &windows,
            emit_ids,
            out_dir,
        )?;
        for p in paths {
            outln!("wrote {}", p.display());
        }
    }
    Ok(())
}

pub fn cmd_simulate(
    out_dir: &Path,
    file: &FileConfig,
    args: &SimulateArgs,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let meta_path = required_path(
        args.data.meta.as_ref(),
        file.paths.meta.as_ref(),
        "metadata CSV",
        "meta",
    )?;
    let metas: Vec<PatchMeta> = read_meta_csv(&meta_path)?;
    let hyper = resolve_hyper(file);
    let distances = args
        .data
        .distances
        .clone()
        .or_else(|| file.paths.distances.clone());
    let override_matrix = distances
        .as_deref()
        .map(|p| read_distance_csv(p, metas.len()))
        .transpose()?;
    let graph = build_graph(&metas, &hyper, override_matrix.as_ref())?;
    let n = metas.len();
    let n_pop = Array1::from_iter(metas.iter().map(|p| p.population));

    let pick = |flag: Option<f64>, file_v: Option<f64>, default: f64| {
        flag.or(file_v).unwrap_or(default)
    };
    let s = &file.simulate;
    let beta = pick(args.beta, s.beta, 0.2);
    let gamma = pick(args.gamma, s.gamma, 0.1);
    let d_s = pick(args.d_s, s.d_s, 0.01);
    let d_i = pick(args.d_i, s.d_i, 0.01);
    let d_r = pick(args.d_r, s.d_r, 0.01);
    let horizon = args.horizon.or(s.horizon).unwrap_or(30);
    let params = EpiParams::constant(n, beta, gamma, d_s, d_i, d_r);
    params.validate(n)?;

    // Initial state: the last day of a cases CSV when given, otherwise a
    // uniform seeding of `initial_infected` people per patch.
    let x0 = if let Some(cases) = args
        .data
        .cases
        .clone()
        .or_else(|| file.paths.cases.clone())
    {
        let dataset = ingest(&cases, &meta_path)?;
        if dataset.n() != n {
            bail!("cases and meta files disagree on the patch count");
        }
        let last = dataset.t() - 1;
        CompartmentState::new(
            Array1::from_iter((0..n).map(|k| dataset.features[[k, last, CH_SUSCEPTIBLE]])),
            Array1::from_iter((0..n).map(|k| dataset.features[[k, last, CH_ACTIVE]])),
            Array1::from_iter((0..n).map(|k| dataset.features[[k, last, CH_RECOVERED]])),
            n_pop.clone(),
        )?
    } else {
        let i0 = args
            .initial_infected
            .or(s.initial_infected)
            .unwrap_or(100.0);
        let i = Array1::from_elem(n, i0);
        let s0 = &n_pop - &i;
        CompartmentState::new(s0, i, Array1::zeros(n), n_pop.clone())?
    };

    let traj = rollout(&x0, Some(&graph), &params, horizon)?;
    let path = out_dir.join("trajectory.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["step", "patch_id", "s", "i", "r"])?;
    for (step, state) in traj.states.iter().enumerate() {
        for (k, m) in metas.iter().enumerate() {
            wtr.write_record([
                step.to_string(),
                m.patch_id.clone(),
                state.s[k].to_string(),
                state.i[k].to_string(),
                state.r[k].to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    save_json(
        &serde_json::json!({
            "meta_hash": file_hash(&meta_path)?,
            "params": params,
            "horizon": horizon,
            "clamp_events": traj.clamp_events,
        }),
        &out_dir.join("simulate_meta.json"),
    )?;
    outln!(
        "simulated {} steps over {} patches ({} clamp event(s)); wrote {}",
        horizon,
        n,
        traj.clamp_events,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub dataset_hash: String,
    pub checkpoint_hash: String,
    pub metrics: MetricSet,
}

pub fn cmd_ablate(
    out_dir: &Path,
    inputs: &DataInputs,
    dims: &ModelDims,
    base_cfg: &TrainConfig,
    hyper: &GravityHyper,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(ABLATION_VARIANTS.len());
    for name in ABLATION_VARIANTS {
        let mut cfg = base_cfg.clone();
        cfg.ablation = ablation_config(name)?;
        let vdir = out_dir.join(name);
        log::info!("training variant {name}");
        let ckpt = train_to_dir(&vdir, inputs, dims, &cfg, hyper)?;
        let artifact = evaluate_checkpoint(&ckpt, inputs, false)?;
        save_json(&artifact, &vdir.join("report.json"))?;
        rows.push(AblationRow {
            variant: name.to_string(),
            dataset_hash: ckpt.dataset_hash.clone(),
            checkpoint_hash: artifact.checkpoint_hash.clone(),
            metrics: artifact.report.metrics.clone(),
        });
    }
    save_json(&rows, &out_dir.join("ablation_table.json"))?;

    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:>10.4}"),
        None => format!("{:>10}", "-"),
    };
    outln!(
        "{:<14} {:>12} {:>12} {:>10} {:>10} {:>10}",
        "variant", "MAE", "RMSE", "MAPE%", "PCC", "CCC"
    );
    for row in &rows {
        outln!(
            "{:<14} {:>12.4} {:>12.4} {} {} {}",
            row.variant,
            row.metrics.mae,
            row.metrics.rmse,
            fmt_opt(row.metrics.mape),
            fmt_opt(row.metrics.pcc),
            fmt_opt(row.metrics.ccc),
        );
    }
    Ok(())
}
