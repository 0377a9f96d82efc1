//! Window-by-window Adam training with the hybrid forecast loss and
//! best-validation-epoch model selection.
//!
//! Each epoch visits every training window once in a seed-shuffled order and
//! takes one optimizer step per window. After each epoch the raw-unit
//! validation MAE of the neural forecast decides whether the current weights
//! become the returned checkpoint. Everything is deterministic given the
//! seed.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    chronological_split, make_windows, EpidemicDataset, Scaler, SplitRatios, SplitSpans,
    WindowSample, CH_ACTIVE,
};
use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::model::{
    forward, init_weights, AblationMode, ForwardCtx, GraphIndex, ModelDims, ModelWeights,
};
use crate::tape::{NodeId, Tape};

/// The recognized ablation variant names.
pub const ABLATION_VARIANTS: [&str; 6] = [
    "full",
    "phy-all-off",
    "phy-loss-off",
    "phy-model-off",
    "mobility-off",
    "mpg-off",
];

/// Map a variant name to its flag tuple.
pub fn ablation_config(name: &str) -> Result<AblationMode> {
    let m = match name {
        "full" => AblationMode::full(),
        // With the physical branch fully removed nothing consumes the
        // dynamics, so the remaining flags are fixed to their cheapest
        // settings (the reporting rollout runs without mobility).
        "phy-all-off" => AblationMode {
            use_phy_in_model: false,
            use_phy_in_loss: false,
            use_mobility: false,
            use_mpg: true,
        },
        "phy-loss-off" => AblationMode {
            use_phy_in_loss: false,
            ..AblationMode::full()
        },
        "phy-model-off" => AblationMode {
            use_phy_in_model: false,
            ..AblationMode::full()
        },
        "mobility-off" => AblationMode {
            use_mobility: false,
            ..AblationMode::full()
        },
        "mpg-off" => AblationMode {
            use_mpg: false,
            ..AblationMode::full()
        },
        other => {
            return Err(Error::Input(format!(
                "unknown ablation variant {other:?}; expected one of {ABLATION_VARIANTS:?}"
            )))
        }
    };
    Ok(m)
}

/// Inverse of [`ablation_config`] for report labels.
pub fn ablation_name(mode: &AblationMode) -> String {
    for name in ABLATION_VARIANTS {
        if let Ok(m) = ablation_config(name) {
            if m == *mode {
                return name.to_string();
            }
        }
    }
    "custom".to_string()
}

fn default_epochs() -> usize {
    50
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_t_in() -> usize {
    5
}
fn default_t_out() -> usize {
    5
}

/// Run settings for one training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_t_in")]
    pub t_in: usize,
    #[serde(default = "default_t_out")]
    pub t_out: usize,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub ablation: AblationMode,
    /// Optional global-norm gradient bound; off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            seed: 0,
            t_in: default_t_in(),
            t_out: default_t_out(),
            split: SplitRatios::default(),
            ablation: AblationMode::full(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        // Zero is allowed so a no-update run stays expressible; negative or
        // non-finite rates are rejected.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (label, v, lo, hi) in [
            ("adam_beta1", self.adam_beta1, 0.0, 1.0),
            ("adam_beta2", self.adam_beta2, 0.0, 1.0),
        ] {
            if !(lo..hi).contains(&v) {
                return Err(Error::Config(format!(
                    "{label} must lie in [{lo}, {hi}), got {v}"
                )));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("t_in and t_out must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-window loss seen during each epoch (pre-update values).
    pub train_loss: Vec<f64>,
    /// Raw-unit validation MAE of the neural forecast after each epoch.
    pub val_mae: Vec<f64>,
    /// Seconds per epoch. Excluded from persisted artifacts so reruns
    /// compare byte-identically.
    #[serde(skip)]
    pub wall_time_s: Vec<f64>,
    /// Epoch whose weights the run returns (first minimum of `val_mae`).
    pub best_epoch: usize,
}

/// Adam with bias correction over the canonical parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weights: &ModelWeights) -> Self {
        let shapes: Vec<_> = weights.params().iter().map(|p| p.raw_dim()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: shapes.iter().map(|d| Array2::zeros(d.clone())).collect(),
            v: shapes.iter().map(|d| Array2::zeros(d.clone())).collect(),
        }
    }

    /// One update. `grads` must align with [`ModelWeights::params`].
    pub fn step(&mut self, weights: &mut ModelWeights, grads: &[Array2<f64>]) -> Result<()> {
        let mut params = weights.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Internal(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.dim() != p.dim() {
                return Err(Error::Internal("gradient shape mismatch".into()));
            }
            azip_update(m, v, p, g, self.beta1, self.beta2, self.lr, self.eps, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    beta1: f64,
    beta2: f64,
    lr: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(m)
        .and(v)
        .and(p)
        .and(g)
        .for_each(|m, v, p, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}

/// Euclidean norm over every entry of every gradient array.
pub fn global_grad_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|&x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `bound`.
pub fn clip_gradients(grads: &mut [Array2<f64>], bound: f64) {
    let norm = global_grad_norm(grads);
    if norm > bound {
        let scale = bound / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
}

/// Mean absolute deviation of both forecasts from the truth, all in
/// normalized units: `(1/(N*T')) * sum(|y_st - y| + |y_phy - y|)`. Without
/// the physical loss term only the first summand remains (no
/// renormalization).
pub fn hybrid_loss(
    y_st: &Array2<f64>,
    y_phy: &Array2<f64>,
    truth: &Array2<f64>,
    mode: &AblationMode,
) -> Result<f64> {
    if y_st.dim() != truth.dim() || y_phy.dim() != truth.dim() {
        return Err(Error::Input(format!(
            "loss inputs disagree in shape: {:?}, {:?}, {:?}",
            y_st.dim(),
            y_phy.dim(),
            truth.dim()
        )));
    }
    for (label, a) in [("y_st", y_st), ("y_phy", y_phy), ("truth", truth)] {
        if a.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN in loss input {label}")));
        }
    }
    let count = truth.len() as f64;
    let mut total: f64 = y_st
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    if mode.use_phy_in_loss {
        total += y_phy
            .iter()
            .zip(truth.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total / count)
}

/// Tape version of [`hybrid_loss`]; returns the 1x1 loss node.
pub fn tape_hybrid_loss(
    tape: &mut Tape,
    y_st: NodeId,
    y_phy: Option<NodeId>,
    target: NodeId,
) -> NodeId {
    let count = tape.value(target).len() as f64;
    let d_st = tape.sub(y_st, target);
    let e_st = tape.abs(d_st);
    let mut total = tape.sum_all(e_st);
    if let Some(phy) = y_phy {
        let d_phy = tape.sub(phy, target);
        let e_phy = tape.abs(d_phy);
        let s_phy = tape.sum_all(e_phy);
        total = tape.add(total, s_phy);
    }
    tape.scale(total, 1.0 / count)
}

/// Forward + loss + backward on one window. Gradients align with
/// [`ModelWeights::params`]. The physical term enters the loss only when the
/// mode asks for it.
pub fn loss_and_grads(
    dims: &ModelDims,
    weights: &ModelWeights,
    mode: &AblationMode,
    ctx: &ForwardCtx,
    window: &WindowSample,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut pass = forward(dims, weights, mode, ctx, window)?;
    let target = pass.tape.leaf(window.target.clone());
    let phy_for_loss = if mode.use_phy_in_loss {
        pass.y_phy_node
    } else {
        None
    };
    let loss_node = tape_hybrid_loss(&mut pass.tape, pass.y_st, phy_for_loss, target);
    let loss = pass.tape.value(loss_node)[[0, 0]];
    let all_grads = pass.tape.backward(loss_node);
    let grads = pass
        .weight_ids
        .ordered()
        .into_iter()
        .map(|id| all_grads[id].clone())
        .collect();
    Ok((loss, grads))
}

/// Raw-unit mean absolute error of the denormalized neural forecast over a
/// set of windows.
pub fn forecast_mae(
    dims: &ModelDims,
    weights: &ModelWeights,
    mode: &AblationMode,
    ctx: &ForwardCtx,
    windows: &[WindowSample],
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Input("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let pass = forward(dims, weights, mode, ctx, w)?;
        let y = pass.tape.value(pass.y_st);
        for k in 0..y.nrows() {
            for t in 0..y.ncols() {
                let pred = ctx.scaler.denormalize_value(k, CH_ACTIVE, y[[k, t]]);
                let truth = ctx.scaler.denormalize_value(k, CH_ACTIVE, w.target[[k, t]]);
                total += (pred - truth).abs();
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Everything a finished run hands back.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub weights: ModelWeights,
    /// Weights after the final epoch (diagnostics; selection uses `weights`).
    pub final_weights: ModelWeights,
    pub history: TrainHistory,
    pub scaler: Scaler,
    pub spans: SplitSpans,
}

/// Train on the chronological training span and select by validation MAE.
pub fn train(
    dataset: &EpidemicDataset,
    graph: &PatchGraph,
    dims: &ModelDims,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dims.validate()?;
    if dims.t_out != cfg.t_out {
        return Err(Error::Config(format!(
            "model t_out {} disagrees with config t_out {}",
            dims.t_out, cfg.t_out
        )));
    }
    let spans = chronological_split(dataset.t(), &cfg.split, cfg.t_in, cfg.t_out)?;
    let scaler = Scaler::fit(dataset, &spans.train)?;
    let train_windows = make_windows(dataset, &scaler, &spans.train, cfg.t_in, cfg.t_out)?;
    let val_windows = make_windows(dataset, &scaler, &spans.val, cfg.t_in, cfg.t_out)?;
    let gi = GraphIndex::build(graph)?;
    let n_pop = dataset.populations();
    let ctx = ForwardCtx {
        graph: &gi,
        scaler: &scaler,
        n_pop: &n_pop,
    };

    let mut weights = init_weights(dims, cfg.seed)?;
    let mut adam = Adam::new(
        cfg.learning_rate,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
        &weights,
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_mae: Vec::with_capacity(cfg.epochs),
        wall_time_s: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_weights = weights.clone();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let (loss, mut grads) =
                loss_and_grads(dims, &weights, &cfg.ablation, &ctx, &train_windows[idx])?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss became non-finite ({loss}) at epoch {epoch}"
                )));
            }
            // A finite loss does not guarantee finite gradients (clamps can
            // zero a poisoned value while its factors still back-propagate).
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Training(format!(
                    "gradient became non-finite at epoch {epoch}"
                )));
            }
            if let Some(bound) = cfg.grad_clip {
                clip_gradients(&mut grads, bound);
            }
            adam.step(&mut weights, &grads)?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / train_windows.len() as f64;
        let val_mae = forecast_mae(dims, &weights, &cfg.ablation, &ctx, &val_windows)?;
        if !val_mae.is_finite() {
            return Err(Error::Training(format!(
                "validation error became non-finite at epoch {epoch}"
            )));
        }
        if val_mae < best_val {
            best_val = val_mae;
            history.best_epoch = epoch;
            best_weights = weights.clone();
        }
        history.train_loss.push(train_loss);
        history.val_mae.push(val_mae);
        history.wall_time_s.push(started.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}, val MAE {val_mae:.3}{}",
            if history.best_epoch == epoch { " (best)" } else { "" }
        );
    }

    Ok(TrainOutcome {
        weights: best_weights,
        final_weights: weights,
        history,
        scaler,
        spans,
    })
}
