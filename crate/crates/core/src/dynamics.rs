//! Metapopulation SIR dynamics on raw person counts.
//!
//! Daily forward-Euler updates: within a patch the classic SIR terms, across
//! patches symmetric mobility flows where an individual leaving patch `j` is
//! split evenly among j's neighbors. Also hosts the multi-step rollout and a
//! grid-search SIR fit used as a mechanistic forecasting baseline.
//!
//! Everything here operates on raw counts; normalization happens strictly at
//! the network boundary (see the data module).

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PatchGraph;

/// Per-patch compartment counts plus the fixed census population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentState {
    pub s: Array1<f64>,
    pub i: Array1<f64>,
    pub r: Array1<f64>,
    /// Census total per patch; stays fixed even though mobility moves people.
    pub n_pop: Array1<f64>,
}

impl CompartmentState {
    pub fn new(s: Array1<f64>, i: Array1<f64>, r: Array1<f64>, n_pop: Array1<f64>) -> Result<Self> {
        let n = s.len();
        if i.len() != n || r.len() != n || n_pop.len() != n {
            return Err(Error::Input(format!(
                "compartment shape mismatch: S={}, I={}, R={}, N={}",
                s.len(),
                i.len(),
                r.len(),
                n_pop.len()
            )));
        }
        for k in 0..n {
            for (label, v) in [("S", s[k]), ("I", i[k]), ("R", r[k])] {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Input(format!("patch {k}: {label} = {v} invalid")));
                }
            }
            if !(n_pop[k] > 0.0) || !n_pop[k].is_finite() {
                return Err(Error::Input(format!(
                    "patch {k}: population {} must be positive",
                    n_pop[k]
                )));
            }
        }
        Ok(Self { s, i, r, n_pop })
    }

    pub fn n(&self) -> usize {
        self.s.len()
    }

    /// Total people across all compartments and patches (fixed sum order).
    pub fn total(&self) -> f64 {
        let mut t = 0.0;
        for k in 0..self.n() {
            t += self.s[k] + self.i[k] + self.r[k];
        }
        t
    }

    /// Relabel patches by `perm`, where `perm[new_index] = old_index`.
    pub fn permuted(&self, perm: &[usize]) -> CompartmentState {
        let pick = |a: &Array1<f64>| Array1::from_iter(perm.iter().map(|&old| a[old]));
        CompartmentState {
            s: pick(&self.s),
            i: pick(&self.i),
            r: pick(&self.r),
            n_pop: pick(&self.n_pop),
        }
    }
}

/// Per-patch epidemiological rates, all in [0, 1] per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiParams {
    /// Infection rate β.
    pub beta: Array1<f64>,
    /// Recovery rate γ.
    pub gamma: Array1<f64>,
    /// Mobility rate of susceptible individuals.
    pub d_s: Array1<f64>,
    /// Mobility rate of infected individuals.
    pub d_i: Array1<f64>,
    /// Mobility rate of recovered individuals.
    pub d_r: Array1<f64>,
}

impl EpiParams {
    /// Rates without any inter-patch movement.
    pub fn without_mobility(beta: Array1<f64>, gamma: Array1<f64>) -> Self {
        let n = beta.len();
        Self {
            beta,
            gamma,
            d_s: Array1::zeros(n),
            d_i: Array1::zeros(n),
            d_r: Array1::zeros(n),
        }
    }

    /// The same scalar rates replicated across `n` patches.
    pub fn constant(n: usize, beta: f64, gamma: f64, d_s: f64, d_i: f64, d_r: f64) -> Self {
        Self {
            beta: Array1::from_elem(n, beta),
            gamma: Array1::from_elem(n, gamma),
            d_s: Array1::from_elem(n, d_s),
            d_i: Array1::from_elem(n, d_i),
            d_r: Array1::from_elem(n, d_r),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (label, a) in [
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("d_s", &self.d_s),
            ("d_i", &self.d_i),
            ("d_r", &self.d_r),
        ] {
            if a.len() != n {
                return Err(Error::Input(format!(
                    "param {label} has {} entries, expected {n}",
                    a.len()
                )));
            }
            for (k, &v) in a.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Input(format!(
                        "param {label}[{k}] = {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Signed per-patch daily changes (persons/day).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    pub ds: Array1<f64>,
    pub di: Array1<f64>,
    pub dr: Array1<f64>,
}

fn check_rate_bounds(label: &str, a: &Array1<f64>, n: usize) -> Result<()> {
    if a.len() != n {
        return Err(Error::Input(format!(
            "{label} has {} entries, expected {n}",
            a.len()
        )));
    }
    for (k, &v) in a.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("{label}[{k}] = {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// One day of within-patch SIR dynamics: `dS = -beta*I*S/N`, `dR = gamma*I`,
/// `dI = -(dS + dR)`.
///
/// `dI` is formed from the other two deltas so the per-patch sum cancels
/// exactly in floating point, not just to rounding error.
pub fn sir_step(x: &CompartmentState, beta: &Array1<f64>, gamma: &Array1<f64>) -> Result<StateDelta> {
    let n = x.n();
    check_rate_bounds("beta", beta, n)?;
    check_rate_bounds("gamma", gamma, n)?;
    let mut ds = Array1::zeros(n);
    let mut di = Array1::zeros(n);
    let mut dr = Array1::zeros(n);
    for k in 0..n {
        let infections = beta[k] * x.i[k] * x.s[k] / x.n_pop[k];
        let recoveries = gamma[k] * x.i[k];
        ds[k] = -infections;
        dr[k] = recoveries;
        di[k] = -(ds[k] + dr[k]);
    }
    Ok(StateDelta { ds, di, dr })
}

/// One day of metapopulation SIR dynamics: within-patch SIR plus, for every
/// compartment, an outflow `-D_i * C_i` and an inflow that splits each
/// departing neighbor's flow evenly, `sum_{j in N_i} D_j * C_j / |N_j|`.
///
/// On a symmetric graph the mobility terms cancel globally, so total
/// population is conserved up to rounding.
pub fn mpsir_step(x: &CompartmentState, g: &PatchGraph, p: &EpiParams) -> Result<StateDelta> {
    let n = x.n();
    if g.n != n {
        return Err(Error::Input(format!(
            "graph has {} patches but state has {n}",
            g.n
        )));
    }
    p.validate(n)?;
    if let Some(k) = g.degree.iter().position(|&d| d == 0) {
        return Err(Error::Graph(format!("patch {k} is isolated")));
    }
    let mut d = sir_step(x, &p.beta, &p.gamma)?;
    for (comp, rate, delta) in [
        (&x.s, &p.d_s, &mut d.ds),
        (&x.i, &p.d_i, &mut d.di),
        (&x.r, &p.d_r, &mut d.dr),
    ] {
        // Per-person emigration from j is split evenly among j's neighbors.
        let leaving: Vec<f64> = (0..n).map(|j| rate[j] * comp[j] / g.degree[j] as f64).collect();
        for i in 0..n {
            let mut inflow = 0.0;
            for &j in &g.neighbor_sets[i] {
                inflow += leaving[j];
            }
            delta[i] += inflow - rate[i] * comp[i];
        }
    }
    Ok(d)
}

/// Forward-Euler update with a one-day step; negative compartments are
/// clamped to zero and each clamp is counted.
pub fn apply_step(x: &CompartmentState, d: &StateDelta) -> (CompartmentState, usize) {
    let n = x.n();
    let mut out = x.clone();
    let mut clamps = 0usize;
    for k in 0..n {
        for (comp, delta) in [
            (&mut out.s[k], d.ds[k]),
            (&mut out.i[k], d.di[k]),
            (&mut out.r[k], d.dr[k]),
        ] {
            let v = *comp + delta;
            if v < 0.0 {
                *comp = 0.0;
                clamps += 1;
            } else {
                *comp = v;
            }
        }
    }
    (out, clamps)
}

/// A multi-day trajectory produced by [`rollout`].
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `states[0]` is the initial state; `states[t]` the state after day t.
    pub states: Vec<CompartmentState>,
    /// Infected counts, shape `horizon x n`: row t-1 is `states[t].i`.
    pub infected: Array2<f64>,
    /// Total number of negative-compartment clamps along the trajectory.
    pub clamp_events: usize,
}

/// Roll the dynamics forward `horizon` days with parameters held fixed.
///
/// With a graph present each day is a metapopulation step; with `None` the
/// patches evolve independently (used by the mobility-ablated model and the
/// fitted-SIR baseline).
pub fn rollout(
    x0: &CompartmentState,
    g: Option<&PatchGraph>,
    p: &EpiParams,
    horizon: usize,
) -> Result<Rollout> {
    if horizon == 0 {
        return Err(Error::Input("rollout horizon must be >= 1".into()));
    }
    let n = x0.n();
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(x0.clone());
    let mut infected = Array2::zeros((horizon, n));
    let mut clamp_events = 0usize;
    for t in 0..horizon {
        let cur = &states[t];
        let delta = match g {
            Some(graph) => mpsir_step(cur, graph, p)?,
            None => sir_step(cur, &p.beta, &p.gamma)?,
        };
        let (next, clamps) = apply_step(cur, &delta);
        clamp_events += clamps;
        for k in 0..n {
            infected[[t, k]] = next.i[k];
        }
        states.push(next);
    }
    Ok(Rollout {
        states,
        infected,
        clamp_events,
    })
}

/// Result of fitting scalar SIR rates to one patch's history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirFit {
    pub beta: f64,
    pub gamma: f64,
    /// True when the infected series was identically zero, leaving the rates
    /// unidentifiable; (0, 0) is returned in that case.
    pub degenerate: bool,
}

/// Grid resolution of the baseline fit.
pub const SIR_FIT_GRID_STEP: f64 = 0.001;

/// Fit per-patch SIR rates by least squares on one-step-ahead predictions.
///
/// `s`, `i`, `r` are day-major histories of shape `(t, n)`. For each patch
/// the squared error of the one-day SIR forecast, summed over all three
/// compartments and all transitions, is minimized over the (beta, gamma)
/// grid [0, 1]^2 at resolution 0.001. The objective is a quadratic in
/// (beta, gamma), so its six coefficients are accumulated once per patch and
/// the grid scan evaluates the quadratic directly. Ties resolve to the
/// smaller beta, then the smaller gamma.
pub fn fit_sir_baseline(
    s: &Array2<f64>,
    i: &Array2<f64>,
    r: &Array2<f64>,
    n_pop: &Array1<f64>,
) -> Result<Vec<SirFit>> {
    let (t, n) = s.dim();
    if i.dim() != (t, n) || r.dim() != (t, n) {
        return Err(Error::Input(format!(
            "history shapes differ: S={:?}, I={:?}, R={:?}",
            s.dim(),
            i.dim(),
            r.dim()
        )));
    }
    if n_pop.len() != n {
        return Err(Error::Input(format!(
            "n_pop has {} entries, expected {n}",
            n_pop.len()
        )));
    }
    if t < 3 {
        return Err(Error::Input(format!(
            "need at least 3 time points to fit, got {t}"
        )));
    }
    let steps = (1.0 / SIR_FIT_GRID_STEP).round() as usize;

    let mut fits = Vec::with_capacity(n);
    for k in 0..n {
        if !(n_pop[k] > 0.0) {
            return Err(Error::Input(format!(
                "patch {k}: population {} must be positive",
                n_pop[k]
            )));
        }
        // Residuals of the one-step forecast are linear in (beta, gamma):
        //   S: u + beta*b      with u = S_next - S,   b = S*I/N
        //   I: v - beta*b + gamma*c  with v = I_next - I, c = I
        //   R: w - gamma*c     with w = R_next - R
        // so the summed squared error is
        //   A*beta^2 + B*gamma^2 + C*beta*gamma + D*beta + E*gamma + const.
        let (mut qa, mut qb, mut qc, mut qd, mut qe) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut any_infected = false;
        for step in 0..t - 1 {
            let b = s[[step, k]] * i[[step, k]] / n_pop[k];
            let c = i[[step, k]];
            let u = s[[step + 1, k]] - s[[step, k]];
            let v = i[[step + 1, k]] - i[[step, k]];
            let w = r[[step + 1, k]] - r[[step, k]];
            if c != 0.0 {
                any_infected = true;
            }
            qa += 2.0 * b * b;
            qb += 2.0 * c * c;
            qc += -2.0 * b * c;
            qd += 2.0 * b * (u - v);
            qe += 2.0 * c * (v - w);
        }
        if !any_infected {
            fits.push(SirFit {
                beta: 0.0,
                gamma: 0.0,
                degenerate: true,
            });
            continue;
        }
        let mut best = (f64::INFINITY, 0usize, 0usize);
        for bi in 0..=steps {
            let beta = bi as f64 * SIR_FIT_GRID_STEP;
            for gi in 0..=steps {
                let gamma = gi as f64 * SIR_FIT_GRID_STEP;
                let j = qa * beta * beta
                    + qb * gamma * gamma
                    + qc * beta * gamma
                    + qd * beta
                    + qe * gamma;
                // Strict improvement keeps the first (smallest) grid point on
                // ties; the scan order is beta-major, gamma-minor.
                if j < best.0 {
                    best = (j, bi, gi);
                }
            }
        }
        fits.push(SirFit {
            beta: best.1 as f64 * SIR_FIT_GRID_STEP,
            gamma: best.2 as f64 * SIR_FIT_GRID_STEP,
            degenerate: false,
        });
    }
    Ok(fits)
}
