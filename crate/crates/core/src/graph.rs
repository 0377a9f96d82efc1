//! Spatial patch graph built with the gravity model.
//!
//! Patches (states, prefectures) become nodes; pairwise edge weights follow
//! the gravity rule `p_i^a1 * p_j^a2 * exp(-d_ij / r)`, each row keeps its
//! `top_e` strongest candidates, and the adjacency is symmetrized so the
//! metapopulation dynamics conserve population exactly.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres, used by the haversine distance.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Static description of one spatial patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patch_id: String,
    pub name: String,
    /// Census population, persons. Must be positive.
    pub population: f64,
    /// Latitude in degrees, [-90, 90].
    pub latitude: f64,
    /// Longitude in degrees, [-180, 180].
    pub longitude: f64,
}

/// Hyperparameters of the gravity edge-weight rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravityHyper {
    /// Exponent on the source population.
    pub alpha1: f64,
    /// Exponent on the destination population.
    pub alpha2: f64,
    /// Distance scale in km of the exponential decay. Must be positive.
    pub r: f64,
    /// Edges kept per patch before symmetrization. In `[1, n_patches)`.
    pub top_e: usize,
}

impl Default for GravityHyper {
    fn default() -> Self {
        // r has no universal default; callers usually override it with the
        // median pairwise distance of their dataset (see `median_distance`).
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            r: 1000.0,
            top_e: 3,
        }
    }
}

/// Sparse symmetric patch graph with gravity edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGraph {
    pub n: usize,
    /// Symmetric 0/1 adjacency with zero diagonal.
    pub adjacency: Array2<f64>,
    /// Gravity weights for all ordered pairs (i != j), kept dense for
    /// inspection; only entries with `adjacency == 1` are edges.
    pub weights: Array2<f64>,
    /// Sorted neighbor list per patch.
    pub neighbor_sets: Vec<Vec<usize>>,
    /// `neighbor_sets[i].len()` cached.
    pub degree: Vec<usize>,
}

/// Great-circle distance in km between two patches (haversine formula).
///
/// Symmetric, non-negative, zero only for identical coordinates.
pub fn haversine_distance(a: &PatchMeta, b: &PatchMeta) -> Result<f64> {
    for p in [a, b] {
        if !(-90.0..=90.0).contains(&p.latitude) {
            return Err(Error::Input(format!(
                "patch {}: latitude {} outside [-90, 90]",
                p.patch_id, p.latitude
            )));
        }
        if !(-180.0..=180.0).contains(&p.longitude) {
            return Err(Error::Input(format!(
                "patch {}: longitude {} outside [-180, 180]",
                p.patch_id, p.longitude
            )));
        }
    }
    let lat1 = a.latitude.to_radians();
    let lat2 = b.latitude.to_radians();
    let dlat = (b.latitude - a.latitude).to_radians();
    let dlon = (b.longitude - a.longitude).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// Gravity edge weight `p_i^a1 * p_j^a2 * exp(-d_ij / r)`.
pub fn gravity_weight(p_i: f64, p_j: f64, d_ij: f64, h: &GravityHyper) -> Result<f64> {
    if p_i <= 0.0 || p_j <= 0.0 {
        return Err(Error::Input(format!(
            "populations must be positive, got ({p_i}, {p_j})"
        )));
    }
    if d_ij < 0.0 {
        return Err(Error::Input(format!("distance must be non-negative, got {d_ij}")));
    }
    if h.r <= 0.0 {
        return Err(Error::Config(format!("gravity scale r must be positive, got {}", h.r)));
    }
    let w = p_i.powf(h.alpha1) * p_j.powf(h.alpha2) * (-d_ij / h.r).exp();
    if !w.is_finite() {
        return Err(Error::Numeric(format!(
            "gravity weight overflowed for populations ({p_i}, {p_j})"
        )));
    }
    Ok(w)
}

/// All pairwise haversine distances, km. Zero diagonal, symmetric.
pub fn distance_matrix(metas: &[PatchMeta]) -> Result<Array2<f64>> {
    let n = metas.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = haversine_distance(&metas[i], &metas[j])?;
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    Ok(d)
}

/// Median of the off-diagonal pairwise distances; the default gravity scale.
pub fn median_distance(distances: &Array2<f64>) -> f64 {
    let n = distances.nrows();
    let mut vals: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            vals.push(distances[[i, j]]);
        }
    }
    if vals.is_empty() {
        return 1.0;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = vals.len();
    if m % 2 == 1 {
        vals[m / 2]
    } else {
        0.5 * (vals[m / 2 - 1] + vals[m / 2])
    }
}

fn validate_distance_override(d: &Array2<f64>, n: usize) -> Result<()> {
    if d.nrows() != n || d.ncols() != n {
        return Err(Error::Input(format!(
            "distance override is {}x{}, expected {n}x{n}",
            d.nrows(),
            d.ncols()
        )));
    }
    for i in 0..n {
        if d[[i, i]] != 0.0 {
            return Err(Error::Input(format!("distance override has nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let v = d[[i, j]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!(
                    "distance override entry ({i}, {j}) = {v} is not a valid distance"
                )));
            }
            if (v - d[[j, i]]).abs() > 1e-9 * v.abs().max(1.0) {
                return Err(Error::Input(format!(
                    "distance override is asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Build the sparse symmetric patch graph.
///
/// Computes all pairwise gravity weights, keeps each patch's `top_e`
/// strongest edges (ties broken toward the lower patch index), then
/// symmetrizes with `A <- max(A, A^T)`.
pub fn build_graph(
    metas: &[PatchMeta],
    h: &GravityHyper,
    distance_override: Option<&Array2<f64>>,
) -> Result<PatchGraph> {
    let n = metas.len();
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 patches, got {n}")));
    }
    if h.top_e == 0 || h.top_e >= n {
        return Err(Error::Config(format!(
            "top_e must be in [1, {}), got {}",
            n, h.top_e
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for m in metas {
        if !seen.insert(m.patch_id.as_str()) {
            return Err(Error::Input(format!("duplicate patch_id {:?}", m.patch_id)));
        }
        if m.population <= 0.0 {
            return Err(Error::Input(format!(
                "patch {} has non-positive population {}",
                m.patch_id, m.population
            )));
        }
    }

    let distances = match distance_override {
        Some(d) => {
            validate_distance_override(d, n)?;
            d.clone()
        }
        None => distance_matrix(metas)?,
    };

    let mut weights = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                weights[[i, j]] =
                    gravity_weight(metas[i].population, metas[j].population, distances[[i, j]], h)?;
            }
        }
    }

    let mut adjacency = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        // Stable sort by descending weight; equal weights fall back to the
        // lower index, which makes the construction deterministic.
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            weights[[i, b]]
                .partial_cmp(&weights[[i, a]])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(h.top_e) {
            adjacency[[i, j]] = 1.0;
        }
    }
    // Symmetrize so inter-patch flows balance exactly.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = adjacency[[i, j]].max(adjacency[[j, i]]);
            adjacency[[i, j]] = v;
            adjacency[[j, i]] = v;
        }
    }

    let neighbor_sets: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| adjacency[[i, j]] == 1.0).collect())
        .collect();
    let degree: Vec<usize> = neighbor_sets.iter().map(Vec::len).collect();
    if let Some(i) = degree.iter().position(|&d| d == 0) {
        return Err(Error::Graph(format!(
            "patch {} ({}) has no neighbors after construction",
            i, metas[i].patch_id
        )));
    }

    Ok(PatchGraph {
        n,
        adjacency,
        weights,
        neighbor_sets,
        degree,
    })
}

/// Probability that an individual leaving patch `j` arrives at any one of
/// its neighbors: `1 / |N_j|`, identical for every recipient.
pub fn mobility_probability(g: &PatchGraph, j: usize) -> Result<f64> {
    if j >= g.n {
        return Err(Error::Input(format!("patch index {j} out of range (n={})", g.n)));
    }
    if g.degree[j] == 0 {
        return Err(Error::Graph(format!("patch {j} is isolated")));
    }
    Ok(1.0 / g.degree[j] as f64)
}

impl PatchGraph {
    /// True if `adjacency` is symmetric with zero diagonal.
    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.n {
            if self.adjacency[[i, i]] != 0.0 {
                return false;
            }
            for j in (i + 1)..self.n {
                if self.adjacency[[i, j]] != self.adjacency[[j, i]] {
                    return false;
                }
            }
        }
        true
    }

    /// Relabel patches by `perm`, where `perm[new_index] = old_index`.
    /// Used by permutation-equivariance checks.
    pub fn permuted(&self, perm: &[usize]) -> PatchGraph {
        let n = self.n;
        assert_eq!(perm.len(), n);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut adjacency = Array2::zeros((n, n));
        let mut weights = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                adjacency[[i, j]] = self.adjacency[[perm[i], perm[j]]];
                weights[[i, j]] = self.weights[[perm[i], perm[j]]];
            }
        }
        let neighbor_sets: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut ns: Vec<usize> =
                    self.neighbor_sets[perm[i]].iter().map(|&j| inv[j]).collect();
                ns.sort_unstable();
                ns
            })
            .collect();
        let degree = neighbor_sets.iter().map(Vec::len).collect();
        PatchGraph {
            n,
            adjacency,
            weights,
            neighbor_sets,
            degree,
        }
    }
}
