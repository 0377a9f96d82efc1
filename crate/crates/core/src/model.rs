//! The recurrent forecaster: a GRU embeds each patch's recent history, a
//! two-layer multi-head graph attention network mixes embeddings along the
//! patch graph, generator heads map embeddings to epidemiological rates, and
//! a metapopulation SIR step driven by those rates feeds back into the next
//! hidden state. After the input window, one linear head emits the neural
//! forecast and a fixed-parameter rollout emits the mechanistic forecast.
//!
//! Everything weight-dependent is built on the [`Tape`], so a single
//! backward sweep yields exact gradients for training.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Scaler, WindowSample, CH_ACTIVE, CH_RECOVERED, CH_SUSCEPTIBLE, N_CHANNELS};
use crate::dynamics::{self, CompartmentState, EpiParams};
use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::tape::{NodeId, Tape};

/// Negative-side slope of the attention score activation.
pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

/// Layer widths and head count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input channels per patch per day (active, recovered, susceptible).
    pub c_in: usize,
    /// GRU hidden width.
    pub d_gru: usize,
    /// Attention embedding width.
    pub d_gat: usize,
    /// Attention head count.
    pub heads: usize,
    /// Forecast horizon.
    pub t_out: usize,
}

impl ModelDims {
    pub fn new(d_gru: usize, d_gat: usize, heads: usize, t_out: usize) -> Result<Self> {
        let dims = Self {
            c_in: N_CHANNELS,
            d_gru,
            d_gat,
            heads,
            t_out,
        };
        dims.validate()?;
        Ok(dims)
    }

    /// The published defaults: d_gru 64, d_gat 32, 2 heads.
    pub fn defaults(t_out: usize) -> Result<Self> {
        Self::new(64, 32, 2, t_out)
    }

    pub fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("c_in", self.c_in),
            ("d_gru", self.d_gru),
            ("d_gat", self.d_gat),
            ("heads", self.heads),
            ("t_out", self.t_out),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("dimension {label} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which pieces of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationMode {
    /// Fuse the one-step physical forecast into the hidden state.
    pub use_phy_in_model: bool,
    /// Include the physical rollout term in the training loss.
    pub use_phy_in_loss: bool,
    /// Metapopulation (graph) dynamics vs per-patch SIR.
    pub use_mobility: bool,
    /// Two generator heads (intra from temporal, inter from spatial) vs one.
    pub use_mpg: bool,
}

impl AblationMode {
    pub fn full() -> Self {
        Self {
            use_phy_in_model: true,
            use_phy_in_loss: true,
            use_mobility: true,
            use_mpg: true,
        }
    }
}

impl Default for AblationMode {
    fn default() -> Self {
        Self::full()
    }
}

/// An affine layer `y = x . w + b` with a row-vector bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruWeights {
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array2<f64>,
    pub w_h: Array2<f64>,
    pub u_h: Array2<f64>,
    pub b_h: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    /// Shared projection of the incoming embedding.
    pub w_temp: Array2<f64>,
    /// Attention vector over the concatenated (center, neighbor) projection.
    pub w_att: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
}

/// All trainable arrays.
///
/// `gen_single` is the one-head generator used when `use_mpg` is off; it is
/// always allocated so weight shapes are identical across ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub gru: GruWeights,
    pub gat: [GatLayer; 2],
    /// d_gru -> 2: per-patch (beta, gamma) from the temporal embedding.
    pub gen_intra: Affine,
    /// d_gat -> 3: per-patch (d_s, d_i, d_r) from the spatial embedding.
    pub gen_inter: Affine,
    /// d_gat -> 5: all five rates at once (single-generator ablation).
    pub gen_single: Affine,
    /// 3 -> d_gat: embeds the normalized one-step physical forecast.
    pub fuse_in: Affine,
    /// 2*d_gat -> d_gru: projects [spatial || physical] to the hidden state.
    pub fuse_out: Affine,
    /// d_gru -> t_out: the neural forecast head.
    pub head_pred: Affine,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Draw all matrices uniform in +-sqrt(6/(fan_in+fan_out)); biases zero.
/// Fully determined by the seed.
pub fn init_weights(dims: &ModelDims, seed: u64) -> Result<ModelWeights> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, dg, da, k, t_out) = (dims.c_in, dims.d_gru, dims.d_gat, dims.heads, dims.t_out);
    let affine = |rng: &mut ChaCha8Rng, d_in: usize, d_out: usize| Affine {
        w: xavier(rng, d_in, d_out),
        b: Array2::zeros((1, d_out)),
    };
    let gru = GruWeights {
        w_z: xavier(&mut rng, c, dg),
        u_z: xavier(&mut rng, dg, dg),
        b_z: Array2::zeros((1, dg)),
        w_r: xavier(&mut rng, c, dg),
        u_r: xavier(&mut rng, dg, dg),
        b_r: Array2::zeros((1, dg)),
        w_h: xavier(&mut rng, c, dg),
        u_h: xavier(&mut rng, dg, dg),
        b_h: Array2::zeros((1, dg)),
    };
    let gat_layer = |rng: &mut ChaCha8Rng, d_in: usize| GatLayer {
        heads: (0..k)
            .map(|_| GatHead {
                w_temp: xavier(rng, d_in, da),
                w_att: xavier(rng, 2 * da, 1),
            })
            .collect(),
    };
    let gat = [gat_layer(&mut rng, dg), gat_layer(&mut rng, da)];
    Ok(ModelWeights {
        gru,
        gat,
        gen_intra: affine(&mut rng, dg, 2),
        gen_inter: affine(&mut rng, da, 3),
        gen_single: affine(&mut rng, da, 5),
        fuse_in: affine(&mut rng, N_CHANNELS, da),
        fuse_out: affine(&mut rng, 2 * da, dg),
        head_pred: affine(&mut rng, dg, t_out),
    })
}

impl ModelWeights {
    /// All trainable arrays in a fixed canonical order (optimizer state,
    /// gradient extraction, and finite-difference checks all share it).
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut p = vec![
            &self.gru.w_z,
            &self.gru.u_z,
            &self.gru.b_z,
            &self.gru.w_r,
            &self.gru.u_r,
            &self.gru.b_r,
            &self.gru.w_h,
            &self.gru.u_h,
            &self.gru.b_h,
        ];
        for layer in &self.gat {
            for head in &layer.heads {
                p.push(&head.w_temp);
                p.push(&head.w_att);
            }
        }
        for aff in [
            &self.gen_intra,
            &self.gen_inter,
            &self.gen_single,
            &self.fuse_in,
            &self.fuse_out,
            &self.head_pred,
        ] {
            p.push(&aff.w);
            p.push(&aff.b);
        }
        p
    }

    /// Mutable view in the same canonical order as [`Self::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p: Vec<&mut Array2<f64>> = vec![
            &mut self.gru.w_z,
            &mut self.gru.u_z,
            &mut self.gru.b_z,
            &mut self.gru.w_r,
            &mut self.gru.u_r,
            &mut self.gru.b_r,
            &mut self.gru.w_h,
            &mut self.gru.u_h,
            &mut self.gru.b_h,
        ];
        for layer in &mut self.gat {
            for head in &mut layer.heads {
                p.push(&mut head.w_temp);
                p.push(&mut head.w_att);
            }
        }
        for aff in [
            &mut self.gen_intra,
            &mut self.gen_inter,
            &mut self.gen_single,
            &mut self.fuse_in,
            &mut self.fuse_out,
            &mut self.head_pred,
        ] {
            p.push(&mut aff.w);
            p.push(&mut aff.b);
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let (c, dg, da, t_out) = (dims.c_in, dims.d_gru, dims.d_gat, dims.t_out);
        let checks: Vec<(&str, &Array2<f64>, (usize, usize))> = vec![
            ("w_z", &self.gru.w_z, (c, dg)),
            ("u_z", &self.gru.u_z, (dg, dg)),
            ("b_z", &self.gru.b_z, (1, dg)),
            ("w_r", &self.gru.w_r, (c, dg)),
            ("u_r", &self.gru.u_r, (dg, dg)),
            ("b_r", &self.gru.b_r, (1, dg)),
            ("w_h", &self.gru.w_h, (c, dg)),
            ("u_h", &self.gru.u_h, (dg, dg)),
            ("b_h", &self.gru.b_h, (1, dg)),
            ("gen_intra.w", &self.gen_intra.w, (dg, 2)),
            ("gen_inter.w", &self.gen_inter.w, (da, 3)),
            ("gen_single.w", &self.gen_single.w, (da, 5)),
            ("fuse_in.w", &self.fuse_in.w, (N_CHANNELS, da)),
            ("fuse_out.w", &self.fuse_out.w, (2 * da, dg)),
            ("head_pred.w", &self.head_pred.w, (dg, t_out)),
        ];
        for (label, arr, want) in checks {
            if arr.dim() != want {
                return Err(Error::Config(format!(
                    "weight {label} has shape {:?}, expected {want:?}",
                    arr.dim()
                )));
            }
        }
        for (li, layer) in self.gat.iter().enumerate() {
            if layer.heads.len() != dims.heads {
                return Err(Error::Config(format!(
                    "attention layer {li} has {} heads, expected {}",
                    layer.heads.len(),
                    dims.heads
                )));
            }
            let d_in = if li == 0 { dg } else { da };
            for (hi, head) in layer.heads.iter().enumerate() {
                if head.w_temp.dim() != (d_in, da) || head.w_att.dim() != (2 * da, 1) {
                    return Err(Error::Config(format!(
                        "attention layer {li} head {hi} has inconsistent shapes"
                    )));
                }
            }
        }
        for p in self.params() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite weight entry".into()));
            }
        }
        Ok(())
    }
}

/// Edge list of a [`PatchGraph`] grouped by destination, for attention and
/// mobility flows: edge r is (dst `edge_dst[r]`, src `edge_src[r]`), and
/// `segments[i]` is the contiguous row range of edges into patch i.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphIndex {
    pub n: usize,
    pub edge_dst: Vec<usize>,
    pub edge_src: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    /// Column of 1/degree per patch (the even-split mobility weights).
    pub inv_deg: Array2<f64>,
}

impl GraphIndex {
    pub fn build(g: &PatchGraph) -> Result<Self> {
        let n = g.n;
        let mut edge_dst = Vec::new();
        let mut edge_src = Vec::new();
        let mut segments = Vec::with_capacity(n);
        for i in 0..n {
            if g.neighbor_sets[i].is_empty() {
                return Err(Error::Graph(format!("patch {i} has no neighbors")));
            }
            let start = edge_dst.len();
            for &j in &g.neighbor_sets[i] {
                edge_dst.push(i);
                edge_src.push(j);
            }
            segments.push((start, edge_dst.len()));
        }
        let inv_deg = Array2::from_shape_fn((n, 1), |(i, _)| 1.0 / g.degree[i] as f64);
        Ok(Self {
            n,
            edge_dst,
            edge_src,
            segments,
            inv_deg,
        })
    }
}

/// Tape node ids of one staged affine layer.
#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub b_z: NodeId,
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub b_r: NodeId,
    pub w_h: NodeId,
    pub u_h: NodeId,
    pub b_h: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct GatHeadIds {
    pub w_temp: NodeId,
    pub w_att: NodeId,
}

#[derive(Debug, Clone)]
pub struct GatLayerIds {
    pub heads: Vec<GatHeadIds>,
}

/// Tape leaves of every weight, mirroring [`ModelWeights`].
#[derive(Debug, Clone)]
pub struct WeightIds {
    pub gru: GruIds,
    pub gat: [GatLayerIds; 2],
    pub gen_intra: AffineIds,
    pub gen_inter: AffineIds,
    pub gen_single: AffineIds,
    pub fuse_in: AffineIds,
    pub fuse_out: AffineIds,
    pub head_pred: AffineIds,
}

impl WeightIds {
    /// Leaf ids in the canonical parameter order of [`ModelWeights::params`].
    pub fn ordered(&self) -> Vec<NodeId> {
        let g = &self.gru;
        let mut ids = vec![g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h];
        for layer in &self.gat {
            for head in &layer.heads {
                ids.push(head.w_temp);
                ids.push(head.w_att);
            }
        }
        for aff in [
            &self.gen_intra,
            &self.gen_inter,
            &self.gen_single,
            &self.fuse_in,
            &self.fuse_out,
            &self.head_pred,
        ] {
            ids.push(aff.w);
            ids.push(aff.b);
        }
        ids
    }
}

/// Put every weight on the tape as a leaf (canonical order).
pub fn stage_weights(tape: &mut Tape, w: &ModelWeights) -> WeightIds {
    let gru = GruIds {
        w_z: tape.leaf(w.gru.w_z.clone()),
        u_z: tape.leaf(w.gru.u_z.clone()),
        b_z: tape.leaf(w.gru.b_z.clone()),
        w_r: tape.leaf(w.gru.w_r.clone()),
        u_r: tape.leaf(w.gru.u_r.clone()),
        b_r: tape.leaf(w.gru.b_r.clone()),
        w_h: tape.leaf(w.gru.w_h.clone()),
        u_h: tape.leaf(w.gru.u_h.clone()),
        b_h: tape.leaf(w.gru.b_h.clone()),
    };
    let gat = [0, 1].map(|li: usize| GatLayerIds {
        heads: w.gat[li]
            .heads
            .iter()
            .map(|h| GatHeadIds {
                w_temp: tape.leaf(h.w_temp.clone()),
                w_att: tape.leaf(h.w_att.clone()),
            })
            .collect(),
    });
    let mut affine = |a: &Affine| AffineIds {
        w: tape.leaf(a.w.clone()),
        b: tape.leaf(a.b.clone()),
    };
    WeightIds {
        gru,
        gat,
        gen_intra: affine(&w.gen_intra),
        gen_inter: affine(&w.gen_inter),
        gen_single: affine(&w.gen_single),
        fuse_in: affine(&w.fuse_in),
        fuse_out: affine(&w.fuse_out),
        head_pred: affine(&w.head_pred),
    }
}

fn tape_affine(tape: &mut Tape, ids: AffineIds, x: NodeId) -> NodeId {
    let xw = tape.matmul(x, ids.w);
    tape.add_row(xw, ids.b)
}

/// One GRU step: update gate Z, reset gate R, candidate state, blend.
pub fn tape_gru_step(tape: &mut Tape, ids: &GruIds, x_t: NodeId, h_prev: NodeId) -> NodeId {
    let gate = |tape: &mut Tape, w, u, b, h| {
        let xw = tape.matmul(x_t, w);
        let hu = tape.matmul(h, u);
        let pre = tape.add(xw, hu);
        let pre = tape.add_row(pre, b);
        tape.sigmoid(pre)
    };
    let z = gate(tape, ids.w_z, ids.u_z, ids.b_z, h_prev);
    let r = gate(tape, ids.w_r, ids.u_r, ids.b_r, h_prev);
    let rh = tape.mul(r, h_prev);
    let xw = tape.matmul(x_t, ids.w_h);
    let hu = tape.matmul(rh, ids.u_h);
    let pre = tape.add(xw, hu);
    let pre = tape.add_row(pre, ids.b_h);
    let h_tilde = tape.tanh(pre);
    // H = Z * h_prev + (1 - Z) * H~
    let dim = tape.value(z).raw_dim();
    let one_minus_z = tape.affine_const(
        z,
        Array2::from_elem(dim.clone(), -1.0),
        Array2::from_elem(dim, 1.0),
    );
    let zh = tape.mul(z, h_prev);
    let zt = tape.mul(one_minus_z, h_tilde);
    tape.add(zh, zt)
}

/// One attention layer. Per head: project, score every (center, neighbor)
/// edge with a leaky-relu of the learned attention vector, softmax within
/// each center's neighborhood, and average the weighted messages over heads.
///
/// Returns the output and each head's per-edge attention column.
pub fn tape_gat_layer(
    tape: &mut Tape,
    layer: &GatLayerIds,
    gi: &GraphIndex,
    h_in: NodeId,
) -> (NodeId, Vec<NodeId>) {
    let mut head_outs = Vec::with_capacity(layer.heads.len());
    let mut attentions = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let proj = tape.matmul(h_in, head.w_temp);
        let h_dst = tape.gather_rows(proj, gi.edge_dst.clone());
        let h_src = tape.gather_rows(proj, gi.edge_src.clone());
        let cat = tape.concat_cols(h_dst, h_src);
        let score = tape.matmul(cat, head.w_att);
        let act = tape.leaky_relu(score, ATTENTION_LEAKY_SLOPE);
        let att = tape.segment_softmax(act, gi.segments.clone());
        let msg = tape.mul_col(h_src, att);
        let agg = tape.scatter_add_rows(msg, gi.edge_dst.clone(), gi.n);
        head_outs.push(agg);
        attentions.push(att);
    }
    let mut sum = head_outs[0];
    for &h in &head_outs[1..] {
        sum = tape.add(sum, h);
    }
    let out = tape.scale(sum, 1.0 / layer.heads.len() as f64);
    (out, attentions)
}

/// Two stacked attention layers with an ELU between them, linear output.
pub fn tape_spatial_embed(
    tape: &mut Tape,
    gat: &[GatLayerIds; 2],
    gi: &GraphIndex,
    h_temp: NodeId,
) -> (NodeId, Vec<Vec<NodeId>>) {
    let (l1, att1) = tape_gat_layer(tape, &gat[0], gi, h_temp);
    let mid = tape.elu(l1);
    let (l2, att2) = tape_gat_layer(tape, &gat[1], gi, mid);
    (l2, vec![att1, att2])
}

/// Per-patch rate columns on the tape, each N x 1 in (0, 1).
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub beta: NodeId,
    pub gamma: NodeId,
    pub d_s: NodeId,
    pub d_i: NodeId,
    pub d_r: NodeId,
}

/// Map embeddings to sigmoid-squashed rates. With `use_mpg`, (beta, gamma)
/// come from the temporal embedding and the mobility rates from the spatial
/// one; otherwise one head on the spatial embedding produces all five.
pub fn tape_generate_params(
    tape: &mut Tape,
    ids: &WeightIds,
    h_temp: NodeId,
    h_st: NodeId,
    use_mpg: bool,
) -> ParamNodes {
    if use_mpg {
        let intra_pre = tape_affine(tape, ids.gen_intra, h_temp);
        let intra = tape.sigmoid(intra_pre);
        let inter_pre = tape_affine(tape, ids.gen_inter, h_st);
        let inter = tape.sigmoid(inter_pre);
        ParamNodes {
            beta: tape.slice_cols(intra, 0, 1),
            gamma: tape.slice_cols(intra, 1, 2),
            d_s: tape.slice_cols(inter, 0, 1),
            d_i: tape.slice_cols(inter, 1, 2),
            d_r: tape.slice_cols(inter, 2, 3),
        }
    } else {
        let pre = tape_affine(tape, ids.gen_single, h_st);
        let all = tape.sigmoid(pre);
        ParamNodes {
            beta: tape.slice_cols(all, 0, 1),
            gamma: tape.slice_cols(all, 1, 2),
            d_s: tape.slice_cols(all, 2, 3),
            d_i: tape.slice_cols(all, 3, 4),
            d_r: tape.slice_cols(all, 4, 5),
        }
    }
}

/// Raw compartment columns (N x 1 each) on the tape.
#[derive(Debug, Clone, Copy)]
pub struct StateNodes {
    pub s: NodeId,
    pub i: NodeId,
    pub r: NodeId,
}

/// Constant helpers for the on-tape dynamics.
#[derive(Debug, Clone, Copy)]
pub struct PhysConsts {
    /// N x 1 column of 1/census.
    pub inv_n: NodeId,
    /// N x 1 column of 1/degree (only needed with mobility).
    pub inv_deg: Option<NodeId>,
}

/// One differentiable dynamics step on raw counts, clamped at zero.
/// `graph = None` drops the mobility terms (per-patch SIR).
pub fn tape_phys_step(
    tape: &mut Tape,
    p: &ParamNodes,
    x: &StateNodes,
    consts: &PhysConsts,
    graph: Option<&GraphIndex>,
) -> StateNodes {
    let bi = tape.mul(p.beta, x.i);
    let bis = tape.mul(bi, x.s);
    let infections = tape.mul(bis, consts.inv_n);
    let recoveries = tape.mul(p.gamma, x.i);

    let neg_inf = tape.scale(infections, -1.0);
    let inf_minus_rec = tape.sub(infections, recoveries);

    let mut ds = neg_inf;
    let mut di = inf_minus_rec;
    let mut dr = recoveries;

    if let Some(gi) = graph {
        let inv_deg = consts.inv_deg.expect("mobility needs inv_deg");
        let flow = |tape: &mut Tape, rate: NodeId, comp: NodeId, delta: NodeId| {
            let out = tape.mul(rate, comp);
            let per_nbr = tape.mul(out, inv_deg);
            let leaving = tape.gather_rows(per_nbr, gi.edge_src.clone());
            let inflow = tape.scatter_add_rows(leaving, gi.edge_dst.clone(), gi.n);
            let d1 = tape.sub(delta, out);
            tape.add(d1, inflow)
        };
        ds = flow(tape, p.d_s, x.s, ds);
        di = flow(tape, p.d_i, x.i, di);
        dr = flow(tape, p.d_r, x.r, dr);
    }

    let step = |tape: &mut Tape, comp, delta| {
        let next = tape.add(comp, delta);
        tape.relu(next)
    };
    StateNodes {
        s: step(tape, x.s, ds),
        i: step(tape, x.i, di),
        r: step(tape, x.r, dr),
    }
}

/// Blend the spatial embedding with the (already normalized) one-step
/// physical forecast: `H_t = FC([H_st || FC(x_phy)])`. With the physical
/// branch disabled, its half of the concatenation is zero.
pub fn tape_fuse(
    tape: &mut Tape,
    ids: &WeightIds,
    h_st: NodeId,
    x_phy_norm: Option<NodeId>,
    n: usize,
    d_gat: usize,
) -> NodeId {
    let h_phy = match x_phy_norm {
        Some(x) => tape_affine(tape, ids.fuse_in, x),
        None => tape.leaf(Array2::zeros((n, d_gat))),
    };
    let cat = tape.concat_cols(h_st, h_phy);
    tape_affine(tape, ids.fuse_out, cat)
}

/// Affine coefficients that normalize a raw N x 3 snapshot (columns in
/// dataset channel order); degenerate channels map to 0.
fn snapshot_norm_consts(scaler: &Scaler, n: usize) -> (Array2<f64>, Array2<f64>) {
    let mut a = Array2::zeros((n, N_CHANNELS));
    let mut b = Array2::zeros((n, N_CHANNELS));
    for k in 0..n {
        for c in 0..N_CHANNELS {
            let lo = scaler.min[[k, c]];
            let hi = scaler.max[[k, c]];
            if hi > lo {
                a[[k, c]] = 1.0 / (hi - lo);
                b[[k, c]] = -lo / (hi - lo);
            }
        }
    }
    (a, b)
}

/// Same, for per-patch active-case values broadcast over `cols` columns.
fn active_norm_consts(scaler: &Scaler, n: usize, cols: usize) -> (Array2<f64>, Array2<f64>) {
    let mut a = Array2::zeros((n, cols));
    let mut b = Array2::zeros((n, cols));
    for k in 0..n {
        let lo = scaler.min[[k, CH_ACTIVE]];
        let hi = scaler.max[[k, CH_ACTIVE]];
        if hi > lo {
            for c in 0..cols {
                a[[k, c]] = 1.0 / (hi - lo);
                b[[k, c]] = -lo / (hi - lo);
            }
        }
    }
    (a, b)
}

/// Static context shared by every forward pass of a run.
pub struct ForwardCtx<'a> {
    pub graph: &'a GraphIndex,
    pub scaler: &'a Scaler,
    /// Census populations in patch order.
    pub n_pop: &'a Array1<f64>,
}

/// Everything produced by one forward pass over a window.
pub struct ForwardPass {
    pub tape: Tape,
    pub weight_ids: WeightIds,
    /// Neural forecast, N x t_out, normalized.
    pub y_st: NodeId,
    /// Physical rollout forecast on the tape when it participates in the
    /// loss or fusion; absent only in the fully ablated mode.
    pub y_phy_node: Option<NodeId>,
    /// Physical rollout forecast values, N x t_out, normalized (always
    /// populated; computed off-tape in the fully ablated mode).
    pub y_phy: Array2<f64>,
    /// Rates generated at the final input step.
    pub params_last: EpiParams,
}

fn col_to_array1(m: &Array2<f64>) -> Array1<f64> {
    m.column(0).to_owned()
}

/// Run the recurrent cell over the input window (teacher forcing: each step
/// consumes the observed counts) and emit both forecasts.
pub fn forward(
    dims: &ModelDims,
    weights: &ModelWeights,
    mode: &AblationMode,
    ctx: &ForwardCtx,
    window: &WindowSample,
) -> Result<ForwardPass> {
    dims.validate()?;
    weights.validate(dims)?;
    let n = ctx.graph.n;
    let (wn, t_in, wc) = window.input.dim();
    if wn != n || wc != N_CHANNELS {
        return Err(Error::Input(format!(
            "window is {wn} patches x {wc} channels; graph expects {n} x {N_CHANNELS}"
        )));
    }
    if window.target.dim() != (n, dims.t_out) {
        return Err(Error::Input(format!(
            "window target {:?} does not match t_out {}",
            window.target.dim(),
            dims.t_out
        )));
    }
    if ctx.n_pop.len() != n {
        return Err(Error::Input(format!(
            "n_pop has {} entries, expected {n}",
            ctx.n_pop.len()
        )));
    }

    let mut tape = Tape::new();
    let weight_ids = stage_weights(&mut tape, weights);

    let inv_n = tape.leaf(Array2::from_shape_fn((n, 1), |(k, _)| 1.0 / ctx.n_pop[k]));
    let inv_deg = if mode.use_mobility {
        Some(tape.leaf(ctx.graph.inv_deg.clone()))
    } else {
        None
    };
    let consts = PhysConsts { inv_n, inv_deg };
    let (snap_a, snap_b) = snapshot_norm_consts(ctx.scaler, n);
    let phys_graph = if mode.use_mobility { Some(ctx.graph) } else { None };

    let mut h = tape.leaf(Array2::zeros((n, dims.d_gru)));
    let mut params: Option<ParamNodes> = None;
    for t in 0..t_in {
        let x_norm = window.input.slice(s![.., t, ..]).to_owned();
        let x_norm_id = tape.leaf(x_norm.clone());
        let h_temp = tape_gru_step(&mut tape, &weight_ids.gru, x_norm_id, h);
        let (h_st, _att) = tape_spatial_embed(&mut tape, &weight_ids.gat, ctx.graph, h_temp);
        let p = tape_generate_params(&mut tape, &weight_ids, h_temp, h_st, mode.use_mpg);
        params = Some(p);

        if mode.use_phy_in_model {
            // Teacher forcing: the dynamics consume the observed raw counts,
            // reconstructed from the normalized window.
            let raw = Array2::from_shape_fn((n, N_CHANNELS), |(k, c)| {
                ctx.scaler.denormalize_value(k, c, x_norm[[k, c]])
            });
            let raw_id = tape.leaf(raw);
            let state = StateNodes {
                i: tape.slice_cols(raw_id, CH_ACTIVE, CH_ACTIVE + 1),
                r: tape.slice_cols(raw_id, CH_RECOVERED, CH_RECOVERED + 1),
                s: tape.slice_cols(raw_id, CH_SUSCEPTIBLE, CH_SUSCEPTIBLE + 1),
            };
            let next = tape_phys_step(&mut tape, &p, &state, &consts, phys_graph);
            let ir = tape.concat_cols(next.i, next.r);
            let x_phy_raw = tape.concat_cols(ir, next.s);
            let x_phy_norm = tape.affine_const(x_phy_raw, snap_a.clone(), snap_b.clone());
            h = tape_fuse(&mut tape, &weight_ids, h_st, Some(x_phy_norm), n, dims.d_gat);
        } else {
            h = tape_fuse(&mut tape, &weight_ids, h_st, None, n, dims.d_gat);
        }
    }
    let params = params.expect("t_in >= 1");
    let y_st = tape_affine(&mut tape, weight_ids.head_pred, h);

    let params_last = EpiParams {
        beta: col_to_array1(tape.value(params.beta)),
        gamma: col_to_array1(tape.value(params.gamma)),
        d_s: col_to_array1(tape.value(params.d_s)),
        d_i: col_to_array1(tape.value(params.d_i)),
        d_r: col_to_array1(tape.value(params.d_r)),
    };

    let on_tape_phy = mode.use_phy_in_model || mode.use_phy_in_loss;
    let (y_phy_node, y_phy) = if on_tape_phy {
        // Multi-step rollout from the exact raw last-day counts, rates frozen
        // at the final step's values.
        let raw_id = tape.leaf(window.raw_last_day.clone());
        let mut state = StateNodes {
            i: tape.slice_cols(raw_id, CH_ACTIVE, CH_ACTIVE + 1),
            r: tape.slice_cols(raw_id, CH_RECOVERED, CH_RECOVERED + 1),
            s: tape.slice_cols(raw_id, CH_SUSCEPTIBLE, CH_SUSCEPTIBLE + 1),
        };
        let mut infected_cols = Vec::with_capacity(dims.t_out);
        for _ in 0..dims.t_out {
            state = tape_phys_step(&mut tape, &params, &state, &consts, phys_graph);
            infected_cols.push(state.i);
        }
        let mut raw_traj = infected_cols[0];
        for &c in &infected_cols[1..] {
            raw_traj = tape.concat_cols(raw_traj, c);
        }
        let (act_a, act_b) = active_norm_consts(ctx.scaler, n, dims.t_out);
        let y = tape.affine_const(raw_traj, act_a, act_b);
        (Some(y), tape.value(y).clone())
    } else {
        // Fully ablated mode: the neural path must not touch the dynamics,
        // so the reporting rollout runs outside the tape.
        let raw = &window.raw_last_day;
        let x0 = CompartmentState::new(
            raw.column(CH_SUSCEPTIBLE).to_owned(),
            raw.column(CH_ACTIVE).to_owned(),
            raw.column(CH_RECOVERED).to_owned(),
            ctx.n_pop.clone(),
        )?;
        let graph_for_report = phys_graph.map(|_| ());
        let ro = match graph_for_report {
            Some(()) => {
                return Err(Error::Internal(
                    "fully ablated mode should not reach the mobility branch".into(),
                ))
            }
            None => dynamics::rollout(&x0, None, &params_last, dims.t_out)?,
        };
        let mut y = Array2::zeros((n, dims.t_out));
        for t in 0..dims.t_out {
            for k in 0..n {
                y[[k, t]] = ctx
                    .scaler
                    .normalize_value(k, CH_ACTIVE, ro.infected[[t, k]]);
            }
        }
        (None, y)
    };

    Ok(ForwardPass {
        tape,
        weight_ids,
        y_st,
        y_phy_node,
        y_phy,
        params_last,
    })
}
