//! Epidemic forecasting over a metapopulation patch graph.
//!
//! The crate couples a mechanistic metapopulation SIR model with a recurrent
//! graph-attention network: a GRU embeds each patch's recent case history, a
//! two-layer multi-head GAT mixes embeddings across gravity-model edges, small
//! generator heads turn the embeddings into time-varying epidemiological
//! rates, and the SIR step driven by those rates feeds back into the hidden
//! state. Training minimizes a hybrid absolute-error loss over both the
//! network forecast and the mechanistic rollout.
//!
//! Modules:
//! - [`graph`]: gravity-model construction of the patch graph
//! - [`dynamics`]: metapopulation SIR step, rollouts, baseline fitting
//! - [`data`]: case-count ingestion, scaling, chronological windowing
//! - [`tape`]: reverse-mode autodiff over matrix ops
//! - [`model`]: the recurrent GRU + GAT forecaster and its ablations
//! - [`train`]: Adam training loop with the hybrid loss
//! - [`metrics`]: forecast accuracy metrics and evaluation driver
//! - [`artifacts`]: checkpoint / report / series serialization
//! - [`synthetic`]: synthetic outbreak generator for tests and demos

pub mod artifacts;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
