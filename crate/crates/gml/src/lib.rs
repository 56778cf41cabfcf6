//! Deterministic desk-scale simulator for gossip mutual learning.
//!
//! Sites train small segmentation models on private, heterogeneous data. In
//! each gossip round one randomly activated sender ships its weights to a
//! random receiver; the receiver co-trains both models on its own data with
//! a Jaccard-distance task loss plus a regional KL alignment loss, keeps the
//! improved local model, and discards the visiting copy. One checkpoint
//! crosses the network per round, a sixth of what federated averaging moves,
//! and the sender's own weights are never mutated in flight.
//!
//! The crate is a library first. Start with the runnable examples:
//!
//! - `gen_data` — synthesize non-IID site datasets and write them to disk
//! - `losses_demo` — evaluate the task and alignment losses on a toy pair
//! - `gradient_check` — confirm analytic gradients against finite differences
//! - `train_gml` — run the gossip protocol end to end and print per-site DSC
//! - `train_fedavg` — the federated-averaging baseline on the same data
//! - `train_individual` — isolated per-site training, the lower baseline
//! - `train_pooled` — one model on the union of all site data, the ceiling
//! - `compare_methods` — run all four methods and tabulate aggregate DSC
//! - `ensemble_eval` — average site models' outputs on held-out sites
//!
//! Each example prints what it does and finishes in seconds. The same
//! functionality is scriptable through the thin `gml` binary (`gen-data`,
//! `run`, `compare` subcommands).
//!
//! Everything is reproducible: all randomness flows from one root seed
//! through labeled streams, reference runs are single-threaded, and reruns
//! with an identical configuration produce byte-identical artifacts.

pub mod baselines;
pub mod config;
pub mod error;
pub mod gossip;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod synth;

pub use error::{GmlError, Result};
pub use grid::{Grid, MaskGrid, ProbabilityGrid};
pub use model::{ArchSpec, ModelWeights, OptKind, OptState};
pub use rng::Rng;
