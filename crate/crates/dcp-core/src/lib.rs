//! Training large-vocabulary embedding classifiers with a fixed-capacity
//! dynamic class pool (DCP) in place of the fully connected classifier.
//!
//! The pool stores K recent gallery features per resident identity and evicts
//! the oldest residents FIFO as new identity batches arrive, so classifier
//! state and per-step compute are independent of the total identity count.
//! Batches come from dual data loaders (instance-based and identity-based),
//! features from twin MLP embedding nets: a gradient-trained probe net and a
//! momentum-synchronized gallery net that populates the pool.
//!
//! The crate also ships the full-softmax and masked partial-softmax baselines,
//! a synthetic hypersphere dataset generator, verification metrics, and a
//! benchmark harness measuring classifier-state bytes and steps per second.

pub mod class_pool;
pub mod embed_net;
pub mod error;
pub mod eval_bench;
pub mod loaders;
pub mod losses;
pub mod mat;
pub mod rng;
pub mod synth_data;
pub mod trainer;

pub(crate) mod binio;

pub use error::{Error, Result};
pub use mat::Mat;
pub use rng::Rng;
