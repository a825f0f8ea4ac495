//! Collapsed Gibbs sampling LDA under differential privacy.
//!
//! Three training regimes are provided on top of a shared sampler:
//!
//! - [`hdp`]: hybrid central DP. Per-iteration Laplace noise on the released
//!   topic-word counts plus clipping of the sampling numerators, which bounds
//!   the privacy loss of the sampled topics themselves. The CDP-LDA and
//!   CDP-LDA+ count-perturbation baselines live next to it.
//! - [`lplda`]: local DP. Clients randomize a binary presence vector per
//!   document; the server debiases column counts and rebuilds a corpus.
//! - [`online`]: mini-batch training with evolving topic-word priors and a
//!   Gaussian shrinkage denoiser for the per-batch reconstruction.
//!
//! [`privacy`] holds the mechanisms and the inherent-privacy accountant,
//! [`attack`] the topic-based inference attack and [`eval`] perplexity and
//! the experiment sweeps.

pub mod attack;
pub mod batch_io;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod hdp;
pub mod lplda;
pub mod model;
pub mod online;
pub mod privacy;
pub mod rng;
pub mod sampler;

pub use corpus::{BinaryDoc, Corpus, Document, Vocabulary};
pub use error::{Error, Result};
pub use model::TopicModel;
pub use privacy::PrivacyReport;
pub use sampler::SamplerState;

/// Defaults used throughout the experiments: 50 topics, α = 1, β = 0.01.
pub mod defaults {
    pub const TOPICS: usize = 50;
    pub const ALPHA: f64 = 1.0;
    pub const BETA: f64 = 0.01;
    pub const ITERATIONS: usize = 100;
    pub const FOLD_IN_SWEEPS: usize = 20;
}
