//! Noise mechanisms and the inherent-privacy accountant for collapsed Gibbs
//! sampling. All losses are in nats.

use std::collections::BTreeMap;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("Laplace scale must be positive and finite, got {0}")]
    LaplaceScale(f64),

    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),

    #[error("flip probability must lie in (0, 1], got {0}")]
    FlipProbability(f64),

    #[error("{0}")]
    Domain(String),
}

/// One draw from Laplace(0, b) by inverse CDF on an open-interval uniform.
pub fn laplace_sample<R: Rng + ?Sized>(b: f64, rng: &mut R) -> Result<f64, PrivacyError> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(PrivacyError::LaplaceScale(b));
    }
    Ok(laplace_unchecked(b, rng))
}

#[inline]
pub(crate) fn laplace_unchecked<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    let centered = u - 0.5;
    -b * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// Laplace perturbation of a topic-word count matrix. Replacing one word moves
/// two cells by one each, so the L1 sensitivity is 2 and b = 2/ε_L.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceMech {
    scale: f64,
    epsilon: f64,
}

impl LaplaceMech {
    pub fn for_count_matrix(epsilon: f64) -> Result<Self, PrivacyError> {
        Self::with_sensitivity(epsilon, 2.0)
    }

    pub fn with_sensitivity(epsilon: f64, sensitivity: f64) -> Result<Self, PrivacyError> {
        if !(epsilon > 0.0) || epsilon.is_nan() {
            return Err(PrivacyError::Epsilon(epsilon));
        }
        Ok(Self {
            scale: sensitivity / epsilon,
            epsilon,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `None` when ε is infinite and the mechanism adds nothing.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        (self.scale > 0.0).then(|| laplace_unchecked(self.scale, rng))
    }
}

/// Bit-level randomized response: keep with probability 1−f, otherwise
/// replace by a fair coin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RRMech {
    f: f64,
}

impl RRMech {
    pub fn new(f: f64) -> Result<Self, PrivacyError> {
        if !(f > 0.0 && f <= 1.0) {
            return Err(PrivacyError::FlipProbability(f));
        }
        Ok(Self { f })
    }

    /// f = 0: bits pass through untouched and ε is infinite. Only reachable
    /// through an explicit no-privacy override.
    pub fn non_private() -> Self {
        Self { f: 0.0 }
    }

    /// The flip probability whose per-word loss is `epsilon`.
    pub fn from_epsilon_word(epsilon: f64) -> Result<Self, PrivacyError> {
        if !(epsilon > 0.0) || epsilon.is_nan() {
            return Err(PrivacyError::Epsilon(epsilon));
        }
        Self::new(2.0 / (1.0 + epsilon.exp()))
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    /// ln((1 − f/2) / (f/2)).
    pub fn epsilon_word(&self) -> f64 {
        ((1.0 - self.f / 2.0) / (self.f / 2.0)).ln()
    }

    /// Sequential composition over all V bits of a document.
    pub fn epsilon_doc(&self, v: usize) -> f64 {
        v as f64 * self.epsilon_word()
    }

    #[inline]
    pub fn flip_bit<R: Rng + ?Sized>(&self, bit: bool, rng: &mut R) -> bool {
        let u: f64 = rng.random();
        if u < self.f / 2.0 {
            true
        } else if u < self.f {
            false
        } else {
            bit
        }
    }

    pub fn flip<R: Rng + ?Sized>(&self, bits: &[bool], rng: &mut R) -> Vec<bool> {
        bits.iter().map(|&b| self.flip_bit(b, rng)).collect()
    }
}

pub fn rr_flip<R: Rng + ?Sized>(bits: &[bool], f: f64, rng: &mut R) -> Result<Vec<bool>, PrivacyError> {
    Ok(RRMech::new(f)?.flip(bits, rng))
}

fn check_beta(beta: f64) -> Result<(), PrivacyError> {
    if beta > 0.0 {
        Ok(())
    } else {
        Err(PrivacyError::Domain(format!("beta must be positive, got {beta}")))
    }
}

/// 2·ln(max/β + 1): loss on the replaced word when no topic-word count
/// exceeds `max_count`.
fn replaced_word_bound(max_count: f64, beta: f64) -> f64 {
    2.0 * (max_count / beta).ln_1p()
}

/// Loss of one sampling step on the replaced word, from the per-topic pairs
/// (n_k^{t'}, n_k^t): 2·max_k |ln((n_k^{t'}+β)/(n_k^t+β))|.
pub fn inherent_eps_replaced(pairs: &[(u64, u64)], beta: f64) -> Result<f64, PrivacyError> {
    check_beta(beta)?;
    Ok(pairs
        .iter()
        .map(|&(replacing, replaced)| ((replacing as f64 + beta) / (replaced as f64 + beta)).ln().abs())
        .fold(0.0, f64::max)
        * 2.0)
}

/// Loss of one sampling step on a related word: 2·ln(1 + 1/β).
pub fn inherent_eps_related(beta: f64) -> Result<f64, PrivacyError> {
    check_beta(beta)?;
    Ok(2.0 * (1.0 / beta).ln_1p())
}

/// Per-iteration bound over the replaced word and all related words:
/// 2·[ln(max n_k^{t'}/β + 1) + (max n_{t'} + n_t − 1)·ln(1 + 1/β)].
///
/// The corpus maxima are supplied by the caller.
pub fn inherent_eps_iteration(
    max_topic_word_count: u64,
    max_replacing_word_total: u64,
    replaced_word_total: u64,
    beta: f64,
) -> Result<f64, PrivacyError> {
    check_beta(beta)?;
    if replaced_word_total == 0 {
        return Err(PrivacyError::Domain("the replaced word occurs at least once".into()));
    }
    let related = (max_replacing_word_total + replaced_word_total - 1) as f64;
    Ok(replaced_word_bound(max_topic_word_count as f64, beta) + related * inherent_eps_related(beta)?)
}

/// Composition over iterations: the worst word's summed loss. Rows are words,
/// columns iterations.
pub fn inherent_eps_total(per_word_losses: &[Vec<f64>]) -> Result<f64, PrivacyError> {
    let mut worst = 0.0f64;
    for row in per_word_losses {
        if let Some(x) = row.iter().find(|x| !(**x >= 0.0)) {
            return Err(PrivacyError::Domain(format!("negative privacy loss {x}")));
        }
        worst = worst.max(row.iter().sum());
    }
    Ok(worst)
}

/// Inherent loss per iteration under numerator clipping at C: 2·ln(C/β + 1).
pub fn clipped_inherent_eps(clip: f64, beta: f64) -> Result<f64, PrivacyError> {
    check_beta(beta)?;
    if !(clip >= 0.0) {
        return Err(PrivacyError::Domain(format!("clip bound must be nonnegative, got {clip}")));
    }
    Ok(replaced_word_bound(clip, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    /// Loss charged to added noise (Laplace, or the one-shot local release).
    pub eps_l: f64,
    /// Inherent loss of the sampled topics.
    pub eps_i: f64,
}

impl IterationLoss {
    pub fn total(&self) -> f64 {
        self.eps_l + self.eps_i
    }
}

/// Privacy accounting emitted by every trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mechanism: String,
    pub params: BTreeMap<String, f64>,
    pub per_iteration: Vec<IterationLoss>,
    pub total_epsilon: f64,
}

impl PrivacyReport {
    /// `iterations` identical losses composed sequentially; the total is
    /// computed as T·(ε_L + ε_I) rather than by repeated addition.
    pub fn repeated(mechanism: &str, loss: IterationLoss, iterations: usize) -> Self {
        Self {
            mechanism: mechanism.to_string(),
            params: BTreeMap::new(),
            per_iteration: vec![loss; iterations],
            total_epsilon: iterations as f64 * (loss.eps_l + loss.eps_i),
        }
    }

    pub fn from_iterations(mechanism: &str, per_iteration: Vec<IterationLoss>) -> Self {
        let total_epsilon = per_iteration.iter().map(IterationLoss::total).sum();
        Self {
            mechanism: mechanism.to_string(),
            params: BTreeMap::new(),
            per_iteration,
            total_epsilon,
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    /// Σ over per-iteration losses.
    pub fn composed_total(&self) -> f64 {
        self.per_iteration.iter().map(IterationLoss::total).sum()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}
