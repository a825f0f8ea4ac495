//! Collapsed Gibbs sampling for LDA.
//!
//! Tokens are visited doc-major, token-minor. Each visit removes the token's
//! current assignment from the counts, draws a new topic from
//!
//! ```text
//! p_k ∝ (n_k^t + β_kt) / Σ_t (n_k^t + β_kt) · (n_m^k + α) / Σ_k (n_m^k + α)
//! ```
//!
//! and adds it back. The topic-word prior is either a scalar β or, for online
//! training, β·1 plus an accumulated nonnegative matrix.

use rand::Rng;

use crate::corpus::{Corpus, Document};
use crate::error::{config, Error, Result};
use crate::model::TopicModel;
use crate::privacy::{inherent_eps_iteration, IterationLoss, PrivacyReport};
use crate::rng::{self, StreamRng};

/// Topic-word prior β^l = β·1 + extra.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicWordPrior {
    base: f64,
    k: usize,
    v: usize,
    extra: Option<Vec<f64>>,
    row_sums: Vec<f64>,
}

impl TopicWordPrior {
    pub fn symmetric(beta: f64, k: usize, v: usize) -> Self {
        Self {
            base: beta,
            k,
            v,
            extra: None,
            row_sums: vec![v as f64 * beta; k],
        }
    }

    pub fn with_extra(beta: f64, k: usize, v: usize, extra: Vec<f64>) -> Result<Self> {
        if extra.len() != k * v {
            return Err(Error::Dimension(format!("prior matrix needs {} entries, got {}", k * v, extra.len())));
        }
        if extra.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(config("prior matrix entries must be finite and nonnegative"));
        }
        let mut prior = Self::symmetric(beta, k, v);
        prior.extra = Some(extra);
        prior.refresh_row_sums();
        Ok(prior)
    }

    fn refresh_row_sums(&mut self) {
        let vbeta = self.v as f64 * self.base;
        match &self.extra {
            None => self.row_sums.iter_mut().for_each(|s| *s = vbeta),
            Some(extra) => {
                for (s, row) in self.row_sums.iter_mut().zip(extra.chunks_exact(self.v)) {
                    *s = vbeta + row.iter().sum::<f64>();
                }
            }
        }
    }

    /// extra ← extra + λ·counts.
    pub fn add_scaled_counts(&mut self, lambda: f64, counts: &[u32]) -> Result<()> {
        if counts.len() != self.k * self.v {
            return Err(Error::Dimension(format!(
                "count matrix needs {} entries, got {}",
                self.k * self.v,
                counts.len()
            )));
        }
        let extra = self.extra.get_or_insert_with(|| vec![0.0; counts.len()]);
        for (e, &c) in extra.iter_mut().zip(counts) {
            *e += lambda * c as f64;
        }
        self.refresh_row_sums();
        Ok(())
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn num_topics(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    #[inline]
    pub fn entry(&self, k: usize, t: usize) -> f64 {
        match &self.extra {
            None => self.base,
            Some(extra) => self.base + extra[k * self.v + t],
        }
    }

    #[inline]
    pub fn row_sum(&self, k: usize) -> f64 {
        self.row_sums[k]
    }

    pub fn is_symmetric(&self) -> bool {
        self.extra.is_none()
    }

    /// The full K×V prior matrix.
    pub fn dense(&self) -> Vec<f64> {
        (0..self.k)
            .flat_map(|k| (0..self.v).map(move |t| (k, t)))
            .map(|(k, t)| self.entry(k, t))
            .collect()
    }
}

/// Additive perturbations applied to the counts when computing sampling
/// weights. The exact counts themselves are never modified.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Perturbation<'a> {
    /// K×V offsets added to n_k^t.
    pub topic_word: Option<&'a [f64]>,
    /// Row sums of `topic_word`, added to n_k.
    pub topic_word_rows: Option<&'a [f64]>,
    /// M×K offsets added to n_m^k.
    pub doc_topic: Option<&'a [f64]>,
    /// Numerator clip bound C applied before adding β.
    pub clip: Option<f64>,
}

impl Perturbation<'_> {
    fn is_noisy(&self) -> bool {
        self.topic_word.is_some() || self.doc_topic.is_some()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    /// Tokens whose weights all collapsed to zero and were sampled uniformly.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    k: usize,
    v: usize,
    alpha: f64,
    prior: TopicWordPrior,
    docs: Vec<Vec<u32>>,
    z: Vec<Vec<u16>>,
    n_kt: Vec<u32>,
    n_mk: Vec<u32>,
    n_k: Vec<u32>,
}

/// Uniformly random initial assignments with a scalar prior.
pub fn init_state(corpus: &Corpus, k: usize, alpha: f64, beta: f64, seed: u64) -> Result<SamplerState> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(config(format!("beta must be positive, got {beta}")));
    }
    init_state_with_prior(corpus, k, alpha, TopicWordPrior::symmetric(beta, k, corpus.vocab_size()), seed)
}

pub fn init_state_with_prior(
    corpus: &Corpus,
    k: usize,
    alpha: f64,
    prior: TopicWordPrior,
    seed: u64,
) -> Result<SamplerState> {
    SamplerState::from_documents(corpus.documents(), corpus.vocab_size(), k, alpha, prior, seed)
}

impl SamplerState {
    pub fn from_documents(
        documents: &[Document],
        v: usize,
        k: usize,
        alpha: f64,
        prior: TopicWordPrior,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || k > u16::MAX as usize {
            return Err(config(format!("topic count must be in 1..=65535, got {k}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(config(format!("alpha must be positive, got {alpha}")));
        }
        if !(prior.base > 0.0 && prior.base.is_finite()) {
            return Err(config(format!("beta must be positive, got {}", prior.base)));
        }
        if prior.k != k || prior.v != v {
            return Err(Error::Dimension(format!(
                "prior is {}x{}, sampler is {k}x{v}",
                prior.k, prior.v
            )));
        }
        let mut rng = rng::stream(seed, "sampler.init");
        let mut state = Self {
            k,
            v,
            alpha,
            prior,
            docs: documents.iter().map(|d| d.tokens.clone()).collect(),
            z: Vec::with_capacity(documents.len()),
            n_kt: vec![0; k * v],
            n_mk: vec![0; documents.len() * k],
            n_k: vec![0; k],
        };
        for m in 0..state.docs.len() {
            let zs: Vec<u16> = (0..state.docs[m].len()).map(|_| rng.random_range(0..k) as u16).collect();
            for (i, &topic) in zs.iter().enumerate() {
                let t = state.docs[m][i] as usize;
                if t >= v {
                    return Err(Error::Dimension(format!("token {t} outside vocabulary of size {v}")));
                }
                state.increment(m, t, topic as usize);
            }
            state.z.push(zs);
        }
        Ok(state)
    }

    pub fn num_topics(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn prior(&self) -> &TopicWordPrior {
        &self.prior
    }

    pub fn doc_tokens(&self, m: usize) -> &[u32] {
        &self.docs[m]
    }

    pub fn assignments(&self, m: usize) -> &[u16] {
        &self.z[m]
    }

    pub fn topic(&self, m: usize, i: usize) -> usize {
        self.z[m][i] as usize
    }

    /// K×V topic-word counts, row-major.
    pub fn topic_word_counts(&self) -> &[u32] {
        &self.n_kt
    }

    /// M×K document-topic counts, row-major.
    pub fn doc_topic_counts(&self) -> &[u32] {
        &self.n_mk
    }

    pub fn topic_totals(&self) -> &[u32] {
        &self.n_k
    }

    pub fn max_topic_word_count(&self) -> u32 {
        self.n_kt.iter().copied().max().unwrap_or(0)
    }

    /// Occurrences of each word across all documents.
    pub fn word_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.v];
        for d in &self.docs {
            for &t in d {
                totals[t as usize] += 1;
            }
        }
        totals
    }

    pub fn n_kt(&self, k: usize, t: usize) -> u32 {
        self.n_kt[k * self.v + t]
    }

    pub fn n_mk(&self, m: usize, k: usize) -> u32 {
        self.n_mk[m * self.k + k]
    }

    #[inline]
    fn increment(&mut self, m: usize, t: usize, k: usize) {
        self.n_kt[k * self.v + t] += 1;
        self.n_mk[m * self.k + k] += 1;
        self.n_k[k] += 1;
    }

    #[inline]
    fn decrement(&mut self, m: usize, t: usize, k: usize) {
        self.n_kt[k * self.v + t] -= 1;
        self.n_mk[m * self.k + k] -= 1;
        self.n_k[k] -= 1;
    }

    /// Removes token `i` of document `m` from the counts and returns its old
    /// topic. Must be paired with [`assign`](Self::assign).
    pub fn unassign(&mut self, m: usize, i: usize) -> usize {
        let t = self.docs[m][i] as usize;
        let k = self.z[m][i] as usize;
        self.decrement(m, t, k);
        k
    }

    pub fn assign(&mut self, m: usize, i: usize, k: usize) {
        let t = self.docs[m][i] as usize;
        self.z[m][i] = k as u16;
        self.increment(m, t, k);
    }

    /// Normalized sampling distribution for word `t` in document `m`, with the
    /// current token already removed from the counts.
    pub fn conditional_distribution(&self, m: usize, t: usize) -> Result<Vec<f64>> {
        conditional_with_prior(self, &self.prior, m, t)
    }

    /// Expected topic-word distribution given the current assignments.
    pub fn estimate_phi(&self) -> TopicModel {
        estimate_with_prior(self, &self.prior)
    }

    pub fn replace_prior(&mut self, prior: TopicWordPrior) -> Result<()> {
        if prior.k != self.k || prior.v != self.v {
            return Err(Error::Dimension("prior shape does not match sampler".into()));
        }
        self.prior = prior;
        Ok(())
    }

    /// One full pass over every token.
    pub fn sweep(&mut self, rng: &mut StreamRng) -> SweepStats {
        self.sweep_perturbed(rng, Perturbation::default())
    }

    pub(crate) fn sweep_perturbed(&mut self, rng: &mut StreamRng, noise: Perturbation<'_>) -> SweepStats {
        let k_topics = self.k;
        let noisy = noise.is_noisy();
        let mut inv_den: Vec<f64> = (0..k_topics).map(|k| 1.0 / self.denominator(k, &noise)).collect();
        let mut weights = vec![0.0f64; k_topics];
        let mut stats = SweepStats::default();

        for m in 0..self.docs.len() {
            for i in 0..self.docs[m].len() {
                let t = self.docs[m][i] as usize;
                let old = self.z[m][i] as usize;
                self.decrement(m, t, old);
                inv_den[old] = 1.0 / self.denominator(old, &noise);

                let mut total = 0.0;
                for (k, w) in weights.iter_mut().enumerate() {
                    let beta_kt = self.prior.entry(k, t);
                    let mut tw = self.n_kt[k * self.v + t] as f64;
                    if let Some(off) = noise.topic_word {
                        tw += off[k * self.v + t];
                    }
                    if let Some(c) = noise.clip {
                        tw = tw.min(c);
                    }
                    tw += beta_kt;
                    let mut dt = self.n_mk[m * k_topics + k] as f64;
                    if let Some(off) = noise.doc_topic {
                        dt += off[m * k_topics + k];
                    }
                    dt += self.alpha;
                    if noisy {
                        tw = tw.max(beta_kt / 2.0);
                        dt = dt.max(self.alpha / 2.0);
                    }
                    let den = inv_den[k];
                    let mass = if den > 0.0 { tw * den * dt } else { 0.0 };
                    total += mass;
                    *w = total;
                }

                let new = if total > 0.0 && total.is_finite() {
                    let u = rng.random::<f64>() * total;
                    weights.iter().position(|&c| u < c).unwrap_or_else(|| {
                        // Rounding at the top end: take the last topic with mass.
                        (0..k_topics).rev().find(|&k| k == 0 || weights[k] > weights[k - 1]).unwrap_or(0)
                    })
                } else {
                    stats.degenerate += 1;
                    rng.random_range(0..k_topics)
                };
                self.z[m][i] = new as u16;
                self.increment(m, t, new);
                inv_den[new] = 1.0 / self.denominator(new, &noise);
            }
        }
        stats
    }

    /// Σ_t (n_k^t + offsets + β_kt), or a nonpositive value when perturbation
    /// drives the row mass to zero.
    #[inline]
    fn denominator(&self, k: usize, noise: &Perturbation<'_>) -> f64 {
        let mut n = self.n_k[k] as f64;
        if let Some(rows) = noise.topic_word_rows {
            n += rows[k];
        }
        let den = n + self.prior.row_sum(k);
        if den > 0.0 {
            den
        } else {
            f64::INFINITY
        }
    }
}

/// The sampling conditional with an arbitrary prior matrix, normalized over topics.
pub(crate) fn conditional_with_prior(
    state: &SamplerState,
    prior: &TopicWordPrior,
    m: usize,
    t: usize,
) -> Result<Vec<f64>> {
    if prior.k != state.k || prior.v != state.v {
        return Err(Error::Dimension("prior shape does not match sampler".into()));
    }
    let k_topics = state.k;
    let doc_total: f64 = (0..k_topics).map(|k| state.n_mk(m, k) as f64 + state.alpha).sum();
    let mut p: Vec<f64> = (0..k_topics)
        .map(|k| {
            let word = (state.n_kt(k, t) as f64 + prior.entry(k, t)) / (state.n_k[k] as f64 + prior.row_sum(k));
            let doc = (state.n_mk(m, k) as f64 + state.alpha) / doc_total;
            word * doc
        })
        .collect();
    let total: f64 = p.iter().sum();
    if !(total > 0.0 && total.is_finite()) || p.iter().any(|x| *x < 0.0) {
        return Err(Error::Degenerate);
    }
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

pub(crate) fn estimate_with_prior(state: &SamplerState, prior: &TopicWordPrior) -> TopicModel {
    let v = state.v;
    let phi: Vec<f64> = (0..state.k)
        .flat_map(|k| {
            let den = state.n_k[k] as f64 + prior.row_sum(k);
            (0..v).map(move |t| (k, t, den))
        })
        .map(|(k, t, den)| (state.n_kt(k, t) as f64 + prior.entry(k, t)) / den)
        .collect();
    TopicModel::from_weights(state.k, v, phi).expect("posterior mean rows are positive")
}

pub fn estimate_phi(state: &SamplerState) -> TopicModel {
    state.estimate_phi()
}

/// Infers θ for a held-out document by Gibbs sampling with Φ frozen; θ is
/// read from the final sweep's counts.
pub fn fold_in_theta(model: &TopicModel, doc: &Document, alpha: f64, n_sweeps: usize, seed: u64) -> Vec<f64> {
    let k_topics = model.num_topics();
    let n = doc.tokens.len();
    let mut rng = rng::stream(seed, "sampler.fold_in");
    let mut counts = vec![0u32; k_topics];
    let mut z: Vec<usize> = (0..n).map(|_| rng.random_range(0..k_topics)).collect();
    for &k in &z {
        counts[k] += 1;
    }
    let mut cumulative = vec![0.0f64; k_topics];
    for _ in 0..n_sweeps {
        for (i, &t) in doc.tokens.iter().enumerate() {
            counts[z[i]] -= 1;
            let mut total = 0.0;
            for (k, c) in cumulative.iter_mut().enumerate() {
                total += model.get(k, t as usize) * (counts[k] as f64 + alpha);
                *c = total;
            }
            let u = rng.random::<f64>() * total;
            let k = cumulative.iter().position(|&c| u < c).unwrap_or(k_topics - 1);
            z[i] = k;
            counts[k] += 1;
        }
    }
    let den = n as f64 + k_topics as f64 * alpha;
    counts.iter().map(|&c| (c as f64 + alpha) / den).collect()
}

/// Output of a plain collapsed Gibbs run.
#[derive(Debug, Clone)]
pub struct CgsOutput {
    pub state: SamplerState,
    pub model: TopicModel,
    pub report: PrivacyReport,
}

/// Plain CGS for `iterations` sweeps.
///
/// The report charges each iteration its inherent loss, taking the most
/// frequent word as both the replaced and the replacing word and the largest
/// topic-word count at the start of the iteration.
pub fn train(corpus: &Corpus, k: usize, alpha: f64, beta: f64, iterations: usize, seed: u64) -> Result<CgsOutput> {
    let state = init_state(corpus, k, alpha, beta, seed)?;
    train_from_state(state, iterations, seed)
}

pub fn train_from_state(mut state: SamplerState, iterations: usize, seed: u64) -> Result<CgsOutput> {
    let mut rng = rng::stream(seed, "sampler.sweep");
    let mut max_counts = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        max_counts.push(state.max_topic_word_count());
        state.sweep(&mut rng);
    }
    let model = state.estimate_phi();
    let report = cgs_report(&state, &max_counts)?;
    Ok(CgsOutput { state, model, report })
}

/// Inherent-loss report for plain CGS given the largest topic-word count at
/// the start of each iteration.
pub(crate) fn cgs_report(state: &SamplerState, max_counts: &[u32]) -> Result<PrivacyReport> {
    let beta = state.prior.base();
    let max_word_total = state.word_totals().into_iter().max().unwrap_or(0);
    let losses = max_counts
        .iter()
        .map(|&max_kt| {
            let eps_i = if max_word_total > 0 {
                inherent_eps_iteration(max_kt as u64, max_word_total, max_word_total, beta)?
            } else {
                0.0
            };
            Ok(IterationLoss { eps_l: 0.0, eps_i })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrivacyReport::from_iterations("cgs", losses)
        .with_param("beta", beta)
        .with_param("alpha", state.alpha)
        .with_param("iterations", max_counts.len() as f64))
}
