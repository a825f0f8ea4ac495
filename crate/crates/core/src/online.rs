//! Online LDA over a stream of mini-batches with an evolving topic-word
//! prior, Bayesian denoising of perturbed counts, and the OLP-LDA pipeline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{BinaryDoc, Corpus, Vocabulary};
use crate::error::{config, Error, Result};
use crate::eval::perplexity;
use crate::lplda::{estimate_count, estimator_variance, reconstruct_with_targets, round_target, PerturbedBatch};
use crate::model::TopicModel;
use crate::privacy::{IterationLoss, PrivacyReport, RRMech};
use crate::rng;
use crate::sampler::{self, conditional_with_prior, estimate_with_prior, SamplerState, TopicWordPrior};

/// How strongly the denoiser trusts the prior mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    Omega(f64),
    Sigma2(f64),
}

impl Shrinkage {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Shrinkage::Omega(w) if !(0.0..=1.0).contains(&w) => Err(config(format!("omega must be in [0, 1], got {w}"))),
            Shrinkage::Sigma2(s) if !(s > 0.0 && s.is_finite()) => Err(config(format!("sigma2 must be positive, got {s}"))),
            _ => Ok(()),
        }
    }

    /// ω for a batch of `m` vectors perturbed with `f`.
    pub fn omega(&self, m: u64, f: f64) -> Result<f64> {
        match *self {
            Shrinkage::Omega(w) => Ok(w),
            Shrinkage::Sigma2(s) => omega_from_sigma2(m, f, s),
        }
    }
}

/// ω = Mf(2−f) / (Mf(2−f) + 4σ²(1−f)²).
pub fn omega_from_sigma2(m: u64, f: f64, sigma2: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&f) {
        return Err(config(format!("f must be in [0, 1), got {f}")));
    }
    if !(sigma2 > 0.0) {
        return Err(config(format!("sigma2 must be positive, got {sigma2}")));
    }
    let a = m as f64 * f * (2.0 - f);
    let q = 1.0 - f;
    Ok(a / (a + 4.0 * sigma2 * q * q))
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(config(format!("omega must be in [0, 1], got {omega}")));
    }
    Ok(())
}

/// B(n_t) = ω·μ_t + (1−ω)·(2n_t − fM)/(2(1−f)).
pub fn bayes_denoise(n_t: u64, m: u64, f: f64, mu: f64, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    Ok(omega * mu + (1.0 - omega) * estimate_count(n_t, m, f)?)
}

/// (1−ω)² times the moment-estimator variance.
pub fn bayes_variance(n_true: f64, m: u64, f: f64, omega: f64) -> Result<f64> {
    check_omega(omega)?;
    let q = 1.0 - omega;
    Ok(q * q * estimator_variance(n_true, m, f)?)
}

/// μ^l = (μ^{l−1} + η^{l−1}) / 2 × |D_l| / |D_{l−1}|.
pub fn update_mu_values(mu: &[f64], eta: &[f64], size: usize, prev_size: usize) -> Result<Vec<f64>> {
    if prev_size == 0 {
        return Err(config("previous batch size must be positive"));
    }
    if mu.len() != eta.len() {
        return Err(Error::Dimension("mu and eta lengths differ".into()));
    }
    let scale = size as f64 / prev_size as f64;
    Ok(mu.iter().zip(eta).map(|(m, e)| (m + e) / 2.0 * scale).collect())
}

/// Prior and denoiser state carried between batches.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    prior: TopicWordPrior,
    lambda: f64,
    shrinkage: Shrinkage,
    mu: Option<Vec<f64>>,
    eta: Option<Vec<f64>>,
    l: usize,
    prev_batch_size: Option<usize>,
}

impl OnlineState {
    pub fn new(k: usize, v: usize, beta: f64, lambda: f64, shrinkage: Shrinkage) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(config(format!("beta must be positive, got {beta}")));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(config(format!("lambda must be in [0, 1], got {lambda}")));
        }
        shrinkage.validate()?;
        Ok(Self {
            prior: TopicWordPrior::symmetric(beta, k, v),
            lambda,
            shrinkage,
            mu: None,
            eta: None,
            l: 0,
            prev_batch_size: None,
        })
    }

    pub fn prior(&self) -> &TopicWordPrior {
        &self.prior
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> Option<&[f64]> {
        self.mu.as_deref()
    }

    pub fn eta(&self) -> Option<&[f64]> {
        self.eta.as_deref()
    }

    pub fn batch_index(&self) -> usize {
        self.l
    }

    /// β^l ← β^{l−1} + λ·N^{l−1}.
    pub fn update_beta(&mut self, counts: &[u32]) -> Result<()> {
        self.prior.add_scaled_counts(self.lambda, counts)
    }

    /// Seeds μ⁰ = η⁰ = Σ_k N⁰_{k,t} from the model trained on the prior corpus.
    pub fn init_from_prior(&mut self, counts: &[u32], size: usize) -> Result<()> {
        let v = self.prior.vocab_size();
        if counts.len() != self.prior.num_topics() * v {
            return Err(Error::Dimension("prior count matrix has the wrong shape".into()));
        }
        let mut totals = vec![0.0f64; v];
        for row in counts.chunks_exact(v) {
            for (s, &c) in totals.iter_mut().zip(row) {
                *s += c as f64;
            }
        }
        self.mu = Some(totals.clone());
        self.eta = Some(totals);
        self.prev_batch_size = Some(size);
        Ok(())
    }

    /// Advances μ to a batch of `size` documents. No-op before any prior.
    pub fn update_mu(&mut self, size: usize) -> Result<()> {
        if let (Some(mu), Some(eta), Some(prev)) = (&self.mu, &self.eta, self.prev_batch_size) {
            self.mu = Some(update_mu_values(mu, eta, size, prev)?);
        }
        Ok(())
    }

    /// Per-word reconstruction targets for `batch`, recording η = clamp(B).
    /// Without a prior mean the plain moment estimator is used.
    pub fn denoise_targets(&mut self, batch: &PerturbedBatch) -> Result<Vec<u64>> {
        let m = batch.len() as u64;
        let f = batch.f();
        let counts = batch.column_counts();
        let estimates: Vec<f64> = match &self.mu {
            Some(mu) => {
                let omega = self.shrinkage.omega(m, f)?;
                counts
                    .iter()
                    .zip(mu)
                    .map(|(&n, &mu_t)| bayes_denoise(n, m, f, mu_t, omega))
                    .collect::<Result<_>>()?
            }
            None => counts.iter().map(|&n| estimate_count(n, m, f)).collect::<Result<_>>()?,
        };
        self.eta = Some(estimates.iter().map(|e| e.clamp(0.0, m as f64)).collect());
        Ok(estimates.iter().map(|&e| round_target(e, m)).collect())
    }
}

/// Sampling conditional under the state's matrix prior.
pub fn olda_conditional(state: &OnlineState, sampler: &SamplerState, m: usize, t: usize) -> Result<Vec<f64>> {
    conditional_with_prior(sampler, &state.prior, m, t)
}

/// Posterior-mean Φ under the state's matrix prior.
pub fn olda_estimate(state: &OnlineState, sampler: &SamplerState) -> TopicModel {
    estimate_with_prior(sampler, &state.prior)
}

/// P(X = x | N_t) for x = 0..=M, where X is the sum of Bin(N_t, 1−f/2) and
/// Bin(M−N_t, f/2).
pub fn exact_likelihood(n_true: u64, m: u64, f: f64) -> Vec<f64> {
    let a = binomial_pmf(n_true, 1.0 - f / 2.0);
    let b = binomial_pmf(m - n_true, f / 2.0);
    let mut out = vec![0.0; (m + 1) as usize];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            out[i + j] += pa * pb;
        }
    }
    out
}

fn binomial_pmf(n: u64, p: f64) -> Vec<f64> {
    if p <= 0.0 || p >= 1.0 {
        let mut out = vec![0.0; (n + 1) as usize];
        out[if p >= 1.0 { n as usize } else { 0 }] = 1.0;
        return out;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_choose = 0.0f64;
    (0..=n)
        .map(|k| {
            if k > 0 {
                log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            (log_choose + k as f64 * lp + (n - k) as f64 * lq).exp()
        })
        .collect()
}

/// Gaussian N(Mf/2 + N_t(1−f), σ_p²) evaluated at x = 0..=M, with
/// σ_p² = M(f/2)(1−f/2) and the cross-covariance taken as zero.
pub fn gaussian_likelihood(n_true: u64, m: u64, f: f64) -> Vec<f64> {
    let mf = m as f64 * f;
    let var = m as f64 * (f / 2.0) * (1.0 - f / 2.0);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
    (0..=m)
        .map(|x| {
            let d = 2.0 * x as f64 - mf - 2.0 * n_true as f64 * (1.0 - f);
            norm * (-d * d / (8.0 * var)).exp()
        })
        .collect()
}

/// Total variation between the exact likelihood and its Gaussian
/// approximation over the integer support.
pub fn likelihood_tv(n_true: u64, m: u64, f: f64) -> f64 {
    let exact = exact_likelihood(n_true, m, f);
    let gauss = gaussian_likelihood(n_true, m, f);
    0.5 * exact.iter().zip(&gauss).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlpConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    /// CGS sweeps per batch.
    pub iterations: usize,
    pub lambda: f64,
    pub shrinkage: Shrinkage,
    pub fold_in_sweeps: usize,
}

impl OlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.iterations == 0 {
            return Err(config("topic and iteration counts must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub l: usize,
    pub batch_size: usize,
    pub perplexity: Option<f64>,
    pub epsilon_word: f64,
    pub elapsed_ms: u128,
    pub skipped: bool,
}

impl BatchMetrics {
    pub const CSV_HEADER: &'static str = "l,batch_size,perplexity,epsilon_word,elapsed_ms";

    pub fn csv_row(&self) -> String {
        let ppl = self.perplexity.map(|p| format!("{p:?}")).unwrap_or_default();
        format!("{},{},{},{:?},{}", self.l, self.batch_size, ppl, self.epsilon_word, self.elapsed_ms)
    }
}

#[derive(Debug, Clone)]
pub struct OlpOutput {
    /// Model after each processed batch; skipped batches carry the previous one.
    pub models: Vec<TopicModel>,
    pub metrics: Vec<BatchMetrics>,
    pub state: OnlineState,
    pub report: PrivacyReport,
}

impl OlpOutput {
    /// Running mean of per-batch perplexities: entry l averages batches 1..=l.
    pub fn running_average_perplexity(&self) -> Vec<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        self.metrics
            .iter()
            .map(|m| {
                if let Some(p) = m.perplexity {
                    sum += p;
                    n += 1;
                }
                if n == 0 {
                    f64::NAN
                } else {
                    sum / n as f64
                }
            })
            .collect()
    }

    pub fn write_metrics_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", BatchMetrics::CSV_HEADER)?;
        for m in &self.metrics {
            writeln!(out, "{}", m.csv_row())?;
        }
        Ok(())
    }
}

/// Seed of batch `l` (1-based) in an OLP run.
pub fn batch_seed(seed: u64, l: usize) -> u64 {
    rng::derive_indexed(seed, "olp.batch", l as u64)
}

/// OLP-LDA: optional clean prior corpus, then one perturbed batch at a time.
/// Each batch is denoised, reconstructed, and trained under the evolving
/// prior; `test` (if given) is scored after every batch.
pub fn run_olp(
    prior_corpus: Option<&Corpus>,
    batches: &[PerturbedBatch],
    test: Option<&Corpus>,
    cfg: &OlpConfig,
    seed: u64,
) -> Result<OlpOutput> {
    cfg.validate()?;
    let v = match (prior_corpus, batches.first()) {
        (Some(c), _) => c.vocab_size(),
        (None, Some(b)) => b.vocab_size(),
        (None, None) => return Err(Error::EmptyCorpus),
    };
    if let Some(b) = batches.iter().find(|b| b.vocab_size() != v) {
        return Err(Error::Dimension(format!("batch vocabulary {} differs from {v}", b.vocab_size())));
    }
    let mut state = OnlineState::new(cfg.k, v, cfg.beta, cfg.lambda, cfg.shrinkage)?;
    let mut current: Option<TopicModel> = None;

    if let Some(d0) = prior_corpus {
        if d0.num_docs() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let out = sampler::train(d0, cfg.k, cfg.alpha, cfg.beta, cfg.iterations, rng::derive_seed(seed, "olp.prior"))?;
        state.init_from_prior(out.state.topic_word_counts(), d0.num_docs())?;
        state.update_beta(out.state.topic_word_counts())?;
        current = Some(out.model);
    }

    let mut models = Vec::with_capacity(batches.len());
    let mut metrics = Vec::with_capacity(batches.len());
    let mut max_eps_doc = 0.0f64;
    for (idx, batch) in batches.iter().enumerate() {
        let l = idx + 1;
        let started = Instant::now();
        state.l = l;
        let eps_word = if batch.f() > 0.0 { RRMech::new(batch.f())?.epsilon_word() } else { f64::INFINITY };
        if batch.is_empty() {
            metrics.push(BatchMetrics {
                l,
                batch_size: 0,
                perplexity: None,
                epsilon_word: eps_word,
                elapsed_ms: started.elapsed().as_millis(),
                skipped: true,
            });
            if let Some(m) = &current {
                models.push(m.clone());
            }
            continue;
        }
        if batch.f() >= 1.0 {
            return Err(config("online training needs f < 1"));
        }
        if batch.f() > 0.0 {
            max_eps_doc = max_eps_doc.max(RRMech::new(batch.f())?.epsilon_doc(v));
        } else {
            max_eps_doc = f64::INFINITY;
        }
        let s = batch_seed(seed, l);
        state.update_mu(batch.len())?;
        let targets = state.denoise_targets(batch)?;
        let bits = reconstruct_with_targets(batch.vectors(), &targets, rng::derive_seed(s, "lp.server"))?;
        let corpus = Corpus::new(
            Vocabulary::anonymous(v),
            bits.iter().map(BinaryDoc::to_document).collect(),
        )?;
        let init = sampler::init_state_with_prior(&corpus, cfg.k, cfg.alpha, state.prior.clone(), s)?;
        let trained = sampler::train_from_state(init, cfg.iterations, s)?;
        let model = olda_estimate(&state, &trained.state);
        state.update_beta(trained.state.topic_word_counts())?;
        state.prev_batch_size = Some(batch.len());

        let ppl = match test {
            Some(t) => Some(perplexity(&model, t, cfg.alpha, cfg.fold_in_sweeps, rng::derive_seed(s, "olp.eval"))?),
            None => None,
        };
        metrics.push(BatchMetrics {
            l,
            batch_size: batch.len(),
            perplexity: ppl,
            epsilon_word: eps_word,
            elapsed_ms: started.elapsed().as_millis(),
            skipped: false,
        });
        models.push(model.clone());
        current = Some(model);
    }

    let report = PrivacyReport::from_iterations(
        "olp",
        vec![IterationLoss {
            eps_l: max_eps_doc,
            eps_i: 0.0,
        }],
    )
    .with_param("lambda", cfg.lambda)
    .with_param("batches", batches.len() as f64)
    .with_param("alpha", cfg.alpha)
    .with_param("beta", cfg.beta)
    .with_param("iterations", cfg.iterations as f64);
    let report = match cfg.shrinkage {
        Shrinkage::Omega(w) => report.with_param("omega", w),
        Shrinkage::Sigma2(s) => report.with_param("sigma2", s),
    };
    Ok(OlpOutput {
        models,
        metrics,
        state,
        report,
    })
}

/// Splits a clean corpus into an optional prior corpus of `prior_size`
/// documents and perturbed batches of `batch_size` (the last may be short).
pub fn make_batches(
    corpus: &Corpus,
    prior_size: usize,
    batch_size: usize,
    num_batches: Option<usize>,
    rr: &RRMech,
    seed: u64,
) -> Result<(Option<Corpus>, Vec<PerturbedBatch>)> {
    if batch_size == 0 {
        return Err(config("batch size must be positive"));
    }
    let m = corpus.num_docs();
    if prior_size > m {
        return Err(config(format!("prior size {prior_size} exceeds corpus size {m}")));
    }
    let prior = (prior_size > 0).then(|| corpus.select(&(0..prior_size).collect::<Vec<_>>()));
    let mut batches = Vec::new();
    let mut start = prior_size;
    while start < m && num_batches.is_none_or(|n| batches.len() < n) {
        let end = (start + batch_size).min(m);
        let part = corpus.select(&(start..end).collect::<Vec<_>>());
        let l = batches.len() + 1;
        batches.push(crate::lplda::perturb_corpus(&part, rr, rng::derive_indexed(seed, "olp.perturb", l as u64)));
        start = end;
    }
    Ok((prior, batches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use crate::lplda::{perturb_corpus, train_lp};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn beta_update_examples() {
        let mut s = OnlineState::new(1, 2, 0.01, 0.5, Shrinkage::Omega(0.4)).unwrap();
        s.update_beta(&[4, 0]).unwrap();
        assert_abs_diff_eq!(s.prior().entry(0, 0), 2.01, epsilon = 1e-12);
        assert_eq!(s.prior().entry(0, 1), 0.01);

        let mut z = OnlineState::new(1, 2, 0.01, 0.0, Shrinkage::Omega(0.4)).unwrap();
        z.update_beta(&[4, 7]).unwrap();
        assert_eq!(z.prior().dense(), vec![0.01, 0.01]);

        let mut a = OnlineState::new(1, 2, 0.01, 0.5, Shrinkage::Omega(0.4)).unwrap();
        a.update_beta(&[1, 2]).unwrap();
        a.update_beta(&[3, 4]).unwrap();
        let mut b = OnlineState::new(1, 2, 0.01, 0.5, Shrinkage::Omega(0.4)).unwrap();
        b.update_beta(&[4, 6]).unwrap();
        assert_eq!(a.prior().dense(), b.prior().dense());
        assert!(OnlineState::new(1, 2, 0.01, 1.5, Shrinkage::Omega(0.4)).is_err());
    }

    #[test]
    fn denoise_examples() {
        // μ=20 and a moment estimate of 10 (n=30, M=100, f=0.5).
        assert_abs_diff_eq!(bayes_denoise(30, 100, 0.5, 20.0, 0.4).unwrap(), 14.0, epsilon = 1e-12);
        assert_eq!(bayes_denoise(30, 100, 0.5, 20.0, 0.0).unwrap(), estimate_count(30, 100, 0.5).unwrap());
        assert_eq!(bayes_denoise(30, 100, 0.5, 20.0, 1.0).unwrap(), 20.0);
        assert!(bayes_denoise(30, 100, 1.0, 20.0, 0.4).is_err());
        assert!(bayes_denoise(30, 100, 0.5, 20.0, 1.4).is_err());
        assert_abs_diff_eq!(omega_from_sigma2(160, 0.5, 100.0).unwrap(), 120.0 / 220.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bayes_variance(50.0, 100, 0.5, 0.4).unwrap(), 36.0, epsilon = 1e-9);
        assert_eq!(bayes_variance(50.0, 100, 0.5, 0.0).unwrap(), estimator_variance(50.0, 100, 0.5).unwrap());
    }

    #[test]
    fn mu_update_examples() {
        assert_eq!(update_mu_values(&[10.0], &[14.0], 5, 5).unwrap(), vec![12.0]);
        assert_eq!(update_mu_values(&[10.0], &[10.0], 10, 5).unwrap(), vec![20.0]);
        assert_eq!(update_mu_values(&[7.5], &[7.5], 3, 3).unwrap(), vec![7.5]);
        assert!(update_mu_values(&[1.0], &[1.0], 3, 0).is_err());
    }

    #[test]
    fn matrix_prior_favours_heavy_topic() {
        let c = Corpus::new(Vocabulary::anonymous(2), vec![crate::corpus::Document::new(0, vec![0])]).unwrap();
        let mut state = OnlineState::new(2, 2, 0.01, 1.0, Shrinkage::Omega(0.0)).unwrap();
        state.update_beta(&[100, 0, 0, 100]).unwrap();
        let mut s = sampler::init_state_with_prior(&c, 2, 1.0, state.prior().clone(), 1).unwrap();
        s.unassign(0, 0);
        let p = olda_conditional(&state, &s, 0, 0).unwrap();
        assert!(p[0] > 0.99);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn olda_estimate_zero_counts_follows_prior() {
        let c = Corpus::new(Vocabulary::anonymous(2), vec![crate::corpus::Document::new(0, vec![])]).unwrap();
        let mut state = OnlineState::new(1, 2, 1.0, 1.0, Shrinkage::Omega(0.0)).unwrap();
        state.update_beta(&[2, 0]).unwrap();
        let s = sampler::init_state_with_prior(&c, 1, 1.0, state.prior().clone(), 1).unwrap();
        let m = olda_estimate(&state, &s);
        assert_abs_diff_eq!(m.get(0, 0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(0, 1), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_approximation_is_close() {
        for n in [40, 100, 160] {
            let tv = likelihood_tv(n, 200, 0.5);
            assert!(tv <= 0.05, "N={n} tv={tv}");
            assert_abs_diff_eq!(exact_likelihood(n, 200, 0.5).iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_batch_without_prior_matches_lp() {
        let (c, _) = synth_corpus(2, 20, 40, 10, 0.5, 0.3, 6).unwrap();
        let batch = perturb_corpus(&c, &RRMech::new(0.3).unwrap(), 2);
        let cfg = OlpConfig {
            k: 2,
            alpha: 1.0,
            beta: 0.01,
            iterations: 5,
            lambda: 0.0,
            shrinkage: Shrinkage::Omega(0.0),
            fold_in_sweeps: 5,
        };
        let out = run_olp(None, std::slice::from_ref(&batch), None, &cfg, 9).unwrap();
        let lp = train_lp(&batch, 1.0, 0.01, 2, 5, batch_seed(9, 1)).unwrap();
        assert_eq!(out.models[0], lp.model);
    }

    #[test]
    fn olp_runs_with_prior_and_skips_empty() {
        let (c, _) = synth_corpus(3, 30, 120, 15, 0.5, 0.2, 8).unwrap();
        let (train, test) = c.split(100, 1).unwrap();
        let rr = RRMech::from_epsilon_word(3.0).unwrap();
        let (prior, mut batches) = make_batches(&train, 40, 20, None, &rr, 5).unwrap();
        assert_eq!(batches.len(), 3);
        batches.insert(1, PerturbedBatch::new(vec![], rr.f(), 30).unwrap());
        let cfg = OlpConfig {
            k: 3,
            alpha: 1.0,
            beta: 0.01,
            iterations: 10,
            lambda: 0.5,
            shrinkage: Shrinkage::Omega(0.4),
            fold_in_sweeps: 5,
        };
        let a = run_olp(prior.as_ref(), &batches, Some(&test), &cfg, 3).unwrap();
        let b = run_olp(prior.as_ref(), &batches, Some(&test), &cfg, 3).unwrap();
        assert_eq!(a.models, b.models);
        assert_eq!(a.metrics.len(), 4);
        assert!(a.metrics[1].skipped);
        assert!(a.metrics.iter().filter(|m| !m.skipped).all(|m| m.perplexity.unwrap().is_finite()));
        assert!(a.state.eta().unwrap().iter().all(|&x| (0.0..=20.0).contains(&x)));
        let avg = a.running_average_perplexity();
        assert_eq!(avg[0], a.metrics[0].perplexity.unwrap());
    }

    proptest! {
        #[test]
        fn denoise_is_linear_in_count(
            m in 1u64..500, f in 0.01f64..0.99, mu in 0.0f64..100.0, omega in 0.0f64..=1.0, a in 0u64..500, b in 0u64..500,
        ) {
            let (a, b) = (a.min(m), b.min(m));
            prop_assume!(a != b);
            let slope = (bayes_denoise(a, m, f, mu, omega).unwrap() - bayes_denoise(b, m, f, mu, omega).unwrap())
                / (a as f64 - b as f64);
            prop_assert!((slope - (1.0 - omega) / (1.0 - f)).abs() <= 1e-9 * (1.0 + slope.abs()));
        }
    }
}
