//! LP-LDA: client-side randomized response on presence vectors, server-side
//! count estimation and dataset reconstruction, then ordinary CGS.

use rand::seq::index;
use rayon::prelude::*;

use crate::corpus::{to_binary, BinaryDoc, Corpus, Document, Vocabulary};
use crate::error::{config, Error, Result};
use crate::model::TopicModel;
use crate::privacy::{IterationLoss, PrivacyError, PrivacyReport, RRMech};
use crate::rng::{self, StreamRng};
use crate::sampler::{self, SamplerState};

/// Noisy presence vectors as received by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedBatch {
    vectors: Vec<BinaryDoc>,
    f: f64,
    v: usize,
}

impl PerturbedBatch {
    pub fn new(vectors: Vec<BinaryDoc>, f: f64, v: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&f) {
            return Err(PrivacyError::FlipProbability(f).into());
        }
        if let Some(bad) = vectors.iter().find(|b| b.bits.len() != v) {
            return Err(Error::Dimension(format!(
                "document {} has {} bits, expected {v}",
                bad.doc_id,
                bad.bits.len()
            )));
        }
        Ok(Self { vectors, f, v })
    }

    pub fn vectors(&self) -> &[BinaryDoc] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<BinaryDoc> {
        self.vectors
    }

    pub fn f(&self) -> f64 {
        self.f
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// n_t: number of vectors with bit t set.
    pub fn column_counts(&self) -> Vec<u64> {
        column_counts(&self.vectors, self.v)
    }
}

fn column_counts(vectors: &[BinaryDoc], v: usize) -> Vec<u64> {
    let mut counts = vec![0u64; v];
    for b in vectors {
        for (c, &bit) in counts.iter_mut().zip(&b.bits) {
            *c += bit as u64;
        }
    }
    counts
}

/// Presence encoding followed by randomized response.
pub fn perturb_document(doc: &Document, v: usize, f: f64, rng: &mut StreamRng) -> Result<BinaryDoc> {
    let rr = RRMech::new(f)?;
    Ok(perturb_with(doc, v, &rr, rng))
}

fn perturb_with(doc: &Document, v: usize, rr: &RRMech, rng: &mut StreamRng) -> BinaryDoc {
    let binary = to_binary(doc, v);
    BinaryDoc {
        doc_id: binary.doc_id,
        bits: rr.flip(&binary.bits, rng),
    }
}

/// Perturbs every document on its own stream, as independent clients would.
pub fn perturb_corpus(corpus: &Corpus, rr: &RRMech, seed: u64) -> PerturbedBatch {
    let v = corpus.vocab_size();
    let vectors = corpus
        .documents()
        .par_iter()
        .enumerate()
        .map(|(m, doc)| {
            let mut r = rng::from_seed(rng::derive_indexed(seed, "lp.perturb", m as u64));
            perturb_with(doc, v, rr, &mut r)
        })
        .collect();
    PerturbedBatch {
        vectors,
        f: rr.f(),
        v,
    }
}

fn check_estimator_f(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(config(format!("count estimation needs f in [0, 1), got {f}")));
    }
    Ok(())
}

/// Unbiased moment estimate (2n_t − fM) / (2(1−f)), unclamped.
pub fn estimate_count(n_t: u64, m: u64, f: f64) -> Result<f64> {
    check_estimator_f(f)?;
    if n_t > m {
        return Err(config(format!("observed count {n_t} exceeds batch size {m}")));
    }
    Ok((2.0 * n_t as f64 - f * m as f64) / (2.0 * (1.0 - f)))
}

/// Var N̂_t = (2−f)fM / (4(1−f)²) + (M−N_t)N_t / M.
pub fn estimator_variance(n_true: f64, m: u64, f: f64) -> Result<f64> {
    check_estimator_f(f)?;
    let m = m as f64;
    if !(0.0..=m).contains(&n_true) || m == 0.0 {
        return Err(config(format!("true count {n_true} outside [0, {m}]")));
    }
    let q = 1.0 - f;
    Ok((2.0 - f) * f * m / (4.0 * q * q) + (m - n_true) * n_true / m)
}

/// round-half-even(clamp(N̂, 0, M)).
pub fn round_target(estimate: f64, m: u64) -> u64 {
    estimate.clamp(0.0, m as f64).round_ties_even() as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountEstimate {
    pub t: usize,
    pub observed: u64,
    pub estimate: f64,
    pub delta: i64,
}

pub fn estimate_counts(batch: &PerturbedBatch) -> Result<Vec<CountEstimate>> {
    let m = batch.len() as u64;
    batch
        .column_counts()
        .into_iter()
        .enumerate()
        .map(|(t, observed)| {
            let estimate = estimate_count(observed, m, batch.f)?;
            let delta = round_target(estimate, m) as i64 - observed as i64;
            Ok(CountEstimate {
                t,
                observed,
                estimate,
                delta,
            })
        })
        .collect()
}

/// Adjusts each column to its target count by flipping uniformly chosen bits.
/// Word t draws from its own stream, so columns are independent.
pub fn reconstruct_with_targets(vectors: &[BinaryDoc], targets: &[u64], seed: u64) -> Result<Vec<BinaryDoc>> {
    let v = targets.len();
    if let Some(bad) = vectors.iter().find(|b| b.bits.len() != v) {
        return Err(Error::Dimension(format!("document {} has {} bits, expected {v}", bad.doc_id, bad.bits.len())));
    }
    let flips: Vec<Vec<usize>> = (0..v)
        .into_par_iter()
        .map(|t| {
            let have: Vec<usize> = (0..vectors.len()).filter(|&m| vectors[m].bits[t]).collect();
            let target = targets[t] as usize;
            let (pool, amount): (Vec<usize>, usize) = if target > have.len() {
                let zeros = (0..vectors.len()).filter(|&m| !vectors[m].bits[t]).collect::<Vec<_>>();
                let amount = (target - have.len()).min(zeros.len());
                (zeros, amount)
            } else {
                let amount = have.len() - target;
                (have, amount)
            };
            if amount == 0 {
                return Vec::new();
            }
            let mut r = rng::from_seed(rng::derive_indexed(seed, "lp.reconstruct", t as u64));
            let mut picked: Vec<usize> = index::sample(&mut r, pool.len(), amount).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            picked
        })
        .collect();
    let mut out = vectors.to_vec();
    for (t, docs) in flips.iter().enumerate() {
        for &m in docs {
            out[m].bits[t] = !out[m].bits[t];
        }
    }
    Ok(out)
}

/// Server-side reconstruction of a token corpus from a noisy batch.
///
/// With f = 1 the batch carries no signal and the estimator is undefined; the
/// noisy vectors are used unchanged.
pub fn reconstruct(batch: &PerturbedBatch, seed: u64) -> Result<Corpus> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let bits = if batch.f < 1.0 {
        let m = batch.len() as u64;
        let targets: Vec<u64> = estimate_counts(batch)?
            .iter()
            .map(|e| round_target(e.estimate, m))
            .collect();
        reconstruct_with_targets(&batch.vectors, &targets, seed)?
    } else {
        batch.vectors.clone()
    };
    let documents = bits.iter().map(BinaryDoc::to_document).collect();
    Ok(Corpus::new(Vocabulary::anonymous(batch.v), documents)?)
}

/// Report for a one-shot local release: ε_doc charged once.
pub fn lp_report(f: f64, v: usize) -> PrivacyReport {
    let (eps_word, eps_doc) = if f > 0.0 {
        let rr = RRMech::new(f).expect("f validated by caller");
        (rr.epsilon_word(), rr.epsilon_doc(v))
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    PrivacyReport::from_iterations(
        "lp",
        vec![IterationLoss {
            eps_l: eps_doc,
            eps_i: 0.0,
        }],
    )
    .with_param("f", f)
    .with_param("epsilon_word", eps_word)
    .with_param("epsilon_doc", eps_doc)
    .with_param("vocab_size", v as f64)
}

#[derive(Debug, Clone)]
pub struct LpOutput {
    pub reconstructed: Corpus,
    pub state: SamplerState,
    pub model: TopicModel,
    pub report: PrivacyReport,
}

/// Reconstruct, then plain CGS. Only the noisy batch is consumed.
pub fn train_lp(batch: &PerturbedBatch, alpha: f64, beta: f64, k: usize, iterations: usize, seed: u64) -> Result<LpOutput> {
    let reconstructed = reconstruct(batch, rng::derive_seed(seed, "lp.server"))?;
    if reconstructed.num_tokens() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let cgs = sampler::train(&reconstructed, k, alpha, beta, iterations, seed)?;
    let mut report = lp_report(batch.f, batch.v);
    for (key, value) in [("alpha", alpha), ("beta", beta), ("iterations", iterations as f64)] {
        report = report.with_param(key, value);
    }
    Ok(LpOutput {
        reconstructed,
        state: cgs.state,
        model: cgs.model,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn estimator_examples() {
        assert_abs_diff_eq!(estimate_count(30, 100, 0.5).unwrap(), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_count(25, 100, 0.5).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(estimate_count(7, 10, 0.0).unwrap(), 7.0);
        assert!(estimate_count(1, 10, 1.0).is_err());
        assert!(estimate_count(11, 10, 0.5).is_err());
        assert_abs_diff_eq!(estimator_variance(50.0, 100, 0.5).unwrap(), 100.0, epsilon = 1e-9);
        assert_eq!(estimator_variance(0.0, 100, 0.0).unwrap(), 0.0);
        assert!(estimator_variance(1.0, 10, 1.0).is_err());
    }

    #[test]
    fn rounding_is_half_even_and_clamped() {
        assert_eq!(round_target(2.5, 10), 2);
        assert_eq!(round_target(3.5, 10), 4);
        assert_eq!(round_target(-4.0, 10), 0);
        assert_eq!(round_target(12.2, 10), 10);
    }

    #[test]
    fn hand_reconstruction_step() {
        // M=4, f=0.5, n_t=3 → N̂ = 4, one zero bit is set.
        let bits = |b: [bool; 1]| b.to_vec();
        let vectors: Vec<BinaryDoc> = [[true], [true], [false], [true]]
            .iter()
            .enumerate()
            .map(|(i, b)| BinaryDoc { doc_id: i, bits: bits(*b) })
            .collect();
        let batch = PerturbedBatch::new(vectors, 0.5, 1).unwrap();
        let est = estimate_counts(&batch).unwrap();
        assert_eq!(est[0].estimate, 4.0);
        assert_eq!(est[0].delta, 1);
        let c = reconstruct(&batch, 3).unwrap();
        assert_eq!(c.num_docs(), 4);
        assert!(c.documents().iter().all(|d| d.tokens == vec![0]));
    }

    #[test]
    fn no_noise_reconstruction_is_identity() {
        let (c, _) = synth_corpus(2, 20, 15, 10, 0.5, 0.3, 4).unwrap();
        let batch = perturb_corpus(&c, &RRMech::non_private(), 1);
        assert_eq!(batch.vectors(), c.binary_docs().as_slice());
        let r = reconstruct(&batch, 2).unwrap();
        let expected: Vec<Document> = c.binary_docs().iter().map(BinaryDoc::to_document).collect();
        assert_eq!(r.documents(), expected.as_slice());
    }

    #[test]
    fn full_randomization_ignores_input() {
        let a = Document::new(0, vec![0, 1, 2]);
        let b = Document::new(0, vec![]);
        let mut r1 = rng::from_seed(5);
        let mut r2 = rng::from_seed(5);
        assert_eq!(
            perturb_document(&a, 8, 1.0, &mut r1).unwrap(),
            perturb_document(&b, 8, 1.0, &mut r2).unwrap()
        );
        assert!(perturb_document(&a, 8, 0.0, &mut r1).is_err());
        assert!(perturb_document(&a, 8, 1.5, &mut r1).is_err());
    }

    #[test]
    fn keep_frequency_monte_carlo() {
        let doc = Document::new(0, vec![0]);
        let mut r = rng::from_seed(21);
        let trials = 100_000;
        let ones = (0..trials)
            .filter(|_| perturb_document(&doc, 1, 0.5, &mut r).unwrap().bits[0])
            .count() as f64;
        let sigma = (0.75f64 * 0.25 / trials as f64).sqrt();
        assert!((ones / trials as f64 - 0.75).abs() < 3.0 * sigma);
    }

    #[test]
    fn train_lp_is_deterministic() {
        let (c, _) = synth_corpus(2, 20, 30, 10, 0.5, 0.3, 4).unwrap();
        let batch = perturb_corpus(&c, &RRMech::new(0.2).unwrap(), 7);
        let a = train_lp(&batch, 1.0, 0.01, 2, 5, 3).unwrap();
        let b = train_lp(&batch, 1.0, 0.01, 2, 5, 3).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.reconstructed.num_docs(), 30);
        let rr = RRMech::new(0.2).unwrap();
        assert_eq!(a.report.total_epsilon, rr.epsilon_doc(20));
        assert_eq!(a.report.params["epsilon_word"], rr.epsilon_word());
    }

    proptest! {
        #[test]
        fn reconstruction_hits_targets(seed in 0u64..5_000, f in 0.05f64..0.95) {
            let (c, _) = synth_corpus(3, 12, 25, 6, 0.5, 0.3, seed).unwrap();
            let batch = perturb_corpus(&c, &RRMech::new(f).unwrap(), seed);
            let m = batch.len() as u64;
            let targets: Vec<u64> = estimate_counts(&batch).unwrap()
                .iter().map(|e| round_target(e.estimate, m)).collect();
            let out = reconstruct_with_targets(batch.vectors(), &targets, seed).unwrap();
            prop_assert_eq!(out.len(), batch.len());
            prop_assert_eq!(column_counts(&out, 12), targets);
        }
    }
}
