//! Topic-based inference attack: guess a target token's word from the topics
//! it was assigned and the released topic-word counts.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{config, Error, Result};
use crate::hdp::{train_cdp_plus, train_hdp, train_plain, CdpConfig, HdpConfig, Observation, TraceOptions, TrainTrace};
use crate::privacy::PrivacyReport;

/// Noisy counts below this are raised to it before taking logs.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub target: (usize, usize),
    pub records: Vec<Observation>,
}

impl AttackTrace {
    pub fn new(target: (usize, usize), records: Vec<Observation>) -> Self {
        Self { target, records }
    }

    /// The view of target `j` recorded during training.
    pub fn from_train_trace(trace: &TrainTrace, j: usize) -> Result<Self> {
        let target = *trace
            .targets
            .get(j)
            .ok_or_else(|| config(format!("trace has no target {j}")))?;
        Ok(Self::new(target, trace.observations[j].clone()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// ln max(row[t], floor) − ln Σ_t max(row[t], floor), added into `scores`.
fn accumulate(scores: &mut [f64], row: &[f64], floor: f64) {
    let total: f64 = row.iter().map(|&x| x.max(floor)).sum();
    let log_total = total.ln();
    for (s, &x) in scores.iter_mut().zip(row) {
        *s += x.max(floor).ln() - log_total;
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `scores` evaluated at `t`.
pub fn softmax_probability(scores: &[f64], t: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    (scores[t] - max).exp() / z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub scores: Vec<f64>,
    pub argmax: usize,
    /// Normalized posterior probability of the true word.
    pub probability: f64,
}

/// Scores every word against the whole trace.
pub fn infer_word(trace: &AttackTrace, true_word: usize, floor: f64) -> Result<Inference> {
    let first = trace.records.first().ok_or_else(|| config("attack trace is empty"))?;
    let v = first.row.len();
    if true_word >= v {
        return Err(Error::Dimension(format!("word {true_word} outside vocabulary of size {v}")));
    }
    if !(floor > 0.0) {
        return Err(config(format!("floor must be positive, got {floor}")));
    }
    let mut scores = vec![0.0; v];
    for r in &trace.records {
        if r.row.len() != v {
            return Err(Error::Dimension("snapshot rows differ in length".into()));
        }
        accumulate(&mut scores, &r.row, floor);
    }
    let best = argmax(&scores);
    let probability = softmax_probability(&scores, true_word);
    Ok(Inference {
        scores,
        argmax: best,
        probability,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// 1-based count of iterations observed.
    pub iteration: usize,
    pub attack_accuracy: f64,
    pub argmax_correct: bool,
}

/// Attack accuracy after each prefix of the trace.
pub fn accuracy_curve(trace: &AttackTrace, true_word: usize, floor: f64) -> Result<Vec<CurvePoint>> {
    let first = trace.records.first().ok_or_else(|| config("attack trace is empty"))?;
    let v = first.row.len();
    if true_word >= v {
        return Err(Error::Dimension(format!("word {true_word} outside vocabulary of size {v}")));
    }
    let mut scores = vec![0.0; v];
    Ok(trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            accumulate(&mut scores, &r.row, floor);
            CurvePoint {
                iteration: i + 1,
                attack_accuracy: softmax_probability(&scores, true_word),
                argmax_correct: argmax(&scores) == true_word,
            }
        })
        .collect())
}

pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,attack_accuracy,argmax_correct")?;
    for p in curve {
        writeln!(out, "{},{:?},{}", p.iteration, p.attack_accuracy, p.argmax_correct as u8)?;
    }
    Ok(())
}

/// Last token of the last non-empty document.
pub fn default_target(corpus: &Corpus) -> Option<(usize, usize)> {
    corpus
        .documents()
        .iter()
        .enumerate()
        .rev()
        .find(|(_, d)| !d.is_empty())
        .map(|(m, d)| (m, d.len() - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "trainer", rename_all = "snake_case")]
pub enum AttackTrainer {
    Plain { k: usize, alpha: f64, beta: f64 },
    Hdp(HdpConfig),
    CdpPlus(CdpConfig),
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub target: (usize, usize),
    pub true_word: usize,
    pub curve: Vec<CurvePoint>,
    pub report: PrivacyReport,
}

/// Trains with the chosen trainer for `iterations` sweeps while recording the
/// target's view, then scores the attack after every iteration.
pub fn run_attack(
    corpus: &Corpus,
    trainer: &AttackTrainer,
    target: Option<(usize, usize)>,
    iterations: usize,
    seed: u64,
    floor: f64,
) -> Result<AttackOutcome> {
    let target = match target {
        Some(t) => t,
        None => default_target(corpus).ok_or(Error::EmptyCorpus)?,
    };
    let (m, n) = target;
    let true_word = *corpus
        .documents()
        .get(m)
        .and_then(|d| d.tokens.get(n))
        .ok_or_else(|| config(format!("target ({m}, {n}) is not a token position")))? as usize;
    let opts = TraceOptions {
        targets: vec![target],
        full_matrix: false,
    };
    let out = match *trainer {
        AttackTrainer::Plain { k, alpha, beta } => train_plain(corpus, k, alpha, beta, iterations, seed, &opts)?,
        AttackTrainer::Hdp(cfg) => train_hdp(corpus, &HdpConfig { iterations, ..cfg }, seed, &opts)?,
        AttackTrainer::CdpPlus(cfg) => train_cdp_plus(corpus, &CdpConfig { iterations, ..cfg }, seed, &opts)?,
    };
    let trace = AttackTrace::from_train_trace(&out.trace, 0)?;
    let curve = accuracy_curve(&trace, true_word, floor)?;
    Ok(AttackOutcome {
        target,
        true_word,
        curve,
        report: out.report,
    })
}
