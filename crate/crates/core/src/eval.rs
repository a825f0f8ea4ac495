//! Held-out perplexity and a declarative experiment-sweep harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_uci, synth_corpus, Corpus};
use crate::defaults;
use crate::error::{config, Error, Result};
use crate::hdp::{train_cdp, train_cdp_plus, train_hdp, CdpConfig, HdpConfig, TraceOptions};
use crate::lplda::{perturb_corpus, train_lp};
use crate::model::TopicModel;
use crate::online::{make_batches, run_olp, OlpConfig, Shrinkage};
use crate::privacy::RRMech;
use crate::rng;
use crate::sampler::{self, fold_in_theta};

/// exp(−Σ ln p / n) over per-token likelihoods.
pub fn perplexity_from_likelihoods(likelihoods: &[f64]) -> Result<f64> {
    if likelihoods.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if likelihoods.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Degenerate);
    }
    let ll: f64 = likelihoods.iter().map(|p| p.ln()).sum();
    Ok((-ll / likelihoods.len() as f64).exp())
}

/// Held-out perplexity with θ folded in per document on its own stream.
pub fn perplexity(model: &TopicModel, test: &Corpus, alpha: f64, fold_in_sweeps: usize, seed: u64) -> Result<f64> {
    if test.vocab_size() != model.vocab_size() {
        return Err(Error::Dimension(format!(
            "model vocabulary {} differs from test vocabulary {}",
            model.vocab_size(),
            test.vocab_size()
        )));
    }
    let per_doc: Vec<(f64, usize)> = test
        .documents()
        .par_iter()
        .enumerate()
        .map(|(m, doc)| {
            if doc.is_empty() {
                return (0.0, 0);
            }
            let theta = fold_in_theta(model, doc, alpha, fold_in_sweeps, rng::derive_indexed(seed, "eval.fold_in", m as u64));
            let ll: f64 = doc
                .tokens
                .iter()
                .map(|&t| {
                    let p: f64 = theta.iter().enumerate().map(|(k, th)| th * model.get(k, t as usize)).sum();
                    p.ln()
                })
                .sum();
            (ll, doc.len())
        })
        .collect();
    let (ll, n) = per_doc.iter().fold((0.0, 0usize), |(a, b), (l, c)| (a + l, b + c));
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if !ll.is_finite() {
        return Err(Error::Degenerate);
    }
    Ok((-ll / n as f64).exp())
}

/// Arithmetic mean and, for two or more values, the sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    (mean, std)
}

/// Worker cap from `DPLDA_WORKERS`, defaulting to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("DPLDA_WORKERS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Uci {
        docword: String,
        vocab: String,
        #[serde(default)]
        top_v: Option<usize>,
    },
    Synthetic {
        k: usize,
        v: usize,
        m: usize,
        doc_len: usize,
        alpha: f64,
        beta: f64,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            DatasetSpec::Uci { docword, vocab, top_v } => {
                Ok(load_uci(docword.as_ref(), vocab.as_ref(), top_v.unwrap_or(usize::MAX))?)
            }
            DatasetSpec::Synthetic {
                k,
                v,
                m,
                doc_len,
                alpha,
                beta,
                seed,
            } => Ok(synth_corpus(*k, *v, *m, *doc_len, *alpha, *beta, *seed)?.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cgs,
    Hdp,
    Cdp,
    CdpPlus,
    Lp,
    Olp,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cgs" => Variant::Cgs,
            "hdp" => Variant::Hdp,
            "cdp" => Variant::Cdp,
            "cdp_plus" | "cdp+" => Variant::CdpPlus,
            "lp" => Variant::Lp,
            "olp" => Variant::Olp,
            other => return Err(config(format!("unknown variant {other:?}"))),
        })
    }
}

fn default_k() -> usize {
    defaults::TOPICS
}
fn default_alpha() -> f64 {
    defaults::ALPHA
}
fn default_beta() -> f64 {
    defaults::BETA
}
fn default_iterations() -> usize {
    defaults::ITERATIONS
}
fn default_fold_in() -> usize {
    defaults::FOLD_IN_SWEEPS
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_clip() -> f64 {
    f64::INFINITY
}
fn default_lambda() -> f64 {
    0.5
}
fn default_omega() -> f64 {
    0.4
}
fn default_batch_size() -> usize {
    160
}
fn default_prior_size() -> usize {
    500
}

/// Trainer settings for one sweep cell. The swept axis overrides one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSpec {
    pub variant: Variant,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// ε_L for hdp, ε for the CDP baselines, per-word ε for lp and olp.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub accumulate_noise: bool,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_prior_size")]
    pub prior_size: usize,
    #[serde(default)]
    pub num_batches: Option<usize>,
}

impl TrainerSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            k: default_k(),
            alpha: default_alpha(),
            beta: default_beta(),
            iterations: default_iterations(),
            epsilon: default_epsilon(),
            clip: default_clip(),
            accumulate_noise: false,
            lambda: default_lambda(),
            omega: default_omega(),
            sigma2: None,
            batch_size: default_batch_size(),
            prior_size: default_prior_size(),
            num_batches: None,
        }
    }

    /// Copy with the named axis set to `x`.
    pub fn with_axis(&self, name: &str, x: f64) -> Result<Self> {
        let mut s = self.clone();
        let as_count = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(config(format!("axis {name} needs a whole number, got {x}")))
            }
        };
        match name {
            "epsilon" => s.epsilon = x,
            "clip" => s.clip = x,
            "beta" => s.beta = x,
            "alpha" => s.alpha = x,
            "lambda" => s.lambda = x,
            "omega" => s.omega = x,
            "k" => s.k = as_count(x)?,
            "iterations" => s.iterations = as_count(x)?,
            "batch_size" => s.batch_size = as_count(x)?,
            "prior_size" => s.prior_size = as_count(x)?,
            "num_batches" => s.num_batches = Some(as_count(x)?),
            other => return Err(config(format!("unknown sweep axis {other:?}"))),
        }
        Ok(s)
    }

    pub fn shrinkage(&self) -> Shrinkage {
        match self.sigma2 {
            Some(s) => Shrinkage::Sigma2(s),
            None => Shrinkage::Omega(self.omega),
        }
    }

    /// Trains on `train` and returns the held-out perplexity on `test`.
    /// For OLP this is the mean over batches of the per-batch perplexity.
    pub fn train_and_score(&self, train: &Corpus, test: &Corpus, fold_in_sweeps: usize, seed: u64) -> Result<f64> {
        let none = TraceOptions::default();
        let eval_seed = rng::derive_seed(seed, "eval");
        let model = match self.variant {
            Variant::Cgs => sampler::train(train, self.k, self.alpha, self.beta, self.iterations, seed)?.model,
            Variant::Hdp => {
                let cfg = HdpConfig {
                    k: self.k,
                    alpha: self.alpha,
                    beta: self.beta,
                    iterations: self.iterations,
                    eps_l: self.epsilon,
                    clip: self.clip,
                    accumulate_noise: self.accumulate_noise,
                };
                train_hdp(train, &cfg, seed, &none)?.model
            }
            Variant::Cdp | Variant::CdpPlus => {
                let cfg = CdpConfig {
                    k: self.k,
                    alpha: self.alpha,
                    beta: self.beta,
                    iterations: self.iterations,
                    epsilon: self.epsilon,
                };
                if self.variant == Variant::Cdp {
                    train_cdp(train, &cfg, seed, &none)?.model
                } else {
                    train_cdp_plus(train, &cfg, seed, &none)?.model
                }
            }
            Variant::Lp => {
                let rr = RRMech::from_epsilon_word(self.epsilon)?;
                let batch = perturb_corpus(train, &rr, rng::derive_seed(seed, "clients"));
                train_lp(&batch, self.alpha, self.beta, self.k, self.iterations, seed)?.model
            }
            Variant::Olp => {
                let rr = RRMech::from_epsilon_word(self.epsilon)?;
                let (prior, batches) = make_batches(
                    train,
                    self.prior_size,
                    self.batch_size,
                    self.num_batches,
                    &rr,
                    rng::derive_seed(seed, "clients"),
                )?;
                let cfg = OlpConfig {
                    k: self.k,
                    alpha: self.alpha,
                    beta: self.beta,
                    iterations: self.iterations,
                    lambda: self.lambda,
                    shrinkage: self.shrinkage(),
                    fold_in_sweeps,
                };
                let out = run_olp(prior.as_ref(), &batches, Some(test), &cfg, seed)?;
                let values: Vec<f64> = out.metrics.iter().filter_map(|m| m.perplexity).collect();
                if values.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                return Ok(mean_std(&values).0);
            }
        };
        perplexity(&model, test, self.alpha, fold_in_sweeps, eval_seed)
    }
}

fn default_n_train_fraction() -> f64 {
    0.9
}
fn default_split_seed() -> u64 {
    0
}

/// A grid of trainer runs over one axis and a set of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default = "default_n_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    pub trainer: TrainerSpec,
    pub x_name: String,
    #[serde(default)]
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_fold_in")]
    pub fold_in_sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub x_name: String,
    pub x_value: f64,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub n_seeds: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub x_value: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub plan: ExperimentPlan,
    pub points: Vec<PointResult>,
    pub failures: Vec<CellFailure>,
    pub seeds: Vec<u64>,
    pub runtime_ms: u128,
}

impl ExperimentResult {
    pub const CSV_HEADER: &'static str = "x_name,x_value,metric,mean,std,n_seeds";

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for p in &self.points {
            let std = p.std.map(|s| format!("{s:?}")).unwrap_or_default();
            writeln!(out, "{},{:?},{},{:?},{},{}", p.x_name, p.x_value, p.metric, p.mean, std, p.n_seeds)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Runs every (x, seed) cell, in parallel up to `workers`. A failed cell is
/// recorded and the rest continue.
pub fn sweep(plan: &ExperimentPlan, workers: usize) -> Result<ExperimentResult> {
    let started = Instant::now();
    if plan.grid.is_empty() {
        return Ok(ExperimentResult {
            plan: plan.clone(),
            points: Vec::new(),
            failures: Vec::new(),
            seeds: plan.seeds.clone(),
            runtime_ms: started.elapsed().as_millis(),
        });
    }
    if plan.seeds.is_empty() {
        return Err(config("a sweep needs at least one seed"));
    }
    let corpus = plan.dataset.load()?;
    let n_train = plan
        .n_train
        .unwrap_or_else(|| ((corpus.num_docs() as f64) * plan.train_fraction).round() as usize);
    let (train, test) = corpus.split(n_train, plan.split_seed)?;
    let cells: Vec<(f64, u64)> = plan
        .grid
        .iter()
        .flat_map(|&x| plan.seeds.iter().map(move |&s| (x, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| config(format!("worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<f64, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(x, seed)| {
                plan.trainer
                    .with_axis(&plan.x_name, x)
                    .and_then(|spec| spec.train_and_score(&train, &test, plan.fold_in_sweeps, seed))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &x in &plan.grid {
        let mut values = Vec::new();
        for (&(cx, seed), outcome) in cells.iter().zip(&outcomes) {
            if cx.to_bits() != x.to_bits() {
                continue;
            }
            match outcome {
                Ok(v) => values.push(*v),
                Err(e) => failures.push(CellFailure {
                    x_value: x,
                    seed,
                    error: e.clone(),
                }),
            }
        }
        if values.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&values);
        points.push(PointResult {
            x_name: plan.x_name.clone(),
            x_value: x,
            metric: "perplexity".into(),
            mean,
            std,
            n_seeds: values.len(),
            values,
        });
    }
    Ok(ExperimentResult {
        plan: plan.clone(),
        points,
        failures,
        seeds: plan.seeds.clone(),
        runtime_ms: started.elapsed().as_millis(),
    })
}
