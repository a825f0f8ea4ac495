//! Noisy collapsed Gibbs trainers: HDP-LDA and the CDP-LDA / CDP-LDA+
//! baselines.
//!
//! All three keep the exact count ledger intact and sample against a released
//! snapshot of exact counts plus Laplace offsets. They differ only in when the
//! offsets are drawn and which matrices they cover.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{config, Result};
use crate::model::TopicModel;
use crate::privacy::{clipped_inherent_eps, IterationLoss, LaplaceMech, PrivacyReport};
use crate::rng::{self, StreamRng};
use crate::sampler::{init_state, Perturbation, SamplerState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdpConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    /// Per-iteration Laplace budget. `f64::INFINITY` disables noise.
    pub eps_l: f64,
    /// Numerator clip bound. `f64::INFINITY` disables clipping.
    pub clip: f64,
    /// Let offsets accumulate across iterations instead of redrawing them.
    pub accumulate_noise: bool,
}

impl HdpConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(self.k, self.alpha, self.beta, self.iterations)?;
        if !(self.eps_l > 0.0) {
            return Err(config(format!("eps_l must be positive, got {}", self.eps_l)));
        }
        if !(self.clip >= 0.0) {
            return Err(config(format!("clip bound must be nonnegative, got {}", self.clip)));
        }
        Ok(())
    }

    /// ε_I = 2 ln(C/β + 1).
    pub fn inherent_epsilon(&self) -> f64 {
        clipped_inherent_eps(self.clip, self.beta).unwrap_or(f64::INFINITY)
    }

    /// T·(ε_L + ε_I).
    pub fn total_epsilon(&self) -> f64 {
        self.iterations as f64 * (self.eps_l + self.inherent_epsilon())
    }
}

/// Configuration shared by the two CDP baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdpConfig {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub epsilon: f64,
}

impl CdpConfig {
    pub fn validate(&self) -> Result<()> {
        validate_common(self.k, self.alpha, self.beta, self.iterations)?;
        if !(self.epsilon > 0.0) {
            return Err(config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn validate_common(k: usize, alpha: f64, beta: f64, iterations: usize) -> Result<()> {
    if k == 0 {
        return Err(config("topic count must be positive"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(config(format!("alpha must be positive, got {alpha}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(config(format!("beta must be positive, got {beta}")));
    }
    if iterations == 0 {
        return Err(config("iteration count must be at least 1"));
    }
    Ok(())
}

/// What the trainer should record about each iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceOptions {
    /// Token positions (document, index) whose sampled topics are recorded.
    pub targets: Vec<(usize, usize)>,
    /// Keep the full released matrix in each record, not just its digest.
    pub full_matrix: bool,
}

/// One line of the iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// SHA-256 of the released topic-word matrix as little-endian f64s.
    pub noisy_n_kt_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_n_kt: Option<Vec<f64>>,
    pub sampled_topic_stream: Vec<usize>,
    pub degenerate: usize,
}

/// Adversary-visible view of one target token at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub topic: usize,
    /// Released topic-word row of `topic`.
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub targets: Vec<(usize, usize)>,
    pub records: Vec<IterationRecord>,
    /// `observations[j][i]` belongs to target `j` at iteration `i`.
    pub observations: Vec<Vec<Observation>>,
    /// Largest exact topic-word count at the start of each iteration.
    pub max_counts: Vec<u32>,
}

impl TrainTrace {
    pub fn degenerate_total(&self) -> usize {
        self.records.iter().map(|r| r.degenerate).sum()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: SamplerState,
    pub model: TopicModel,
    pub report: PrivacyReport,
    pub trace: TrainTrace,
}

/// When offsets are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Schedule {
    /// Fresh draw every iteration.
    Fresh,
    /// One draw before the first iteration, reused afterwards.
    Once,
    /// Fresh draw added to the previous offsets every iteration.
    Accumulate,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NoisePlan {
    pub schedule: Schedule,
    pub topic_word: Option<LaplaceMech>,
    pub doc_topic: Option<LaplaceMech>,
    pub clip: Option<f64>,
}

impl NoisePlan {
    pub fn none() -> Self {
        Self {
            schedule: Schedule::Fresh,
            topic_word: None,
            doc_topic: None,
            clip: None,
        }
    }
}

fn mech(epsilon: f64, sensitivity: f64) -> Result<Option<LaplaceMech>> {
    if epsilon.is_infinite() {
        return Ok(None);
    }
    Ok(Some(LaplaceMech::with_sensitivity(epsilon, sensitivity)?))
}

fn fill(mech: &LaplaceMech, out: &mut Vec<f64>, len: usize, accumulate: bool, rng: &mut StreamRng) {
    if out.len() != len {
        out.clear();
        out.resize(len, 0.0);
    }
    for x in out.iter_mut() {
        let noise = mech.sample(rng).unwrap_or(0.0);
        if accumulate {
            *x += noise;
        } else {
            *x = noise;
        }
    }
}

fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in values {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `iterations` sweeps under `plan`, recording what `trace` asks for.
///
/// Topic sampling uses the same stream as plain CGS, so a plan without noise
/// or active clipping reproduces it exactly.
pub(crate) fn run_noisy(
    state: &mut SamplerState,
    plan: NoisePlan,
    iterations: usize,
    seed: u64,
    trace: &TraceOptions,
) -> Result<TrainTrace> {
    for &(m, i) in &trace.targets {
        if m >= state.num_docs() || i >= state.doc_tokens(m).len() {
            return Err(config(format!("target ({m}, {i}) is not a token position")));
        }
    }
    let (k, v, docs) = (state.num_topics(), state.vocab_size(), state.num_docs());
    let mut sweep_rng = rng::stream(seed, "sampler.sweep");
    let mut noise_rng = rng::stream(seed, "noise.laplace");
    let mut tw: Vec<f64> = Vec::new();
    let mut tw_rows: Vec<f64> = Vec::new();
    let mut dt: Vec<f64> = Vec::new();
    let recording = !trace.targets.is_empty() || trace.full_matrix;
    let mut out = TrainTrace {
        targets: trace.targets.clone(),
        records: Vec::with_capacity(iterations),
        observations: vec![Vec::with_capacity(iterations); trace.targets.len()],
        max_counts: Vec::with_capacity(iterations),
    };

    for iter in 0..iterations {
        let draw = match plan.schedule {
            Schedule::Once => iter == 0,
            Schedule::Fresh | Schedule::Accumulate => true,
        };
        let accumulate = plan.schedule == Schedule::Accumulate;
        if draw {
            if let Some(m) = &plan.topic_word {
                fill(m, &mut tw, k * v, accumulate, &mut noise_rng);
                tw_rows = tw.chunks_exact(v).map(|r| r.iter().sum()).collect();
            }
            if let Some(m) = &plan.doc_topic {
                fill(m, &mut dt, docs * k, accumulate, &mut noise_rng);
            }
        }

        out.max_counts.push(state.max_topic_word_count());
        let released: Vec<f64> = if recording {
            let counts = state.topic_word_counts();
            if plan.topic_word.is_some() {
                counts.iter().zip(&tw).map(|(&c, &e)| c as f64 + e).collect()
            } else {
                counts.iter().map(|&c| c as f64).collect()
            }
        } else {
            Vec::new()
        };

        let perturbation = Perturbation {
            topic_word: plan.topic_word.is_some().then_some(tw.as_slice()),
            topic_word_rows: plan.topic_word.is_some().then_some(tw_rows.as_slice()),
            doc_topic: plan.doc_topic.is_some().then_some(dt.as_slice()),
            clip: plan.clip,
        };
        let stats = state.sweep_perturbed(&mut sweep_rng, perturbation);

        let topics: Vec<usize> = trace.targets.iter().map(|&(m, i)| state.topic(m, i)).collect();
        for (obs, &topic) in out.observations.iter_mut().zip(&topics) {
            obs.push(Observation {
                topic,
                row: released[topic * v..(topic + 1) * v].to_vec(),
            });
        }
        out.records.push(IterationRecord {
            iter,
            noisy_n_kt_digest: if recording { digest(&released) } else { String::new() },
            noisy_n_kt: trace.full_matrix.then(|| released.clone()),
            sampled_topic_stream: topics,
            degenerate: stats.degenerate,
        });
    }
    Ok(out)
}

fn finish(state: SamplerState, report: PrivacyReport, trace: TrainTrace) -> TrainOutput {
    let model = state.estimate_phi();
    TrainOutput {
        state,
        model,
        report,
        trace,
    }
}

/// HDP-LDA: fresh Lap(2/ε_L) on the topic-word counts every iteration, the
/// sampling numerator clipped at C, and exact doc-topic counts.
pub fn train_hdp(corpus: &Corpus, cfg: &HdpConfig, seed: u64, trace: &TraceOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut state = init_state(corpus, cfg.k, cfg.alpha, cfg.beta, seed)?;
    let plan = NoisePlan {
        schedule: if cfg.accumulate_noise { Schedule::Accumulate } else { Schedule::Fresh },
        topic_word: mech(cfg.eps_l, 2.0)?,
        doc_topic: None,
        clip: cfg.clip.is_finite().then_some(cfg.clip),
    };
    let t = run_noisy(&mut state, plan, cfg.iterations, seed, trace)?;
    let loss = IterationLoss {
        eps_l: cfg.eps_l,
        eps_i: cfg.inherent_epsilon(),
    };
    let report = PrivacyReport::repeated("hdp", loss, cfg.iterations)
        .with_param("eps_l", cfg.eps_l)
        .with_param("clip", cfg.clip)
        .with_param("beta", cfg.beta)
        .with_param("alpha", cfg.alpha)
        .with_param("iterations", cfg.iterations as f64)
        .with_param("degenerate_tokens", t.degenerate_total() as f64);
    Ok(finish(state, report, t))
}

/// CDP-LDA: Lap(1/ε) on both count matrices once, before the first sweep.
/// The noisy ledger then evolves by exact ±1 updates.
pub fn train_cdp(corpus: &Corpus, cfg: &CdpConfig, seed: u64, trace: &TraceOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut state = init_state(corpus, cfg.k, cfg.alpha, cfg.beta, seed)?;
    let plan = NoisePlan {
        schedule: Schedule::Once,
        topic_word: mech(cfg.epsilon, 1.0)?,
        doc_topic: mech(cfg.epsilon, 1.0)?,
        clip: None,
    };
    let t = run_noisy(&mut state, plan, cfg.iterations, seed, trace)?;
    let mut losses = vec![IterationLoss { eps_l: 0.0, eps_i: 0.0 }; cfg.iterations];
    losses[0].eps_l = cfg.epsilon;
    let report = PrivacyReport::from_iterations("cdp", losses)
        .with_param("epsilon", cfg.epsilon)
        .with_param("beta", cfg.beta)
        .with_param("alpha", cfg.alpha)
        .with_param("iterations", cfg.iterations as f64)
        .with_param("degenerate_tokens", t.degenerate_total() as f64);
    Ok(finish(state, report, t))
}

/// CDP-LDA+: fresh Lap(1/ε) on snapshots of both matrices every iteration.
pub fn train_cdp_plus(corpus: &Corpus, cfg: &CdpConfig, seed: u64, trace: &TraceOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut state = init_state(corpus, cfg.k, cfg.alpha, cfg.beta, seed)?;
    let plan = NoisePlan {
        schedule: Schedule::Fresh,
        topic_word: mech(cfg.epsilon, 1.0)?,
        doc_topic: mech(cfg.epsilon, 1.0)?,
        clip: None,
    };
    let t = run_noisy(&mut state, plan, cfg.iterations, seed, trace)?;
    let loss = IterationLoss {
        eps_l: cfg.epsilon,
        eps_i: 0.0,
    };
    let report = PrivacyReport::repeated("cdp_plus", loss, cfg.iterations)
        .with_param("epsilon", cfg.epsilon)
        .with_param("beta", cfg.beta)
        .with_param("alpha", cfg.alpha)
        .with_param("iterations", cfg.iterations as f64)
        .with_param("degenerate_tokens", t.degenerate_total() as f64);
    Ok(finish(state, report, t))
}

/// Plain CGS with the same trace surface as the noisy trainers.
pub fn train_plain(
    corpus: &Corpus,
    k: usize,
    alpha: f64,
    beta: f64,
    iterations: usize,
    seed: u64,
    trace: &TraceOptions,
) -> Result<TrainOutput> {
    validate_common(k, alpha, beta, iterations)?;
    let mut state = init_state(corpus, k, alpha, beta, seed)?;
    let t = run_noisy(&mut state, NoisePlan::none(), iterations, seed, trace)?;
    let report = crate::sampler::cgs_report(&state, &t.max_counts)?;
    Ok(finish(state, report, t))
}
