//! Run configuration: built-in defaults, overridden by a TOML file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use dplda::defaults;
use dplda::eval::Variant;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub vocab: usize,
    pub docs: usize,
    pub doc_len: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub docword: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub top_v: Option<usize>,
    pub n_train: Option<usize>,
    pub split_seed: Option<u64>,
    pub synthetic: Option<SynthConfig>,
    pub test_docword: Option<PathBuf>,
    pub test_vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub variant: Option<Variant>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub eps_l: Option<f64>,
    pub clip: Option<f64>,
    pub epsilon: Option<f64>,
    pub f: Option<f64>,
    pub epsilon_word: Option<f64>,
    pub no_privacy: Option<bool>,
    pub accumulate_noise: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub lambda: Option<f64>,
    pub omega: Option<f64>,
    pub sigma2: Option<f64>,
    pub batch_size: Option<usize>,
    pub prior_size: Option<usize>,
    pub num_batches: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub fold_in_sweeps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub target: Option<[usize; 2]>,
    pub floor: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub batches: Option<PathBuf>,
    pub prior_docword: Option<PathBuf>,
    pub prior_vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub binary_model: Option<bool>,
    pub trace_full: Option<bool>,
    pub trace_targets: Option<Vec<[usize; 2]>>,
}

/// Everything a command reads. Unset fields fall back to defaults when used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub io: IoConfig,
}

fn parse_pair(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected DOC:POS, got {s:?}"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok([parse(a)?, parse(b)?])
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// UCI docword file.
    #[arg(long, global = true)]
    pub docword: Option<PathBuf>,
    /// UCI vocabulary file.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub top_v: Option<usize>,
    /// Training documents; the rest form the test split.
    #[arg(long, global = true)]
    pub n_train: Option<usize>,
    #[arg(long, global = true)]
    pub split_seed: Option<u64>,
    #[arg(long, global = true)]
    pub test_docword: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test_vocab: Option<PathBuf>,

    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Number of topics.
    #[arg(long, short = 'k', global = true)]
    pub topics: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, visible_alias = "iterations", global = true)]
    pub iters: Option<usize>,

    /// Per-iteration Laplace budget for HDP-LDA.
    #[arg(long, global = true)]
    pub eps_l: Option<f64>,
    /// Clip bound on the sampling numerator.
    #[arg(long, global = true)]
    pub clip: Option<f64>,
    /// Budget for the CDP baselines.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Randomized-response flip probability.
    #[arg(long, global = true)]
    pub f: Option<f64>,
    /// Per-word local budget; sets f = 2/(1+e^ε).
    #[arg(long, global = true)]
    pub epsilon_word: Option<f64>,
    /// Allow infinite budgets (no noise, f = 0).
    #[arg(long, global = true)]
    pub no_privacy: bool,
    #[arg(long, global = true)]
    pub accumulate_noise: bool,

    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub omega: Option<f64>,
    #[arg(long, global = true)]
    pub sigma2: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub prior_size: Option<usize>,
    #[arg(long, global = true)]
    pub num_batches: Option<usize>,

    #[arg(long, global = true)]
    pub fold_in_sweeps: Option<usize>,

    /// Attack target as DOC:POS.
    #[arg(long, value_parser = parse_pair, global = true)]
    pub target: Option<[usize; 2]>,
    #[arg(long, global = true)]
    pub floor: Option<f64>,

    /// Perturbed batch directory or stream file.
    #[arg(long, global = true)]
    pub batches: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prior_docword: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prior_vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Experiment plan (JSON or TOML).
    #[arg(long, global = true)]
    pub plan: Option<PathBuf>,
    /// Write the model in the binary format.
    #[arg(long, global = true)]
    pub binary_model: bool,
    /// Keep the full released matrix in every trace record.
    #[arg(long, global = true)]
    pub trace_full: bool,
    /// Token whose sampled topics are traced, as DOC:POS. Repeatable.
    #[arg(long = "trace-target", value_parser = parse_pair, global = true)]
    pub trace_targets: Vec<[usize; 2]>,
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn set_flag(slot: &mut Option<bool>, flag: bool) {
    if flag {
        *slot = Some(true);
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// File (if any) with flags applied on top.
    pub fn resolve(flags: &Flags) -> Result<Self, String> {
        let mut c = match &flags.config {
            Some(path) => Self::from_toml_file(path)?,
            None => Self::default(),
        };
        let f = flags.clone();
        set(&mut c.seed, f.seed);
        set(&mut c.out, f.out);
        let d = &mut c.dataset;
        set(&mut d.docword, f.docword);
        set(&mut d.vocab, f.vocab);
        set(&mut d.top_v, f.top_v);
        set(&mut d.n_train, f.n_train);
        set(&mut d.split_seed, f.split_seed);
        set(&mut d.test_docword, f.test_docword);
        set(&mut d.test_vocab, f.test_vocab);
        let t = &mut c.trainer;
        set(&mut t.variant, f.variant);
        set(&mut t.k, f.topics);
        set(&mut t.alpha, f.alpha);
        set(&mut t.beta, f.beta);
        set(&mut t.iterations, f.iters);
        let p = &mut c.privacy;
        set(&mut p.eps_l, f.eps_l);
        set(&mut p.clip, f.clip);
        set(&mut p.epsilon, f.epsilon);
        set(&mut p.f, f.f);
        set(&mut p.epsilon_word, f.epsilon_word);
        set_flag(&mut p.no_privacy, f.no_privacy);
        set_flag(&mut p.accumulate_noise, f.accumulate_noise);
        let o = &mut c.online;
        set(&mut o.lambda, f.lambda);
        set(&mut o.omega, f.omega);
        set(&mut o.sigma2, f.sigma2);
        set(&mut o.batch_size, f.batch_size);
        set(&mut o.prior_size, f.prior_size);
        set(&mut o.num_batches, f.num_batches);
        set(&mut c.eval.fold_in_sweeps, f.fold_in_sweeps);
        set(&mut c.attack.target, f.target);
        set(&mut c.attack.floor, f.floor);
        let io = &mut c.io;
        set(&mut io.batches, f.batches);
        set(&mut io.prior_docword, f.prior_docword);
        set(&mut io.prior_vocab, f.prior_vocab);
        set(&mut io.model, f.model);
        set(&mut io.plan, f.plan);
        set_flag(&mut io.binary_model, f.binary_model);
        set_flag(&mut io.trace_full, f.trace_full);
        if !f.trace_targets.is_empty() {
            io.trace_targets = Some(f.trace_targets);
        }
        c.fill_defaults();
        c.validate()?;
        Ok(c)
    }

    /// Makes implicit defaults explicit so the echoed config reruns as is.
    pub fn fill_defaults(&mut self) {
        self.seed.get_or_insert(0);
        let t = &mut self.trainer;
        t.k.get_or_insert(defaults::TOPICS);
        t.alpha.get_or_insert(defaults::ALPHA);
        t.beta.get_or_insert(defaults::BETA);
        t.iterations.get_or_insert(defaults::ITERATIONS);
        self.eval.fold_in_sweeps.get_or_insert(defaults::FOLD_IN_SWEEPS);
        self.privacy.no_privacy.get_or_insert(false);
        self.privacy.accumulate_noise.get_or_insert(false);
        self.dataset.split_seed.get_or_insert(0);
        self.online.lambda.get_or_insert(0.5);
        if self.online.sigma2.is_none() {
            self.online.omega.get_or_insert(0.4);
        }
        self.attack.floor.get_or_insert(dplda::attack::DEFAULT_FLOOR);
        self.io.binary_model.get_or_insert(false);
        self.io.trace_full.get_or_insert(false);
    }

    /// Parse-time positivity and range checks.
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(format!("{name} must be positive and finite, got {x}")),
            _ => Ok(()),
        };
        let t = &self.trainer;
        if t.k == Some(0) {
            return Err("topic count must be positive".into());
        }
        if t.iterations == Some(0) {
            return Err("iteration count must be positive".into());
        }
        positive("alpha", t.alpha)?;
        positive("beta", t.beta)?;
        let p = &self.privacy;
        positive("eps_l", p.eps_l)?;
        positive("epsilon", p.epsilon)?;
        positive("epsilon_word", p.epsilon_word)?;
        if let Some(c) = p.clip {
            if !(c >= 0.0) {
                return Err(format!("clip must be nonnegative, got {c}"));
            }
        }
        if let Some(f) = p.f {
            if !(f > 0.0 && f <= 1.0) {
                return Err(format!("f must be in (0, 1], got {f}"));
            }
        }
        if p.f.is_some() && p.epsilon_word.is_some() {
            return Err("set only one of f and epsilon_word".into());
        }
        let o = &self.online;
        for (name, v) in [("lambda", o.lambda), ("omega", o.omega)] {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(format!("{name} must be in [0, 1], got {x}"));
                }
            }
        }
        positive("sigma2", o.sigma2)?;
        if o.batch_size == Some(0) {
            return Err("batch size must be positive".into());
        }
        positive("floor", self.attack.floor)?;
        if self.dataset.docword.is_some() != self.dataset.vocab.is_some() {
            return Err("docword and vocab must be given together".into());
        }
        if self.dataset.docword.is_some() && self.dataset.synthetic.is_some() {
            return Err("choose either UCI files or a synthetic dataset".into());
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn k(&self) -> usize {
        self.trainer.k.unwrap_or(defaults::TOPICS)
    }

    pub fn alpha(&self) -> f64 {
        self.trainer.alpha.unwrap_or(defaults::ALPHA)
    }

    pub fn beta(&self) -> f64 {
        self.trainer.beta.unwrap_or(defaults::BETA)
    }

    pub fn iterations(&self) -> usize {
        self.trainer.iterations.unwrap_or(defaults::ITERATIONS)
    }

    pub fn fold_in_sweeps(&self) -> usize {
        self.eval.fold_in_sweeps.unwrap_or(defaults::FOLD_IN_SWEEPS)
    }

    pub fn no_privacy(&self) -> bool {
        self.privacy.no_privacy.unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[trainer]\nk = 7\nbeta = 0.5\n").unwrap();
        let flags = Flags {
            config: Some(path),
            beta: Some(0.25),
            ..Flags::default()
        };
        let c = RunConfig::resolve(&flags).unwrap();
        assert_eq!(c.seed(), 4);
        assert_eq!(c.k(), 7);
        assert_eq!(c.beta(), 0.25);
        assert_eq!(c.alpha(), 1.0);
        assert_eq!(c.iterations(), 100);
    }

    #[test]
    fn echo_round_trips() {
        let flags = Flags {
            eps_l: Some(1.0),
            clip: Some(10.0),
            trace_targets: vec![[1, 2]],
            ..Flags::default()
        };
        let c = RunConfig::resolve(&flags).unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let json: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(json, c);
    }

    #[test]
    fn rejects_bad_values() {
        for flags in [
            Flags { beta: Some(-1.0), ..Flags::default() },
            Flags { f: Some(0.0), ..Flags::default() },
            Flags { omega: Some(2.0), ..Flags::default() },
            Flags { topics: Some(0), ..Flags::default() },
            Flags { docword: Some("a".into()), ..Flags::default() },
        ] {
            assert!(RunConfig::resolve(&flags).is_err());
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(toml::from_str::<RunConfig>("[trainer]\nkk = 3\n").is_err());
        assert_eq!(parse_pair("3:4").unwrap(), [3, 4]);
        assert!(parse_pair("3").is_err());
    }
}
