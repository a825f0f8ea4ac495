//! Subcommand implementations. Each returns the files it wrote, relative to
//! the output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use dplda::attack::{default_target, run_attack, write_curve_csv, AttackTrainer};
use dplda::batch_io::{read_batches, write_batch_dir};
use dplda::corpus::{load_uci, synth_corpus, Corpus};
use dplda::eval::{perplexity, sweep, worker_count, ExperimentPlan, Variant};
use dplda::hdp::{train_cdp, train_cdp_plus, train_hdp, train_plain, CdpConfig, HdpConfig, TraceOptions};
use dplda::lplda::{perturb_corpus, reconstruct, train_lp, PerturbedBatch};
use dplda::online::{batch_seed, make_batches, run_olp, OlpConfig, Shrinkage};
use dplda::privacy::RRMech;
use dplda::rng::derive_seed;
use dplda::TopicModel;

use crate::config::RunConfig;

/// A problem with the requested configuration rather than with running it.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    pub fn new(c: &RunConfig) -> Result<Self> {
        let dir = c.out.clone().ok_or_else(|| config_err("an output directory is required (--out)"))?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let path = self.path(name);
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

fn load_full(c: &RunConfig) -> Result<Corpus> {
    let d = &c.dataset;
    if let (Some(docword), Some(vocab)) = (&d.docword, &d.vocab) {
        return Ok(load_uci(docword, vocab, d.top_v.unwrap_or(usize::MAX))?);
    }
    if let Some(s) = &d.synthetic {
        return Ok(synth_corpus(s.topics, s.vocab, s.docs, s.doc_len, s.alpha, s.beta, s.seed)?.0);
    }
    Err(config_err("no dataset configured (--docword/--vocab or [dataset.synthetic])"))
}

fn load_test_files(c: &RunConfig) -> Result<Option<Corpus>> {
    match (&c.dataset.test_docword, &c.dataset.test_vocab) {
        (Some(docword), Some(vocab)) => Ok(Some(load_uci(docword, vocab, usize::MAX)?)),
        (None, None) => Ok(None),
        _ => Err(config_err("test_docword and test_vocab must be given together")),
    }
}

/// Training corpus and, when a split or test files are configured, a test corpus.
fn load_dataset(c: &RunConfig) -> Result<(Corpus, Option<Corpus>)> {
    let full = load_full(c)?;
    if let Some(test) = load_test_files(c)? {
        if test.vocab_size() != full.vocab_size() {
            return Err(config_err("test vocabulary size differs from the training vocabulary"));
        }
        return Ok((full, Some(test)));
    }
    match c.dataset.n_train {
        Some(n) => {
            let (train, test) = full.split(n, c.dataset.split_seed.unwrap_or(0))?;
            Ok((train, Some(test)))
        }
        None => Ok((full, None)),
    }
}

fn rr_mech(c: &RunConfig) -> Result<RRMech> {
    let p = &c.privacy;
    match (p.f, p.epsilon_word) {
        (Some(f), _) => Ok(RRMech::new(f)?),
        (None, Some(e)) => Ok(RRMech::from_epsilon_word(e)?),
        (None, None) if c.no_privacy() => Ok(RRMech::non_private()),
        (None, None) => Err(config_err("local privacy needs --f or --epsilon-word (or --no-privacy)")),
    }
}

fn required_budget(c: &RunConfig, value: Option<f64>, name: &str) -> Result<f64> {
    match value {
        Some(v) => Ok(v),
        None if c.no_privacy() => Ok(f64::INFINITY),
        None => Err(config_err(format!("this variant needs --{name} (or --no-privacy)"))),
    }
}

fn shrinkage(c: &RunConfig) -> Shrinkage {
    match c.online.sigma2 {
        Some(s) => Shrinkage::Sigma2(s),
        None => Shrinkage::Omega(c.online.omega.unwrap_or(0.4)),
    }
}

fn olp_config(c: &RunConfig) -> OlpConfig {
    OlpConfig {
        k: c.k(),
        alpha: c.alpha(),
        beta: c.beta(),
        iterations: c.iterations(),
        lambda: c.online.lambda.unwrap_or(0.5),
        shrinkage: shrinkage(c),
        fold_in_sweeps: c.fold_in_sweeps(),
    }
}

fn write_model(out: &mut Output, c: &RunConfig, stem: &str, model: &TopicModel) -> Result<()> {
    let ext = if c.io.binary_model.unwrap_or(false) { "bin" } else { "csv" };
    let path = out.path(&format!("{stem}.{ext}"));
    model.save(&path)?;
    Ok(())
}

fn write_metrics(out: &mut Output, rows: &[(&str, f64)]) -> Result<()> {
    out.write("metrics.csv", |w| {
        writeln!(w, "metric,value")?;
        for (name, value) in rows {
            writeln!(w, "{name},{value:?}")?;
        }
        Ok(())
    })
}

fn write_json<T: serde::Serialize>(out: &mut Output, name: &str, value: &T) -> Result<()> {
    out.write(name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn ingest(c: &RunConfig, out: &mut Output) -> Result<()> {
    let (train, test) = load_dataset(c)?;
    let vocab = out.path("vocab.txt");
    let train_path = out.path("train.docword.txt");
    train.write_uci(&train_path, &vocab)?;
    println!("train: {} documents, {} tokens, V = {}", train.num_docs(), train.num_tokens(), train.vocab_size());
    if let Some(test) = test {
        let test_path = out.path("test.docword.txt");
        test.write_uci(&test_path, &vocab)?;
        println!("test: {} documents, {} tokens", test.num_docs(), test.num_tokens());
    }
    Ok(())
}

fn single_batch(path: &Path) -> Result<PerturbedBatch> {
    let mut batches = read_batches(path)?;
    if batches.len() != 1 {
        return Err(config_err(format!("expected one perturbed batch, found {}", batches.len())));
    }
    Ok(batches.remove(0))
}

pub fn train(c: &RunConfig, out: &mut Output) -> Result<()> {
    let variant = c
        .trainer
        .variant
        .ok_or_else(|| config_err("train needs --variant (cgs, hdp, cdp, cdp_plus, lp, olp)"))?;
    let seed = c.seed();
    let (k, alpha, beta, iters) = (c.k(), c.alpha(), c.beta(), c.iterations());
    let local_input = matches!(variant, Variant::Lp | Variant::Olp) && c.io.batches.is_some();
    let (train, test) = if local_input {
        (None, load_test_files(c)?)
    } else {
        let (train, test) = load_dataset(c)?;
        (Some(train), test)
    };
    let score = |model: &TopicModel| -> Result<Option<f64>> {
        test.as_ref()
            .map(|t| perplexity(model, t, alpha, c.fold_in_sweeps(), derive_seed(seed, "eval")))
            .transpose()
            .map_err(Into::into)
    };

    match variant {
        Variant::Cgs | Variant::Hdp | Variant::Cdp | Variant::CdpPlus => {
            let train = train.expect("loaded above");
            let opts = TraceOptions {
                targets: c.io.trace_targets.clone().unwrap_or_default().iter().map(|p| (p[0], p[1])).collect(),
                full_matrix: c.io.trace_full.unwrap_or(false),
            };
            let result = match variant {
                Variant::Cgs => train_plain(&train, k, alpha, beta, iters, seed, &opts)?,
                Variant::Hdp => {
                    let cfg = HdpConfig {
                        k,
                        alpha,
                        beta,
                        iterations: iters,
                        eps_l: required_budget(c, c.privacy.eps_l, "eps-l")?,
                        clip: required_budget(c, c.privacy.clip, "clip")?,
                        accumulate_noise: c.privacy.accumulate_noise.unwrap_or(false),
                    };
                    train_hdp(&train, &cfg, seed, &opts)?
                }
                _ => {
                    let cfg = CdpConfig {
                        k,
                        alpha,
                        beta,
                        iterations: iters,
                        epsilon: required_budget(c, c.privacy.epsilon, "epsilon")?,
                    };
                    if variant == Variant::Cdp {
                        train_cdp(&train, &cfg, seed, &opts)?
                    } else {
                        train_cdp_plus(&train, &cfg, seed, &opts)?
                    }
                }
            };
            write_model(out, c, "model", &result.model)?;
            write_json(out, "report.json", &result.report)?;
            out.write("trace.jsonl", |w| Ok(result.trace.write_jsonl(w)?))?;
            let mut rows = vec![
                ("tokens", train.num_tokens() as f64),
                ("degenerate_tokens", result.trace.degenerate_total() as f64),
                ("total_epsilon", result.report.total_epsilon),
            ];
            if let Some(p) = score(&result.model)? {
                rows.push(("perplexity", p));
            }
            write_metrics(out, &rows)?;
            print_summary(&result.report.total_epsilon, score(&result.model)?);
        }
        Variant::Lp => {
            let batch = match (&c.io.batches, &train) {
                (Some(path), _) => single_batch(path)?,
                (None, Some(train)) => perturb_corpus(train, &rr_mech(c)?, derive_seed(seed, "clients")),
                (None, None) => unreachable!("dataset loaded when no batches are given"),
            };
            let result = train_lp(&batch, alpha, beta, k, iters, seed)?;
            write_model(out, c, "model", &result.model)?;
            write_json(out, "report.json", &result.report)?;
            let mut rows = vec![
                ("tokens", result.reconstructed.num_tokens() as f64),
                ("total_epsilon", result.report.total_epsilon),
            ];
            let ppl = score(&result.model)?;
            if let Some(p) = ppl {
                rows.push(("perplexity", p));
            }
            write_metrics(out, &rows)?;
            print_summary(&result.report.total_epsilon, ppl);
        }
        Variant::Olp => {
            let (prior, batches) = match (&c.io.batches, &train) {
                (Some(path), _) => (load_prior(c)?, read_batches(path)?),
                (None, Some(train)) => {
                    let batch_size = c
                        .online
                        .batch_size
                        .ok_or_else(|| config_err("olp needs --batch-size when batches are produced from a dataset"))?;
                    make_batches(
                        train,
                        c.online.prior_size.unwrap_or(0),
                        batch_size,
                        c.online.num_batches,
                        &rr_mech(c)?,
                        derive_seed(seed, "clients"),
                    )?
                }
                (None, None) => unreachable!("dataset loaded when no batches are given"),
            };
            run_online(c, out, prior.as_ref(), &batches, test.as_ref())?;
        }
    }
    Ok(())
}

fn print_summary(epsilon: &f64, perplexity: Option<f64>) {
    match perplexity {
        Some(p) => println!("total epsilon {epsilon}, held-out perplexity {p}"),
        None => println!("total epsilon {epsilon}"),
    }
}

fn load_prior(c: &RunConfig) -> Result<Option<Corpus>> {
    match (&c.io.prior_docword, &c.io.prior_vocab) {
        (Some(d), Some(v)) => Ok(Some(load_uci(d, v, usize::MAX)?)),
        (None, None) => Ok(None),
        _ => Err(config_err("prior_docword and prior_vocab must be given together")),
    }
}

fn run_online(
    c: &RunConfig,
    out: &mut Output,
    prior: Option<&Corpus>,
    batches: &[PerturbedBatch],
    test: Option<&Corpus>,
) -> Result<()> {
    let result = run_olp(prior, batches, test, &olp_config(c), c.seed())?;
    for (i, model) in result.models.iter().enumerate() {
        write_model(out, c, &format!("model_{:04}", i + 1), model)?;
    }
    if let Some(last) = result.models.last() {
        write_model(out, c, "model", last)?;
    }
    write_json(out, "report.json", &result.report)?;
    out.write("metrics.csv", |w| Ok(result.write_metrics_csv(w)?))?;
    for m in &result.metrics {
        match m.perplexity {
            Some(p) => println!("batch {}: {} documents, perplexity {p}", m.l, m.batch_size),
            None if m.skipped => println!("batch {}: empty, skipped", m.l),
            None => println!("batch {}: {} documents", m.l, m.batch_size),
        }
    }
    Ok(())
}

pub fn perturb(c: &RunConfig, out: &mut Output) -> Result<()> {
    let (train, _) = load_dataset(c)?;
    let rr = rr_mech(c)?;
    let client_seed = derive_seed(c.seed(), "clients");
    let (prior, batches) = match c.online.batch_size {
        Some(size) => make_batches(&train, c.online.prior_size.unwrap_or(0), size, c.online.num_batches, &rr, client_seed)?,
        None => (None, vec![perturb_corpus(&train, &rr, client_seed)]),
    };
    if let Some(prior) = prior {
        let vocab = out.path("prior.vocab.txt");
        let docword = out.path("prior.docword.txt");
        prior.write_uci(&docword, &vocab)?;
    }
    let dir = out.dir().join("batches");
    for path in write_batch_dir(&dir, &batches)? {
        let rel = path.strip_prefix(out.dir()).unwrap_or(&path).to_string_lossy().into_owned();
        out.files.push(rel);
    }
    println!(
        "{} batches, f = {}, epsilon_word = {}",
        batches.len(),
        rr.f(),
        rr.epsilon_word()
    );
    Ok(())
}

pub fn reconstruct_cmd(c: &RunConfig, out: &mut Output) -> Result<()> {
    let path = c.io.batches.as_ref().ok_or_else(|| config_err("reconstruct needs --batches"))?;
    let batches = read_batches(path)?;
    for (i, batch) in batches.iter().enumerate() {
        let l = i + 1;
        if batch.is_empty() {
            println!("batch {l}: empty, skipped");
            continue;
        }
        let corpus = reconstruct(batch, derive_seed(batch_seed(c.seed(), l), "lp.server"))?;
        let vocab = out.path(&format!("reconstructed_{l:04}.vocab.txt"));
        let docword = out.path(&format!("reconstructed_{l:04}.docword.txt"));
        corpus.write_uci(&docword, &vocab)?;
        println!("batch {l}: {} documents, {} tokens", corpus.num_docs(), corpus.num_tokens());
    }
    Ok(())
}

pub fn online(c: &RunConfig, out: &mut Output) -> Result<()> {
    let path = c.io.batches.as_ref().ok_or_else(|| config_err("online needs --batches"))?;
    let batches = read_batches(path)?;
    let prior = load_prior(c)?;
    let test = load_test_files(c)?;
    run_online(c, out, prior.as_ref(), &batches, test.as_ref())
}

pub fn attack(c: &RunConfig, out: &mut Output) -> Result<()> {
    let (corpus, _) = load_dataset(c)?;
    let (k, alpha, beta, iters) = (c.k(), c.alpha(), c.beta(), c.iterations());
    let trainer = match c.trainer.variant.unwrap_or(Variant::Cgs) {
        Variant::Cgs => AttackTrainer::Plain { k, alpha, beta },
        Variant::Hdp => AttackTrainer::Hdp(HdpConfig {
            k,
            alpha,
            beta,
            iterations: iters,
            eps_l: required_budget(c, c.privacy.eps_l, "eps-l")?,
            clip: required_budget(c, c.privacy.clip, "clip")?,
            accumulate_noise: c.privacy.accumulate_noise.unwrap_or(false),
        }),
        Variant::CdpPlus => AttackTrainer::CdpPlus(CdpConfig {
            k,
            alpha,
            beta,
            iterations: iters,
            epsilon: required_budget(c, c.privacy.epsilon, "epsilon")?,
        }),
        other => return Err(config_err(format!("the attack supports cgs, hdp and cdp_plus, not {other:?}"))),
    };
    let target = match c.attack.target {
        Some([m, n]) => (m, n),
        None => default_target(&corpus).ok_or_else(|| config_err("corpus has no tokens to attack"))?,
    };
    let floor = c.attack.floor.unwrap_or(dplda::attack::DEFAULT_FLOOR);
    let result = run_attack(&corpus, &trainer, Some(target), iters, c.seed(), floor)?;
    out.write("curve.csv", |w| Ok(write_curve_csv(&result.curve, w)?))?;
    write_json(out, "report.json", &result.report)?;
    let last = result.curve.last().expect("at least one iteration");
    println!(
        "target ({}, {}) word {}: accuracy {} after {} iterations (uniform {})",
        target.0,
        target.1,
        result.true_word,
        last.attack_accuracy,
        last.iteration,
        1.0 / corpus.vocab_size() as f64
    );
    Ok(())
}

pub fn eval(c: &RunConfig, out: &mut Output) -> Result<()> {
    let path = c.io.model.as_ref().ok_or_else(|| config_err("eval needs --model"))?;
    let model = TopicModel::load(path)?;
    let test = match load_test_files(c)? {
        Some(t) => t,
        None => {
            let (train, test) = load_dataset(c)?;
            test.unwrap_or(train)
        }
    };
    let p = perplexity(&model, &test, c.alpha(), c.fold_in_sweeps(), derive_seed(c.seed(), "eval"))?;
    write_metrics(out, &[("perplexity", p)])?;
    println!("perplexity {p}");
    Ok(())
}

pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let plan = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
    };
    Ok(plan)
}

pub fn sweep_cmd(c: &RunConfig, out: &mut Output) -> Result<()> {
    let path = c.io.plan.as_ref().ok_or_else(|| config_err("sweep needs --plan"))?;
    let plan = load_plan(path)?;
    let result = sweep(&plan, worker_count())?;
    out.write("results.csv", |w| Ok(result.write_csv(w)?))?;
    write_json(out, "results.json", &result)?;
    for p in &result.points {
        println!("{} = {}: mean {} over {} seeds", p.x_name, p.x_value, p.mean, p.n_seeds);
    }
    for f in &result.failures {
        eprintln!("cell {} = {} seed {} failed: {}", plan.x_name, f.x_value, f.seed, f.error);
    }
    Ok(())
}
