//! End-to-end behaviour of the trainers on small synthetic corpora.

use dplda::batch_io::{read_batch_dir, write_batch_dir};
use dplda::corpus::{synth_corpus, Corpus};
use dplda::eval::perplexity;
use dplda::hdp::{train_cdp_plus, train_hdp, train_plain, CdpConfig, HdpConfig, TraceOptions};
use dplda::lplda::{perturb_corpus, reconstruct, train_lp};
use dplda::online::{make_batches, run_olp, OlpConfig, Shrinkage};
use dplda::privacy::RRMech;
use dplda::rng::derive_seed;
use dplda::sampler;
use dplda::TopicModel;

fn corpus() -> (Corpus, Corpus, TopicModel) {
    let (c, truth) = synth_corpus(4, 60, 300, 40, 0.2, 0.05, 8).unwrap();
    let (train, test) = c.split(240, 1).unwrap();
    (train, test, truth)
}

fn score(model: &TopicModel, test: &Corpus) -> f64 {
    perplexity(model, test, 1.0, 20, 99).unwrap()
}

#[test]
fn cdp_plus_improves_with_budget() {
    let (train, test, _) = corpus();
    let mean = |eps: f64| -> f64 {
        (1..=2)
            .map(|seed| {
                let cfg = CdpConfig { k: 4, alpha: 1.0, beta: 0.01, iterations: 40, epsilon: eps };
                score(&train_cdp_plus(&train, &cfg, seed, &TraceOptions::default()).unwrap().model, &test)
            })
            .sum::<f64>()
            / 2.0
    };
    let strict = mean(0.1);
    let loose = mean(100.0);
    assert!(loose < strict, "eps 100: {loose}, eps 0.1: {strict}");
}

#[test]
fn hdp_without_noise_or_clipping_is_plain_cgs() {
    let (train, _, _) = corpus();
    let cfg = HdpConfig {
        k: 4,
        alpha: 1.0,
        beta: 0.01,
        iterations: 10,
        eps_l: f64::INFINITY,
        clip: f64::INFINITY,
        accumulate_noise: false,
    };
    let hdp = train_hdp(&train, &cfg, 5, &TraceOptions::default()).unwrap();
    let plain = train_plain(&train, 4, 1.0, 0.01, 10, 5, &TraceOptions::default()).unwrap();
    assert_eq!(hdp.model, plain.model);
    let cgs = sampler::train(&train, 4, 1.0, 0.01, 10, 5).unwrap();
    assert_eq!(cgs.model, plain.model);
}

#[test]
fn accumulated_and_fresh_noise_differ_but_both_train() {
    let (train, test, _) = corpus();
    let base = HdpConfig {
        k: 4,
        alpha: 1.0,
        beta: 0.5,
        iterations: 15,
        eps_l: 2.0,
        clip: 50.0,
        accumulate_noise: false,
    };
    let fresh = train_hdp(&train, &base, 3, &TraceOptions::default()).unwrap();
    let acc = train_hdp(&train, &HdpConfig { accumulate_noise: true, ..base }, 3, &TraceOptions::default()).unwrap();
    assert_ne!(fresh.model, acc.model);
    assert_eq!(fresh.report.total_epsilon, acc.report.total_epsilon);
    assert!(score(&fresh.model, &test).is_finite() && score(&acc.model, &test).is_finite());
}

#[test]
fn light_local_noise_stays_near_the_clean_presence_corpus() {
    let (train, test, _) = corpus();
    let rr = RRMech::new(0.05).unwrap();
    let batch = perturb_corpus(&train, &rr, 11);
    let clean: Vec<u64> = {
        let mut c = vec![0u64; train.vocab_size()];
        for d in train.binary_docs() {
            for (t, &b) in d.bits.iter().enumerate() {
                c[t] += u64::from(b);
            }
        }
        c
    };
    let rebuilt = reconstruct(&batch, 12).unwrap();
    let mut rebuilt_counts = vec![0u64; train.vocab_size()];
    for d in rebuilt.documents() {
        for &t in &d.tokens {
            rebuilt_counts[t as usize] += 1;
        }
    }
    let total: u64 = clean.iter().sum();
    let err: u64 = clean.iter().zip(&rebuilt_counts).map(|(a, b)| a.abs_diff(*b)).sum();
    assert!((err as f64) < 0.1 * total as f64, "L1 error {err} of {total}");

    let lp = train_lp(&batch, 1.0, 0.01, 4, 40, 2).unwrap();
    let presence = Corpus::new(
        train.vocabulary().clone(),
        train.binary_docs().iter().map(|d| d.to_document()).collect(),
    )
    .unwrap();
    let clean_model = sampler::train(&presence, 4, 1.0, 0.01, 40, 2).unwrap().model;
    let (lp_ppl, clean_ppl) = (score(&lp.model, &test), score(&clean_model, &test));
    assert!(lp_ppl < 1.25 * clean_ppl, "lp {lp_ppl} vs clean {clean_ppl}");
}

#[test]
fn batches_survive_the_file_round_trip() {
    let (train, _, _) = corpus();
    let rr = RRMech::from_epsilon_word(2.0).unwrap();
    let (_, batches) = make_batches(&train, 0, 50, None, &rr, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_batch_dir(dir.path(), &batches).unwrap();
    let back = read_batch_dir(dir.path()).unwrap();
    assert_eq!(back.len(), batches.len());
    for (a, b) in batches.iter().zip(&back) {
        assert_eq!(a.vectors(), b.vectors());
        assert_eq!(a.f(), b.f());
    }
    let a = train_lp(&batches[0], 1.0, 0.01, 3, 5, 9).unwrap();
    let b = train_lp(&back[0], 1.0, 0.01, 3, 5, 9).unwrap();
    assert_eq!(a.model, b.model);
}

#[test]
fn online_training_is_deterministic_and_scores_every_batch() {
    let (train, test, _) = corpus();
    let rr = RRMech::from_epsilon_word(3.0).unwrap();
    let (prior, batches) = make_batches(&train, 60, 60, None, &rr, derive_seed(1, "clients")).unwrap();
    assert_eq!(prior.as_ref().map(Corpus::num_docs), Some(60));
    assert_eq!(batches.len(), 3);
    let cfg = OlpConfig {
        k: 4,
        alpha: 1.0,
        beta: 0.01,
        iterations: 15,
        lambda: 0.5,
        shrinkage: Shrinkage::Omega(0.4),
        fold_in_sweeps: 10,
    };
    let a = run_olp(prior.as_ref(), &batches, Some(&test), &cfg, 1).unwrap();
    let b = run_olp(prior.as_ref(), &batches, Some(&test), &cfg, 1).unwrap();
    assert_eq!(a.models, b.models);
    let ppl: Vec<f64> = a.metrics.iter().map(|m| m.perplexity.unwrap()).collect();
    assert_eq!(ppl, b.metrics.iter().map(|m| m.perplexity.unwrap()).collect::<Vec<_>>());
    assert!(ppl.iter().all(|p| p.is_finite() && *p > 1.0));
    assert_eq!(a.running_average_perplexity().len(), 3);
}

#[test]
fn learned_model_approaches_the_generator() {
    let (train, test, truth) = corpus();
    let model = sampler::train(&train, 4, 0.2, 0.05, 150, 3).unwrap().model;
    let learned = perplexity(&model, &test, 0.2, 20, 7).unwrap();
    let reference = perplexity(&truth, &test, 0.2, 20, 7).unwrap();
    assert!(learned < 1.1 * reference, "{learned} vs {reference}");
}
