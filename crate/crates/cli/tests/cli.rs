use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dplda::TopicModel;

fn dplda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dplda")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dplda(args);
    assert!(out.status.success(), "dplda {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn synth_config(dir: &Path) -> String {
    let path = dir.join("synth.toml");
    std::fs::write(
        &path,
        "[dataset]\nn_train = 60\n\n[dataset.synthetic]\ntopics = 3\nvocab = 40\ndocs = 80\ndoc_len = 25\nalpha = 0.3\nbeta = 0.1\nseed = 4\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn metric(path: impl AsRef<Path>, name: &str) -> f64 {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("no metric {name}"))
}

#[test]
fn hdp_report_composes_laplace_and_clipped_inherent_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = out_dir(tmp.path(), "hdp");
    ok(&[
        "train", "--config", &cfg, "--variant", "hdp", "--eps-l", "1.0", "--clip", "10", "--beta", "0.01", "--iters",
        "100", "-k", "3", "--out", &out,
    ]);
    let report = json(Path::new(&out).join("report.json"));
    let total = report["total_epsilon"].as_f64().unwrap();
    let expected = 100.0 * (1.0 + 2.0 * 1001f64.ln());
    assert!((total - expected).abs() <= 1e-9 * expected, "{total} vs {expected}");
    assert_eq!(report["per_iteration"].as_array().unwrap().len(), 100);
    for f in ["model.csv", "trace.jsonl", "metrics.csv", "manifest.json", "config.toml"] {
        assert!(Path::new(&out).join(f).exists(), "missing {f}");
    }
}

#[test]
fn eval_of_uniform_model_is_vocabulary_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let model = tmp.path().join("uniform.csv");
    TopicModel::uniform(3, 40).save(&model).unwrap();
    let out = out_dir(tmp.path(), "eval");
    ok(&["eval", "--config", &cfg, "--model", model.to_str().unwrap(), "--out", &out]);
    let p = metric(Path::new(&out).join("metrics.csv"), "perplexity");
    assert!((p - 40.0).abs() < 1e-9, "{p}");
}

#[test]
fn manifest_records_command_config_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = out_dir(tmp.path(), "cgs");
    ok(&["train", "--config", &cfg, "--variant", "cgs", "--iters", "5", "-k", "2", "--seed", "17", "--out", &out]);
    let m = json(Path::new(&out).join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seed"], 17);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["config"]["trainer"]["k"], 2);
    assert_eq!(m["config"]["trainer"]["alpha"], 1.0);
    assert_eq!(m["config"]["trainer"]["beta"], 0.01);
    assert!(m["wall_time_ms"].is_u64());
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"model.csv") && outputs.contains(&"report.json"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 3\n\n[trainer]\nvariant = \"cgs\"\nk = 5\niterations = 4\n\n[dataset.synthetic]\ntopics = 2\nvocab = 20\ndocs = 30\ndoc_len = 10\nalpha = 0.5\nbeta = 0.1\nseed = 1\n",
    )
    .unwrap();
    let out = out_dir(tmp.path(), "run");
    ok(&["train", "--config", cfg.to_str().unwrap(), "-k", "3", "--out", &out]);
    let m = json(Path::new(&out).join("manifest.json"));
    assert_eq!(m["config"]["trainer"]["k"], 3);
    assert_eq!(m["config"]["trainer"]["iterations"], 4);
    assert_eq!(m["seed"], 3);
    assert_eq!(TopicModel::load(&Path::new(&out).join("model.csv")).unwrap().num_topics(), 3);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = out_dir(tmp.path(), "x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", &cfg, "--out", &out],
        vec!["train", "--config", &cfg, "--variant", "hdp", "--out", &out],
        vec!["train", "--config", &cfg, "--variant", "cdp_plus", "--out", &out],
        vec!["train", "--config", &cfg, "--variant", "lp", "--out", &out],
        vec!["train", "--config", &cfg, "--variant", "cgs", "--alpha", "-1", "--out", &out],
        vec!["train", "--config", &cfg, "--variant", "nope", "--out", &out],
        vec!["train", "--variant", "cgs", "--out", &out],
        vec!["frobnicate"],
        vec!["train", "--config", &cfg, "--variant", "cgs", "--n-train", "500", "--out", &out],
    ];
    for args in cases {
        let o = dplda(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path(), "x");
    let missing = tmp.path().join("missing.txt");
    let m = missing.to_str().unwrap();
    let o = dplda(&["train", "--variant", "cgs", "--docword", m, "--vocab", m, "--out", &out]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn no_privacy_runs_without_budgets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    for variant in ["hdp", "cdp", "cdp_plus", "lp"] {
        let out = out_dir(tmp.path(), variant);
        ok(&["train", "--config", &cfg, "--variant", variant, "--no-privacy", "-k", "2", "--iters", "3", "--out", &out]);
        assert!(Path::new(&out).join("model.csv").exists());
    }
}

#[test]
fn binary_models_round_trip_through_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = out_dir(tmp.path(), "bin");
    ok(&["train", "--config", &cfg, "--variant", "cgs", "-k", "2", "--iters", "5", "--binary-model", "--out", &out]);
    let model: PathBuf = Path::new(&out).join("model.bin");
    let trained = metric(Path::new(&out).join("metrics.csv"), "perplexity");
    let eval = out_dir(tmp.path(), "eval");
    ok(&["eval", "--config", &cfg, "--model", model.to_str().unwrap(), "--alpha", "1", "--out", &eval]);
    assert_eq!(metric(Path::new(&eval).join("metrics.csv"), "perplexity"), trained);
}

#[test]
fn perturbed_batches_reproduce_the_local_trainer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let direct = out_dir(tmp.path(), "direct");
    ok(&["train", "--config", &cfg, "--variant", "lp", "--f", "0.3", "-k", "2", "--iters", "5", "--out", &direct]);
    let pert = out_dir(tmp.path(), "pert");
    ok(&["perturb", "--config", &cfg, "--f", "0.3", "--out", &pert]);
    let from_files = out_dir(tmp.path(), "files");
    let batches = format!("{pert}/batches");
    ok(&["train", "--variant", "lp", "--batches", &batches, "-k", "2", "--iters", "5", "--out", &from_files]);
    assert_eq!(
        std::fs::read(Path::new(&direct).join("model.csv")).unwrap(),
        std::fs::read(Path::new(&from_files).join("model.csv")).unwrap()
    );
}

#[test]
fn local_roles_need_only_batch_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let pert = out_dir(tmp.path(), "pert");
    ok(&["perturb", "--config", &cfg, "--epsilon-word", "2", "--batch-size", "20", "--out", &pert]);
    let batches = format!("{pert}/batches");
    assert_eq!(std::fs::read_dir(&batches).unwrap().count(), 3);

    let rec = out_dir(tmp.path(), "rec");
    ok(&["reconstruct", "--batches", &batches, "--out", &rec]);
    assert!(Path::new(&rec).join("reconstructed_0003.docword.txt").exists());

    let online = out_dir(tmp.path(), "online");
    ok(&["online", "--batches", &batches, "-k", "2", "--iters", "5", "--out", &online]);
    let metrics = std::fs::read_to_string(Path::new(&online).join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "l,batch_size,perplexity,epsilon_word,elapsed_ms");
    assert_eq!(metrics.lines().count(), 4);
    assert!(Path::new(&online).join("model_0003.csv").exists());
}

#[test]
fn attack_writes_a_curve_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let out = out_dir(tmp.path(), "attack");
    ok(&["attack", "--config", &cfg, "-k", "2", "--iters", "6", "--target", "0:1", "--out", &out]);
    let curve = std::fs::read_to_string(Path::new(&out).join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "iteration,attack_accuracy,argmax_correct");
    assert_eq!(lines.count(), 6);
    let o = dplda(&["attack", "--config", &cfg, "--variant", "lp", "--f", "0.5", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_writes_results_in_the_experiment_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = tmp.path().join("plan.json");
    std::fs::write(
        &plan,
        r#"{
  "name": "lp-eps",
  "dataset": {"kind": "synthetic", "k": 2, "v": 30, "m": 60, "doc_len": 20, "alpha": 0.3, "beta": 0.1, "seed": 2},
  "n_train": 45,
  "trainer": {"variant": "lp", "k": 2, "iterations": 5},
  "x_name": "epsilon",
  "grid": [1.0, 4.0],
  "seeds": [1, 2]
}"#,
    )
    .unwrap();
    let out = out_dir(tmp.path(), "sweep");
    ok(&["sweep", "--plan", plan.to_str().unwrap(), "--out", &out]);
    let csv = std::fs::read_to_string(Path::new(&out).join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x_name,x_value,metric,mean,std,n_seeds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("epsilon,1.0,perplexity,"));
    let results = json(Path::new(&out).join("results.json"));
    assert_eq!(results["plan"]["name"], "lp-eps");
}

#[test]
fn replay_reproduces_a_run_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_config(tmp.path());
    let first = out_dir(tmp.path(), "a");
    let second = out_dir(tmp.path(), "b");
    ok(&[
        "train", "--config", &cfg, "--variant", "cdp_plus", "--epsilon", "1", "-k", "2", "--iters", "5", "--trace-full",
        "--out", &first,
    ]);
    ok(&["replay", "--manifest", &format!("{first}/manifest.json"), "--out", &second]);
    for f in ["model.csv", "report.json", "trace.jsonl", "metrics.csv"] {
        assert_eq!(
            std::fs::read(Path::new(&first).join(f)).unwrap(),
            std::fs::read(Path::new(&second).join(f)).unwrap(),
            "{f}"
        );
    }
}
