use std::path::Path;
use std::process::{Command, Output};

use cmc_core::metrics::{read_jsonl, PredictionLine};
use cmc_core::synthetic::coreference_corpus;

fn cmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes() {
    let out = cmc(&["gradcheck", "--coords", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("checked 50 coordinates"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cmc(&["eval", "--bogus"]).status.code(), Some(2));
    assert_eq!(cmc(&["frobnicate"]).status.code(), Some(2));
    let out = cmc(&["predict", "--checkpoint", "/no/such.ckpt", "--data", "/no/such.json", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = coreference_corpus(3, 3, 2, 0);
    let data = d.join("data.json");
    corpus.save_cache(&data).unwrap();
    std::fs::write(
        d.join("tiny.toml"),
        "k = 2\nhidden = 16\nlayers = 1\nheads = 2\nff_dim = 32\nmax_seq_len = 64\n\
         max_query_len = 16\ndoc_stride = 32\nmax_steps = 2\nbatch_size = 4\n",
    )
    .unwrap();
    let out = cmc(&["train", "--config", s(&d.join("tiny.toml")), "--train", s(&data), "--out", s(&d.join("run"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = d.join("run/last.ckpt");
    assert!(ckpt.exists() && d.join("run/best.ckpt").exists() && d.join("run/train_log.jsonl").exists());

    let pred = d.join("pred.jsonl");
    let out = cmc(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&pred), "--history", "predicted"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<PredictionLine> = read_jsonl(&pred).unwrap();
    assert_eq!(lines.len(), corpus.num_questions());

    let eval = |extra: &[&str], name: &str| {
        let report = d.join(format!("{name}.tsv"));
        let preds = d.join(format!("{name}.jsonl"));
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data)];
        args.extend_from_slice(&["--report", s(&report), "--predictions", s(&preds)]);
        args.extend_from_slice(extra);
        let out = cmc(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read_to_string(report).unwrap(), std::fs::read_to_string(preds).unwrap())
    };
    let k0 = eval(&["--k", "0"], "k0");
    let ablated = eval(&["--no-question-history", "--no-answer-history"], "ablated");
    assert_eq!(k0, ablated);
    assert!(k0.0.starts_with("section\tgroup\tcount\tf1\noverall\tall\t9\t"), "{}", k0.0);

    let out = cmc(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--k", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        cmc_core::TrainConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
