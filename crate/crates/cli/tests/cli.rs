use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn repsnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repsnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = repsnet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &str = "epochs = 2\nd_x = 8\nd_q = 8\nd = 8\nban_rank = 4\ntext_layers = 1\ndec_layers = 1\ndec_width = 16\nclassifier_hidden = 8\nlr = 1e-3\nmax_tokens = 30\n";

/// Synthetic data plus a small config in a fresh directory.
fn workspace(samples: usize, mode: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["synth", "--out", "data", "--seed", "3", "--samples", &samples.to_string(), "--mode", mode],
        dir.path(),
    );
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn train(dir: &Path, ckpt: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--config", "small.cfg", "--data", "data/train.jsonl", "--checkpoint", ckpt];
    args.extend_from_slice(extra);
    ok(&args, dir)
}

#[test]
fn synth_writes_both_splits() {
    let dir = workspace(20, "mixed");
    let train = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    let eval = fs::read_to_string(dir.path().join("data/eval.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 16);
    assert_eq!(eval.lines().count(), 4);
    let out = repsnet(&["synth", "--out", "x", "--mode", "weird"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = workspace(20, "mixed");
    let log_a = train(dir.path(), "a", &["--seed", "4"]);
    let log_b = train(dir.path(), "b", &["--seed", "4"]);
    assert_eq!(log_a.replace("to a ", "to b "), log_b);
    for f in ["model.ckpt", "index.rnix", "vocab.txt", "classes.txt", "metrics.log"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let log = fs::read_to_string(dir.path().join("a/metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("epoch=") && l.contains("contrastive=")));

    train(dir.path(), "c", &["--seed", "5"]);
    assert_ne!(
        fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        fs::read(dir.path().join("c/model.ckpt")).unwrap()
    );
}

#[test]
fn zero_epochs_saves_initial_weights() {
    let dir = workspace(20, "mixed");
    fs::write(dir.path().join("zero.cfg"), SMALL.replace("epochs = 2", "epochs = 0")).unwrap();
    ok(
        &["train", "--config", "zero.cfg", "--data", "data/train.jsonl", "--checkpoint", "z"],
        dir.path(),
    );
    assert_eq!(fs::read_to_string(dir.path().join("z/metrics.log")).unwrap(), "");
    assert!(dir.path().join("z/model.ckpt").exists());
}

#[test]
fn eval_reports_text_and_json() {
    let dir = workspace(20, "mixed");
    train(dir.path(), "ck", &[]);
    let args = ["eval", "--checkpoint", "ck", "--data", "data/eval.jsonl", "--out", "m.json"];
    let text = ok(&args, dir.path());
    assert!(text.contains("accuracy:") && text.contains("bleu:"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    for key in ["accuracy", "unseen", "bleu", "samples"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    for key in ["b1", "b2", "b3", "b4"] {
        assert!(json["bleu"][key].is_f64());
    }
    let first = fs::read(dir.path().join("m.json")).unwrap();
    assert_eq!(ok(&args, dir.path()), text);
    assert_eq!(fs::read(dir.path().join("m.json")).unwrap(), first);
}

#[test]
fn close_only_eval_omits_bleu() {
    let dir = workspace(20, "close");
    let log = train(dir.path(), "ck", &[]);
    assert!(log.contains("0 answers indexed"), "{log}");
    let text = ok(&["eval", "--checkpoint", "ck", "--data", "data/eval.jsonl"], dir.path());
    assert!(text.contains("bleu omitted"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ck/eval.json")).unwrap()).unwrap();
    assert!(json["bleu"].is_null());
    let out = repsnet(&["generate", "--checkpoint", "ck", "--data", "data/eval.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no answer index"));
}

#[test]
fn generate_is_deterministic_and_routes_beam() {
    let dir = workspace(20, "open");
    train(dir.path(), "ck", &[]);
    let greedy = ["generate", "--checkpoint", "ck", "--data", "data/eval.jsonl", "--k", "2"];
    let a = ok(&greedy, dir.path());
    assert_eq!(a, ok(&greedy, dir.path()));
    assert_eq!(a.matches("answer:").count(), 4);
    assert_eq!(a.matches("neighbours: 2").count(), 4);
    let beam = ["generate", "--checkpoint", "ck", "--data", "data/eval.jsonl", "--beam", "4", "--out", "g.txt"];
    let b = ok(&beam, dir.path());
    assert_eq!(b, ok(&beam, dir.path()));
    assert_eq!(fs::read_to_string(dir.path().join("g.txt")).unwrap(), b);
}

#[test]
fn retrieve_ranks_and_clamps() {
    let dir = workspace(20, "open");
    train(dir.path(), "ck", &[]);
    let out = repsnet(&["retrieve", "--checkpoint", "ck", "--data", "data/eval.jsonl", "--k", "500"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let text = String::from_utf8(out.stdout).unwrap();
    for block in text.split("id: ").skip(1) {
        let scores: Vec<f64> = block
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(scores.len(), 16);
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
    let out = repsnet(&["retrieve", "--checkpoint", "ck", "--data", "data/eval.jsonl", "--k", "0"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = workspace(20, "mixed");
    let missing = repsnet(&["eval", "--checkpoint", "nowhere", "--data", "data/eval.jsonl"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    let no_data = repsnet(&["train", "--config", "small.cfg", "--data", "nope.jsonl", "--checkpoint", "x"], dir.path());
    assert_eq!(no_data.status.code(), Some(2));

    fs::write(dir.path().join("bad.cfg"), "epochz = 3\n").unwrap();
    let bad = repsnet(&["train", "--config", "bad.cfg", "--data", "data/train.jsonl", "--checkpoint", "x"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("epochz"));

    let flag = repsnet(&["train", "--frobnicate"], dir.path());
    assert_eq!(flag.status.code(), Some(1));
    assert_eq!(repsnet(&["--help"], dir.path()).status.code(), Some(0));

    fs::write(dir.path().join("broken.jsonl"), "{not json}\n").unwrap();
    let broken = repsnet(&["train", "--config", "small.cfg", "--data", "broken.jsonl", "--checkpoint", "x"], dir.path());
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stderr).contains("broken.jsonl:1"));
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let dir = workspace(20, "mixed");
    train(dir.path(), "ck", &[]);
    fs::write(dir.path().join("ck/vocab.txt"), "<pad>\n<bos>\n<eos>\n<unk>\nzebra\n").unwrap();
    let out = repsnet(&["eval", "--checkpoint", "ck", "--data", "data/eval.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vocabulary"));
}
