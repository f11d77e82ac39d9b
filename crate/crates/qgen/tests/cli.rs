use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qgen::config::ExperimentConfig;
use qgen::manifest::{content_hash, read_manifest};
use qgen::toy_data_dir;

fn qgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgen")).args(args).env("QGEN_THREADS", "2").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = qgen(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = qgen(args);
    assert_eq!(out.status.code(), Some(1), "{args:?}");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") && err.lines().count() == 1, "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A short training run on the toy corpus.
fn trained(dir: &Path) -> PathBuf {
    let mut exp = ExperimentConfig::load(&toy_data_dir().join("toy.cfg")).unwrap();
    exp.model.word_dim = 16;
    exp.train.max_steps = 40;
    exp.train.eval_interval = 10;
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, exp.to_text()).unwrap();
    let model = dir.join("model");
    let stdout = ok(&["train", s(&cfg), "--out", s(&model)]);
    assert!(stdout.starts_with("trained: final E"), "{stdout}");
    model
}

#[test]
fn train_generate_evaluate_average() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained(tmp.path());
    for f in ["model.ckpt", "last.ckpt", "config.txt", "vocab.txt", "pos.txt", "ner.txt", "train_log.jsonl"] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let steps: Vec<_> = fs::read_dir(model.join("checkpoints")).unwrap().collect();
    assert_eq!(steps.len(), 4);
    assert_eq!(fs::read_to_string(model.join("train_log.jsonl")).unwrap().lines().count(), 40);

    let manifest = read_manifest(&model.join("manifest.json")).unwrap();
    assert_eq!(manifest.command, "train");
    let train_file = toy_data_dir().join("toy_train.jsonl");
    let input = manifest.inputs.iter().find(|i| i.path.ends_with("toy_train.jsonl")).unwrap();
    assert_eq!(input.hash, content_hash(&fs::read(&train_file).unwrap()));

    let dev = toy_data_dir().join("toy_dev.jsonl");
    let beam1 = tmp.path().join("beam1.txt");
    let again = tmp.path().join("again.txt");
    let beam4 = tmp.path().join("beam4.txt");
    ok(&["generate", "--model", s(&model), "--data", s(&dev), "--out", s(&beam1), "--beam", "1"]);
    ok(&["generate", "--model", s(&model), "--data", s(&dev), "--out", s(&again), "--beam", "1"]);
    ok(&["generate", "--model", s(&model), "--data", s(&dev), "--out", s(&beam4), "--beam", "4"]);
    assert_eq!(fs::read(&beam1).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read_to_string(&beam4).unwrap().lines().count(), 8);
    assert!(tmp.path().join("beam1.txt.manifest.json").is_file());

    let refs = tmp.path().join("refs.txt");
    let questions: Vec<String> = fs::read_to_string(&dev)
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let q: Vec<&str> = v["question"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
            q.join(" ")
        })
        .collect();
    fs::write(&refs, questions.join("\n") + "\n").unwrap();
    let json = ok(&["evaluate", "--hyps", s(&beam1), "--refs", s(&refs), "--model", s(&model), "--data", s(&dev)]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(v.to_string().contains("perplexity"), "{json}");
    let table = ok(&["evaluate", "--hyps", s(&beam1), s(&beam4), "--refs", s(&refs), "--table"]);
    assert!(table.contains("BLEU-4"), "{table}");
    let self_table = ok(&["evaluate", "--hyps", s(&refs), "--refs", s(&refs), "--table"]);
    assert!(self_table.contains("100.00"), "{self_table}");

    let ckpt = model.join("model.ckpt");
    let avg = tmp.path().join("avg.ckpt");
    let c = s(&ckpt);
    ok(&["average", c, c, c, c, c, "--out", s(&avg)]);
    assert_eq!(fs::read(&avg).unwrap(), fs::read(&ckpt).unwrap());
}

#[test]
fn errors_are_one_line_with_exit_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let err = fails(&["generate", "--model", s(&missing), "--data", s(&missing), "--out", s(&missing)]);
    assert!(err.contains("no such model"), "{err}");

    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "train.beta = 0.5\nmodel.colour = blue\n").unwrap();
    let err = fails(&["train", s(&bad_cfg), "--out", s(&missing)]);
    assert!(err.contains("bad.cfg:2"), "{err}");

    let bad_data = tmp.path().join("bad.jsonl");
    fs::write(&bad_data, "{\"sentence\": [\"a\"]}\n").unwrap();
    let cfg = tmp.path().join("ok.cfg");
    fs::write(&cfg, "data.train = bad.jsonl\n").unwrap();
    let err = fails(&["train", s(&cfg), "--out", s(&missing)]);
    assert!(err.contains("bad.jsonl:1"), "{err}");

    let junk = tmp.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let err = fails(&["average", s(&junk), "--out", s(&tmp.path().join("out.ckpt"))]);
    assert!(err.contains("magic"), "{err}");

    let hyps = tmp.path().join("h.txt");
    let refs = tmp.path().join("r.txt");
    fs::write(&hyps, "a b\n").unwrap();
    fs::write(&refs, "a b\nc d\n").unwrap();
    fails(&["evaluate", "--hyps", s(&hyps), "--refs", s(&refs)]);
}
