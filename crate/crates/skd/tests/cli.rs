use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_CFG: &str = "preset=student-small\nfrontend=none\nencoder_layers=1\nencoder_cells=8\n\
decoder_layers=1\ndecoder_cells=8\nattention_dim=8\nattention_filters=4\nembedding_size=8\n";

fn skd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skd"))
        .args(args)
        .env_remove("SKD_SEED")
        .output()
        .expect("run skd")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 40-utterance corpus and a one-epoch checkpoint trained on it.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    ckpt: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = skd(&["synth-data", "--out", p(&root), "--utterances", "40", "--seed", "3", "--dim", "8"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::write(root.join("small.cfg"), SMALL_CFG).unwrap();
        let ckpt = root.join("m.ckpt");
        let out = skd(&[
            "train", "--data", p(&root.join("train.jsonl")), "--config", p(&root.join("small.cfg")), "--out",
            p(&ckpt), "--epochs", "2", "--lr", "0.01",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { _dir: dir, root, ckpt }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn synth_data_splits_80_10_10_and_refuses_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = skd(&["synth-data", "--out", p(dir.path()), "--utterances", "100"]);
    assert_eq!(code(&out), 0);
    let lines = |n: &str| fs::read_to_string(dir.path().join(n)).unwrap().lines().count();
    assert_eq!([lines("train.jsonl"), lines("dev.jsonl"), lines("test.jsonl")], [80, 10, 10]);
    assert!(dir.path().join("run.json").exists());

    let empty = skd(&["synth-data", "--out", p(&dir.path().join("e")), "--utterances", "0"]);
    assert_eq!(code(&empty), 2);
    let unwritable = skd(&["synth-data", "--out", "/proc/skd-cannot-write", "--utterances", "5"]);
    assert_eq!(code(&unwritable), 2);
}

#[test]
fn seed_environment_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, seed: &str, env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_skd"));
        cmd.args(["synth-data", "--out", p(&dir.path().join(sub)), "--utterances", "10", "--seed", seed]);
        match env {
            Some(v) => cmd.env("SKD_SEED", v),
            None => cmd.env_remove("SKD_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        fs::read(dir.path().join(sub).join("features/utt00000.skdf")).unwrap()
    };
    assert_eq!(run("a", "1", Some("2")), run("b", "2", None));
    assert_ne!(run("c", "1", None), run("d", "2", None));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = skd(&["gradcheck", "--seed", "4"]);
    assert_eq!(code(&ok), 0);
    let text = stdout(&ok);
    for loss in ["frame-kd", "seq-nll", "seq-kd"] {
        assert!(text.contains(loss), "{text}");
    }
    let bad = skd(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("at encoder.l0.fwd.w_ih[0]"));
    assert_eq!(code(&skd(&["gradcheck", "--sizes", "huge"])), 2);
}

#[test]
fn decode_train_eval_pipeline() {
    let f = Fixture::new();
    let train = f.path("train.jsonl");
    let dev = f.path("dev.jsonl");

    let wide = skd(&["decode", "--model", p(&f.ckpt), "--data", p(&dev), "--beam-size", "2", "--top-k", "3", "--out", p(&f.path("x"))]);
    assert_eq!(code(&wide), 2);

    let one = f.path("one.jsonl");
    let out = skd(&["decode", "--model", p(&f.ckpt), "--data", p(&dev), "--top-k", "1", "--out", p(&one)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("empty beams"));
    for line in fs::read_to_string(&one).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["hypotheses"].as_array().unwrap().len(), 1);
    }

    // Worker count does not change the output.
    let labels = f.path("labels.jsonl");
    let again = f.path("labels3.jsonl");
    assert_eq!(code(&skd(&["decode", "--model", p(&f.ckpt), "--data", p(&train), "--out", p(&labels)])), 0);
    assert_eq!(
        code(&skd(&["decode", "--model", p(&f.ckpt), "--data", p(&train), "--out", p(&again), "--workers", "3"])),
        0
    );
    assert_eq!(fs::read(&labels).unwrap(), fs::read(&again).unwrap());

    let hyps: usize = fs::read_to_string(&labels)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["hypotheses"].as_array().unwrap().len())
        .sum();
    let out = skd(&[
        "train", "--data", p(&train), "--labels", p(&labels), "--config", p(&f.path("small.cfg")), "--out",
        p(&f.path("kd.ckpt")), "--epochs", "1",
    ]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains(&format!("{hyps} pseudo-label pairs")), "{}", stdout(&out));

    let greedy = skd(&["eval", "--model", p(&f.ckpt), "--data", p(&dev)]);
    let beam1 = skd(&["eval", "--model", p(&f.ckpt), "--data", p(&dev), "--beam-size", "1"]);
    assert_eq!(code(&greedy), 0);
    assert_eq!(stdout(&greedy), stdout(&beam1));
    let last = stdout(&greedy).lines().last().unwrap().to_string();
    assert!(last.starts_with("CER=") && last.contains("% WER=") && last.ends_with('%'), "{last}");
}

#[test]
fn input_errors_exit_with_2() {
    let f = Fixture::new();
    let missing = skd(&["eval", "--model", p(&f.path("nope.ckpt")), "--data", p(&f.path("dev.jsonl"))]);
    assert_eq!(code(&missing), 2);

    // Features of another dimension do not fit the checkpoint.
    let other = f.path("other");
    assert_eq!(code(&skd(&["synth-data", "--out", p(&other), "--utterances", "10", "--dim", "5"])), 0);
    let mismatch = skd(&["decode", "--model", p(&f.ckpt), "--data", p(&other.join("dev.jsonl")), "--out", p(&f.path("m"))]);
    assert_eq!(code(&mismatch), 2);

    let bad_key = skd(&["train", "--data", p(&f.path("train.jsonl")), "--out", p(&f.path("k")), "--set", "colour=red"]);
    assert_eq!(code(&bad_key), 2);
    assert_eq!(code(&skd(&["decode", "--beam-size", "3"])), 2);
}

#[test]
fn divergence_exits_with_3() {
    let f = Fixture::new();
    let out = skd(&[
        "train", "--data", p(&f.path("train.jsonl")), "--config", p(&f.path("small.cfg")), "--out",
        p(&f.path("d.ckpt")), "--epochs", "3", "--lr", "1e300",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_writes_log_and_run_manifest() {
    let f = Fixture::new();
    let log = fs::read_to_string(f.path("m.ckpt.log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for key in ["epoch", "step", "loss", "lr", "val_cer"] {
        assert!(records[1].get(key).is_some(), "{key}");
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("m.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(run["subcommand"], "train");
    assert_eq!(run["config"]["encoder_cells"], "8");
    assert_eq!(run["inputs"].as_object().unwrap().len(), 2);
}
