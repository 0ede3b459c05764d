use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvam_core::checkpoint::{load_checkpoint, save_checkpoint};
use mvam_core::data::{load_split, Corpus, Split};
use mvam_core::model::ParamSet;
use mvam_core::trainer::Trainer;
use mvam_core::Rng;

fn mvam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvam")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A 60/20/20 dataset.
fn small_data(root: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(name);
    let mut args = vec!["gen-synth", "--out", p(&dir), "--images", "60", "--val-images", "20", "--test-images", "20"];
    args.extend_from_slice(extra);
    let o = mvam(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

const SMALL_RUN: &str = r#"{"train": {"views": 4, "epochs": 4, "stage2_epochs": 2, "batch_size": 16, "seed": 3}}"#;

fn train(config: &Path, data: &Path, out: &Path) -> Output {
    mvam(&["train", "--config", p(config), "--data", p(data), "--out", p(out)])
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_synth_defaults_write_loadable_splits() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = mvam(&["gen-synth", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sizes: Vec<usize> = Split::ALL.iter().map(|&s| load_split(&out, s).unwrap().images().len()).collect();
    assert_eq!(sizes, [500, 50, 50]);
    let audit: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(audit["duplicate_sets"], 0);
}

#[test]
fn gen_synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path(), "a", &["--seed", "5"]);
    let b = small_data(dir.path(), "b", &["--seed", "5"]);
    let c = small_data(dir.path(), "c", &["--seed", "6"]);
    for f in ["train.mvf", "train.json", "val.mvf", "val.json", "test.mvf", "test.json", "synth.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    assert_ne!(read(a.join("train.mvf")), read(c.join("train.mvf")));
}

#[test]
fn gen_synth_rejects_impossible_spec() {
    let dir = tempfile::tempdir().unwrap();
    let o = mvam(&["gen-synth", "--out", p(&dir.path().join("x")), "--aspects", "4", "--vocab", "3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("aspect_vocab_size"), "{}", stderr(&o));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn gen_synth_reports_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(&dir.path().join("file"), "");
    let o = mvam(&["gen-synth", "--out", p(&blocker.join("sub")), "--images", "60"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn train_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let cfg = write(&dir.path().join("run.json"), SMALL_RUN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (oa, ob) = (train(&cfg, &data, &a), train(&cfg, &data, &b));
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0);
    assert_eq!(oa.stdout, ob.stdout);
    for f in ["metrics.jsonl", "last.ckpt", "best.ckpt"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let log = String::from_utf8(read(a.join("metrics.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn train_with_zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let cfg = write(
        &dir.path().join("run.json"),
        r#"{"train": {"views": 4, "epochs": 3, "stage2_epochs": 1, "batch_size": 16, "lr_stage1": 0, "lr_stage2": 0}}"#,
    );
    let out = dir.path().join("r");
    let o = train(&cfg, &data, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let last = load_checkpoint(&out.join("last.ckpt")).unwrap();
    let init = ParamSet::init(&last.arch, &mut Rng::with_stream(last.config.seed, 0)).unwrap();
    let init_path = dir.path().join("init.ckpt");
    save_checkpoint(&mvam_core::checkpoint::Checkpoint { params: init, ..last.clone() }, &init_path).unwrap();

    let o = mvam(&["ckpt-diff", p(&out.join("last.ckpt")), p(&init_path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 10);
    for line in table.lines() {
        let (_, d) = line.split_once('\t').unwrap();
        assert_eq!(d.parse::<f64>().unwrap(), 0.0, "{line}");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let cfg_path = write(&dir.path().join("run.json"), SMALL_RUN);
    let full = dir.path().join("full");
    assert_eq!(code(&train(&cfg_path, &data, &full)), 0);

    // Leave a run directory as if the process had stopped after epoch 2.
    let corpus = Corpus::new(
        load_split(&data, Split::Train).unwrap(),
        load_split(&data, Split::Val).unwrap(),
        None,
    )
    .unwrap();
    let run: mvam_config::Run = serde_json::from_str(SMALL_RUN).unwrap();
    let mut t = Trainer::new(&corpus, run.train).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let part = dir.path().join("part");
    std::fs::create_dir_all(&part).unwrap();
    save_checkpoint(&t.checkpoint(), &part.join("last.ckpt")).unwrap();
    save_checkpoint(t.best_checkpoint().unwrap(), &part.join("best.ckpt")).unwrap();
    let log: String = t.log().iter().map(|m| m.to_json_line() + "\n").collect();
    write(&part.join("metrics.jsonl"), &log);

    let o = mvam(&["train", "--config", p(&cfg_path), "--data", p(&data), "--out", p(&part), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.jsonl", "last.ckpt", "best.ckpt"] {
        assert_eq!(read(part.join(f)), read(full.join(f)), "{f}");
    }

    // A different run file must not silently continue this run.
    let other = write(&dir.path().join("other.json"), &SMALL_RUN.replace("\"seed\": 3", "\"seed\": 4"));
    let o = mvam(&["train", "--config", p(&other), "--data", p(&data), "--out", p(&part), "--resume"]);
    assert_eq!(code(&o), 1);
}

mod mvam_config {
    #[derive(serde::Deserialize)]
    pub struct Run {
        pub train: mvam_core::trainer::TrainConfig,
    }
}

#[test]
fn schema_violations_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let cases = [
        (r#"{"train": {"views": 4, "bogus": 1}}"#, "train.bogus"),
        (r#"{"train": {"views": "four"}}"#, "train.views"),
        (r#"{"synth": {"seed": -1}}"#, "synth.seed"),
        (r#"{"extra": true}"#, "extra"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write(&dir.path().join(format!("c{i}.json")), text);
        let out = dir.path().join(format!("o{i}"));
        let o = train(&cfg, &data, &out);
        assert_eq!(code(&o), 1, "{text}");
        assert!(stderr(&o).contains(field), "{text}: {}", stderr(&o));
        assert!(!out.exists(), "nothing is written before validation");
    }
    let cfg = write(&dir.path().join("sem.json"), r#"{"train": {"epochs": 2, "stage2_epochs": 3}}"#);
    assert_eq!(code(&train(&cfg, &data, &dir.path().join("sem"))), 1);
}

#[test]
fn eval_and_attn_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let cfg = write(&dir.path().join("run.json"), SMALL_RUN);
    let run = dir.path().join("r");
    assert_eq!(code(&train(&cfg, &data, &run)), 0);
    let ckpt = run.join("best.ckpt");

    let results = dir.path().join("eval.json");
    let o = mvam(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--k", "1,5,10", "--out", p(&results)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&read(results)).unwrap();
    let records = v["results"].as_array().unwrap();
    assert_eq!(records.len(), 6);
    for r in records {
        let recall = r["recall"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&recall));
    }
    let recall = |dir: &str, k: u64| {
        records.iter().find(|r| r["direction"] == dir && r["K"] == k).unwrap()["recall"].as_f64().unwrap()
    };
    assert!(recall("i2t", 1) <= recall("i2t", 5) && recall("i2t", 5) <= recall("i2t", 10));
    assert!(recall("t2i", 1) <= recall("t2i", 5) && recall("t2i", 5) <= recall("t2i", 10));

    let o = mvam(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--folds", "4", "--split", "val"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let attn = dir.path().join("attn");
    let o = mvam(&["attn", "--checkpoint", p(&ckpt), "--data", p(&data), "--ids", "image:0,caption:2", "--out", p(&attn)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_slice(&read(attn.join("caption_2.json"))).unwrap();
    let weights = dump["weights"].as_array().unwrap();
    assert_eq!(weights.len(), 4);
    for row in weights {
        let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(attn.join("image_0.json").exists());

    let o = mvam(&["attn", "--checkpoint", p(&ckpt), "--data", p(&data), "--ids", "image:999999", "--out", p(&attn)]);
    assert_eq!(code(&o), 1);
    let o = mvam(&["attn", "--checkpoint", p(&ckpt), "--data", p(&data), "--ids", "photo:1", "--out", p(&attn)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn eval_rejects_mismatched_widths() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let narrow = small_data(dir.path(), "n", &["--dim", "16"]);
    let cfg = write(&dir.path().join("run.json"), r#"{"train": {"views": 2, "epochs": 1, "stage2_epochs": 0, "batch_size": 16}}"#);
    let run = dir.path().join("r");
    assert_eq!(code(&train(&cfg, &data, &run)), 0);
    let o = mvam(&["eval", "--checkpoint", p(&run.join("last.ckpt")), "--data", p(&narrow)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("16") && err.contains("32"), "{err}");
}

#[test]
fn corrupt_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "d", &[]);
    let bad = write(&dir.path().join("bad.ckpt"), "MVC1 not really");
    let o = mvam(&["eval", "--checkpoint", p(&bad), "--data", p(&data)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("byte"), "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let o = mvam(&["gradcheck", "--seed", "0", "--variant", "sqrt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("img_view_codes") && table.contains("txt_encoder.weight"));

    // An impossible threshold reports failure as a numeric error.
    let o = mvam(&["gradcheck", "--seed", "0", "--threshold", "0"]);
    assert_eq!(code(&o), 2);
    let o = mvam(&["gradcheck", "--h", "1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&mvam(&["frobnicate"])), 1);
    assert_eq!(code(&mvam(&["eval"])), 1);
    let o = mvam(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let help = String::from_utf8(o.stdout).unwrap();
    for field in ["train.views", "train.beta", "train.variant", "train.stage2_epochs", "synth.aspects_per_image"] {
        assert!(help.contains(field), "{field}");
    }
}
