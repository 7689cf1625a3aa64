use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use matchseg::data::{load_dataset, load_tensor, save_dataset};
use matchseg::retrieval::EmbeddingIndex;
use matchseg::segnet::ModelParams;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_matchseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn matchseg")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "# small network for tests\nsteps=3\nsupport_k=2\nimage_size=16\nlevels=2\nchannels=4,8\n";

struct Pipeline {
    data: PathBuf,
    emb: PathBuf,
    model: PathBuf,
    loss_log: String,
}

fn pipeline(root: &Path) -> Pipeline {
    let data = root.join("data");
    let emb = root.join("emb.memb");
    let model = root.join("model.mwts");
    let cfg = root.join("train.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    ok(&["synth", "--out", s(&data), "--n", "20", "--domains", "2", "--size", "16", "--seed", "3"]);
    ok(&["embed", "--data", s(&data), "--out", s(&emb), "--provider", "desk"]);
    let loss_log = ok(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--emb", s(&emb), "--out", s(&model),
    ]);
    Pipeline {
        data,
        emb,
        model,
        loss_log,
    }
}

#[test]
fn pipeline_outputs_reload_and_replay_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = pipeline(a.path());
    let pb = pipeline(b.path());

    let ds = load_dataset(&pa.data).unwrap();
    assert_eq!(ds.len(), 20);
    assert_eq!(EmbeddingIndex::load(&pa.emb).unwrap().len(), 20);
    let (params, net) = ModelParams::load(&pa.model).unwrap();
    assert_eq!(net.channels, vec![4, 8]);
    params.check_against(&net).unwrap();
    assert_eq!(std::fs::read(&pa.model).unwrap(), std::fs::read(&pb.model).unwrap());
    assert_eq!(pa.loss_log, pb.loss_log);
    assert_eq!(pa.loss_log.lines().count(), 3);
    assert!(pa.loss_log.lines().all(|l| l.split('\t').count() == 2));

    let eval = |p: &Pipeline| {
        ok(&[
            "eval", "--model", s(&p.model), "--data", s(&p.data), "--emb", s(&p.emb), "--strategy", "random",
            "--repeats", "3", "--ensemble", "--k", "2", "--seed", "5",
        ])
    };
    let report = eval(&pa);
    assert_eq!(report, eval(&pb));
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("MEAN\t"));
    for l in &lines {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert!(cols[1..].iter().all(|c| c.len() == 6 && c.as_bytes()[1] == b'.'));
    }
}

#[test]
fn clip_eval_ignores_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let eval = |r: &str| {
        ok(&[
            "eval", "--model", s(&p.model), "--data", s(&p.data), "--emb", s(&p.emb), "--strategy", "clip",
            "--repeats", r, "--k", "2",
        ])
    };
    assert_eq!(eval("1"), eval("20"));
}

#[test]
fn predict_writes_binary_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let mask = dir.path().join("m.mseg");
    ok(&[
        "predict", "--model", s(&p.model), "--data", s(&p.data), "--query", "img0001", "--emb", s(&p.emb), "--k",
        "2", "--strategy", "clip", "--out", s(&mask),
    ]);
    let t = load_tensor(&mask).unwrap();
    assert_eq!(t.shape(), &[1, 16, 16]);
    assert!(t.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn ablate_prints_three_rows_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let out = ok(&[
        "ablate", "--model", s(&p.model), "--data", s(&p.data), "--emb", s(&p.emb), "--k-list", "1,2", "--repeats",
        "2",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "strategy\tk\tmean_dsc\tstd_dsc");
    assert_eq!(lines.len(), 7);
    let labels: Vec<&str> = lines[1..4].iter().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["random", "random+ensemble", "clip"]);
}

#[test]
fn select_ranks_a_duplicate_first() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--n", "12", "--domains", "2", "--size", "16", "--seed", "1"]);
    let mut ds = load_dataset(&data).unwrap();
    let query = ds.items.iter().find(|it| it.split == matchseg::data::Split::Test).unwrap().clone();
    let mut twin = query.clone();
    twin.id = "twin".into();
    twin.split = matchseg::data::Split::Train;
    ds.items.push(twin);
    let data2 = dir.path().join("data2");
    save_dataset(&data2, &ds).unwrap();
    let emb = dir.path().join("e.memb");
    ok(&["embed", "--data", s(&data2), "--out", s(&emb)]);
    let out = ok(&["select", "--emb", s(&emb), "--data", s(&data2), "--query", &query.id, "--k", "1"]);
    assert_eq!(out, "1\ttwin\t1.0000\n");
    let three = ok(&["select", "--emb", s(&emb), "--data", s(&data2), "--query", &query.id, "--k", "3"]);
    let ranks: Vec<&str> = three.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ranks, ["1", "2", "3"]);
}

#[test]
fn failures_are_one_line_and_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--n", "10", "--domains", "2", "--size", "16"]);

    let cfg = root.join("bad.cfg");
    std::fs::write(&cfg, "steps=2\nlearningrate=1\n").unwrap();
    let model = root.join("m.mwts");
    let err = fails(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&model)]);
    assert!(err.contains("learningrate"), "{err}");
    assert!(!model.exists());

    let err = fails(&["train", "--data", s(&data), "--set", "image_size=18", "--out", s(&model)]);
    assert!(err.contains("divisible"), "{err}");
    assert!(!model.exists());

    fails(&["synth", "--out", s(&data), "--n", "10"]);
    fails(&["synth", "--out", s(&root.join("d2")), "--n", "1", "--domains", "3"]);
    assert!(!root.join("d2").exists());
    fails(&["embed", "--data", s(&root.join("missing")), "--out", s(&root.join("e.memb"))]);
    assert!(!root.join("e.memb").exists());
    fails(&["embed", "--data", s(&data), "--out", s(&root.join("e.memb")), "--provider", "clip"]);

    let not_model = root.join("junk.mwts");
    std::fs::write(&not_model, b"MSEG\x01").unwrap();
    let err = fails(&["eval", "--model", s(&not_model), "--data", s(&data), "--strategy", "random"]);
    assert!(err.contains("magic"), "{err}");

    let emb = root.join("e.memb");
    ok(&["embed", "--data", s(&data), "--out", s(&emb)]);
    let err = fails(&["select", "--emb", s(&emb), "--data", s(&data), "--query", "img0000", "--k", "50"]);
    assert!(err.contains("K = 50"), "{err}");
    let err = fails(&["select", "--emb", s(&emb), "--data", s(&data), "--query", "nobody", "--k", "1"]);
    assert!(err.contains("nobody"), "{err}");
}

#[test]
fn strategy_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--n", "12", "--domains", "2", "--size", "16"]);
    let cfg = root.join("c.cfg");
    std::fs::write(&cfg, format!("{SMALL}selection_strategy=clip\nprovider=file:{}\n", s(&root.join("absent")))).unwrap();
    let model = root.join("m.mwts");
    // clip would need the absent vector file; random does not
    fails(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&model)]);
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--strategy", "random", "--out", s(&model)]);
    assert!(model.exists());
}
