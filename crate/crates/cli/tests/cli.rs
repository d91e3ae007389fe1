use std::path::Path;
use std::process::{Command, Output};

use attrnet::data::{KvConfig, TensorContainer};
use attrnet::graph::{build_trunk, count_flops, count_params, ArchConfig, FlopConvention};
use attrnet::multihead::MultiHeadModel;

fn attrnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = attrnet(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_data(dir: &Path) {
    ok(
        &["synth", "--set", "num_identities=4", "--set", "samples_per_identity=10", "--out", "data"],
        dir,
    );
}

#[test]
fn flops_matches_library_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["flops"], dir.path());
    let g = build_trunk(&ArchConfig::canonical()).unwrap();
    let macs = count_flops(&g, g.input_shape(), FlopConvention::Macs).unwrap().total;
    assert!(stdout.contains(&format!("# macs\t{macs}")), "{stdout}");
    assert!(stdout.contains(&format!("# params\t{}", count_params(&g).total)));

    let stdout = ok(&["flops", "--convention", "flops2x"], dir.path());
    assert!(stdout.contains(&format!("\t{}", 2 * macs)), "{stdout}");
}

#[test]
fn arch_resolve_writes_the_canonical_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["arch-resolve", "--report", "acc.txt", "--out-config", "arch.conf", "--top", "3"],
        dir.path(),
    );
    let text = std::fs::read_to_string(dir.path().join("arch.conf")).unwrap();
    let cfg = ArchConfig::from_kv(&KvConfig::parse(&text).unwrap(), &ArchConfig::desk()).unwrap();
    assert_eq!(cfg, ArchConfig::canonical());
    let report = std::fs::read_to_string(dir.path().join("acc.txt")).unwrap();
    assert!(report.contains("1,1,7,2"));
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = attrnet(
        &["train-base", "--data", "data/manifest.tsv", "--set", "learning_rat=0.1", "--out", "t.ckpt"],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rat"), "{err}");
    assert!(!dir.path().join("t.ckpt").exists());
}

#[test]
fn missing_input_file_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = attrnet(&["predict", "--bundle", "nope", "--data", "nope.tsv", "--out", "p.txt"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
}

#[test]
fn train_finetune_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    let short = ["--set", "max_minibatches=3", "--set", "batch_size=8"];
    let mut args = vec!["train-base", "--data", "data/manifest.tsv", "--out", "trunk.ckpt"];
    args.extend(short);
    ok(&args, d);
    let log = std::fs::read_to_string(d.join("trunk.ckpt.log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2 + 3);

    for (task, branch, classes, loss) in [("nuisance", "conv19", "7", "softmax"), ("multilabel", "fc", "9", "sigmoid")] {
        let mut args = vec![
            "finetune", "--trunk", "trunk.ckpt", "--branch", branch, "--task", task, "--classes", classes,
            "--loss", loss, "--data", "data/manifest.tsv", "--out", "bundle",
        ];
        args.extend(short);
        ok(&args, d);
    }
    // the bundle trunk is the trained trunk, byte for byte
    assert_eq!(
        std::fs::read(d.join("trunk.ckpt")).unwrap(),
        std::fs::read(d.join("bundle/trunk.ckpt")).unwrap()
    );

    ok(&["predict", "--bundle", "bundle", "--data", "data/manifest.tsv", "--out", "p.txt"], d);
    let preds = std::fs::read_to_string(d.join("p.txt")).unwrap();
    assert_eq!(preds.lines().count(), 40);
    let first = preds.lines().next().unwrap();
    assert!(first.starts_with("s00000 identity="), "{first}");
    assert!(first.contains(" nuisance=") && first.contains(" multilabel_scores=["), "{first}");

    let model = MultiHeadModel::load_bundle(&d.join("bundle")).unwrap();
    assert_eq!(model.heads.len(), 2);
}

#[test]
fn embed_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_data(d);
    ok(
        &["train-base", "--data", "data/manifest.tsv", "--set", "max_minibatches=0", "--out", "t.ckpt"],
        d,
    );
    ok(&["embed", "--trunk", "t.ckpt", "--data", "data/manifest.tsv", "--out", "e.tnsr"], d);
    let e = TensorContainer::read(&d.join("e.tnsr")).unwrap();
    assert_eq!(e.dims, vec![40, 80]);

    std::fs::write(
        d.join("pairs.txt"),
        "s00000 s00001 1 0\ns00000 s00011 0 0\ns00002 s00003 1 1\ns00002 s00013 0 1\n",
    )
    .unwrap();
    let stdout = ok(&["eval-verify", "--pairs", "pairs.txt", "--embeddings", "e.tnsr", "--report", "v.tsv"], d);
    assert!(stdout.contains("over 2 splits"));
    let report = std::fs::read_to_string(d.join("v.tsv")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("mean\t"));

    std::fs::write(d.join("bad.txt"), "s00000 unknown 1 0\n").unwrap();
    let out = attrnet(&["eval-verify", "--pairs", "bad.txt", "--embeddings", "e.tnsr", "--report", "v.tsv"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown"));
}

#[test]
fn operating_point_reports_selected_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // two samples, two classes; positives score above every negative
    TensorContainer::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap().write(&d.join("s.tnsr")).unwrap();
    TensorContainer::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap().write(&d.join("l.tnsr")).unwrap();
    let stdout = ok(
        &["operating-point", "--scores", "s.tnsr", "--labels", "l.tnsr", "--target-fpr", "0.0", "--report", "op.txt"],
        d,
    );
    assert!(stdout.contains("classes\t2"), "{stdout}");
    assert!(std::fs::read_to_string(d.join("op.txt")).unwrap().contains("tpr"));

    TensorContainer::new(vec![2, 2], vec![1.0, 0.5, 0.0, 1.0]).unwrap().write(&d.join("l.tnsr")).unwrap();
    let out = attrnet(
        &["operating-point", "--scores", "s.tnsr", "--labels", "l.tnsr", "--report", "op.txt"],
        d,
    );
    assert!(!out.status.success());
}
