use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specprune::model;
use specprune::pipeline::artifact_files;

const SYNTH: &str = "\
seed = 3
data.source = synth
synth.n = 150
synth.d = 8
synth.decay = 1.0
data.train = 120
model.hidden = 12,10
train.epochs = 3
train.batch_size = 16
train.learning_rate = 0.02
prune.layers = 2,3
prune.widths = 7,6
prune.lambda_coef = 1e-6
prune.budget_constraint = false
";

fn specprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specprune"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) {
    fs::write(dir.join("synth.conf"), SYNTH).unwrap();
    let out = specprune(&["train", "--config", path(&dir.join("synth.conf")), "--out", path(&dir.join("model"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_prune_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let conf = d.join("synth.conf");

    let out = specprune(&["prune", "--config", path(&conf), "--model", path(&d.join("model")), "--out", path(&d.join("pruned"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layer 2: kept 7/12"), "{stdout}");
    assert!(stdout.contains("layer 3: kept 6/10"), "{stdout}");
    for f in ["bound.json", "bound_layers.csv", "bound_summary.csv", "selections.json", "metrics.json", "run_manifest.json"] {
        assert!(d.join("pruned").join(f).exists(), "missing {f}");
    }

    let out = specprune(&[
        "eval",
        "--config",
        path(&conf),
        "--model",
        path(&d.join("pruned/model")),
        "--compare",
        path(&d.join("model")),
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("‖f − g‖_n"));
}

#[test]
fn full_width_prune_reproduces_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = specprune(&[
        "prune",
        "--config",
        path(&d.join("synth.conf")),
        "--model",
        path(&d.join("model")),
        "--widths",
        "12,10",
        "--set",
        "prune.tau=0",
        "--out",
        path(&d.join("full")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bound: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("full/bound.json")).unwrap()).unwrap();
    let err = bound["compression_error"].as_f64().unwrap();
    assert!(err < 1e-8, "compression error {err}");
}

#[test]
fn exhausted_budget_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    // node 0 of layer 2 becomes nearly silent, so its leverage is tiny and keeping
    // every node costs far more than the budget allows
    let mut net = model::load(d.join("model")).unwrap();
    let first = &mut net.layers_mut()[0];
    first.weight.row_mut(0).fill(0.0);
    first.weight.set(0, 0, 1e-3);
    first.bias[0] = 0.0;
    model::save(&net, d.join("quiet")).unwrap();
    let out = specprune(&[
        "prune",
        "--config",
        path(&d.join("synth.conf")),
        "--model",
        path(&d.join("quiet")),
        "--layers",
        "2",
        "--widths",
        "12",
        "--lambda-coef",
        "1e-2",
        "--set",
        "prune.budget_constraint=true",
        "--out",
        path(&d.join("tight")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(d.join("tight/bound.json").exists());
}

#[test]
fn bad_layer_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = specprune(&[
        "spectrum",
        "--config",
        path(&d.join("synth.conf")),
        "--model",
        path(&d.join("model")),
        "--layers",
        "9",
        "--out",
        path(&d.join("spec")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let out = specprune(&["train", "--set", "train.epoch=3", "--out", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn spectrum_and_sweep_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let conf = d.join("synth.conf");
    let out = specprune(&["spectrum", "--config", path(&conf), "--model", path(&d.join("model")), "--out", path(&d.join("spec"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("spec/eigen_layer2.csv").exists());
    assert!(d.join("spec/spectrum_summary.csv").exists());

    let out = specprune(&[
        "sweep",
        "--config",
        path(&conf),
        "--model",
        path(&d.join("model")),
        "--layers",
        "2",
        "--widths",
        "",
        "--kind",
        "width",
        "--layer",
        "2",
        "--values",
        "3,6,12",
        "--out",
        path(&d.join("sweep")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn same_seed_gives_identical_models() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    setup(a.path());
    setup(b.path());
    let fa = artifact_files(&a.path().join("model")).unwrap();
    assert!(!fa.is_empty());
    assert_eq!(fa, artifact_files(&b.path().join("model")).unwrap());
    for f in fa {
        assert_eq!(fs::read(a.path().join("model").join(&f)).unwrap(), fs::read(b.path().join("model").join(&f)).unwrap(), "{f:?} differs");
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["nn3_mnist.conf", "nn3_synth.conf"] {
        let kv = specprune::config::KvConfig::load(root.join(name)).unwrap();
        let cfg = specprune::config::ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.hidden, vec![300, 1000, 300], "{name}");
    }
}
