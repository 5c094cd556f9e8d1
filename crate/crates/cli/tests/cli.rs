use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use collossl::data::save_dataset;
use collossl::synth::{generate, SynthConfig};

const TINY: &str = r#"
seed = 3

[synth]
num_devices = 3
num_classes = 3
num_subjects = 4
windows_per_subject_per_class = 6

[train]
anchor_id = "device0"
batch_size = 16
pretrain_lr = 1e-3
max_epochs = 2
finetune_max_epochs = 2
finetune_batch_size = 32

[eval]
num_groups = 2
max_folds = 1
"#;

fn collossl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collossl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("COLLOSSL_OUTPUT_ROOT")
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn generate_pretrain_finetune_export() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["synth-gen", "-c", "tiny.toml", "-o", "gen"]));
    assert!(d.join("gen/dataset/manifest.toml").exists());
    assert_eq!(run_json(&d.join("gen"))["status"], "ok");

    ok(&collossl(d, &["pretrain", "-c", "tiny.toml", "--data", "gen/dataset", "-o", "pre"]));
    assert!(d.join("pre/extractor.ckpt").exists());
    assert!(d.join("pre/pretrain_log.csv").exists());
    assert!(d.join("pre/pretrain_selections.csv").exists());

    ok(&collossl(d, &["finetune", "-c", "tiny.toml", "--data", "gen/dataset", "--checkpoint", "pre/extractor.ckpt", "--label-fraction", "0.5", "-o", "ft"]));
    assert!(d.join("ft/classifier.ckpt").exists());
    assert_eq!(run_json(&d.join("ft"))["config"]["train"]["label_fraction"], 0.5);

    ok(&collossl(d, &["export-embeddings", "-c", "tiny.toml", "--data", "gen/dataset", "--checkpoint", "ft/classifier.ckpt", "-o", "emb"]));
    let (v, rows, cols) = collossl::eval::load_embeddings(&d.join("emb/embeddings.f32")).unwrap();
    assert_eq!((rows, cols, v.len()), (72, 96, 72 * 96));
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["synth-gen", "-c", "tiny.toml", "-o", "gen"]));
    let again = collossl(d, &["synth-gen", "-c", "tiny.toml", "-o", "gen"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    ok(&collossl(d, &["synth-gen", "-c", "tiny.toml", "-o", "gen", "--overwrite"]));
}

#[test]
fn output_root_from_environment() {
    let tmp = setup();
    let d = tmp.path();
    let o = Command::new(env!("CARGO_BIN_EXE_collossl")).current_dir(d).env("COLLOSSL_OUTPUT_ROOT", "elsewhere").args(["synth-gen", "-c", "tiny.toml"]).output().unwrap();
    ok(&o);
    assert!(d.join("elsewhere/synth-gen/run.json").exists());
}

#[test]
fn single_device_pretrain_is_a_config_error() {
    let tmp = setup();
    let d = tmp.path();
    let ds = generate(&SynthConfig { num_devices: 2, num_classes: 3, num_subjects: 2, windows_per_subject_per_class: 4, ..Default::default() }).unwrap();
    save_dataset(&ds.select_devices(&["device0"]).unwrap(), &d.join("one")).unwrap();
    let o = collossl(d, &["pretrain", "-c", "tiny.toml", "--data", "one", "-o", "pre"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("need ≥ 2 devices"), "{err}");
    assert!(err.contains("\"category\":\"config\""), "{err}");
    let summary = run_json(&d.join("pre"));
    assert_eq!(summary["status"], "error");
    assert_eq!(summary["error"]["category"], "config");
}

#[test]
fn unknown_config_key_and_missing_data_exit_codes() {
    let tmp = setup();
    let d = tmp.path();
    fs::write(d.join("bad.toml"), "[train]\nlearnign_rate = 0.1\n").unwrap();
    assert_eq!(collossl(d, &["pretrain", "-c", "bad.toml", "-o", "x"]).status.code(), Some(2));
    assert_eq!(collossl(d, &["pretrain", "-c", "tiny.toml", "--data", "nowhere", "-o", "y"]).status.code(), Some(3));
    assert_eq!(collossl(d, &["evaluate", "-c", "tiny.toml", "--method", "nonsense", "-o", "z"]).status.code(), Some(2));
}

#[test]
fn same_seed_same_outputs() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["evaluate", "-c", "tiny.toml", "--method", "random_frozen", "-o", "a"]));
    ok(&collossl(d, &["evaluate", "-c", "tiny.toml", "--method", "random_frozen", "-o", "b"]));
    assert_eq!(fs::read(d.join("a/report.csv")).unwrap(), fs::read(d.join("b/report.csv")).unwrap());
    assert_eq!(run_json(&d.join("a"))["config_fingerprint"], run_json(&d.join("b"))["config_fingerprint"]);
    ok(&collossl(d, &["evaluate", "-c", "tiny.toml", "--method", "random_frozen", "--seed", "4", "-o", "c"]));
    assert_ne!(run_json(&d.join("a"))["config_fingerprint"], run_json(&d.join("c"))["config_fingerprint"]);
}

#[test]
fn ablate_random_arm() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["ablate", "-c", "tiny.toml", "--strategy", "random", "-o", "abl"]));
    let csv = fs::read_to_string(d.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("random,asynchronous,"));
    assert_eq!(collossl(d, &["ablate", "-c", "tiny.toml", "--strategy", "bogus", "-o", "abl2"]).status.code(), Some(2));
}

#[test]
fn robustness_misalignment_grid() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["robustness", "-c", "tiny.toml", "--kind", "misalignment", "--shifts", "0.01,0.5,3", "--method", "random_frozen", "-o", "rob"]));
    let csv = fs::read_to_string(d.join("rob/robustness.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(csv.contains("misalignment(shift=3s)"));
    assert!(fs::read_to_string(d.join("rob/robustness.svg")).unwrap().contains("<svg"));
}

#[test]
fn sweep_writes_table_and_plot() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["sweep", "-c", "tiny.toml", "--methods", "random_frozen,supervised_single", "--fractions", "0.5,1.0", "-o", "sw"]));
    let csv = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert!(csv.contains("supervised_single*"));
    assert!(fs::read_to_string(d.join("sw/sweep.svg")).unwrap().contains("<svg"));
}

#[test]
fn mmd_report_and_inject() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["mmd-report", "-c", "tiny.toml", "--max-windows", "32", "-o", "mmd"]));
    let csv = fs::read_to_string(d.join("mmd/mmd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().filter(|l| l.contains(",true,")).count(), 1);

    ok(&collossl(d, &["inject", "-c", "tiny.toml", "--kind", "missing", "--level", "0.5", "-o", "miss"]));
    let ds = collossl::data::load_dataset(&d.join("miss/dataset")).unwrap();
    assert_eq!(ds.provenance.perturbations.len(), 1);
    ok(&collossl(d, &["inject", "-c", "tiny.toml", "--kind", "misalignment", "--level", "0.5", "-o", "shift"]));
}

#[test]
fn baseline_trains_and_saves() {
    let tmp = setup();
    let d = tmp.path();
    ok(&collossl(d, &["baseline", "-c", "tiny.toml", "--kind", "autoencoder_multi", "-o", "ae"]));
    assert!(d.join("ae/classifier.ckpt").exists());
    assert!(d.join("ae/autoencoder_multi_log.csv").exists());
    assert!(d.join("ae/finetune_log.csv").exists());
    assert_eq!(collossl(d, &["baseline", "-c", "tiny.toml", "--kind", "collossl", "-o", "bad"]).status.code(), Some(2));
}
