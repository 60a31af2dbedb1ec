//! Subcommands end to end on a tiny world.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use bap_cli::commands::{self, Ablation};
use bap_cli::config::ExperimentConfig;

const TINY: &str = r#"
runs = 2
rhos = [1.0, 0.95]

[world]
height = 32
width = 32
fg_per_class = 40
bg_per_group = 40

[data]
train_per_class = 40
test_per_cell = 8
prototype_exemplars = 8

[bap]
n_foregrounds = 16
k = 4

[bap.align]
epochs = 2
batch_size = 32

[control]
head_epochs = 1

[probe]
epochs = 3

[finetune]
epochs = 2

[additivity]
n = 40

[k_ablation]
ks = [1, 2, 4]
n_foregrounds = 8
mu_backgrounds = 200
var_trials = 20

[ablate]
seg_modes = ["perfect", "bbox"]
n_sweep = [8, 16]
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_leak_free() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sets = commands::gen_data(&cfg, a.path()).unwrap();
    commands::gen_data(&cfg, b.path()).unwrap();
    for rho in &cfg.rhos {
        let name = format!("data/manifest_rho{rho}.jsonl");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    let (train, test) = &sets[0];
    assert_eq!(train.rho, 1.0);
    assert!(train.items.iter().all(|i| i.y == i.g), "ρ = 1 has no minority rows");
    let tr: BTreeSet<u64> = train.items.iter().map(|i| i.bg_id).collect();
    assert!(test.items.iter().all(|i| !tr.contains(&i.bg_id)));
    assert!(a.path().join("config.toml").exists());
}

#[test]
fn probe_and_k_ablation_write_csvs() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let rows = commands::probe_additivity(&cfg, dir.path()).unwrap();
    assert_eq!(rows.len(), 3);
    let csv = fs::read_to_string(dir.path().join("additivity.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("planted")));
    let k = commands::k_ablation(&cfg, dir.path()).unwrap();
    assert!(k.report.var_eps.iter().all(|v| *v > 0.0));
    let csv = fs::read_to_string(dir.path().join("k_ablation.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with(",slope"));
    assert_eq!(csv.lines().count(), 4);
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn run_matrix_records_and_report() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let m = commands::run_matrix(&cfg, dir.path()).unwrap();
    assert_eq!(m.rows.len(), cfg.runs * cfg.rhos.len() * cfg.methods.len());
    assert_eq!(csv_rows(&dir.path().join("metrics.csv")).len(), m.rows.len());
    let summary = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(summary.len(), cfg.rhos.len() * cfg.methods.len());
    assert!(summary.iter().all(|l| l.split(',').nth(2) == Some("2")), "std over exactly |runs| runs");
    for i in 0..cfg.runs {
        let models = dir.path().join("models").join(format!("run{i}"));
        for stem in ["bap_student.bapt", "control_student.bapt", "ortho_student.bapt", "anchors.bapt"] {
            assert!(models.join(stem).exists(), "{stem}");
        }
        let rec = bap_cli::record::RunRecord::load(&dir.path().join("runs").join(format!("run{i}.json"))).unwrap();
        assert_eq!(rec.config, cfg);
        assert!(!rec.bap_finetune_trace.is_empty());
    }

    let full = commands::report(dir.path()).unwrap();
    assert_eq!(full.summary, fs::read_to_string(dir.path().join("summary.csv")).unwrap() + "# missing: k_ablation.csv ablate_n_sweep.csv ablate_m_sweep.csv\n");

    fs::remove_file(dir.path().join("runs").join("run1.json")).unwrap();
    let partial = commands::report(dir.path()).unwrap();
    assert!(partial.missing.contains(&"run1".to_string()));
    assert!(partial.summary.contains("# missing: run1"));
}

#[test]
fn ablations_cover_their_settings() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let seg = commands::ablate(&cfg, Ablation::Seg, dir.path()).unwrap();
    let names: Vec<&str> = seg.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(names, ["native-lp", "perfect", "bbox"]);
    let n = commands::ablate(&cfg, "n_sweep".parse().unwrap(), dir.path()).unwrap();
    assert_eq!(n.iter().map(|r| r.n).collect::<Vec<_>>(), [8, 16]);
    assert_eq!(csv_rows(&dir.path().join("ablate_n_sweep.csv")).len(), 2);
    assert!("x_sweep".parse::<Ablation>().is_err());
}
