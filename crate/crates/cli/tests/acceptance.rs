//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line with the measured values.
//!
//! Run with `cargo test -p bap-cli --test acceptance -- --nocapture`.
//! The end-to-end criteria share one five-run matrix on the default
//! configuration, computed once.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bap_cli::commands::{self, Matrix};
use bap_cli::config::ExperimentConfig;
use bap_cli::pipeline::{contraction, prepare_all, retention, Lab};
use bap_core::additivity;
use bap_core::encoders::{planted_teacher, EncoderModel, InputDims, PlantedConfig};
use bap_core::evaluation::{sign_test_p, MetricsRow};
use bap_core::scene::mask::{bbox_fill, dilate, erode, threshold};
use bap_core::scene::{degrade_mask, CompositeParams, Degradation, MaskGray};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/gradients.rs"]
#[allow(dead_code)]
mod gradients;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>2} {name}: {detail}");
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c01_gradient_correctness() {
    let t0 = Instant::now();
    let mut all = gradients::primitive_errors();
    all.extend(gradients::student_errors());
    let secs = t0.elapsed().as_secs_f64();
    let (name, worst) = all.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    report(
        1,
        "gradient correctness",
        worst < gradients::TOL && secs < 10.0,
        &format!("max rel err {worst:.2e} ({name}) over {} ops, {secs:.1}s", all.len()),
    );
}

#[test]
fn c02_additivity_exactness() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::default();
    let lab = Lab::new(cfg.clone()).unwrap();
    let seed = cfg.run_seed(0);
    let fgs: Vec<u64> = (0..lab.world.num_foregrounds()).collect();
    let bgs: Vec<u64> = (0..lab.world.num_backgrounds()).collect();
    let pairs = additivity::draw_pairs(&fgs, &bgs, 1000, seed);
    let dims = InputDims::rgb(cfg.world.height, cfg.world.width);
    let teacher = |alpha| planted_teacher(&PlantedConfig::new(cfg.teacher.seed, alpha, dims, cfg.teacher.embed_dim)).unwrap();
    let t0_teacher = teacher(0.0);
    let disjoint = additivity::disjoint_triples(&lab.world, &t0_teacher, &pairs).unwrap();
    let exact = additivity::batch_additivity(&t0_teacher, &disjoint).unwrap();
    let worst = exact.scores.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let standard =
        additivity::standard_triples(&lab.world, &pairs, &CompositeParams::waterbirds(Degradation::Perfect), seed).unwrap();
    let means: Vec<f64> = [0.0, 0.5, 2.0]
        .iter()
        .map(|&a| additivity::batch_additivity(&teacher(a), &standard).unwrap().mean)
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = exact.excluded == 0
        && exact.scores.len() == 1000
        && worst <= 1e-5
        && means.windows(2).all(|w| w[0] > w[1])
        && secs < 60.0;
    report(
        2,
        "additivity exactness",
        pass,
        &format!("disjoint α=0 max |S-1| {worst:.1e}; mean S over α 0/0.5/2: {:.4}/{:.4}/{:.4}; {secs:.0}s", means[0], means[1], means[2]),
    );
}

struct KResult {
    ks: Vec<usize>,
    ablation: commands::KAblation,
    secs: f64,
}

fn k_result() -> &'static KResult {
    static CELL: OnceLock<KResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = ExperimentConfig::default();
        cfg.k_ablation.ks = vec![1, 2, 4, 8, 16, 32, 40, 64];
        let dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let ablation = commands::k_ablation(&cfg, dir.path()).unwrap();
        KResult { ks: cfg.k_ablation.ks, ablation, secs: t0.elapsed().as_secs_f64() }
    })
}

#[test]
fn c03_inverse_k_law() {
    let r = k_result();
    let rep = &r.ablation.report;
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        rep.ks.iter().zip(&rep.var_eps).filter(|(k, _)| **k != 40).map(|(&k, &v)| (k as f64, v)).unzip();
    let slope = bap_core::anchors::loglog_slope(&xs, &ys).unwrap();
    let cfg = ExperimentConfig::default();
    let pass = (slope + 1.0).abs() <= 0.15
        && cfg.k_ablation.var_trials >= 200
        && cfg.k_ablation.mu_backgrounds >= 20_000
        && r.secs < 120.0;
    report(3, "1/K law", pass, &format!("log-log slope {slope:.4} over K {xs:?}; sweep {:.0}s", r.secs));
}

#[test]
fn c04_k_sweep_directionality() {
    let r = k_result();
    let rep = &r.ablation.report;
    let i1 = r.ks.iter().position(|&k| k == 1).unwrap();
    let i40 = r.ks.iter().position(|&k| k == 40).unwrap();
    let paired = |a: &[f64], b: &[f64]| {
        let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
        let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
        (wins, losses, sign_test_p(wins, losses))
    };
    let (fw, fl, fp) = paired(&rep.fg_sim_each[i40], &rep.fg_sim_each[i1]);
    let (bw, bl, bp) = paired(&rep.bg_sim_each[i1], &rep.bg_sim_each[i40]);
    let n = rep.fg_sim_each[i1].len();
    let pass = n >= 50
        && rep.fg_sim[i40] > rep.fg_sim[i1]
        && rep.bg_sim_max[i40] < rep.bg_sim_max[i1]
        && fp < 0.01
        && bp < 0.01
        && r.secs < 120.0;
    report(
        4,
        "K-sweep directionality",
        pass,
        &format!(
            "{n} fgs; fg sim {:.4}→{:.4} ({fw}/{fl}, p={fp:.1e}); max bg sim {:.4}→{:.4} ({bw}/{bl}, p={bp:.1e})",
            rep.fg_sim[i1], rep.fg_sim[i40], rep.bg_sim_max[i1], rep.bg_sim_max[i40]
        ),
    );
}

/// Everything the end-to-end criteria read, for one run of the matrix.
struct RunExtras {
    contraction: Vec<(f64, f64)>,
    retention: (f64, f64),
    ortho_ood_wga: f64,
    bbox_wga: f64,
}

struct Shared {
    _dir: tempfile::TempDir,
    metrics_csv: Vec<u8>,
    matrix: Matrix,
    extras: Vec<RunExtras>,
    matrix_time: Duration,
}

fn default_cfg(out: &Path) -> ExperimentConfig {
    ExperimentConfig { out_dir: out.to_path_buf(), ..ExperimentConfig::default() }
}

fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = default_cfg(dir.path());
        let t0 = Instant::now();
        let matrix = commands::run_matrix(&cfg, dir.path()).unwrap();
        let matrix_time = t0.elapsed();
        let metrics_csv = std::fs::read(dir.path().join("metrics.csv")).unwrap();
        let lab = Lab::new(cfg.clone()).unwrap();
        let extras = (0..cfg.runs)
            .map(|i| {
                let seed = cfg.run_seed(i);
                let models = dir.path().join("models").join(format!("run{i}"));
                let bap = EncoderModel::load(&models.join("bap_student")).unwrap();
                let ortho = EncoderModel::load(&models.join("ortho_student")).unwrap();
                let splits = lab.splits(seed);
                let ids = lab.bap_foreground_ids(&splits, &cfg.data.classes, 60, seed).unwrap();
                let fgs = prepare_all(&lab.world, &ids, Degradation::Perfect).unwrap();
                let contraction = contraction(&lab, &lab.teacher, &bap, &fgs, &splits.pool, 32, seed).unwrap();
                let retention =
                    retention(&lab, &lab.teacher, &bap, cfg.retention.per_group, &cfg.retention.probe, seed).unwrap();
                let heldout = lab.task(&splits, cfg.ortho.heldout_classes, 1.0, seed).unwrap();
                let ortho_ood_wga = lab.probe(&ortho, &heldout, seed).unwrap().0.wga;
                let task = lab.task(&splits, cfg.data.classes, 1.0, seed).unwrap();
                let b = &cfg.bap;
                let (bbox, _, _) = lab
                    .train_bap_variant(&splits, b.n_foregrounds, b.align.m_per_fg, b.k, Degradation::BBox, seed)
                    .unwrap();
                let bbox_wga = lab.probe(&bbox, &task, seed).unwrap().0.wga;
                RunExtras { contraction, retention, ortho_ood_wga, bbox_wga }
            })
            .collect();
        Shared { _dir: dir, metrics_csv, matrix, extras, matrix_time }
    })
}

/// Per-run rows of `method` at `rho`, in run order.
fn rows<'a>(s: &'a Shared, method: &str, rho: f64) -> Vec<&'a MetricsRow> {
    s.matrix.rows.iter().filter(|r| r.method == method && r.rho == rho).collect()
}

fn wgas(s: &Shared, method: &str, rho: f64) -> Vec<f64> {
    rows(s, method, rho).iter().map(|r| r.wga).collect()
}

fn bsis(s: &Shared, method: &str) -> Vec<f64> {
    s.matrix
        .records
        .iter()
        .flat_map(|rec| rec.results.iter())
        .filter(|r| r.row.method == method && r.row.rho == 1.0)
        .map(|r| r.row.bsi)
        .collect()
}

#[test]
fn c05_robustness_ordering() {
    let s = shared();
    let native = mean(&wgas(s, "native-lp", 1.0));
    let bap = wgas(s, "bap-lp", 1.0);
    let control = mean(&wgas(s, "control", 1.0));
    let gap = bap.iter().zip(wgas(s, "bap-lp", 0.95)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let minutes = s.matrix_time.as_secs_f64() / 60.0;
    let pass = bap.len() == 5
        && native <= 0.30
        && mean(&bap) >= 0.85
        && mean(&bap) >= control
        && gap <= 0.03
        && minutes < 30.0;
    report(
        5,
        "robustness ordering",
        pass,
        &format!(
            "mean WGA at ρ=1 over {} runs: native-lp {native:.3}, control {control:.3}, bap-lp {:.3}; max |ΔWGA(ρ .95 vs 1)| {gap:.3}; matrix {minutes:.1} min",
            bap.len(),
            mean(&bap)
        ),
    );
}

#[test]
fn c06_bsi_ordering() {
    let s = shared();
    let (b, c, f) = (mean(&bsis(s, "bap-lp")), mean(&bsis(s, "control")), mean(&bsis(s, "lp-ft")));
    let pass = b < c && c < f && c / b >= 2.0 && f / c >= 2.0;
    report(
        6,
        "BSI ordering",
        pass,
        &format!("BSI bap {b:.3} < control {c:.3} < fine-tuned {f:.3}; ratios {:.2}x, {:.2}x", c / b, f / c),
    );
}

#[test]
fn c07_orthogonal_targets() {
    let s = shared();
    let indist = mean(&wgas(s, "ortho", 1.0));
    let ood = mean(&s.extras.iter().map(|e| e.ortho_ood_wga).collect::<Vec<_>>());
    report(
        7,
        "orthogonal-target ablation",
        indist >= 0.85 && ood <= 0.40,
        &format!("in-distribution WGA {indist:.3}, held-out-class WGA {ood:.3}"),
    );
}

#[test]
fn c08_contraction() {
    let s = shared();
    let all: Vec<&(f64, f64)> = s.extras.iter().flat_map(|e| &e.contraction).collect();
    let frac = all.iter().filter(|(t, b)| b < t).count() as f64 / all.len() as f64;
    report(
        8,
        "many-to-one contraction",
        frac >= 0.90,
        &format!("{:.1}% of {} foregrounds contract (32 backgrounds each)", 100.0 * frac, all.len()),
    );
}

fn hand_masks() -> Vec<MaskGray> {
    let on = |f: &dyn Fn(usize, usize) -> bool| MaskGray::from_fn(7, 7, |y, x| if f(y, x) { 255 } else { 0 });
    let mut v = vec![
        on(&|y, x| (y, x) == (3, 3)),
        on(&|y, x| (1..6).contains(&y) && (1..6).contains(&x)),
        on(&|y, x| (x == 1 && (1..6).contains(&y)) || (y == 5 && (1..5).contains(&x))),
        on(&|y, x| y == x || y + x == 6),
        on(&|y, _| y == 0),
        on(&|_, _| true),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let bits: Vec<u8> = (0..49).map(|_| if rng.random_bool(0.4) { 255 } else { 0 }).collect();
        v.push(MaskGray::new(7, 7, bits).unwrap());
    }
    v
}

/// Brute force over every pixel pair.
fn morph_oracle(m: &MaskGray, r: usize, dilation: bool) -> MaskGray {
    let r2 = (r * r) as i64;
    MaskGray::from_fn(7, 7, |y, x| {
        let near = |yy: i64, xx: i64| (yy - y as i64).pow(2) + (xx - x as i64).pow(2) <= r2;
        let v = if dilation {
            (0..7).any(|yy| (0..7).any(|xx| m.get(yy as usize, xx as usize) > 0 && near(yy, xx)))
        } else {
            let rr = r as i64 + 1;
            (y as i64 - rr..=y as i64 + rr).all(|yy| {
                (x as i64 - rr..=x as i64 + rr).all(|xx| {
                    !near(yy, xx) || ((0..7).contains(&yy) && (0..7).contains(&xx) && m.get(yy as usize, xx as usize) > 0)
                })
            })
        };
        if v {
            255
        } else {
            0
        }
    })
}

#[test]
fn c09_mask_bit_exactness() {
    let all_levels = MaskGray::new(1, 256, (0..=255).collect()).unwrap();
    let th = threshold(&all_levels);
    let threshold_ok = th.data().iter().enumerate().all(|(v, &o)| o == if v > 100 { 255 } else { 0 })
        && th.get(0, 100) == 0
        && th.get(0, 101) == 255;
    let masks = hand_masks();
    let mut morph_ok = true;
    let mut bbox_ok = true;
    for m in &masks {
        for r in 0..4 {
            morph_ok &= dilate(m, r) == morph_oracle(m, r, true);
            morph_ok &= erode(m, r) == morph_oracle(m, r, false);
        }
        if let Some(b) = m.bbox() {
            let rect = MaskGray::from_fn(7, 7, |y, x| if b.contains(y, x) { 255 } else { 0 });
            bbox_ok &= bbox_fill(m) == rect && degrade_mask(m, Degradation::BBox, 0, 0).unwrap() == rect;
        }
    }
    report(
        9,
        "mask pipeline bit-exactness",
        threshold_ok && morph_ok && bbox_ok,
        &format!("threshold {threshold_ok}, morphology {morph_ok}, bbox {bbox_ok} over {} masks × radii 0..3", masks.len()),
    );
}

#[test]
fn c10_segmentation_degradation() {
    let s = shared();
    let native = mean(&wgas(s, "native-lp", 1.0));
    let perfect = mean(&wgas(s, "bap-lp", 1.0));
    let bbox = mean(&s.extras.iter().map(|e| e.bbox_wga).collect::<Vec<_>>());
    report(
        10,
        "segmentation degradation",
        bbox >= native + 0.20 && perfect >= bbox,
        &format!("mean WGA native-lp {native:.3}, bbox-mode bap {bbox:.3}, perfect-mode bap {perfect:.3}"),
    );
}

#[test]
fn c11_finetune_degradation() {
    let s = shared();
    let traces: Vec<&Vec<(f64, f64)>> = s.matrix.records.iter().map(|r| &r.bap_finetune_trace).collect();
    let start = |i: usize| mean(&traces.iter().map(|t| if i == 0 { t[0].0 } else { t[0].1 }).collect::<Vec<_>>());
    let end = |i: usize| {
        mean(&traces.iter().map(|t| { let l = t.last().unwrap(); if i == 0 { l.0 } else { l.1 } }).collect::<Vec<_>>())
    };
    let (avg_drop, wga_drop) = (start(0) - end(0), start(1) - end(1));
    report(
        11,
        "fine-tuning degradation",
        wga_drop >= 0.20 && avg_drop < wga_drop,
        &format!("WGA {:.3}→{:.3} (−{wga_drop:.3}), AVG {:.3}→{:.3} (−{avg_drop:.3})", start(1), end(1), start(0), end(0)),
    );
}

#[test]
fn c12_background_retention_collapse() {
    let s = shared();
    let before = mean(&s.extras.iter().map(|e| e.retention.0).collect::<Vec<_>>());
    let after = mean(&s.extras.iter().map(|e| e.retention.1).collect::<Vec<_>>());
    report(
        12,
        "background-retention collapse",
        before - after >= 0.20,
        &format!("background-group probe accuracy teacher {before:.3} → bap {after:.3}"),
    );
}

#[test]
fn c13_determinism() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    commands::run_matrix(&default_cfg(dir.path()), dir.path()).unwrap();
    let again = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    report(
        13,
        "determinism",
        again == s.metrics_csv,
        &format!("two default run-matrix passes: {} vs {} bytes, identical: {}", s.metrics_csv.len(), again.len(), again == s.metrics_csv),
    );
}
