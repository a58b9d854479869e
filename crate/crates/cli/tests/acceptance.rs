//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero if any criterion fails. Runs without the libtest harness so the
//! lines are never captured.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegen::evaluate::{label_quality, pair_ious, quality_of};
use sparsegen::heat::{accumulate, apply_mask, build_mask, centroid, marginals, mask_rect};
use sparsegen::ingest::DenseBoxes;
use sparsegen::mapping::{build_instance_grid, staircase};
use sparsegen::matching::padm;
use sparsegen::optimize::{label_loss, log_spaced};
use sparsegen::pipeline::{refine_image, SizeReference};
use sparsegen::regression::{pbl_cells, trim_tails};
use sparsegen::synth::{generate, SynthConfig, SynthScene};
use sparsegen::{
    fit, refine_bundle, BoxLabel, ExtentMode, GridMap, ImageRecord, Label, LabelSet, MatchMode, Params,
    PointAnnotation, RefineOptions, SearchSpace,
};
use sparsegen_cli::sweep::{sweep, Axis, SweepRow};

// Pinned tolerances and thresholds.
const ORACLE_REL_TOL: f64 = 1e-9;
const ORACLE_SCENES: usize = 120;
const NOISELESS_MIN_IOU: f64 = 0.95;
const R_TARGET_DENSE: f64 = 0.1;
const R_MAX_SPARSE: f64 = 0.05;
const JITTER_MAX_DROP: f64 = 0.03;
const REFINE_MEDIAN_MS: f64 = 500.0;
const THROUGHPUT_IMAGES: usize = 100;
const PROPERTY_CASES: u32 = 1000;
const PROPERTY_BUDGET_S: f64 = 120.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Refined mean IoU per seed on the dense-scene configuration, recorded from
/// the reference run (measured values rounded down to two decimals).
const DENSE_REFINED_FLOOR: [f64; 5] = [0.76, 0.76, 0.76, 0.76, 0.76];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 10] = [
        ("staircase exactness", staircase_exactness),
        ("oracle equivalence", oracle_equivalence),
        ("noiseless recovery", noiseless_recovery),
        ("dense-scene improvement", dense_improvement),
        ("R-sweep trend", r_sweep_trend),
        ("point-jitter trend", point_jitter_trend),
        ("PADM vs APL", padm_vs_apl),
        ("throughput", throughput),
        ("determinism", determinism),
        ("invariant suite", invariant_suite),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = match std::panic::catch_unwind(check) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!v.pass);
        println!(
            "[{}] {:>2} {}: {} ({:.1} s)",
            if v.pass { "PASS" } else { "FAIL" },
            k + 1,
            name,
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Scenes

fn dense_config(seed: u64, instances: usize) -> SynthConfig {
    SynthConfig {
        images: 10,
        image_width: 640,
        image_height: 640,
        instances,
        base_size: 12.0,
        size_gradient: 0.03,
        boxes_per_instance: (5, 12),
        center_jitter: 0.10,
        scale_jitter: (0.7, 1.4),
        miss_rate: 0.05,
        supervised_fraction: 0.1,
        seed,
        ..Default::default()
    }
}

/// Default scene with ten well-separated instances.
fn isolated_config(seed: u64) -> SynthConfig {
    SynthConfig {
        images: 4,
        instances: 10,
        min_gap: 1.0,
        seed,
        ..Default::default()
    }
}

fn mean_iou(scene: &SynthScene, opts: &RefineOptions) -> f64 {
    let out = refine_bundle(&scene.bundle, opts).expect("refine");
    assert!(out.failures.is_empty(), "failures: {:?}", out.failures);
    label_quality(&out.labels, &scene.truth).overall.mean_iou
}

fn with_extent(params: Params, extent: ExtentMode) -> RefineOptions {
    let mut o = RefineOptions::new(params);
    o.extent = extent;
    o
}

fn argmax(rows: &[SweepRow]) -> &SweepRow {
    // First maximum wins.
    let mut best = &rows[0];
    for r in &rows[1..] {
        if r.mean_iou > best.mean_iou {
            best = r;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// 1

fn staircase_exactness() -> Verdict {
    let l = 40.0;
    let cases = [
        (0.0, 1.0),
        (5.0, 0.8),
        (10.0, 0.8),
        (15.0, 0.6),
        (20.0, 0.6),
        (25.0, 0.3),
        (30.0, 0.3),
        (35.0, 0.1),
        (40.0, 0.1),
        (60.0, 0.0),
        (40.000001, 0.0),
    ];
    let mut bad: Vec<String> = cases
        .iter()
        .filter(|(d, want)| staircase(*d, l).unwrap() != *want)
        .map(|(d, want)| format!("d={d}: want {want}"))
        .collect();
    // The d = 0 band at a second length.
    if staircase(0.0, 0.001).unwrap() != 1.0 {
        bad.push("d=0, l=0.001".into());
    }
    let n = cases.len() + 1;
    Verdict::new(bad.is_empty(), format!("{}/{n} exact{}", n - bad.len(), if bad.is_empty() { String::new() } else { format!(", wrong: {}", bad.join("; ")) }))
}

// ---------------------------------------------------------------------------
// 2: naive per-cell reference implementations

fn naive_band(d: f64, l: f64) -> f64 {
    let r = d / l;
    match () {
        _ if d == 0.0 => 1.0,
        _ if r > 1.0 => 0.0,
        _ if r > 0.75 => 0.1,
        _ if r > 0.5 => 0.3,
        _ if r > 0.25 => 0.6,
        _ => 0.8,
    }
}

/// Heat of one box at full-grid cell `(i, j)`, evaluated from scratch.
fn naive_box_heat(b: &BoxLabel, s: f64, i: usize, j: usize) -> f64 {
    let cols = ((b.width() * s - 1e-9).ceil() as i64).max(1);
    let rows = ((b.height() * s - 1e-9).ceil() as i64).max(1);
    let cx = b.x_min() + b.width() / 2.0;
    let cy = b.y_min() + b.height() / 2.0;
    let ox = (cx * s - cols as f64 / 2.0).round() as i64;
    let oy = (cy * s - rows as f64 / 2.0).round() as i64;
    let (li, lj) = (i as i64 - oy, j as i64 - ox);
    if li < 0 || lj < 0 || li >= rows || lj >= cols {
        return 0.0;
    }
    let dx = (lj as f64 + 0.5 - cols as f64 / 2.0) / s;
    let dy = (li as f64 + 0.5 - rows as f64 / 2.0) / s;
    naive_band(dx.hypot(dy), b.width().min(b.height()))
}

fn naive_in_mask(p: &PointAnnotation, side: f64, s: f64, i: usize, j: usize) -> bool {
    let (x, y) = ((j as f64 + 0.5) / s, (i as f64 + 0.5) / s);
    let half = side / 2.0;
    let inside = x >= p.x - half && x < p.x + half && y >= p.y - half && y < p.y + half;
    let holds_point = (p.x * s).floor() as usize == j && (p.y * s).floor() as usize == i;
    // A mask narrower than one cell keeps the cell holding the point.
    let thin = side * s <= 1.0;
    inside || (thin && holds_point)
}

fn naive_pbl(profile: &[f64], r: f64) -> (usize, usize) {
    let total: f64 = profile.iter().sum();
    let cut = r * total;
    let mut best: Option<(usize, usize)> = None;
    for lo in 0..profile.len() {
        for hi in lo..profile.len() {
            let left: f64 = profile[..lo].iter().sum();
            let right: f64 = profile[hi + 1..].iter().sum();
            if left <= cut && right <= cut && best.is_none_or(|(a, b)| hi - lo < b - a) {
                best = Some((lo, hi));
            }
        }
    }
    best.expect("some pair is feasible")
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_REL_TOL * a.abs().max(b.abs()).max(1.0)
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoxLabel {
    let bw = rng.random_range(2.0..40.0);
    let bh = rng.random_range(2.0..40.0);
    let x = rng.random_range(-10.0..w - 2.0);
    let y = rng.random_range(-10.0..h - 2.0);
    BoxLabel::new(x, y, bw, bh, 1).unwrap()
}

fn oracle_equivalence() -> Verdict {
    let s = 0.5;
    let img = ImageRecord::new(1, 128, 128).unwrap();
    let mut mismatches: BTreeMap<&str, usize> = BTreeMap::new();
    let mut checks = 0usize;
    for scene in 0..ORACLE_SCENES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + scene);
        let boxes: Vec<BoxLabel> = (0..rng.random_range(1..10))
            .filter_map(|_| random_box(&mut rng, 128.0, 128.0).clamp_to(&img))
            .collect();
        let grids: Vec<GridMap> = boxes.iter().map(|b| build_instance_grid(b, s)).collect();
        let st = accumulate(&grids, &img, s).unwrap();
        assert_eq!((st.cols(), st.rows()), (64, 64));

        let mut bump = |name, ok: bool| {
            checks += 1;
            if !ok {
                *mismatches.entry(name).or_default() += 1;
            }
        };

        let mut naive_st = vec![0.0; 64 * 64];
        for i in 0..64 {
            for j in 0..64 {
                naive_st[i * 64 + j] = boxes.iter().map(|b| naive_box_heat(b, s, i, j)).sum();
            }
        }
        bump("accumulate", st.values().iter().zip(&naive_st).all(|(a, b)| close(*a, *b)));

        for _ in 0..rng.random_range(1..5) {
            let p = PointAnnotation {
                x: rng.random_range(0.0..128.0),
                y: rng.random_range(0.0..128.0),
                category_id: 1,
                instance_id: 1,
            };
            let apl = rng.random_range(2.0..40.0);
            let w3 = rng.random_range(1.0..3.0);
            let r = rng.random_range(0.001..0.49);

            let amt = apply_mask(&st, &build_mask(&p, apl, w3, &img, s)).unwrap();
            let mut naive_amt = vec![0.0; 64 * 64];
            for i in 0..64 {
                for j in 0..64 {
                    if naive_in_mask(&p, w3 * apl, s, i, j) {
                        naive_amt[i * 64 + j] = naive_st[i * 64 + j];
                    }
                }
            }
            bump("apply_mask", amt.values().iter().zip(&naive_amt).all(|(a, b)| close(*a, *b)));

            let mp = marginals(&amt);
            let nx: Vec<f64> = (0..64).map(|j| (0..64).map(|i| naive_amt[i * 64 + j]).sum()).collect();
            let ny: Vec<f64> = (0..64).map(|i| (0..64).map(|j| naive_amt[i * 64 + j]).sum()).collect();
            let total: f64 = naive_amt.iter().sum();
            bump(
                "marginals",
                mp.m_x.iter().zip(&nx).all(|(a, b)| close(*a, *b))
                    && mp.m_y.iter().zip(&ny).all(|(a, b)| close(*a, *b))
                    && close(mp.m_total, 2.0 * total),
            );

            if total > 0.0 {
                let mut sx = 0.0;
                let mut sy = 0.0;
                for i in 0..64 {
                    for j in 0..64 {
                        sx += j as f64 * naive_amt[i * 64 + j];
                        sy += i as f64 * naive_amt[i * 64 + j];
                    }
                }
                let (cx, cy) = centroid(&mp).unwrap();
                bump("centroid", close(cx, sx / total) && close(cy, sy / total));

                let ext = pbl_cells(&mp, r).unwrap();
                let (xl, xh) = naive_pbl(&nx, r);
                let (yl, yh) = naive_pbl(&ny, r);
                bump("pbl", (ext.col_lo, ext.col_hi, ext.row_lo, ext.row_hi) == (xl, xh, yl, yh));
            } else {
                bump("centroid", centroid(&mp).is_err());
                bump("pbl", pbl_cells(&mp, r).is_err());
            }
        }
    }
    let bad: usize = mismatches.values().sum();
    Verdict::new(
        bad == 0,
        format!("{ORACLE_SCENES} scenes, {checks} comparisons, mismatches {mismatches:?}"),
    )
}

// ---------------------------------------------------------------------------
// 3

fn noiseless_recovery() -> Verdict {
    let ious: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| mean_iou(&generate(&isolated_config(seed)).unwrap(), &RefineOptions::default()))
        .collect();
    let worst = ious.iter().copied().fold(f64::INFINITY, f64::min);
    Verdict::new(
        worst >= NOISELESS_MIN_IOU,
        format!("mean IoU per seed {} (floor {NOISELESS_MIN_IOU})", fmt_list(&ious)),
    )
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------------------
// 4

fn dense_improvement() -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for (k, &seed) in SEEDS.iter().enumerate() {
        let scene = generate(&dense_config(seed, 200)).unwrap();
        let fitted = fit(&scene.bundle, &SearchSpace::default()).unwrap().params;
        let refined = mean_iou(&scene, &with_extent(fitted, ExtentMode::Pbl));
        let top = mean_iou(&scene, &with_extent(fitted, ExtentMode::TopScore));
        let no_pbl = mean_iou(&scene, &with_extent(fitted, ExtentMode::BiggestBox));
        let pass = refined > top && refined > no_pbl && refined >= DENSE_REFINED_FLOOR[k];
        ok &= pass;
        lines.push(format!("seed {seed}: {refined:.4} vs top {top:.4}, no-pbl {no_pbl:.4}"));
    }
    Verdict::new(ok, lines.join("; "))
}

// ---------------------------------------------------------------------------
// 5

fn r_sweep_trend() -> Verdict {
    let grid = log_spaced(0.01, 0.30, 15);
    let values: Vec<String> = grid.iter().map(f64::to_string).collect();
    let step = (grid[1] / grid[0]).ln();
    let opts = RefineOptions::default();

    let dense = generate(&dense_config(0, 300)).unwrap();
    let (rows, _) = sweep(&dense.bundle, &dense.truth, &opts, Axis::R, &values, 0).unwrap();
    let dense_best: f64 = argmax(&rows).value.parse().unwrap();

    let sparse_cfg = SynthConfig {
        boxes_per_instance: (5, 12),
        center_jitter: 0.10,
        scale_jitter: (0.7, 1.4),
        miss_rate: 0.05,
        images: 10,
        ..isolated_config(0)
    };
    let sparse = generate(&sparse_cfg).unwrap();
    let (rows, _) = sweep(&sparse.bundle, &sparse.truth, &opts, Axis::R, &values, 0).unwrap();
    let sparse_best: f64 = argmax(&rows).value.parse().unwrap();

    let dense_ok = (dense_best / R_TARGET_DENSE).ln().abs() <= step + 1e-12;
    let sparse_ok = sparse_best <= R_MAX_SPARSE;
    Verdict::new(
        dense_ok && sparse_ok,
        format!(
            "dense argmax R = {dense_best:.4} (need within one log step of {R_TARGET_DENSE}), \
             sparse argmax R = {sparse_best:.4} (need <= {R_MAX_SPARSE})"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn point_jitter_trend() -> Verdict {
    let values = ["0", "0.2", "0.4"].map(String::from);
    let mut ok = true;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let scene = generate(&dense_config(seed, 200)).unwrap();
        let (rows, _) = sweep(
            &scene.bundle,
            &scene.truth,
            &RefineOptions::default(),
            Axis::PointJitter,
            &values,
            seed,
        )
        .unwrap();
        let (j0, j2, j4) = (rows[0].mean_iou, rows[1].mean_iou, rows[2].mean_iou);
        ok &= j4 < j2 && (j0 - j2) <= JITTER_MAX_DROP;
        lines.push(format!("seed {seed}: {j0:.4}/{j2:.4}/{j4:.4}"));
    }
    Verdict::new(ok, format!("mean IoU at jitter 0/0.2/0.4: {}", lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 7

fn padm_vs_apl() -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let cfg = SynthConfig {
            instances: 100,
            base_size: 10.0,
            size_gradient: 0.1,
            miss_rate: 0.2,
            ..dense_config(seed, 100)
        };
        let scene = generate(&cfg).unwrap();
        let mut by_mode = Vec::new();
        for mode in [MatchMode::Padm, MatchMode::Apl] {
            let opts = RefineOptions {
                match_mode: mode,
                ..Default::default()
            };
            let out = refine_bundle(&scene.bundle, &opts).unwrap();
            let pairs: Vec<_> = pair_ious(&out.labels, &scene.truth)
                .into_iter()
                .filter(|p| scene.missed.contains(&(p.image_id, p.instance_id)))
                .collect();
            by_mode.push(quality_of(&pairs).overall.mean_iou);
        }
        ok &= by_mode[0] > by_mode[1];
        lines.push(format!("seed {seed}: padm {:.4} apl {:.4}", by_mode[0], by_mode[1]));
    }

    // Zero-noise linear size field: PADM sizes against generator truth.
    let cell = 1.0 / Params::default().s;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &seed in &SEEDS {
        let cfg = SynthConfig {
            images: 10,
            miss_rate: 0.2,
            seed,
            ..Default::default()
        };
        let scene = generate(&cfg).unwrap();
        for img in &scene.bundle.images {
            let matched = scene.bundle.dense.get(&(img.image_id, 1)).cloned().unwrap_or_default();
            for l in scene.truth.image(img.image_id) {
                let id = l.id.unwrap();
                if !scene.missed.contains(&(img.image_id, id)) {
                    continue;
                }
                let p = scene.bundle.points[&img.image_id].iter().find(|p| p.instance_id == id).unwrap();
                let b = padm(p, &matched, img).expect("enough matched boxes");
                worst = worst.max((b.mean_side() - l.bbox.mean_side()).abs());
                checked += 1;
            }
        }
    }
    ok &= worst <= cell && checked > 0;
    Verdict::new(
        ok,
        format!(
            "missed-instance IoU {}; linear field: worst size error {worst:.4} px over {checked} instances (cell {cell} px)",
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 8

fn throughput() -> Verdict {
    let cfg = SynthConfig {
        images: THROUGHPUT_IMAGES,
        instances: 30,
        base_size: 40.0,
        size_gradient: 0.05,
        boxes_per_instance: (5, 12),
        center_jitter: 0.10,
        scale_jitter: (0.7, 1.4),
        miss_rate: 0.05,
        ..Default::default()
    };
    let scene = generate(&cfg).unwrap();
    let opts = RefineOptions::default();
    let sizes = SizeReference::from_dense(&scene.bundle.dense);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut times: Vec<f64> = pool.install(|| {
        scene
            .bundle
            .images
            .iter()
            .map(|img| {
                let pts = &scene.bundle.points[&img.image_id];
                let t = Instant::now();
                let res = refine_image(img, pts, &scene.bundle.dense, &sizes, &opts).unwrap();
                let ms = t.elapsed().as_secs_f64() * 1e3;
                assert_eq!(res.labels.len(), 30);
                ms
            })
            .collect()
    });
    times.sort_by(f64::total_cmp);
    let median = 0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2]);
    Verdict::new(
        median <= REFINE_MEDIAN_MS,
        format!(
            "median {median:.2} ms, max {:.2} ms per 640x640 image with 30 instances (limit {REFINE_MEDIAN_MS} ms)",
            times[times.len() - 1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 9

fn sparsegen(args: &[&str], dir: &Path, threads: Option<&str>) -> (Vec<u8>, bool) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sparsegen"));
    cmd.args(args).current_dir(dir).env("RUST_LOG", "warn").env_remove("SPARSEGEN_THREADS");
    if let Some(t) = threads {
        cmd.args(["--threads", t]);
    }
    let out = cmd.output().expect("run sparsegen");
    (out.stdout, out.status.success())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, ok) = sparsegen(
        &[
            "synth", "--out", "data", "--images", "6", "--instances", "120", "--base-size", "12",
            "--size-gradient", "0.03", "--boxes", "5,12", "--center-jitter", "0.1", "--scale-jitter",
            "0.7,1.4", "--miss-rate", "0.05", "--supervised-fraction", "0.34", "--seed", "3",
        ],
        d,
        None,
    );
    assert!(ok, "synth failed");
    let inputs = [
        "--images",
        "data/images.json",
        "--detections",
        "data/detections.json",
        "--points",
        "data/points.json",
    ];

    let mut runs: Vec<(String, Vec<u8>)> = Vec::new();
    for (k, threads) in [Some("1"), Some("4"), Some("4"), None].into_iter().enumerate() {
        let params = format!("params{k}.txt");
        let mut fit_args = vec!["fit"];
        fit_args.extend(inputs);
        fit_args.extend(["--gt", "data/gt.json", "--out", &params]);
        let (loss_csv, ok) = sparsegen(&fit_args, d, threads);
        assert!(ok, "fit failed");

        let labels = format!("labels{k}.json");
        let mut refine_args = vec!["refine"];
        refine_args.extend(inputs);
        refine_args.extend(["--params", &params, "--out", &labels]);
        let (_, ok) = sparsegen(&refine_args, d, threads);
        assert!(ok, "refine failed");

        let mut blob = loss_csv;
        blob.extend(std::fs::read(d.join(&params)).unwrap());
        blob.extend(std::fs::read(d.join(&labels)).unwrap());
        runs.push((threads.unwrap_or("default").to_string(), blob));
    }
    let same = runs.windows(2).all(|w| w[0].1 == w[1].1);
    let names: Vec<&str> = runs.iter().map(|r| r.0.as_str()).collect();
    Verdict::new(
        same,
        format!(
            "fit loss table + params + refined labels ({} bytes) across --threads {:?}: {}",
            runs[0].1.len(),
            names,
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 10

fn runner() -> TestRunner {
    let config = Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn arb_box(w: f64, h: f64) -> impl Strategy<Value = BoxLabel> {
    (0.0..w - 1.0, 0.0..h - 1.0, 1.0..48.0f64, 1.0..48.0f64)
        .prop_map(move |(x, y, bw, bh)| BoxLabel::new(x, y, bw.min(w - x), bh.min(h - y), 1).unwrap())
}

fn clipped_mass(g: &GridMap, cols: usize, rows: usize) -> f64 {
    let (ox, oy) = g.origin();
    let mut m = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let (r, c) = (oy + i as i64, ox + j as i64);
            if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                m += g.get(i, j);
            }
        }
    }
    m
}

fn invariant_suite() -> Verdict {
    let start = Instant::now();
    let img = ImageRecord::new(1, 160, 120).unwrap();
    let scale = prop_oneof![Just(0.25), Just(0.5), Just(1.0)];
    let point = (0.0..160.0f64, 0.0..120.0f64).prop_map(|(x, y)| PointAnnotation {
        x,
        y,
        category_id: 1,
        instance_id: 1,
    });
    let mut results: Vec<(&str, Result<(), String>)> = Vec::new();

    let r = runner().run(
        &(prop::collection::vec(arb_box(160.0, 120.0), 1..12), scale.clone()),
        |(boxes, s)| {
            let grids: Vec<GridMap> = boxes.iter().map(|b| build_instance_grid(b, s)).collect();
            let st = accumulate(&grids, &img, s).unwrap();
            let expect: f64 = grids.iter().map(|g| clipped_mass(g, st.cols(), st.rows())).sum();
            prop_assert!(close(st.total_mass(), expect), "{} vs {}", st.total_mass(), expect);
            Ok(())
        },
    );
    results.push(("mass conservation", r.map_err(|e| e.to_string())));

    let r = runner().run(
        &(
            prop::collection::vec(arb_box(160.0, 120.0), 1..8),
            point.clone(),
            point.clone(),
            2.0..60.0f64,
            1.0..3.0f64,
            1.0..3.0f64,
            scale.clone(),
        ),
        |(boxes, p, q, apl, w3a, w3b, s)| {
            let grids: Vec<GridMap> = boxes.iter().map(|b| build_instance_grid(b, s)).collect();
            let st = accumulate(&grids, &img, s).unwrap();
            let m = build_mask(&p, apl, w3a, &img, s);
            let once = apply_mask(&st, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once.values(), twice.values());
            prop_assert!(once.total_mass() <= st.total_mass());
            // A mask nested inside a larger one at the same point never holds more mass.
            let (small, large) = if w3a <= w3b { (w3a, w3b) } else { (w3b, w3a) };
            let inner = apply_mask(&st, &build_mask(&p, apl, small, &img, s)).unwrap();
            let outer = apply_mask(&st, &build_mask(&p, apl, large, &img, s)).unwrap();
            prop_assert!(inner.total_mass() <= outer.total_mass());
            // Masks are commutative under composition.
            let mq = build_mask(&q, apl, w3b, &img, s);
            let pq = apply_mask(&apply_mask(&st, &m).unwrap(), &mq).unwrap();
            let qp = apply_mask(&apply_mask(&st, &mq).unwrap(), &m).unwrap();
            prop_assert_eq!(pq.values(), qp.values());
            Ok(())
        },
    );
    results.push(("mask idempotence/monotonicity", r.map_err(|e| e.to_string())));

    let r = runner().run(
        &(prop::collection::vec(0.0..10.0f64, 1..80), 0.0001..0.4999f64, 0.0001..0.4999f64),
        |(mut profile, ra, rb)| {
            if profile.iter().sum::<f64>() == 0.0 {
                profile[0] = 1.0;
            }
            let (r1, r2) = if ra <= rb { (ra, rb) } else { (rb, ra) };
            let (lo1, hi1) = trim_tails(&profile, r1).unwrap();
            let (lo2, hi2) = trim_tails(&profile, r2).unwrap();
            prop_assert!(lo1 <= lo2 && hi1 >= hi2, "R {r1} -> ({lo1},{hi1}), R {r2} -> ({lo2},{hi2})");
            prop_assert!(lo2 <= hi2);
            // R -> 0 keeps the full support.
            let first = profile.iter().position(|v| *v > 0.0).unwrap();
            let last = profile.iter().rposition(|v| *v > 0.0).unwrap();
            prop_assert_eq!(trim_tails(&profile, 1e-300).unwrap(), (first, last));
            Ok(())
        },
    );
    results.push(("PBL monotone in R", r.map_err(|e| e.to_string())));

    let big = ImageRecord::new(1, 640, 320).unwrap();
    let r = runner().run(
        &(
            prop::collection::vec((-6.0..6.0f64, -6.0..6.0f64, 8.0..40.0f64, 8.0..40.0f64), 1..6),
            40.0..120.0f64,
            40.0..280.0f64,
            0.005..0.3f64,
            1.0..2.0f64,
            scale,
        ),
        |(jitters, px, py, r, w3, s)| {
            // Instance A at (px, py); instance B is an exact copy shifted far
            // enough right that neither its heat nor its mask reaches A's.
            let shift = 400.0;
            let a: Vec<BoxLabel> = jitters
                .iter()
                .map(|&(dx, dy, w, h)| BoxLabel::new(px + dx - w / 2.0, py + dy - h / 2.0, w, h, 1).unwrap().with_score(0.5))
                .collect();
            let b: Vec<BoxLabel> = a
                .iter()
                .map(|bx| BoxLabel::new(bx.x_min() + shift, bx.y_min(), bx.width(), bx.height(), 1).unwrap().with_score(0.5))
                .collect();
            let pa = PointAnnotation { x: px, y: py, category_id: 1, instance_id: 1 };
            let pb = PointAnnotation { x: px + shift, y: py, category_id: 1, instance_id: 2 };
            let opts = RefineOptions::new(Params::new(r, w3, s).unwrap());
            let sizes = SizeReference::default();

            let alone: DenseBoxes = [((1, 1), a.clone())].into();
            let both: DenseBoxes = [((1, 1), a.iter().chain(&b).copied().collect())].into();
            let solo = refine_image(&big, &[pa], &alone, &sizes, &opts).unwrap();
            let pair = refine_image(&big, &[pa, pb], &both, &sizes, &opts).unwrap();
            let la = pair.labels.iter().find(|l| l.id == Some(1)).unwrap();
            prop_assert_eq!(solo.labels[0].bbox.without_score(), la.bbox.without_score());
            prop_assert_eq!(solo.outcomes[0].mass, pair.outcomes.iter().find(|o| o.instance_id == 1).unwrap().mass);
            let rect = mask_rect(&pa, 40.0, w3, &big, s);
            prop_assert!(rect.col1 as f64 / s <= px + shift - 120.0);
            Ok(())
        },
    );
    results.push(("disjoint-instance independence", r.map_err(|e| e.to_string())));

    let r = runner().run(
        &(
            prop::collection::vec((arb_box(160.0, 120.0), prop::bool::weighted(0.5), -3.0..3.0f64), 1..10),
        ),
        |(items,)| {
            let mut gt = LabelSet::new([(1, "a".to_string())].into());
            let mut spl = gt.clone();
            let mut any_diff = false;
            for (k, (b, perturb, delta)) in items.iter().enumerate() {
                let id = k as u64 + 1;
                gt.push(1, Label::new(*b).with_id(id)).unwrap();
                let moved = if *perturb && *delta != 0.0 {
                    any_diff = true;
                    BoxLabel::from_edges(b.x_min() + delta, b.y_min(), b.x_max() + delta, b.y_max(), 1).unwrap()
                } else {
                    *b
                };
                spl.push(1, Label::new(moved).with_id(id)).unwrap();
            }
            let loss = label_loss(&spl, &gt, std::slice::from_ref(&img)).unwrap();
            prop_assert_eq!(loss == 0.0, !any_diff, "loss {}", loss);
            prop_assert!((0.0..1.0).contains(&loss));
            Ok(())
        },
    );
    results.push(("loss zero iff exact", r.map_err(|e| e.to_string())));

    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    let names: Vec<&str> = results.iter().map(|(n, _)| *n).collect();
    Verdict::new(
        failed.is_empty() && elapsed < PROPERTY_BUDGET_S,
        if failed.is_empty() {
            format!("{} properties x {PROPERTY_CASES} cases in {elapsed:.1} s: {}", names.len(), names.join(", "))
        } else {
            failed.join("; ")
        },
    )
}
