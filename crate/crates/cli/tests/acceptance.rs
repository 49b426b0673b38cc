//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mmagg_core::checkpoint::save_model;
use mmagg_core::datastore::{load_manifest, load_video, read_predictions, Manifest};
use mmagg_core::eval::{ensemble_average, map_eval, Prediction, PredictionSet};
use mmagg_core::introspect::modality_contribution;
use mmagg_core::netvlad::{soft_assign, vlad_forward, VladParams};
use mmagg_core::preprocess::{fit_pca, PcaOptions, Quantizer};
use mmagg_core::sampling::{predict_videos, repeated_eval_average, single_pass};
use mmagg_core::synthgen::{generate, StreamKind, SynthModality, SynthSpec};
use mmagg_core::trainer::{
    gradient_check_random, init_model, load_labeled_videos, shape_for_manifest, train, AdamConfig, GradCheckConfig,
    TrainConfig,
};
use mmagg_core::{AggregationModel, Matrix, SeededRng, VideoFeatures};

const EVAL_SEED: u64 = 42;
const REPEATS: usize = 5;
const TRAIN_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 10] = [
        (1, "gradient correctness", Duration::from_secs(30), gradient_correctness),
        (2, "quantization bound", Duration::from_secs(5), quantization_bound),
        (3, "PCA and whitening", Duration::from_secs(10), pca_whitening),
        (4, "VLAD invariants", Duration::from_secs(10), vlad_invariants),
        (5, "mAP oracle equivalence", Duration::from_secs(30), map_oracle),
        (6, "multi-modal beats single-modal", Duration::from_secs(300), multi_vs_single),
        (7, "temporal motif", Duration::from_secs(300), temporal_motif),
        (8, "ablation soundness", Duration::from_secs(60), ablation_soundness),
        (9, "determinism", Duration::from_secs(120), determinism),
        (10, "ensemble identity", Duration::from_secs(120), ensemble_identity),
    ];
    let mut failed = Vec::new();
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = result.pass && in_time;
        println!(
            "criterion {n:>2} {:<32} {} | {} | {:.2}s (limit {}s{})",
            name,
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
        if !pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn gradient_correctness() -> Outcome {
    let cfg = GradCheckConfig::default();
    let report = gradient_check_random(&cfg).expect("gradient check runs");
    let covered: BTreeSet<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
    let expected = [
        "vlad.m0.W", "vlad.m0.b", "vlad.m0.C", "vlad.m1.W", "vlad.m1.b", "vlad.m1.C", "head.fc.W", "head.fc.b", "head.moe.U",
        "head.moe.bias", "head.moe.A", "head.cg.G", "head.cg.g", "input.m0", "input.m1",
    ];
    let all_covered = expected.iter().all(|n| covered.contains(n));
    let worst = report.worst();
    outcome(
        all_covered && worst < 1e-4 && cfg.tolerance == 1e-4,
        format!("worst relative error {worst:.2e} over {} tensors (< 1e-4)", report.entries.len()),
    )
}

fn quantization_bound() -> Outcome {
    let q = Quantizer::new(2.5, 256).unwrap();
    let bound = 2.5 / 255.0;
    let mut rng = SeededRng::new(2);
    let mut worst: f64 = 0.0;
    for i in 0..1_000_000 {
        let x = match i % 3 {
            0 => rng.uniform() * 8.0 - 4.0,
            1 => 1.5 * rng.normal(),
            _ => rng.uniform() * 5.0 - 2.5,
        };
        let back = q.dequantize(&q.quantize(&[x])).unwrap()[0];
        worst = worst.max((back - q.clip(x)).abs());
    }
    let mut identity = true;
    for code in 0..=255u8 {
        let y = q.dequantize_code(code).unwrap();
        worst = worst.max((q.dequantize_code(q.quantize_value(y)).unwrap() - q.clip(y)).abs());
        identity &= q.quantize_value(y) == code;
    }
    outcome(
        worst <= bound && identity,
        format!("max round-trip error {worst:.6} (<= {bound:.6}); code identity {identity}"),
    )
}

fn pca_whitening() -> Outcome {
    let (n, big_d, d) = (10_000, 16, 8);
    let mut rng = SeededRng::new(3);
    // x = A z with decaying column scales gives correlated components.
    let mix: Vec<f64> = (0..big_d * big_d).map(|k| rng.normal() * 0.8f64.powi((k % big_d) as i32)).collect();
    let offset: Vec<f64> = (0..big_d).map(|_| 3.0 * rng.normal()).collect();
    let mut data = Vec::with_capacity(n * big_d);
    for _ in 0..n {
        let z: Vec<f64> = (0..big_d).map(|_| rng.normal()).collect();
        for r in 0..big_d {
            data.push(offset[r] + (0..big_d).map(|c| mix[r * big_d + c] * z[c]).sum::<f64>());
        }
    }
    let samples = Matrix::from_vec(n, big_d, data).unwrap();
    let model = fit_pca(&samples, d, PcaOptions::default()).unwrap();

    let mut ortho: f64 = 0.0;
    for a in 0..d {
        for b in 0..d {
            let dot: f64 = (0..big_d).map(|r| model.basis.get(r, a) * model.basis.get(r, b)).sum();
            ortho = ortho.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    let whitened: Vec<Vec<f64>> = (0..n).map(|i| model.whiten(samples.row(i)).unwrap()).collect();
    let mut var_lo = f64::INFINITY;
    let mut var_hi = f64::NEG_INFINITY;
    for j in 0..d {
        let mean = whitened.iter().map(|w| w[j]).sum::<f64>() / n as f64;
        let var = whitened.iter().map(|w| (w[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var_lo = var_lo.min(var);
        var_hi = var_hi.max(var);
    }
    outcome(
        ortho <= 1e-8 && var_lo >= 0.95 && var_hi <= 1.05,
        format!("orthonormality error {ortho:.1e} (<= 1e-8); whitened variance in [{var_lo:.4}, {var_hi:.4}]"),
    )
}

fn vlad_invariants() -> Outcome {
    let mut rng = SeededRng::new(4);
    let (mut perm_ok, mut norm_ok, mut rows_ok, mut degenerate_ok) = (true, true, true, true);
    for _ in 0..20 {
        let d = 1 + rng.below_usize(8);
        let k = 1 + rng.below_usize(8);
        let s = 1 + rng.below_usize(30);
        let mut p = VladParams::init(d, k, &mut rng);
        p.assign_bias.data_mut().iter_mut().for_each(|b| *b = rng.normal());
        let x = Matrix::from_vec(s, d, (0..s * d).map(|_| 2.0 * rng.normal()).collect()).unwrap();

        let mut perm: Vec<usize> = (0..s).collect();
        rng.shuffle(&mut perm);
        let v = vlad_forward(&p, &x).unwrap();
        perm_ok &= v == vlad_forward(&p, &x.select_rows(&perm)).unwrap();

        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        norm_ok &= norm.abs() <= 1e-9 || (norm - 1.0).abs() <= 1e-9;

        let alpha = soft_assign(&p, &x).unwrap();
        rows_ok &= (0..s).all(|i| (alpha.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        // Every frame on a shared center: residuals vanish exactly. Powers
        // of two keep the products exact.
        let levels = [0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0];
        let u: Vec<f64> = (0..d).map(|_| levels[rng.below_usize(levels.len())]).collect();
        let mut flat = p.clone();
        for j in 0..d {
            for c in 0..k {
                flat.centers.data_mut()[j * k + c] = u[j];
            }
        }
        let same = Matrix::from_vec(s, d, u.iter().copied().cycle().take(s * d).collect()).unwrap();
        let zero = vlad_forward(&flat, &same).unwrap();
        degenerate_ok &= zero.iter().all(|&a| a == 0.0);
    }
    outcome(
        perm_ok && norm_ok && rows_ok && degenerate_ok,
        format!(
            "20 configs: permutation bit-exact {perm_ok}, norm in {{0,1}} {norm_ok}, rows sum to 1 {rows_ok}, zero residual {degenerate_ok}"
        ),
    )
}

/// Precision-at-positive AP by explicit rank counting.
fn brute_force_ap(scores: &[(String, f64)], positives: &BTreeSet<String>) -> f64 {
    let ahead = |a: &(String, f64), b: &(String, f64)| b.1 > a.1 || (b.1 == a.1 && b.0 < a.0);
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for item in scores.iter().filter(|s| positives.contains(&s.0)) {
        let rank = 1 + scores.iter().filter(|other| ahead(item, other)).count();
        let hits = 1 + scores.iter().filter(|o| positives.contains(&o.0) && ahead(item, o)).count();
        terms.push((rank, hits as f64 / rank as f64));
    }
    terms.sort_by_key(|t| t.0);
    terms.iter().map(|t| t.1).sum::<f64>() / positives.len() as f64
}

fn map_oracle() -> Outcome {
    let hand = {
        let preds = PredictionSet::new(
            1,
            vec![
                Prediction { video_id: "a".into(), probs: vec![0.9] },
                Prediction { video_id: "b".into(), probs: vec![0.8] },
                Prediction { video_id: "c".into(), probs: vec![0.7] },
            ],
        )
        .unwrap();
        let truth: BTreeMap<String, BTreeSet<usize>> =
            [("a", vec![0]), ("b", vec![]), ("c", vec![0])].into_iter().map(|(k, v)| (k.to_string(), v.into_iter().collect())).collect();
        map_eval(&preds, &truth, None).unwrap().map
    };
    let hand_ok = (hand - 5.0 / 6.0).abs() <= 1e-15;

    let mut rng = SeededRng::new(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let videos = 1 + rng.below_usize(50);
        let classes = 1 + rng.below_usize(10);
        let coarse = rng.below(2) == 0;
        let mut preds = Vec::new();
        let mut truth = BTreeMap::new();
        for v in 0..videos {
            let id = format!("v{:03}", rng.below(1000));
            if truth.contains_key(&id) {
                continue;
            }
            let probs: Vec<f64> =
                (0..classes).map(|_| if coarse { rng.below(5) as f64 / 4.0 } else { rng.uniform() }).collect();
            let labels: BTreeSet<usize> = (0..classes).filter(|_| rng.below(3) == 0).collect();
            let _ = v;
            truth.insert(id.clone(), labels);
            preds.push(Prediction { video_id: id, probs });
        }
        let set = PredictionSet::new(classes, preds.clone()).unwrap();
        let got = map_eval(&set, &truth, None);
        let mut aps = Vec::new();
        for c in 0..classes {
            let scores: Vec<(String, f64)> = preds.iter().map(|p| (p.video_id.clone(), p.probs[c])).collect();
            let positives: BTreeSet<String> = truth.iter().filter(|(_, l)| l.contains(&c)).map(|(k, _)| k.clone()).collect();
            if !positives.is_empty() {
                aps.push(brute_force_ap(&scores, &positives));
            }
        }
        match got {
            Ok(r) => {
                let expected = aps.iter().sum::<f64>() / aps.len() as f64;
                let per: Vec<f64> = r.per_class.iter().filter_map(|c| c.ap).collect();
                if aps.is_empty() || r.map != expected || per != aps {
                    mismatches += 1;
                }
            }
            Err(_) => mismatches += usize::from(!aps.is_empty()),
        }
    }
    outcome(
        hand_ok && mismatches == 0,
        format!("AP([0.9,0.8,0.7],[1,0,1]) = {hand} (5/6 within 1e-15 {hand_ok}); {mismatches} mismatches in 1000 instances"),
    )
}

fn frame_modality(name: &str, informative: Vec<usize>, kind: StreamKind) -> SynthModality {
    SynthModality { name: name.into(), dim: 8, fps: 1.0, clusters: 8, informative, kind }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        hidden: 32,
        experts: 2,
        sample_size: 50,
        batch_size: 16,
        epochs: 30,
        threads: 1,
        optimizer: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
    }
}

fn two_modality_spec() -> SynthSpec {
    SynthSpec {
        classes: 4,
        videos_per_class: 50,
        duration_s: 60.0,
        seed: 1,
        modalities: vec![
            frame_modality("A", vec![0, 1], StreamKind::Frames),
            frame_modality("B", vec![2, 3], StreamKind::Frames),
        ],
        ..SynthSpec::default()
    }
}

/// Copy of `manifest` restricted to the named modalities.
fn restrict(manifest: &Manifest, keep: &[&str]) -> Manifest {
    let mut m = manifest.clone();
    m.modalities.retain(|s| keep.contains(&s.name.as_str()));
    for v in &mut m.videos {
        v.features.retain(|k, _| keep.contains(&k.as_str()));
    }
    m
}

struct Trained {
    model: AggregationModel,
    val: Vec<VideoFeatures>,
    map: f64,
}

fn train_and_score(manifest: &Manifest, cfg: &TrainConfig, seed: u64) -> Trained {
    let data = load_labeled_videos(manifest, Some("train")).unwrap();
    let shape = shape_for_manifest(manifest, cfg, &BTreeMap::new());
    let model = train(init_model(&shape, cfg, seed).unwrap(), &data, cfg, seed).unwrap().model;
    let val: Vec<VideoFeatures> =
        manifest.videos_in_split(Some("val")).map(|r| load_video(manifest, r).unwrap()).collect();
    let preds = predict_videos(&model, &val, REPEATS, EVAL_SEED).unwrap();
    let map = map_eval(&preds, &manifest.ground_truth(), None).unwrap().map;
    Trained { model, val, map }
}

struct SharedRun {
    _dir: tempfile::TempDir,
    manifest_path: PathBuf,
    both: Trained,
    only_a: f64,
    only_b: f64,
}

fn shared_run() -> &'static SharedRun {
    static RUN: OnceLock<SharedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = generate(&two_modality_spec(), dir.path()).unwrap();
        let manifest = load_manifest(&manifest_path).unwrap();
        let cfg = train_config();
        let both = train_and_score(&manifest, &cfg, TRAIN_SEED);
        let only_a = train_and_score(&restrict(&manifest, &["A"]), &cfg, TRAIN_SEED).map;
        let only_b = train_and_score(&restrict(&manifest, &["B"]), &cfg, TRAIN_SEED).map;
        SharedRun { _dir: dir, manifest_path, both, only_a, only_b }
    })
}

fn multi_vs_single() -> Outcome {
    let run = shared_run();
    let multi_ok = run.both.map >= 0.95;
    let single_ok = run.only_a <= 0.75 && run.only_b <= 0.75;
    outcome(
        multi_ok && single_ok,
        format!(
            "A+B mAP {:.4} (>= 0.95 {multi_ok}); A only {:.4}, B only {:.4} (<= 0.75 {single_ok}); {} epochs",
            run.both.map,
            run.only_a,
            run.only_b,
            train_config().epochs
        ),
    )
}

/// Mean mAP of uniformly random scores over 100 draws on `manifest`'s val split.
fn chance_map(manifest: &Manifest, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let ids: Vec<String> = manifest.videos_in_split(Some("val")).map(|v| v.id.clone()).collect();
    let truth = manifest.ground_truth();
    let total: f64 = (0..100)
        .map(|_| {
            let preds = ids
                .iter()
                .map(|id| Prediction { video_id: id.clone(), probs: (0..manifest.num_classes()).map(|_| rng.uniform()).collect() })
                .collect();
            map_eval(&PredictionSet::new(manifest.num_classes(), preds).unwrap(), &truth, None).unwrap().map
        })
        .sum();
    total / 100.0
}

fn temporal_motif() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        classes: 4,
        videos_per_class: 50,
        duration_s: 60.0,
        temporal: true,
        signal_scale: 5.0,
        seed: 1,
        modalities: vec![
            frame_modality("clip", vec![0, 1, 2, 3], StreamKind::Windowed),
            frame_modality("frame", vec![0, 1, 2, 3], StreamKind::Frames),
        ],
        ..SynthSpec::default()
    };
    let manifest = load_manifest(&generate(&spec, dir.path()).unwrap()).unwrap();
    let cfg = TrainConfig { epochs: 40, ..train_config() };
    let clip = train_and_score(&restrict(&manifest, &["clip"]), &cfg, TRAIN_SEED).map;
    let frame = train_and_score(&restrict(&manifest, &["frame"]), &cfg, TRAIN_SEED).map;
    let chance = chance_map(&manifest, 99);
    let clip_ok = clip >= 0.9;
    let frame_ok = frame <= chance + 0.15;
    outcome(
        clip_ok && frame_ok,
        format!("windowed stream mAP {clip:.4} (>= 0.9 {clip_ok}); frame control {frame:.4} vs chance {chance:.4} (<= chance+0.15 {frame_ok})"),
    )
}

fn ablation_soundness() -> Outcome {
    let run = shared_run();
    let model = &run.both.model;
    let before = model.clone();
    // Each video is ablated on its ground-truth class.
    let manifest = load_manifest(&run.manifest_path).unwrap();
    let (mut informative, mut other) = (Vec::new(), Vec::new());
    for v in &run.both.val {
        let class = *manifest.video(&v.video_id).unwrap().labels.iter().next().unwrap();
        let (inf, uninf) = if class < 2 { ("A", "B") } else { ("B", "A") };
        let r = modality_contribution(model, v, class, EVAL_SEED).unwrap();
        informative.push(r.contribution(inf).unwrap().abs());
        other.push(r.contribution(uninf).unwrap().abs());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mi, mo) = (mean(&informative), mean(&other));
    let ratio_ok = mi >= 5.0 * mo;
    let read_only = *model == before;

    // Zero A's slice of the first head layer: A can no longer contribute.
    let mut blind = model.clone();
    let rows = blind.vlad[0].output_len();
    let hidden = blind.head.hidden();
    blind.head.fc_weight.data_mut()[..rows * hidden].iter_mut().for_each(|w| *w = 0.0);
    let exact_zero = run
        .both
        .val
        .iter()
        .all(|v| (0..4).all(|c| modality_contribution(&blind, v, c, EVAL_SEED).unwrap().contribution("A") == Some(0.0)));
    outcome(
        ratio_ok && exact_zero && read_only,
        format!(
            "mean |contribution| informative {mi:.4} vs uninformative {mo:.4} (ratio {:.1}, >= 5 {ratio_ok}); zeroed slice exact zero {exact_zero}",
            mi / mo.max(f64::MIN_POSITIVE)
        ),
    )
}

fn mmagg(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mmagg")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "mmagg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_run_config(dir: &Path) -> PathBuf {
    let cfg = train_config();
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            "hidden = {}\nexperts = {}\nsample_size = {}\nbatch_size = {}\nepochs = {}\n[optimizer]\nlr = {}\n",
            cfg.hidden, cfg.experts, cfg.sample_size, cfg.batch_size, cfg.epochs, cfg.optimizer.lr
        ),
    )
    .unwrap();
    path
}

fn digest_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.starts_with("checkpoint ")).unwrap().rsplit(' ').next().unwrap().to_string()
}

fn determinism() -> Outcome {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path());
    let manifest = run.manifest_path.to_str().unwrap();
    let (c1, c2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let train_args = |out: &Path| {
        vec![
            "--config".to_string(),
            cfg.to_str().unwrap().to_string(),
            "train".into(),
            "--manifest".into(),
            manifest.into(),
            "--split".into(),
            "train".into(),
            "--seed".into(),
            TRAIN_SEED.to_string(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let a: Vec<String> = train_args(&c1);
    let b: Vec<String> = train_args(&c2);
    let out_a = mmagg(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let out_b = mmagg(&b.iter().map(String::as_str).collect::<Vec<_>>());
    let ckpt_same = std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap() && digest_line(&out_a) == digest_line(&out_b);

    // The CLI run must reproduce the library run that criterion 6 trained.
    let lib = dir.path().join("lib.ckpt");
    let manifest_v = load_manifest(&run.manifest_path).unwrap();
    let data = load_labeled_videos(&manifest_v, Some("train")).unwrap();
    let tc = train_config();
    let shape = shape_for_manifest(&manifest_v, &tc, &BTreeMap::new());
    let outcome_lib = train(init_model(&shape, &tc, TRAIN_SEED).unwrap(), &data, &tc, TRAIN_SEED).unwrap();
    save_model(&outcome_lib.model, Some(&outcome_lib.optimizer), &lib).unwrap();
    let cli_matches_lib = std::fs::read(&lib).unwrap() == std::fs::read(&c1).unwrap() && outcome_lib.model == run.both.model;

    let (p1, p2) = (dir.path().join("p1.csv"), dir.path().join("p2.csv"));
    for p in [&p1, &p2] {
        mmagg(&["predict", "--ckpt", c1.to_str().unwrap(), "--manifest", manifest, "--split", "val", "--seed", "42", "--out", p.to_str().unwrap()]);
    }
    let csv_same = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let model = &run.both.model;
    let mut averaging_exact = true;
    for v in run.both.val.iter().take(10) {
        let avg = repeated_eval_average(model, v, REPEATS, EVAL_SEED).unwrap();
        let passes: Vec<Vec<f64>> = (0..REPEATS as u64).map(|r| single_pass(model, v, EVAL_SEED + r).unwrap()).collect();
        for (c, &got) in avg.iter().enumerate() {
            let first = passes[0][c];
            let offset: f64 = passes[1..].iter().map(|p| p[c] - first).sum();
            averaging_exact &= got == first + offset / REPEATS as f64;
        }
    }
    outcome(
        ckpt_same && csv_same && averaging_exact && cli_matches_lib,
        format!(
            "checkpoints identical {ckpt_same}; CLI equals library {cli_matches_lib}; predictions identical {csv_same}; repeated average exact {averaging_exact}"
        ),
    )
}

fn ensemble_identity() -> Outcome {
    let run = shared_run();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path());
    let manifest = run.manifest_path.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let mut ckpts = Vec::new();
    for seed in [TRAIN_SEED, 1234] {
        let ckpt = p(&format!("m{seed}.ckpt"));
        mmagg(&["--config", cfg.to_str().unwrap(), "train", "--manifest", manifest, "--split", "train", "--seed", &seed.to_string(), "--out", &ckpt]);
        let preds = p(&format!("p{seed}.csv"));
        mmagg(&["predict", "--ckpt", &ckpt, "--manifest", manifest, "--split", "val", "--out", &preds]);
        ckpts.push(preds);
    }
    let copies = p("copies.csv");
    mmagg(&["ensemble", &ckpts[0], &ckpts[0], &ckpts[0], &ckpts[0], "--out", &copies]);
    let cli_identity = std::fs::read(&ckpts[0]).unwrap() == std::fs::read(&copies).unwrap();

    let base = read_predictions(Path::new(&ckpts[0])).unwrap();
    let lib_identity = (1..=7).all(|m| ensemble_average(&vec![base.clone(); m]).unwrap() == base);

    let merged_path = p("merged.csv");
    mmagg(&["ensemble", &ckpts[0], &ckpts[1], "--out", &merged_path]);
    let merged = read_predictions(Path::new(&merged_path)).unwrap();
    let other = read_predictions(Path::new(&ckpts[1])).unwrap();
    let ids = |s: &PredictionSet| s.predictions().iter().map(|x| x.video_id.clone()).collect::<Vec<_>>();
    let invariants = ids(&merged) == ids(&base)
        && merged.num_classes() == base.num_classes()
        && merged.predictions().iter().all(|x| x.probs.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)))
        && merged.predictions().iter().zip(base.predictions()).zip(other.predictions()).all(|((m, a), b)| {
            m.probs.iter().zip(&a.probs).zip(&b.probs).all(|((mv, av), bv)| *mv >= av.min(*bv) && *mv <= av.max(*bv))
        });
    let eval = mmagg(&["evaluate", "--predictions", &merged_path, "--manifest", manifest]);
    let ensemble_map: f64 = eval.trim().strip_prefix("mAP ").and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
    outcome(
        cli_identity && lib_identity && invariants && ensemble_map.is_finite(),
        format!(
            "copies reproduce input exactly (CLI {cli_identity}, library {lib_identity}); retrain ensemble invariants {invariants}, mAP {ensemble_map:.4}"
        ),
    )
}
