//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criteria 7-11 share three seeded runs of the default pipeline.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use finemine::augment;
use finemine::data::{self, GenSpec, Shot, SplitCounts};
use finemine::fusion::{self, FusionPlan};
use finemine::harness::{
    self, emit_report, parse_report_csv, render_report, MetricsReport, MiningRow, ReportFormat, ReportRow, RunConfig,
    RunSummary, STAGES,
};
use finemine::image::Image;
use finemine::mining::{self, PseudoLabel, PseudoLabelSet, Vote};
use finemine::model::{self, softmax, Classifier};
use finemine::seed;
use finemine::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

type Outcome = (bool, String);

fn rng(tag: &str, i: u64) -> seed::Rng {
    seed::rng(20_240_601, tag, i)
}

fn random_image(r: &mut impl Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_distribution(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_logits(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-20.0..20.0)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 1

fn gradient_correctness() -> Outcome {
    let (worst, rejected) = common::grad_check_pairs(20);
    (
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 20 pairs at epsilon 1e-4 ({rejected} draws redrawn at a ReLU kink)"),
    )
}

// ---------------------------------------------------------------------------
// 2

fn crops_and_views() -> Result<(), String> {
    let mut r = rng("views", 0);
    for (h, w) in [(40, 48), (48, 40), (36, 36)] {
        let img = random_image(&mut r, h, w, 3, 0.0, 1.0);
        let set = augment::crops_144(&img, [32, 36, 40, 44], 28).map_err(|e| e.to_string())?;
        if set.len() != 144 {
            return Err(format!("crops_144 gave {} views", set.len()));
        }
        for pair in set.views.chunks_exact(2) {
            if pair[1] != pair[0].flip_horizontal() {
                return Err("crops_144 view is not followed by its mirror".into());
            }
        }
        let tta = augment::tta_three(&img, 36, 32, 7).map_err(|e| e.to_string())?;
        if tta.len() != 3 {
            return Err(format!("tta_three gave {} views", tta.len()));
        }
    }
    Ok(())
}

/// Checks one mixed sample against its inputs; returns whether the box was clipped.
fn check_cutmix(a: &Image, ta: &[f64], b: &Image, tb: &[f64], m: &augment::MixedSample) -> Result<bool, String> {
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let (mut y0, mut y1, mut x0, mut x1, mut area) = (h, 0, w, 0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let from_b = (0..c).all(|k| m.image.get(y, x, k) == b.get(y, x, k));
            let from_a = (0..c).all(|k| m.image.get(y, x, k) == a.get(y, x, k));
            if from_b == from_a {
                return Err(format!("pixel ({y},{x}) comes from neither input"));
            }
            if from_b {
                area += 1;
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y + 1), x0.min(x), x1.max(x + 1));
            }
        }
    }
    if area > 0 && area != (y1 - y0) * (x1 - x0) {
        return Err("pasted region is not a rectangle".into());
    }
    let lam = 1.0 - area as f64 / (h * w) as f64;
    if (lam - m.lam).abs() > 1e-9 {
        return Err(format!("lam {} but pasted area implies {lam}", m.lam));
    }
    for ((t, x), y) in m.target.iter().zip(ta).zip(tb) {
        if (t - (m.lam * x + (1.0 - m.lam) * y)).abs() > 1e-9 {
            return Err("target is not lam·a + (1-lam)·b".into());
        }
    }
    if (m.target.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err("target does not sum to 1".into());
    }
    Ok(area > 0 && (y0 == 0 || x0 == 0 || y1 == h || x1 == w))
}

fn cutmix_algebra() -> Result<usize, String> {
    let mut clipped = 0;
    for i in 0..500u64 {
        let mut r = rng("cutmix", i);
        let (h, w, c) = (r.gen_range(8..24), r.gen_range(8..24), r.gen_range(1..4));
        let n = r.gen_range(2..8);
        // Disjoint value ranges make every pixel's origin unambiguous.
        let a = random_image(&mut r, h, w, c, 0.0, 0.5);
        let b = random_image(&mut r, h, w, c, 0.5, 1.0);
        let (ta, tb) = (random_distribution(&mut r, n), random_distribution(&mut r, n));
        let m = if i % 2 == 0 {
            augment::cutmix(&a, &ta, &b, &tb, r.gen_range(0.2..2.0), i).map_err(|e| e.to_string())?
        } else {
            // Centres at or beyond the border force clipping.
            let (cy, cx) = (r.gen_range(-2.0..h as f64 + 2.0), r.gen_range(-2.0..w as f64 + 2.0));
            augment::cutmix_with(&a, &ta, &b, &tb, r.gen_range(0.0..=1.0), cy, cx).map_err(|e| e.to_string())?
        };
        clipped += check_cutmix(&a, &ta, &b, &tb, &m)? as usize;
    }
    Ok(clipped)
}

fn rcm_checks() -> Result<(), String> {
    for i in 0..1000u64 {
        let mut r = rng("rcm", i);
        let n = r.gen_range(1..9);
        let k = r.gen_range(0..n);
        let perm = augment::rcm_permutation(n, k, i).map_err(|e| e.to_string())?;
        if !perm.is_bijection() {
            return Err(format!("draw {i}: not a bijection"));
        }
        if perm.max_displacement() > 2 * k {
            return Err(format!("draw {i}: displacement {} > 2k = {}", perm.max_displacement(), 2 * k));
        }
        if i < 200 {
            let min_tile = 8usize.div_ceil(n);
            let tile = r.gen_range(min_tile..min_tile + 4);
            let img = random_image(&mut r, n * tile, n * tile, 3, 0.0, 1.0);
            let (shuffled, _) = augment::rcm_destruct(&img, &perm).map_err(|e| e.to_string())?;
            let sorted = |im: &Image| {
                let mut v: Vec<u32> = im.pixels().iter().map(|p| p.to_bits()).collect();
                v.sort_unstable();
                v
            };
            if sorted(&shuffled) != sorted(&img) {
                return Err(format!("draw {i}: pixel multiset changed"));
            }
            if augment::rcm_restore(&shuffled, &perm).map_err(|e| e.to_string())? != img {
                return Err(format!("draw {i}: restore is not exact"));
            }
        }
    }
    Ok(())
}

fn augmentation_geometry() -> Outcome {
    let result = crops_and_views().and_then(|_| cutmix_algebra()).and_then(|clipped| rcm_checks().map(|_| clipped));
    match result {
        Ok(clipped) => (
            true,
            format!("144/3 views with mirror pairs; 500 CutMix draws exact ({clipped} boxes touch the border); 1000 RCM permutations bijective within 2k, 200 destruct/restore exact"),
        ),
        Err(e) => (false, e),
    }
}

// ---------------------------------------------------------------------------
// 3

fn brute_force_inertia(pts: &[Vec<f64>], k: usize) -> f64 {
    let n = pts.len();
    let d = pts[0].len();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    for code in 0..k.pow(n as u32) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        if counts.contains(&0) {
            continue;
        }
        let inertia: f64 = pts
            .iter()
            .zip(&labels)
            .map(|(p, &l)| mining::sq_dist(p, &sums[l].iter().map(|s| s / counts[l] as f64).collect::<Vec<_>>()))
            .sum();
        best = best.min(inertia);
    }
    best
}

fn kmeans_oracle() -> Outcome {
    let (mut matched, mut monotone, mut zero_at_n) = (0, 0, 0);
    for i in 0..10u64 {
        let mut r = rng("kmeans", i);
        let n = r.gen_range(3..=8);
        let d = r.gen_range(1..=2);
        let k = r.gen_range(1..=3.min(n));
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let fit = mining::kmeans_fit(&pts, k, 100, i).unwrap();
        matched += ((fit.model.inertia - brute_force_inertia(&pts, k)).abs() <= 1e-9) as usize;
        monotone += fit.history.windows(2).all(|w| w[1] <= w[0]) as usize;
        zero_at_n += (mining::kmeans_fit(&pts, n, 100, i).unwrap().model.inertia == 0.0) as usize;
    }
    (
        matched >= 8 && monotone == 10 && zero_at_n == 10,
        format!("{matched}/10 match brute force, {monotone}/10 monotone histories, {zero_at_n}/10 zero inertia at K=N"),
    )
}

// ---------------------------------------------------------------------------
// 4

const CASES: u64 = 200;

fn fusion_algebra() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok && !failures.contains(&name.to_string()) {
            failures.push(name.to_string());
        }
    };
    let plan = FusionPlan::default();
    for i in 0..CASES {
        let mut r = rng("fusion", i);
        let (m, c) = (r.gen_range(1..6), r.gen_range(2..8));
        let z: Vec<Vec<f64>> = (0..m).map(|_| random_logits(&mut r, c)).collect();
        let w = random_distribution(&mut r, m);
        let fused = fusion::fuse(&z, &w).unwrap();
        check(
            "convex bounds",
            fused.iter().enumerate().all(|(j, v)| {
                let lo = z.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min);
                let hi = z.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
                *v >= lo - 1e-9 && *v <= hi + 1e-9
            }),
        );
        let (g, f) = (random_logits(&mut r, c), random_logits(&mut r, c));
        let shot = *Shot::ALL.choose(&mut r).unwrap();
        let routed = fusion::routed_fuse(&g, &f, shot, &plan).unwrap();
        check(
            "routed convex bounds",
            routed.iter().zip(g.iter().zip(&f)).all(|(v, (a, b))| *v >= a.min(*b) - 1e-9 && *v <= a.max(*b) + 1e-9),
        );

        let acc: Vec<f64> = (0..m).map(|_| r.gen_range(0.05..1.0)).collect();
        let scale = r.gen_range(0.01..100.0);
        let a = fusion::fuse(&z, &fusion::weights_from_accuracy(&acc).unwrap()).unwrap();
        let scaled: Vec<f64> = acc.iter().map(|x| x * scale).collect();
        let b = fusion::fuse(&z, &fusion::weights_from_accuracy(&scaled).unwrap()).unwrap();
        let mut sorted = a.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        // Rounding can only flip an exact near-tie.
        check("argmax under rescaling", sorted[0] - sorted[1] <= 1e-9 || fusion::argmax(&a) == fusion::argmax(&b));

        let shift = r.gen_range(-50.0..50.0);
        let shifted: Vec<Vec<f64>> = z.iter().map(|row| row.iter().map(|v| v + shift).collect()).collect();
        let (p, q) = (softmax(&fused), softmax(&fusion::fuse(&shifted, &w).unwrap()));
        check("softmax shift", p.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-9));

        let votes: Vec<(usize, f64)> = (0..r.gen_range(1..8)).map(|_| (r.gen_range(0..4), r.gen_range(0.0..=1.0))).collect();
        let mut perm = votes.clone();
        perm.shuffle(&mut r);
        let (va, vb) = (mining::vote_top1(&votes).unwrap(), mining::vote_top1(&perm).unwrap());
        check(
            "vote permutation",
            va.label == vb.label && va.agreement == vb.agreement && (va.mean_confidence - vb.mean_confidence).abs() < 1e-12,
        );

        let pool: Vec<(String, Vote)> = (0..r.gen_range(0..30))
            .map(|j| {
                let vote = Vote { label: r.gen_range(0..5), agreement: r.gen_range(1..4), mean_confidence: r.gen_range(0.0..=1.0) };
                (format!("in-{j}"), vote)
            })
            .collect();
        let (agree, conf) = (r.gen_range(1..4), r.gen_range(0.0..1.0));
        let loose = mining::select_confident(&pool, agree, conf, 1);
        let strict = mining::select_confident(&pool, agree + r.gen_range(0..2), conf + r.gen_range(0.0..0.5), 1);
        check(
            "threshold monotonicity",
            strict.len() <= loose.len() && strict.iter().all(|p| loose.get(&p.example_id) == Some(p)),
        );

        let (sa, sb) = (random_pseudo_set(&mut r, 30), random_pseudo_set(&mut r, 30));
        let inter = mining::intersect(&sa, &sb);
        check(
            "intersect subset",
            inter.iter().all(|p| {
                let (x, y) = (sa.get(&p.example_id).unwrap(), sb.get(&p.example_id).unwrap());
                p.label == x.label && p.label == y.label
            }) && mining::intersect(&sb, &sa).len() == inter.len()
                && mining::intersect(&sa, &PseudoLabelSet::new()).is_empty()
                && mining::intersect(&sa, &sa).iter().zip(sa.iter()).all(|(p, q)| p.label == q.label && p.agreement == 2 * q.agreement)
                && mining::intersect(&sa, &sa).len() == sa.len(),
        );
    }
    if failures.is_empty() {
        (true, format!("{CASES} random cases for each of 7 laws"))
    } else {
        (false, format!("violated: {}", failures.join(", ")))
    }
}

fn random_pseudo_set(r: &mut impl Rng, max: usize) -> PseudoLabelSet {
    let mut s = PseudoLabelSet::new();
    for _ in 0..r.gen_range(0..max) {
        let id = format!("in-{:05}", r.gen_range(0..40));
        if !s.contains(&id) {
            s.insert(PseudoLabel {
                example_id: id,
                label: r.gen_range(0..5),
                confidence: r.gen_range(0.0..=1.0),
                agreement: r.gen_range(1..4),
                round: r.gen_range(1..4),
            })
            .unwrap();
        }
    }
    s
}

// ---------------------------------------------------------------------------
// 5

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gen.counts =
        SplitCounts { labeled_train: 120, validation: 40, inclass_unlabeled: 120, outclass_unlabeled: 120, test: 60 };
    cfg.train.epochs = 3;
    cfg.train.warmup_epochs = 1;
    cfg.mining.max_rounds = 2;
    cfg.cluster.epochs = 2;
    cfg.fix.enabled = true;
    cfg.fix.epochs = 2;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg_path = tmp.path().join("config.json");
    std::fs::write(&cfg_path, small_config(&run_dir).to_json()).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&run_dir);
        let out = Command::new(env!("CARGO_BIN_EXE_finemine"))
            .args(["--single-thread", "pipeline", "--config"])
            .arg(&cfg_path)
            .env_remove(harness::SEED_ENV)
            .output()
            .unwrap();
        if !out.status.success() {
            return (false, format!("pipeline exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
        }
        runs.push((out.stdout, snapshot(&run_dir)));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let differing: Vec<String> = a
        .1
        .keys()
        .chain(b.1.keys())
        .filter(|k| a.1.get(*k) != b.1.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    (
        a.0 == b.0 && differing.is_empty() && !a.1.is_empty(),
        format!(
            "{} files compared, {} differ{}; printed report {}",
            a.1.len(),
            differing.len(),
            differing.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            if a.0 == b.0 { "identical" } else { "differs" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 6

fn round_trips() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();
    for i in 0..50u64 {
        let mut r = rng("fmt1", i);
        let dims: Vec<usize> = (0..r.gen_range(0..4)).map(|_| r.gen_range(1..6)).collect();
        let n = dims.iter().product();
        let mut data: Vec<f32> = (0..n).map(|_| r.gen_range(-1e6..1e6)).collect();
        if n > 2 {
            data[0] = f32::MIN_POSITIVE;
            data[1] = -0.0;
        }
        let t = Tensor::new(dims, data).unwrap();
        let path = tmp.path().join(format!("t{i}.fmt1"));
        t.write(&path).unwrap();
        let back = Tensor::read(&path).unwrap();
        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back.dims != t.dims || bits(&back) != bits(&t) {
            problems.push("FMT1");
            break;
        }
    }

    let spec = GenSpec {
        counts: SplitCounts { labeled_train: 60, validation: 20, inclass_unlabeled: 30, outclass_unlabeled: 30, test: 20 },
        seed: 9,
        ..GenSpec::default()
    };
    let bundle = data::generate(&spec).unwrap();
    let dir = tmp.path().join("bundle");
    data::save_bundle(&bundle, &dir, Some(&spec)).unwrap();
    if data::load_bundle(&dir).unwrap() != bundle {
        problems.push("bundle");
    }

    for i in 0..50u64 {
        let set = random_pseudo_set(&mut rng("pseudo", i), 40);
        let path = tmp.path().join("pseudo.csv");
        set.write(&path).unwrap();
        if PseudoLabelSet::read(&path).unwrap() != set {
            problems.push("pseudo-labels");
            break;
        }
    }

    for i in 0..50u64 {
        let mut r = rng("report", i);
        let report = MetricsReport {
            models: (0..r.gen_range(0..5))
                .map(|j| ReportRow::new(format!("model-{j}"), 32, 64, r.gen_range(0.0..=100.0)))
                .collect(),
            fused: (0..r.gen_range(0..3)).map(|j| ReportRow::new(format!("fused/{j}"), 32, 32, r.gen_range(0.0..=100.0))).collect(),
            mining: (0..r.gen_range(0..4))
                .map(|j| MiningRow {
                    source: "iterative".into(),
                    round: j + 1,
                    pseudo_count: r.gen_range(0..3000),
                    precision: r.gen_bool(0.7).then(|| harness::round1(r.gen_range(0.0..=100.0))),
                    val_accuracy: harness::round1(r.gen_range(0.0..=100.0)),
                })
                .collect(),
        };
        let path = tmp.path().join("report.csv");
        emit_report(&report, ReportFormat::Csv, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        if parse_report_csv(&text, "report").unwrap() != report || render_report(&report, ReportFormat::Csv) != text {
            problems.push("CSV report");
            break;
        }
    }
    if problems.is_empty() {
        (true, "FMT1 tensors (50), dataset bundle, pseudo-label files (50), CSV reports (50) all lossless".into())
    } else {
        (false, format!("lossy: {}", problems.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 7-11: seeded desk pipelines

struct DeskRun {
    cfg: RunConfig,
    summary: RunSummary,
}

fn desk_runs(root: &Path) -> Vec<DeskRun> {
    SEEDS
        .iter()
        .map(|&s| {
            let mut cfg = RunConfig::default();
            cfg.override_seeds(s);
            cfg.output_dir = root.join(format!("seed-{s}"));
            let t = Instant::now();
            harness::run_pipeline(&cfg).unwrap();
            eprintln!("  desk pipeline, seed {s}: {:.0}s", t.elapsed().as_secs_f64());
            let summary = harness::read_summary(&cfg.output_dir).unwrap();
            DeskRun { cfg, summary }
        })
        .collect()
}

fn err(acc: f64) -> f64 {
    100.0 * (1.0 - acc)
}

fn semi_supervised_gain(runs: &[DeskRun]) -> Outcome {
    let gains: Vec<f64> = runs.iter().map(|r| err(r.summary.baseline_val_fused) - err(r.summary.final_val_fused)).collect();
    let rounds: Vec<usize> = runs.iter().map(|r| r.summary.mining_val.len()).collect();
    let g = mean(&gains);
    (
        g >= 2.0 && rounds.iter().all(|&n| n >= 2),
        format!("validation error gain {g:.2} points (per seed {gains:.1?}, mining rounds {rounds:?}); need >= 2.0"),
    )
}

fn mining_precision(runs: &[DeskRun]) -> Outcome {
    let p: Vec<f64> = runs.iter().map(|r| 100.0 * r.summary.round1_precision.unwrap_or(0.0)).collect();
    let m = mean(&p);
    (m >= 95.0, format!("round-1 precision {m:.2}% (per seed {p:.1?}); need >= 95%"))
}

fn cluster_pretraining(runs: &[DeskRun]) -> Outcome {
    let holdout: Vec<f64> = runs.iter().map(|r| 100.0 * r.summary.cluster_holdout_accuracy).collect();
    let pre: Vec<f64> = runs.iter().map(|r| 100.0 * mean(&r.summary.cluster_val)).collect();
    let rand: Vec<f64> = runs.iter().map(|r| 100.0 * mean(&r.summary.random_init_val)).collect();
    let (h, p, q) = (mean(&holdout), mean(&pre), mean(&rand));
    (
        h > 90.0 && p >= q,
        format!("holdout cluster accuracy {h:.2}% (per seed {holdout:.1?}); val accuracy from cluster pretrain {p:.2}% vs random init {q:.2}%"),
    )
}

fn fix_strategy(runs: &[DeskRun]) -> Outcome {
    let mut deltas = Vec::new();
    let mut at_base = Vec::new();
    let mut frozen = true;
    for run in runs {
        let dir = run.cfg.output_dir.clone();
        let bundle = data::load_bundle(&dir.join(STAGES[0])).unwrap();
        let c = bundle.num_inclass_classes;
        let samples =
            mining::training_samples(&bundle.labeled_train, &[], &PseudoLabelSet::new(), c, run.cfg.train.label_smooth_eps)
                .unwrap();
        let high = run.cfg.fix.high_resolution;
        let mut per_model = Vec::new();
        for (i, role) in run.cfg.model_roles.iter().enumerate() {
            let m = Classifier::load(&dir.join(STAGES[1]).join(format!("{}-{i}", role.role.name()))).unwrap();
            let acc = |m: &Classifier| mining::ensemble_score(std::slice::from_ref(m), &bundle.validation).unwrap().per_model[0];
            at_base.push(100.0 * acc(&m));
            let mut unfixed = m.clone();
            unfixed.set_input_resolution(high);
            let cfg = model::TrainConfig { seed: seed::derive(run.cfg.train.seed, "fix", i as u64), ..run.cfg.fix.train_config(&run.cfg.train) };
            let fixed = model::fix_finetune(&m, &samples, high, &cfg).unwrap();
            frozen &= fixed.conv_params() == m.conv_params();
            per_model.push(100.0 * (acc(&fixed) - acc(&unfixed)));
        }
        deltas.push(mean(&per_model));
    }
    let d = mean(&deltas);
    (
        d >= 0.0 && frozen,
        format!(
            "mean accuracy change at {}px {d:+.2} points (per seed {deltas:+.1?}; base resolution accuracy {:.1}%); conv {}",
            runs[0].cfg.fix.high_resolution,
            mean(&at_base),
            if frozen { "frozen" } else { "CHANGED" }
        ),
    )
}

fn routed_fusion(runs: &[DeskRun]) -> Outcome {
    let mut slack = Vec::new();
    let mut agree = Vec::new();
    for run in runs {
        let e = &run.summary.test_error;
        let role_err = |role: harness::Role| {
            let i = run.cfg.role_index(role).unwrap();
            e[&format!("{}-{i}", role.name())]
        };
        let best_single = role_err(harness::Role::Generic).min(role_err(harness::Role::Finegrained));
        slack.push(e["fused/routed"] - best_single);
        agree.push(100.0 * run.summary.shot_agreement);
    }
    let (s, a) = (mean(&slack), mean(&agree));
    (
        s <= 1.0 && a >= 70.0,
        format!("routed error minus best single {s:+.2} points (per seed {slack:+.1?}; need <= 1.0); Long/Close shot agreement {a:.1}% (per seed {agree:.1?}; need >= 70%)"),
    )
}

// ---------------------------------------------------------------------------

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let (ok, detail) = match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(outcome) => outcome,
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    };
    println!(
        "{} criterion {n:>2} {name}: {detail} [{:.1}s]",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    ok
}

fn main() {
    // Panics are reported on the criterion's own line.
    panic::set_hook(Box::new(|_| {}));
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let mut results = vec![
        run_criterion(1, "gradient correctness", gradient_correctness),
        run_criterion(2, "augmentation geometry", augmentation_geometry),
        run_criterion(3, "k-means oracle", kmeans_oracle),
        run_criterion(4, "fusion algebra", fusion_algebra),
        run_criterion(5, "determinism", determinism),
        run_criterion(6, "round-trips", round_trips),
    ];
    let tmp = tempfile::tempdir().unwrap();
    eprintln!("running the desk pipeline for seeds {SEEDS:?}");
    match panic::catch_unwind(|| desk_runs(tmp.path())) {
        Ok(runs) => {
            results.push(run_criterion(7, "semi-supervised gain", || semi_supervised_gain(&runs)));
            results.push(run_criterion(8, "mining precision", || mining_precision(&runs)));
            results.push(run_criterion(9, "cluster pretraining", || cluster_pretraining(&runs)));
            results.push(run_criterion(10, "fix strategy", || fix_strategy(&runs)));
            results.push(run_criterion(11, "routed fusion", || routed_fusion(&runs)));
        }
        Err(_) => {
            for (n, name) in [(7, "semi-supervised gain"), (8, "mining precision"), (9, "cluster pretraining"), (10, "fix strategy"), (11, "routed fusion")] {
                results.push(run_criterion(n, name, || (false, "desk pipeline failed".into())));
            }
        }
    }
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
