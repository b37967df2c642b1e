//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.
//!
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --release --test acceptance -- 3 5`.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use wstal::certify::{run_gradcheck, GradcheckConfig};
use wstal::data_io::SynthConfig;
use wstal::evaluation::{match_and_ap, EvalReport, GroundTruthSegment};
use wstal::experiment::{run_synthetic, ExperimentConfig, ExperimentResult};
use wstal::localization::{connected_components, Detection};
use wstal::losses::{
    block_class_prob, class_distance, kmax_mean, video_class_prob, ClassMetric, DistanceKind, MetricKind,
};
use wstal::numeric::{stable_softmax, Matrix, Rng};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// The synthetic setup shared by the end-to-end criteria: 5 classes in 32
/// dimensions, 5 + 5 videos per class of 120 segments, trained with the
/// default configuration.
fn synthetic(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth = SynthConfig {
        num_classes: 5,
        dim: 32,
        train_videos_per_class: 5,
        test_videos_per_class: 5,
        segments_per_video: 120,
        separation: 8.0,
        noise_std: 0.25,
        seed,
        ..SynthConfig::default()
    };
    cfg.train.seed = seed;
    cfg
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Variant {
    Base,
    NoMetric,
    Euclidean,
    Cosine,
    NoBlocks,
}

impl Variant {
    fn config(self, seed: u64) -> ExperimentConfig {
        let mut cfg = synthetic(seed);
        let loss = &mut cfg.train.loss;
        match self {
            Variant::Base => {}
            Variant::NoMetric => loss.metric = MetricKind::None,
            Variant::Euclidean => loss.distance = DistanceKind::Euclidean,
            Variant::Cosine => loss.distance = DistanceKind::Cosine,
            Variant::NoBlocks => loss.blocks.block_len = None,
        }
        cfg
    }
}

/// Runs are cached so criteria sharing a configuration train it once.
#[derive(Default)]
struct Runs {
    done: HashMap<(Variant, u64), (ExperimentResult, Duration)>,
}

impl Runs {
    fn get(&mut self, v: Variant, seed: u64) -> &(ExperimentResult, Duration) {
        self.done.entry((v, seed)).or_insert_with(|| {
            let start = Instant::now();
            let r = run_synthetic(&v.config(seed)).expect("synthetic run");
            (r, start.elapsed())
        })
    }

    fn mean(&mut self, v: Variant, f: impl Fn(&EvalReport) -> f64) -> f64 {
        SEEDS.iter().map(|&s| f(&self.get(v, s).0.report)).sum::<f64>() / SEEDS.len() as f64
    }
}

fn map_05(r: &EvalReport) -> f64 {
    r.map_at(0.5).expect("0.5 is among the thresholds")
}

fn average_map(r: &EvalReport) -> f64 {
    r.average_map
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default()).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let combos = report.results.len();
    let min_instances = report.results.iter().map(|r| r.instances).min().unwrap_or(0);
    let ok = report.passed() && combos == 24 && min_instances >= 20 && elapsed < Duration::from_secs(120);
    outcome(
        ok,
        format!(
            "{combos} variants x {min_instances} instances, max relative error {:.2e} (< 1e-5), {:.1}s",
            report.max_error(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Every vector of length `len` over `alphabet`.
fn all_vectors(alphabet: &[f64], len: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|v| {
                alphabet.iter().map(move |&a| {
                    let mut w = v.clone();
                    w.push(a);
                    w
                })
            })
            .collect();
    }
    out
}

fn sort_kmax_mean(scores: &[f64], k: usize) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[..k].iter().sum::<f64>() / k as f64
}

fn naive_components(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let mut j = i;
            while j + 1 < mask.len() && mask[j + 1] {
                j += 1;
            }
            out.push((i, j));
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Candidate prediction intervals: exact and shifted copies of each ground
/// truth, plus one interval far from all of them.
fn ap_locations(num_gt: usize) -> Vec<(f64, f64)> {
    let mut locs = Vec::new();
    for j in 0..num_gt {
        let s = 10.0 * j as f64;
        locs.push((s, s + 2.0));
        locs.push((s + 1.0, s + 3.0));
    }
    locs.push((100.0, 102.0));
    locs
}

fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// Precision/recall curve by explicit enumeration of ranks; predictions are
/// given in descending score order.
fn brute_force_ap(preds: &[(f64, f64)], gts: &[(f64, f64)], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &p in preds {
        let best = (0..gts.len())
            .filter(|&g| !taken[g] && iou(p, gts[g]) >= thr)
            .max_by(|&a, &b| iou(p, gts[a]).partial_cmp(&iou(p, gts[b])).unwrap());
        if let Some(g) = best {
            taken[g] = true;
        }
        tp.push(best.is_some());
    }
    let precision: Vec<f64> = (0..tp.len())
        .map(|r| tp[..=r].iter().filter(|&&t| t).count() as f64 / (r + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for r in 0..tp.len() {
        if tp[r] {
            let interp = precision[r..].iter().copied().fold(0.0, f64::max);
            ap += interp / gts.len() as f64;
        }
    }
    Some(ap)
}

fn criterion_2() -> Outcome {
    let mut failures = Vec::new();

    let alphabet = [-1.5, 0.0, 0.25, 2.0, 3.75];
    let mut kmax_cases = 0;
    for len in 1..=6 {
        for v in all_vectors(&alphabet, len) {
            for k in 1..=len {
                kmax_cases += 1;
                let mean = sort_kmax_mean(&v, k);
                let prob = 1.0 / (1.0 + (-mean).exp());
                if kmax_mean(&v, k).unwrap() != mean
                    || (block_class_prob(&v, k).unwrap() - prob).abs() > 1e-15
                {
                    failures.push(format!("k-max {v:?} k={k}"));
                }
            }
        }
    }

    let probs = [0.0, 1e-7, 0.1, 0.37, 0.5, 0.9, 1.0 - 1e-7, 1.0];
    let mut nor_max = 0.0f64;
    for len in 1..=4 {
        for v in all_vectors(&probs, len) {
            let direct = 1.0 - v.iter().map(|p| 1.0 - p).product::<f64>();
            nor_max = nor_max.max((video_class_prob(&v) - direct).abs());
        }
    }
    if nor_max >= 1e-12 {
        failures.push(format!("noisy-OR max deviation {nor_max:e}"));
    }

    let mut masks = 0u64;
    for len in 0..=16usize {
        for bits in 0u32..(1 << len) {
            masks += 1;
            let mask: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
            if connected_components(&mask) != naive_components(&mask) {
                failures.push(format!("components {mask:?}"));
            }
        }
    }

    let mut ap_cases = 0u64;
    let mut ap_max = 0.0f64;
    for num_gt in 0..=3 {
        let locs = ap_locations(num_gt);
        let gt_iv: Vec<(f64, f64)> = (0..num_gt).map(|j| (10.0 * j as f64, 10.0 * j as f64 + 2.0)).collect();
        let gts: Vec<GroundTruthSegment> = gt_iv
            .iter()
            .map(|&(s, e)| GroundTruthSegment {
                video_id: "v".into(),
                class: "a".into(),
                start_s: s,
                end_s: e,
            })
            .collect();
        for num_pred in 0..=5 {
            for choice in all_vectors(&(0..locs.len()).map(|i| i as f64).collect::<Vec<_>>(), num_pred) {
                let ivs: Vec<(f64, f64)> = choice.iter().map(|&i| locs[i as usize]).collect();
                let preds: Vec<Detection> = ivs
                    .iter()
                    .enumerate()
                    .map(|(r, &(s, e))| Detection {
                        video_id: "v".into(),
                        class: "a".into(),
                        start_s: s,
                        end_s: e,
                        confidence: 1.0 - 0.125 * r as f64,
                    })
                    .collect();
                for thr in [0.3, 0.5] {
                    ap_cases += 1;
                    let got = match_and_ap(&preds, &gts, thr).unwrap();
                    let want = brute_force_ap(&ivs, &gt_iv, thr);
                    match (got, want) {
                        (Some(a), Some(b)) => ap_max = ap_max.max((a - b).abs()),
                        (None, None) => {}
                        _ => failures.push(format!("AP defined-ness {ivs:?} vs {gt_iv:?}")),
                    }
                }
            }
        }
    }
    if ap_max >= 1e-12 {
        failures.push(format!("AP max deviation {ap_max:e}"));
    }

    let mut rng = Rng::new(2);
    let mut quad_max = 0.0f64;
    for _ in 0..2000 {
        let d = 16;
        let draw = |rng: &mut Rng| (0..d).map(|_| rng.uniform_in(-2.0, 2.0)).collect::<Vec<f64>>();
        let (w, u, v) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let diff: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        // explicit M = wᵀw, then √(δᵀ M δ)
        let quad: f64 = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| diff[i] * w[i] * w[j] * diff[j])
            .sum();
        let proj = class_distance(&u, &v, &w).unwrap();
        quad_max = quad_max.max((proj - quad.max(0.0).sqrt()).abs() / proj.max(1e-300));

        let r = 3;
        let l = Matrix::from_vec(r, d, (0..r * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
        let m: Vec<f64> = (0..d * d)
            .map(|ij| (0..r).map(|k| l[(k, ij / d)] * l[(k, ij % d)]).sum())
            .collect();
        let quad_l: f64 = (0..d * d).map(|ij| diff[ij / d] * m[ij] * diff[ij % d]).sum();
        let fact = ClassMetric::Factored(&l).squared(&u, &v);
        quad_max = quad_max.max((fact - quad_l).abs() / fact.max(1e-300));
    }
    if quad_max >= 1e-9 {
        failures.push(format!("quadratic form max relative error {quad_max:e}"));
    }

    outcome(
        failures.is_empty(),
        format!(
            "{kmax_cases} k-max cases exact, noisy-OR |d|max {nor_max:.1e}, {masks} masks, \
             {ap_cases} AP cases |d|max {ap_max:.1e}, quadratic form rel {quad_max:.1e}{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; first failure: {}", failures[0])
            }
        ),
    )
}

fn criterion_3(runs: &mut Runs) -> Outcome {
    let (r, elapsed) = runs.get(Variant::Base, SEEDS[0]);
    let m = map_05(&r.report);
    outcome(
        m >= 0.8 && *elapsed < Duration::from_secs(300),
        format!("mAP@0.5 {m:.3} (>= 0.80) in {:.1}s (< 300s)", elapsed.as_secs_f64()),
    )
}

fn criterion_4(runs: &mut Runs) -> Outcome {
    let base = runs.mean(Variant::Base, average_map);
    let none = runs.mean(Variant::NoMetric, average_map);
    let euc = runs.mean(Variant::Euclidean, average_map);
    let cos = runs.mean(Variant::Cosine, average_map);
    let off = runs.mean(Variant::NoBlocks, average_map);
    let on_05 = runs.mean(Variant::Base, map_05);
    let off_05 = runs.mean(Variant::NoBlocks, map_05);
    let a = base > none;
    let b = base >= euc && base >= cos;
    let c = on_05 >= 0.8 && off_05 >= 0.8 && base >= off;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    outcome(
        a && b && c,
        format!(
            "avg mAP over seeds {SEEDS:?}: (a) triplet {base:.3} > none {none:.3} {}; \
             (b) ours {base:.3} vs euclidean {euc:.3}, cosine {cos:.3} {}; \
             (c) mAP@0.5 blocks {on_05:.3}, no blocks {off_05:.3}, avg {base:.3} >= {off:.3} {}",
            mark(a),
            mark(b),
            mark(c)
        ),
    )
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let again = run_synthetic(&Variant::Base.config(SEEDS[0])).expect("synthetic run");
    let (first, _) = runs.get(Variant::Base, SEEDS[0]);
    let same_ckpt = first.checkpoint.to_bytes() == again.checkpoint.to_bytes();
    let same_report = first.report == again.report && first.report.to_json() == again.report.to_json();
    outcome(
        same_ckpt && same_report,
        format!("checkpoint bytes identical: {same_ckpt}, reports identical: {same_report}"),
    )
}

fn criterion_6() -> Outcome {
    const N: usize = 10_000;
    let mut rng = Rng::new(6);
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok && !failures.iter().any(|f| f == name) {
            failures.push(name.to_string());
        }
    };
    for _ in 0..N {
        let d = 1 + rng.below(16);
        let mut draw = || (0..d).map(|_| rng.uniform_in(-3.0, 3.0)).collect::<Vec<f64>>();
        let (w, a, b, c) = (draw(), draw(), draw(), draw());
        let dab = class_distance(&a, &b, &w).unwrap();
        let dba = class_distance(&b, &a, &w).unwrap();
        let dac = class_distance(&a, &c, &w).unwrap();
        let dcb = class_distance(&c, &b, &w).unwrap();
        check("symmetry", dab == dba);
        check("zero self-distance", class_distance(&a, &a, &w).unwrap() == 0.0);
        check("triangle inequality", dab <= dac + dcb + 1e-12 * (1.0 + dac + dcb));

        let shift = rng.uniform_in(-50.0, 50.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let p = stable_softmax(&a).unwrap();
        let q = stable_softmax(&shifted).unwrap();
        check("softmax shift invariance", p.iter().zip(&q).all(|(x, y)| (x - y).abs() <= 1e-12));

        let m = 1 + rng.below(6);
        let probs: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let base = video_class_prob(&probs);
        let mut raised = probs.clone();
        let i = rng.below(m);
        raised[i] += (1.0 - raised[i]) * rng.uniform();
        check("noisy-OR monotonicity", video_class_prob(&raised) >= base);
        check(
            "noisy-OR dominance",
            base >= probs.iter().copied().fold(0.0, f64::max) - 1e-15,
        );
    }

    // AP depends on the score order only
    let mut ap_rng = Rng::new(7);
    for _ in 0..N {
        let num_gt = 1 + ap_rng.below(3);
        let gts: Vec<GroundTruthSegment> = (0..num_gt)
            .map(|j| GroundTruthSegment {
                video_id: "v".into(),
                class: "a".into(),
                start_s: 10.0 * j as f64,
                end_s: 10.0 * j as f64 + 3.0,
            })
            .collect();
        let preds: Vec<Detection> = (0..1 + ap_rng.below(6))
            .map(|_| {
                let s = ap_rng.uniform_in(-1.0, 30.0);
                Detection {
                    video_id: "v".into(),
                    class: "a".into(),
                    start_s: s,
                    end_s: s + ap_rng.uniform_in(0.5, 4.0),
                    confidence: ap_rng.uniform_in(-2.0, 2.0),
                }
            })
            .collect();
        let transformed: Vec<Detection> = preds
            .iter()
            .map(|p| Detection {
                confidence: 3.0 * p.confidence.tanh() + 7.0,
                ..p.clone()
            })
            .collect();
        let a = match_and_ap(&preds, &gts, 0.5).unwrap();
        let b = match_and_ap(&transformed, &gts, 0.5).unwrap();
        check("AP rank invariance", a == b);
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{N} samples per property")
        } else {
            format!("violated: {}", failures.join(", "))
        },
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut runs = Runs::default();
    let mut all_passed = true;
    let mut report = |n: u32, title: &str, o: Outcome| {
        all_passed &= o.passed;
        println!(
            "criterion {n} [{}] {title}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    if run(1) {
        report(1, "gradient certification", criterion_1());
    }
    if run(2) {
        report(2, "oracle equivalences", criterion_2());
    }
    if run(3) {
        report(3, "synthetic end-to-end", criterion_3(&mut runs));
    }
    if run(4) {
        report(4, "ablation directions", criterion_4(&mut runs));
    }
    if run(5) {
        report(5, "determinism", criterion_5(&mut runs));
    }
    if run(6) {
        report(6, "metric-space properties", criterion_6());
    }
    if !all_passed {
        std::process::exit(1);
    }
}
