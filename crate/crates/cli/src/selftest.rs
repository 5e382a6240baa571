//! Runtime invariant checks: FROC oracle agreement, the module invariants
//! and preprocessing fidelity. Each check is independent and reports a
//! single pass/fail with a short detail string.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sfuda_core::adapt::{ema_update, make_pseudo_labels};
use sfuda_core::data::{crop_patches, hu_clip_rescale, split_sizes, Volume, PAD_VALUE};
use sfuda_core::detector::{DetectorConfig, DetectorParams};
use sfuda_core::froc::{evaluate, froc_brute_force, ScanEval};
use sfuda_core::geom::{center_hit, iou3d, nms_indices, Annotation, Box3, Detection};
use sfuda_core::gradcheck::spread_params;
use sfuda_core::losses::{contrastive_loss, we_loss, we_modulating_factor, ContrastiveConfig, InstanceFeatures, WeConfig};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

// ---------------------------------------------------------------------------
// FROC

fn grid_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(0..12) as f64)
}

/// Up to 5 scans with up to 8 detections each, on an integer grid with
/// scores from a short list, so boundary hits and tied scores both occur.
pub fn random_froc_instance(rng: &mut ChaCha8Rng) -> Vec<ScanEval> {
    let mut scans: Vec<ScanEval> = (0..rng.random_range(1..=5))
        .map(|_| {
            let annotations = (0..rng.random_range(0..=3))
                .map(|_| {
                    let c = grid_point(rng);
                    Annotation::new(c, rng.random_range(1..=4) as f64).expect("positive radius")
                })
                .collect();
            let detections = (0..rng.random_range(0..=8))
                .map(|_| {
                    let c = grid_point(rng);
                    let b = Box3::cube(c, 4.0).expect("positive side");
                    Detection::new(b, rng.random_range(1..=6) as f64 / 8.0).expect("score in range")
                })
                .collect();
            ScanEval { detections, annotations }
        })
        .collect();
    if scans.iter().all(|s| s.annotations.is_empty()) {
        scans[0].annotations.push(Annotation::new([5.0; 3], 3.0).expect("positive radius"));
    }
    scans
}

/// The fast evaluator against the brute-force oracle on `n` random instances.
pub fn froc_oracle(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mismatches = (0..n)
        .filter(|_| {
            let scans = random_froc_instance(&mut rng);
            match (evaluate(&scans), froc_brute_force(&scans)) {
                (Ok((fast, _)), Ok(slow)) => fast != slow,
                _ => true,
            }
        })
        .count();
    check("froc_oracle_equivalence", mismatches == 0, format!("{mismatches}/{n} instances differ"))
}

/// One scan, annotation at (10,10,10) with R = 5, one hit at 0.9 and one
/// far miss at 0.8: every operating point reaches sensitivity 1.
pub fn froc_worked_example() -> Check {
    let det = |c: [f64; 3], s: f64| Detection::new(Box3::cube(c, 4.0).expect("side"), s).expect("score");
    let scans = [ScanEval {
        detections: vec![det([11.0, 10.0, 10.0], 0.9), det([30.0; 3], 0.8)],
        annotations: vec![Annotation::new([10.0; 3], 5.0).expect("radius")],
    }];
    match evaluate(&scans) {
        Ok((r, _)) => check("froc_worked_example", r.average == 1.0, format!("average {}", r.average)),
        Err(e) => check("froc_worked_example", false, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Module invariants

pub fn ema_invariants(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..500 {
        let n = rng.random_range(1..20);
        let t0: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let beta = if rng.random_bool(0.1) { [0.0, 1.0][rng.random_range(0..2)] } else { rng.random_range(0.0..=1.0) };
        let mut t = t0.clone();
        if ema_update(&mut t, &s, beta).is_err() {
            return check("ema_convexity_fixed_point", false, "update rejected valid input");
        }
        let inside = (0..n).all(|i| t[i] >= t0[i].min(s[i]) && t[i] <= t0[i].max(s[i]));
        let mut fixed = s.clone();
        let stays = ema_update(&mut fixed, &s, beta).is_ok() && fixed == s;
        let mut same = t0.clone();
        let beta_one = ema_update(&mut same, &s, 1.0).is_ok() && same == t0;
        if !(inside && stays && beta_one) {
            return check("ema_convexity_fixed_point", false, format!("violated at beta {beta}"));
        }
    }
    let mut t = vec![1.0, 2.0];
    let ok = ema_update(&mut t, &[0.0, 0.0], 0.9).is_ok() && (t[0] - 0.9).abs() < 1e-15 && (t[1] - 1.8).abs() < 1e-15;
    check("ema_convexity_fixed_point", ok, "500 random updates and the (1,2),(0,0),0.9 example")
}

pub fn pseudo_label_antitone(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = DetectorConfig::default();
    for trial in 0..10 {
        let params: DetectorParams = spread_params(seed + trial);
        let vol = match Volume::new([16; 3], (0..4096).map(|_| rng.random()).collect()) {
            Ok(v) => v,
            Err(e) => return check("pseudo_label_antitone", false, e.to_string()),
        };
        let mut deltas: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        deltas.sort_by(f64::total_cmp);
        let sets = match deltas
            .iter()
            .map(|&d| make_pseudo_labels(&params, &vol, d, &det))
            .collect::<Result<Vec<_>, _>>()
        {
            Ok(s) => s,
            Err(e) => return check("pseudo_label_antitone", false, e.to_string()),
        };
        for k in 1..sets.len() {
            let subset = sets[k].iter().all(|p| sets[k - 1].contains(p));
            let above = sets[k].iter().all(|p| p.score >= deltas[k]);
            if !(subset && above) {
                return check("pseudo_label_antitone", false, format!("violated at delta {}", deltas[k]));
            }
        }
    }
    check("pseudo_label_antitone", true, "10 random models, 6 thresholds each")
}

pub fn we_invariants() -> Check {
    let cfg = WeConfig::default();
    let dead: Vec<f64> = (0..=1000).map(|i| cfg.tau1 + (cfg.tau2 - cfg.tau1) * i as f64 / 1000.0).collect();
    let out = we_loss(&dead, &cfg);
    let zero = out.value == 0.0 && out.grad.iter().all(|g| *g == 0.0);
    let low: Vec<f64> = (0..1000).map(|i| cfg.tau1 * i as f64 / 1000.0).map(|p| we_modulating_factor(p, &cfg)).collect();
    let high: Vec<f64> = (1..=1000)
        .map(|i| cfg.tau2 + (1.0 - cfg.tau2) * i as f64 / 1000.0)
        .map(|p| we_modulating_factor(p, &cfg))
        .collect();
    let up = low.windows(2).all(|w| w[0] <= w[1]);
    let down = high.windows(2).all(|w| w[0] >= w[1]);
    check(
        "we_dead_zone_and_factor_monotonicity",
        zero && up && down,
        format!("dead zone zero {zero}, low branch non-decreasing {up}, high branch non-increasing {down}"),
    )
}

pub fn contrastive_invariance(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ContrastiveConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let dim = rng.random_range(2..8);
        let (m, k) = (rng.random_range(1..5), rng.random_range(1..6));
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.05..1.0)).collect()).collect()
        };
        let (fg, bg) = (vecs(m), vecs(k));
        let c: f64 = rng.random_range(0.1..10.0);
        let scaled = |v: &[Vec<f64>]| v.iter().map(|f| f.iter().map(|x| x * c).collect()).collect::<Vec<Vec<f64>>>();
        let mut fg_p = fg.clone();
        fg_p.rotate_left(1);
        let mut bg_p = bg.clone();
        bg_p.reverse();
        let loss = |f: Vec<Vec<f64>>, b: Vec<Vec<f64>>| {
            InstanceFeatures::new(f, b).and_then(|x| contrastive_loss(&x, &cfg)).map(|o| o.value)
        };
        let (Ok(a), Ok(s), Ok(p)) = (loss(fg.clone(), bg.clone()), loss(scaled(&fg), scaled(&bg)), loss(fg_p, bg_p)) else {
            return check("contrastive_scale_permutation_invariance", false, "loss evaluation failed");
        };
        let rel = |x: f64| (x - a).abs() / a.abs().max(1.0);
        worst = worst.max(rel(s)).max(rel(p));
    }
    check(
        "contrastive_scale_permutation_invariance",
        worst <= 1e-9,
        format!("max relative change {worst:.2e} over 200 instances"),
    )
}

/// Greedy NMS restated as repeated selection of the best remaining box.
fn nms_brute_force(boxes: &[Box3], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou3d(&boxes[i], &boxes[best]) < thr);
    }
    keep
}

pub fn nms_agreement(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..300 {
        let n = rng.random_range(0..15);
        let boxes: Vec<Box3> = (0..n)
            .map(|_| Box3::cube(grid_point(&mut rng), rng.random_range(2..8) as f64).expect("side"))
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(1..5) as f64 / 5.0).collect();
        let thr = rng.random_range(0.05..0.9);
        if nms_indices(&boxes, &scores, thr) != nms_brute_force(&boxes, &scores, thr) {
            return check("nms_brute_force_agreement", false, format!("mismatch with {n} boxes at IoU {thr}"));
        }
    }
    check("nms_brute_force_agreement", true, "300 random instances")
}

pub fn hit_translation_invariance(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let det = Detection::new(Box3::cube(grid_point(&mut rng), 4.0).expect("side"), 0.5).expect("score");
        let ann = Annotation::new(grid_point(&mut rng), rng.random_range(1..=6) as f64).expect("radius");
        let shift = [0; 3].map(|_| rng.random_range(-50..50) as f64);
        let moved_det = Detection::new(det.bbox.translated(shift), det.score).expect("score");
        let c = ann.center;
        let moved_ann = Annotation::new([c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]], ann.radius).expect("radius");
        if center_hit(&det, &ann) != center_hit(&moved_det, &moved_ann) {
            return check("hit_translation_invariance", false, format!("changed under shift {shift:?}"));
        }
    }
    check("hit_translation_invariance", true, "1000 integer translations")
}

// ---------------------------------------------------------------------------
// Preprocessing

pub fn hu_endpoints() -> Check {
    let ok = Volume::new([1, 1, 2], vec![-1200.0, 600.0])
        .map(|v| hu_clip_rescale(&v).data().to_vec() == [0, 255])
        .unwrap_or(false);
    check("hu_endpoints_and_pad_value", ok && PAD_VALUE == 170, format!("-1200 -> 0, 600 -> 255, pad {PAD_VALUE}"))
}

/// The 128 patch path: every voxel of random volumes lands in some patch at
/// its mapped position, and padding uses the pad value.
pub fn patch_coverage(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..6 {
        let d = [0; 3].map(|_| rng.random_range(20..200));
        let n = d[0] * d[1] * d[2];
        let Ok(vol) = Volume::new(d, (0..n).map(|i| (i % 169) as u8).collect()) else {
            return check("patch_128_coverage", false, "volume construction failed");
        };
        let Ok(patches) = crop_patches(&vol, 128, 16) else {
            return check("patch_128_coverage", false, "crop failed");
        };
        let mut covered = vec![false; n];
        for p in &patches {
            if p.voxels.dims() != [128; 3] {
                return check("patch_128_coverage", false, "patch is not 128^3");
            }
            for z in 0..128 {
                for y in 0..128 {
                    for x in 0..128 {
                        let s = [z + p.offset[0], y + p.offset[1], x + p.offset[2]];
                        let v = p.voxels.get(z, y, x);
                        if s[0] < d[0] && s[1] < d[1] && s[2] < d[2] {
                            if v != vol.get(s[0], s[1], s[2]) {
                                return check("patch_128_coverage", false, "voxel mapped to wrong position");
                            }
                            covered[vol.index(s[0], s[1], s[2])] = true;
                        } else if v != PAD_VALUE {
                            return check("patch_128_coverage", false, "padding is not the pad value");
                        }
                    }
                }
            }
        }
        if !covered.iter().all(|&c| c) {
            return check("patch_128_coverage", false, format!("uncovered voxels in {d:?}"));
        }
    }
    check("patch_128_coverage", true, "6 random volumes up to 200 voxels per axis")
}

pub fn split_ratio() -> Check {
    let exact = split_sizes(10) == (7, 1, 2) && split_sizes(100) == (70, 10, 20);
    let close = (1..=500).all(|n| {
        let (a, b, c) = split_sizes(n);
        let near = |k: usize, r: f64| (k as f64 - r * n as f64).abs() <= 1.0;
        a + b + c == n && near(a, 0.7) && near(b, 0.1) && near(c, 0.2)
    });
    check("split_7_1_2", exact && close, "exact at 10 and 100, within one scan for n <= 500")
}

/// Checks grouped the way the acceptance criteria group them.
pub fn froc_checks(seed: u64) -> Vec<Check> {
    vec![froc_oracle(50, seed), froc_worked_example()]
}

pub fn invariant_checks(seed: u64) -> Vec<Check> {
    vec![
        ema_invariants(seed),
        pseudo_label_antitone(seed),
        we_invariants(),
        contrastive_invariance(seed),
        nms_agreement(seed),
        hit_translation_invariance(seed),
    ]
}

pub fn preprocessing_checks(seed: u64) -> Vec<Check> {
    vec![hu_endpoints(), patch_coverage(seed), split_ratio()]
}

pub fn run(seed: u64) -> SelftestReport {
    let checks: Vec<Check> = [froc_checks(seed), invariant_checks(seed), preprocessing_checks(seed)].concat();
    let passed = checks.iter().all(|c| c.passed);
    SelftestReport { checks, passed }
}
