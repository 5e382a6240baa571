//! Central finite-difference checks for the loss kernels and the detector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Volume;
use crate::detector::{
    self, assign_by_iou, forward, select_rpn_instances, AssignConfig, DetectorConfig,
    DetectorParams, LossSpec, PatchPlan,
};
use crate::geom::{Box3, Offsets};
use crate::losses::{
    bce_loss, contrastive_loss, contrastive_neg_loss, contrastive_pos_loss, cosine_sim,
    smooth_l1, student_total_loss, sup_detection_loss, we_loss, ContrastiveConfig,
    DetectionGrads, InstanceFeatures, InstancePrediction, LossOutput, Target, WeConfig,
};
use crate::Result;

/// Denominator floor for relative errors, so gradients that are zero up to
/// rounding compare in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// One Richardson step on central differences at `h` and `h/2`; the
/// truncation error drops from O(h^2) to O(h^4).
pub fn richardson_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let coarse = central_difference(&f, x, h);
    let fine = central_difference(&f, x, h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Relative error with the floor scaled by the loss value. A difference
/// quotient of a loss `f` carries rounding noise of order eps |f| / h, so
/// components below `REL_ERROR_FLOOR * |f|` are compared in absolute terms.
pub fn scaled_rel_error(analytic: f64, numeric: f64, value: f64) -> f64 {
    let floor = REL_ERROR_FLOOR * value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            instances: 0,
            coordinates: 0,
            max_rel_error: 0.0,
            tolerance,
            passed: true,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, value: f64) {
        let e = scaled_rel_error(analytic, numeric, value);
        self.coordinates += 1;
        if e > self.max_rel_error || e.is_nan() {
            self.max_rel_error = e;
        }
        // NaN errors fail too
        if e.is_nan() || e > self.tolerance {
            self.passed = false;
        }
    }
}

const KERNEL_H: f64 = 1e-5;
const KERNEL_TOL: f64 = 1e-4;
/// Minimum distance from any non-smooth locus for a sampled point.
const KINK_MARGIN: f64 = 1e-4;

fn random_features(rng: &mut ChaCha8Rng, cfg: &ContrastiveConfig) -> InstanceFeatures {
    loop {
        let d = rng.random_range(2..8);
        let m = rng.random_range(0..6);
        let k = rng.random_range(0..6);
        let mut v = || -> Vec<f64> { (0..d).map(|_| rng.random_range(-0.3..1.0)).collect() };
        let fg: Vec<Vec<f64>> = (0..m).map(|_| v()).collect();
        let bg: Vec<Vec<f64>> = (0..k).map(|_| v()).collect();
        let Ok(feat) = InstanceFeatures::new(fg, bg) else { continue };
        if smooth_contrastive_point(&feat, cfg) {
            return feat;
        }
    }
}

/// Rejects points near a similarity clamp or a rank tie.
fn smooth_contrastive_point(feat: &InstanceFeatures, cfg: &ContrastiveConfig) -> bool {
    let eps = cfg.sim_clamp_eps;
    let near_clamp =
        |s: f64| [eps, 1.0 - eps, -1.0 + eps].iter().any(|b| (s - b).abs() < KINK_MARGIN);
    for set in [feat.foreground(), feat.background()] {
        let mut sims = Vec::new();
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                sims.push(cosine_sim(&set[i], &set[j]).unwrap_or(0.0));
            }
        }
        if sims.iter().any(|&s| near_clamp(s)) {
            return false;
        }
        sims.sort_by(f64::total_cmp);
        if sims.windows(2).any(|w| w[1] - w[0] < 1e-3) {
            return false;
        }
    }
    feat.foreground().iter().all(|f| {
        feat.background()
            .iter()
            .all(|g| !near_clamp(cosine_sim(f, g).unwrap_or(0.0)))
    })
}

fn check_features(
    report: &mut CheckReport,
    feat: &InstanceFeatures,
    loss: &dyn Fn(&InstanceFeatures) -> LossOutput<crate::losses::FeatureGrads>,
) {
    let analytic = loss(feat);
    for set in 0..2 {
        let n = if set == 0 { feat.foreground().len() } else { feat.background().len() };
        for i in 0..n {
            let v = if set == 0 { &feat.foreground()[i] } else { &feat.background()[i] };
            for d in 0..v.len() {
                let numeric = richardson_difference(
                    |x| {
                        let mut fg = feat.foreground().to_vec();
                        let mut bg = feat.background().to_vec();
                        if set == 0 {
                            fg[i][d] = x
                        } else {
                            bg[i][d] = x
                        }
                        InstanceFeatures::new(fg, bg).map(|f| loss(&f).value).unwrap_or(f64::NAN)
                    },
                    v[d],
                    KERNEL_H,
                );
                let g = if set == 0 { &analytic.grad.foreground } else { &analytic.grad.background };
                report.record(g[i][d], numeric, analytic.value);
            }
        }
    }
    report.instances += 1;
}

fn random_prob(rng: &mut ChaCha8Rng, avoid: &[f64]) -> f64 {
    loop {
        let p: f64 = rng.random_range(1e-3..(1.0 - 1e-3));
        if avoid.iter().all(|a| (p - a).abs() > KINK_MARGIN) {
            return p;
        }
    }
}

fn random_offsets_pair(rng: &mut ChaCha8Rng) -> (Offsets, Offsets) {
    loop {
        let pred: Offsets = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let target: Offsets = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        if (0..6).all(|i| ((pred[i] - target[i]).abs() - 1.0).abs() > KINK_MARGIN) {
            return (pred, target);
        }
    }
}

fn random_instances(
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (Vec<InstancePrediction>, Vec<Target>) {
    let mut preds = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let (offsets, t) = random_offsets_pair(rng);
        preds.push(InstancePrediction { prob: random_prob(rng, &[0.25, 0.75]), offsets });
        targets.push(match rng.random_range(0..3) {
            0 => Target::Positive(t),
            1 => Target::Negative,
            _ => Target::Ignore,
        });
    }
    (preds, targets)
}

/// Flattens detection predictions into one coordinate vector: per instance,
/// probability followed by the six offsets.
fn flatten(rpn: &[InstancePrediction], roi: &[InstancePrediction]) -> Vec<f64> {
    rpn.iter()
        .chain(roi)
        .flat_map(|p| std::iter::once(p.prob).chain(p.offsets))
        .collect()
}

fn unflatten(x: &[f64], n_rpn: usize) -> (Vec<InstancePrediction>, Vec<InstancePrediction>) {
    let all: Vec<InstancePrediction> = x
        .chunks(7)
        .map(|c| InstancePrediction { prob: c[0], offsets: std::array::from_fn(|i| c[i + 1]) })
        .collect();
    let (a, b) = all.split_at(n_rpn);
    (a.to_vec(), b.to_vec())
}

fn flatten_grads(g: &DetectionGrads) -> Vec<f64> {
    g.rpn
        .iter()
        .chain(&g.roi)
        .flat_map(|p| std::iter::once(p.prob).chain(p.offsets))
        .collect()
}

/// Finite-difference checks of every loss kernel on `instances` random
/// points each.
pub fn check_kernels(instances: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ccfg = ContrastiveConfig::default();
    let wcfg = WeConfig::default();
    let mut reports = Vec::new();

    let mut neg = CheckReport::new("contrastive_neg", KERNEL_TOL);
    let mut pos = CheckReport::new("contrastive_pos", KERNEL_TOL);
    let mut total = CheckReport::new("contrastive_total", KERNEL_TOL);
    for _ in 0..instances {
        let feat = random_features(&mut rng, &ccfg);
        check_features(&mut neg, &feat, &|f| contrastive_neg_loss(f, &ccfg));
        check_features(&mut pos, &feat, &|f| contrastive_pos_loss(f, &ccfg));
        check_features(&mut total, &feat, &|f| {
            contrastive_loss(f, &ccfg).expect("validated config")
        });
    }
    reports.extend([neg, pos, total]);

    let mut bce = CheckReport::new("bce", KERNEL_TOL);
    let mut sl1 = CheckReport::new("smooth_l1", KERNEL_TOL);
    let mut we = CheckReport::new("weighted_entropy", KERNEL_TOL);
    for _ in 0..instances {
        let p = random_prob(&mut rng, &[]);
        for t in [true, false] {
            let n = richardson_difference(|x| bce_loss(x, t).value, p, KERNEL_H);
            let out = bce_loss(p, t);
            bce.record(out.grad, n, out.value);
        }
        bce.instances += 1;

        let (pred, target) = random_offsets_pair(&mut rng);
        let out = smooth_l1(&pred, &target);
        for i in 0..6 {
            let n = richardson_difference(
                |x| {
                    let mut q = pred;
                    q[i] = x;
                    smooth_l1(&q, &target).value
                },
                pred[i],
                KERNEL_H,
            );
            sl1.record(out.grad[i], n, out.value);
        }
        sl1.instances += 1;

        let probs: Vec<f64> = (0..rng.random_range(1..8))
            .map(|_| random_prob(&mut rng, &[wcfg.tau1, wcfg.tau2]))
            .collect();
        let out = we_loss(&probs, &wcfg);
        for i in 0..probs.len() {
            let n = richardson_difference(
                |x| {
                    let mut q = probs.clone();
                    q[i] = x;
                    we_loss(&q, &wcfg).value
                },
                probs[i],
                KERNEL_H,
            );
            we.record(out.grad[i], n, out.value);
        }
        we.instances += 1;
    }
    reports.extend([bce, sl1, we]);

    let mut sup = CheckReport::new("sup_detection", KERNEL_TOL);
    let mut student = CheckReport::new("student_total", KERNEL_TOL);
    for _ in 0..instances {
        let n_rpn = rng.random_range(1..6);
        let n_roi = rng.random_range(1..5);
        let (rpn, rpn_t) = random_instances(&mut rng, n_rpn);
        let (roi, roi_t) = random_instances(&mut rng, n_roi);
        let eta: f64 = rng.random_range(0.0..4.0);
        let x0 = flatten(&rpn, &roi);

        let sup_value = |x: &[f64]| {
            let (a, b) = unflatten(x, n_rpn);
            sup_detection_loss(&a, &rpn_t, &b, &roi_t).map(|o| o.value).unwrap_or(f64::NAN)
        };
        let total_value = |x: &[f64]| {
            let (a, b) = unflatten(x, n_rpn);
            let s = sup_detection_loss(&a, &rpn_t, &b, &roi_t).expect("shapes match");
            let probs: Vec<f64> = b.iter().map(|p| p.prob).collect();
            let w = we_loss(&probs, &wcfg);
            let u = LossOutput {
                value: w.value,
                grad: DetectionGrads::from_roi_probs(n_rpn, &w.grad),
                active: true,
            };
            student_total_loss(&s, &u, eta).expect("eta >= 0")
        };

        let s = sup_detection_loss(&rpn, &rpn_t, &roi, &roi_t).expect("shapes match");
        let t = total_value(&x0);
        let g_sup = flatten_grads(&s.grad);
        let g_tot = flatten_grads(&t.grad);
        for i in 0..x0.len() {
            let at = |x: f64| {
                let mut v = x0.clone();
                v[i] = x;
                v
            };
            let n = richardson_difference(|x| sup_value(&at(x)), x0[i], KERNEL_H);
            sup.record(g_sup[i], n, s.value);
            let n = richardson_difference(|x| total_value(&at(x)).value, x0[i], KERNEL_H);
            student.record(g_tot[i], n, t.value);
        }
        sup.instances += 1;
        student.instances += 1;
    }
    reports.extend([sup, student]);
    reports
}

/// Small enough that a perturbation rarely moves any ReLU, smooth-L1 or
/// clamp branch point across its kink; the loss is O(1), so rounding noise
/// stays near 1e-10.
pub const DETECTOR_H: f64 = 1e-6;
pub const DETECTOR_TOL: f64 = 1e-3;

/// Compares [`detector::plan_loss`] gradients with central differences on
/// `per_layer` randomly chosen coordinates of every parameter tensor.
pub fn check_detector(
    params: &DetectorParams,
    patches: &[Volume<u8>],
    plans: &[PatchPlan],
    spec: &LossSpec,
    per_layer: usize,
    seed: u64,
) -> Result<CheckReport> {
    let name = format!("detector_{}", spec.name());
    let mut report = CheckReport::new(&name, DETECTOR_TOL);
    let eval = |p: &DetectorParams| -> Result<(f64, Vec<f64>)> {
        detector::plan_loss_batch(p, patches, plans, spec)
    };
    let (value, grad) = eval(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in params.layout().segments() {
        for _ in 0..per_layer.min(seg.len) {
            let idx = seg.offset + rng.random_range(0..seg.len);
            let mut plus = params.clone();
            plus.values_mut()[idx] += DETECTOR_H;
            let mut minus = params.clone();
            minus.values_mut()[idx] -= DETECTOR_H;
            let numeric = (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * DETECTOR_H);
            report.record(grad[idx], numeric, value);
        }
    }
    report.instances = patches.len();
    Ok(report)
}

/// Random boxes inside a patch of side `side`, used to build fixed plans.
pub fn random_box(rng: &mut ChaCha8Rng, side: f64) -> Box3 {
    let s: f64 = rng.random_range(3.0..side / 2.0);
    let c = std::array::from_fn(|_| rng.random_range(s / 2.0..side - s / 2.0));
    Box3::cube(c, s).expect("positive side")
}

/// Initial parameters with the head weights and all biases redrawn from
/// U(-0.3, 0.3), so every path carries gradient and no ReLU sits exactly at
/// its kink.
pub fn spread_params(seed: u64) -> DetectorParams {
    let mut p = DetectorParams::init(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let names = [
        "rpn.weight",
        "rpn.bias",
        "roi.fc1.bias",
        "roi.fc2.weight",
        "roi.fc2.bias",
        "backbone.conv1.bias",
        "backbone.conv2.bias",
    ];
    for name in names {
        let r = p.layout().range(name);
        for v in &mut p.values_mut()[r] {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    p
}

/// One random 16^3 patch with a plan exercising every loss term: sampled
/// RPN anchors, RoI boxes around one ground-truth box, and contrastive
/// instances.
pub fn detector_check_case(seed: u64) -> Result<(DetectorParams, Vec<Volume<u8>>, Vec<PatchPlan>)> {
    let params = spread_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut vrng = ChaCha8Rng::seed_from_u64(seed + 200);
    let vol = Volume::new([16; 3], (0..16 * 16 * 16).map(|_| vrng.random()).collect())?;
    let st = forward(&params, &vol)?;
    let gt = vec![random_box(&mut rng, 16.0)];
    let targets = assign_by_iou(&gt, &st.anchors().boxes(), &AssignConfig::default());
    let rpn = select_rpn_instances(&targets, &st.rpn.probs, &DetectorConfig::default(), &mut rng);
    let roi_boxes: Vec<Box3> = (0..4).map(|_| random_box(&mut rng, 16.0)).chain(gt.iter().copied()).collect();
    let roi_t = assign_by_iou(&gt, &roi_boxes, &AssignConfig::default());
    let plan = PatchPlan {
        rpn,
        roi: roi_boxes.into_iter().zip(roi_t).collect(),
        contrastive_fg: (0..3).map(|_| random_box(&mut rng, 16.0)).collect(),
        contrastive_bg: (0..3).map(|_| random_box(&mut rng, 16.0)).collect(),
    };
    Ok((params, vec![vol], vec![plan]))
}

/// Full-model checks for the three training objectives on
/// [`detector_check_case`]. The weighted-entropy dead zone is narrowed so
/// the term is active on most RoIs.
pub fn check_detector_suite(seed: u64, per_layer: usize) -> Result<Vec<CheckReport>> {
    let (params, vols, plans) = detector_check_case(seed)?;
    let specs = [
        LossSpec::Supervised,
        LossSpec::StudentTotal {
            eta: 0.7,
            we: WeConfig { tau1: 0.45, tau2: 0.55, ..WeConfig::default() },
        },
        LossSpec::Contrastive(ContrastiveConfig::default()),
    ];
    specs
        .iter()
        .map(|spec| check_detector(&params, &vols, &plans, spec, per_layer, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn richardson_beats_plain_central_difference() {
        // d/dx sin at 1 is cos 1; stiff enough that h = 1e-2 shows the gap
        let exact = 1f64.cos();
        let plain = (central_difference(f64::sin, 1.0, 1e-2) - exact).abs();
        let rich = (richardson_difference(f64::sin, 1.0, 1e-2) - exact).abs();
        assert!(plain > 1e-6 && rich < 1e-9, "plain {plain:e} richardson {rich:e}");
    }

    #[test]
    fn error_floor_scales_with_loss_value() {
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        // a 1e-10 miss on a 1e-8 component: relative for an O(1) loss,
        // absolute once the loss is large enough to drown it in rounding
        assert!((scaled_rel_error(1e-8, 1e-8 + 1e-10, 1.0) - 1e-4).abs() < 1e-12);
        assert!((scaled_rel_error(1e-8, 1e-8 + 1e-10, 100.0) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn kernel_suite_passes_across_seeds() {
        for seed in 0..5 {
            for r in check_kernels(20, seed) {
                assert!(r.passed, "seed {seed}: {} max rel {:e}", r.name, r.max_rel_error);
            }
        }
    }
}
