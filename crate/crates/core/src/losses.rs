//! Loss kernels with exact gradients.
//!
//! Every kernel returns a [`LossOutput`] carrying the scalar value and the
//! gradient with respect to its differentiable inputs. Logarithms are natural
//! and every log argument is clamped away from its singularity first.

use serde::{Deserialize, Serialize};

use crate::geom::Offsets;
use crate::{Error, Result};

/// Clamp applied to probabilities before `ln`.
pub const PROB_EPS: f64 = 1e-6;
/// Smallest feature norm accepted by [`InstanceFeatures`].
pub const MIN_FEATURE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<G> {
    pub value: f64,
    pub grad: G,
    /// False when the term had too few instances to be evaluated; value and
    /// gradient are then zero.
    pub active: bool,
}

/// Gradient containers that can be combined linearly.
pub trait Gradient: Clone {
    /// `a * self + b * other`; errors when the shapes differ.
    fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self>;
}

impl Gradient for f64 {
    fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Ok(a * self + b * other)
    }
}

impl Gradient for Vec<f64> {
    fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self.iter().zip(other).map(|(x, y)| a * x + b * y).collect())
    }
}

impl Gradient for Vec<Vec<f64>> {
    fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient counts {} and {}",
                self.len(),
                other.len()
            )));
        }
        self.iter().zip(other).map(|(x, y)| x.combine(a, y, b)).collect()
    }
}

// ---------------------------------------------------------------------------
// Contrastive terms

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeatures {
    foreground: Vec<Vec<f64>>,
    background: Vec<Vec<f64>>,
}

impl InstanceFeatures {
    pub fn new(foreground: Vec<Vec<f64>>, background: Vec<Vec<f64>>) -> Result<Self> {
        let mut dim = None;
        for v in foreground.iter().chain(&background) {
            if v.is_empty() {
                return Err(Error::invalid("feature vectors need dimension >= 1"));
            }
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::invalid(format!(
                        "feature dimension mismatch: {d} vs {}",
                        v.len()
                    )))
                }
                _ => {}
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("feature vectors must be finite"));
            }
            if norm(v) < MIN_FEATURE_NORM {
                return Err(Error::invalid("feature vector norm below 1e-12"));
            }
        }
        Ok(Self {
            foreground,
            background,
        })
    }

    pub fn foreground(&self) -> &[Vec<f64>] {
        &self.foreground
    }

    pub fn background(&self) -> &[Vec<f64>] {
        &self.background
    }

    pub fn zero_grads(&self) -> FeatureGrads {
        FeatureGrads {
            foreground: self.foreground.iter().map(|v| vec![0.0; v.len()]).collect(),
            background: self.background.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrads {
    pub foreground: Vec<Vec<f64>>,
    pub background: Vec<Vec<f64>>,
}

impl Gradient for FeatureGrads {
    fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Ok(FeatureGrads {
            foreground: self.foreground.combine(a, &other.foreground, b)?,
            background: self.background.combine(a, &other.background, b)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Rank-weight smoothing `w = exp(-omega * rank)`.
    pub omega: f64,
    /// Similarities are clamped this far from the log singularities.
    pub sim_clamp_eps: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            omega: 0.25,
            sim_clamp_eps: 1e-6,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::invalid(format!("omega must be finite and >= 0, got {}", self.omega)));
        }
        if !(self.sim_clamp_eps > 0.0 && self.sim_clamp_eps <= 0.1) {
            return Err(Error::invalid(format!(
                "sim_clamp_eps must lie in (0, 0.1], got {}",
                self.sim_clamp_eps
            )));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_sim(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::invalid(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            f.len(),
            g.len()
        )));
    }
    let (nf, ng) = (norm(f), norm(g));
    if nf < MIN_FEATURE_NORM || ng < MIN_FEATURE_NORM {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(f, g) / (nf * ng)).clamp(-1.0, 1.0))
}

/// Accumulates `scale * ds/df` into `gf` and `scale * ds/dg` into `gg`, where
/// `s = cos(f, g)`.
fn add_cosine_grad(f: &[f64], g: &[f64], s: f64, scale: f64, gf: &mut [f64], gg: &mut [f64]) {
    let (nf, ng) = (norm(f), norm(g));
    let inv = 1.0 / (nf * ng);
    let (sf, sg) = (s / (nf * nf), s / (ng * ng));
    for i in 0..f.len() {
        gf[i] += scale * (g[i] * inv - sf * f[i]);
        gg[i] += scale * (f[i] * inv - sg * g[i]);
    }
}

/// Weights `exp(-omega * rank)` with ranks by descending similarity. The most
/// similar pair has rank 0 and tied values share the smallest rank of their
/// group (competition ranking).
pub fn rank_weights(sims: &[f64], omega: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]));
    let mut weights = vec![0.0; sims.len()];
    let mut rank = 0;
    for (pos, &i) in order.iter().enumerate() {
        if pos > 0 && sims[i] != sims[order[pos - 1]] {
            rank = pos;
        }
        weights[i] = (-omega * rank as f64).exp();
    }
    weights
}

/// Pushes foreground and background instances apart:
/// `-(1/mk) * sum ln(1 - s)` over all foreground/background pairs.
pub fn contrastive_neg_loss(
    feat: &InstanceFeatures,
    cfg: &ContrastiveConfig,
) -> LossOutput<FeatureGrads> {
    let mut grad = feat.zero_grads();
    let (m, k) = (feat.foreground.len(), feat.background.len());
    if m == 0 || k == 0 {
        return LossOutput {
            value: 0.0,
            grad,
            active: false,
        };
    }
    let eps = cfg.sim_clamp_eps;
    let scale = 1.0 / (m * k) as f64;
    let mut value = 0.0;
    for (i, f) in feat.foreground.iter().enumerate() {
        for (j, g) in feat.background.iter().enumerate() {
            let s = dot(f, g) / (norm(f) * norm(g));
            let sc = s.clamp(-1.0 + eps, 1.0 - eps);
            value -= scale * (1.0 - sc).ln();
            if s > -1.0 + eps && s < 1.0 - eps {
                let dl_ds = scale / (1.0 - s);
                let (gf, gg) = (&mut grad.foreground[i], &mut grad.background[j]);
                add_cosine_grad(f, g, s, dl_ds, gf, gg);
            }
        }
    }
    LossOutput {
        value,
        grad,
        active: true,
    }
}

/// Rank-weighted pull within one set; returns the value and accumulates the
/// gradient. Inactive (returns `None`) with fewer than two vectors.
fn positive_term(
    set: &[Vec<f64>],
    cfg: &ContrastiveConfig,
    grad: &mut [Vec<f64>],
) -> Option<f64> {
    let n = set.len();
    if n < 2 {
        return None;
    }
    let eps = cfg.sim_clamp_eps;
    let norms: Vec<f64> = set.iter().map(|v| norm(v)).collect();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    let mut sims = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
            sims.push(dot(&set[i], &set[j]) / (norms[i] * norms[j]));
        }
    }
    let weights = rank_weights(&sims, cfg.omega);
    // each unordered pair stands for both ordered terms (i, j) and (j, i)
    let scale = 2.0 / (n * (n - 1)) as f64;
    let mut value = 0.0;
    for ((&(i, j), &s), &w) in pairs.iter().zip(&sims).zip(&weights) {
        let sc = s.clamp(eps, 1.0 - eps);
        value -= scale * w * sc.ln();
        if s > eps && s < 1.0 - eps {
            let dl_ds = -scale * w / s;
            let (lo, hi) = grad.split_at_mut(j);
            add_cosine_grad(&set[i], &set[j], s, dl_ds, &mut lo[i], &mut hi[0]);
        }
    }
    Some(value)
}

/// Pulls instances of the same set together, each pair reweighted by the rank
/// of its similarity. Rank weights are constants for differentiation.
pub fn contrastive_pos_loss(
    feat: &InstanceFeatures,
    cfg: &ContrastiveConfig,
) -> LossOutput<FeatureGrads> {
    let mut grad = feat.zero_grads();
    let fg = positive_term(&feat.foreground, cfg, &mut grad.foreground);
    let bg = positive_term(&feat.background, cfg, &mut grad.background);
    LossOutput {
        value: fg.unwrap_or(0.0) + bg.unwrap_or(0.0),
        grad,
        active: fg.is_some() || bg.is_some(),
    }
}

pub fn contrastive_loss(
    feat: &InstanceFeatures,
    cfg: &ContrastiveConfig,
) -> Result<LossOutput<FeatureGrads>> {
    cfg.validate()?;
    let neg = contrastive_neg_loss(feat, cfg);
    let pos = contrastive_pos_loss(feat, cfg);
    Ok(LossOutput {
        value: neg.value + pos.value,
        grad: neg.grad.combine(1.0, &pos.grad, 1.0)?,
        active: neg.active || pos.active,
    })
}

// ---------------------------------------------------------------------------
// Detection terms

/// Binary cross-entropy on a probability; gradient is with respect to `p`.
pub fn bce_loss(p: f64, target: bool) -> LossOutput<f64> {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
    let (value, grad) = if target {
        (-pc.ln(), if inside { -1.0 / pc } else { 0.0 })
    } else {
        (-(1.0 - pc).ln(), if inside { 1.0 / (1.0 - pc) } else { 0.0 })
    };
    LossOutput {
        value,
        grad,
        active: true,
    }
}

pub fn smooth_l1(pred: &Offsets, target: &Offsets) -> LossOutput<Offsets> {
    let mut value = 0.0;
    let mut grad = [0.0; 6];
    for i in 0..6 {
        let x = pred[i] - target[i];
        if x.abs() < 1.0 {
            value += 0.5 * x * x;
            grad[i] = x;
        } else {
            value += x.abs() - 0.5;
            grad[i] = x.signum();
        }
    }
    LossOutput {
        value,
        grad,
        active: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub prob: f64,
    pub offsets: Offsets,
}

/// Training target of one RPN anchor or RoI proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Positive(Offsets),
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InstanceGrad {
    pub prob: f64,
    pub offsets: Offsets,
}

/// Gradients with respect to every RPN and RoI prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionGrads {
    pub rpn: Vec<InstanceGrad>,
    pub roi: Vec<InstanceGrad>,
}

impl DetectionGrads {
    pub fn zeros(n_rpn: usize, n_roi: usize) -> Self {
        Self {
            rpn: vec![InstanceGrad::default(); n_rpn],
            roi: vec![InstanceGrad::default(); n_roi],
        }
    }

    /// Places per-RoI probability gradients (e.g. from [`we_loss`]) into a
    /// detection gradient with zero RPN entries.
    pub fn from_roi_probs(n_rpn: usize, roi_prob_grads: &[f64]) -> Self {
        let mut g = Self::zeros(n_rpn, roi_prob_grads.len());
        for (slot, &d) in g.roi.iter_mut().zip(roi_prob_grads) {
            slot.prob = d;
        }
        g
    }
}

impl Gradient for DetectionGrads {
    fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        fn mix(x: &[InstanceGrad], y: &[InstanceGrad], a: f64, b: f64) -> Result<Vec<InstanceGrad>> {
            if x.len() != y.len() {
                return Err(Error::ShapeMismatch(format!(
                    "instance gradient counts {} and {}",
                    x.len(),
                    y.len()
                )));
            }
            Ok(x.iter()
                .zip(y)
                .map(|(p, q)| InstanceGrad {
                    prob: a * p.prob + b * q.prob,
                    offsets: std::array::from_fn(|i| a * p.offsets[i] + b * q.offsets[i]),
                })
                .collect())
        }
        Ok(Self {
            rpn: mix(&self.rpn, &other.rpn, a, b)?,
            roi: mix(&self.roi, &other.roi, a, b)?,
        })
    }
}

fn instance_terms(
    preds: &[InstancePrediction],
    targets: &[Target],
    stage: &str,
) -> Result<(f64, Vec<InstanceGrad>, usize)> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{stage}: {} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut value = 0.0;
    let mut used = 0;
    let mut grads = vec![InstanceGrad::default(); preds.len()];
    for ((pred, target), g) in preds.iter().zip(targets).zip(grads.iter_mut()) {
        match target {
            Target::Positive(t) => {
                let cls = bce_loss(pred.prob, true);
                let reg = smooth_l1(&pred.offsets, t);
                value += cls.value + reg.value;
                g.prob = cls.grad;
                g.offsets = reg.grad;
                used += 1;
            }
            Target::Negative => {
                let cls = bce_loss(pred.prob, false);
                value += cls.value;
                g.prob = cls.grad;
                used += 1;
            }
            Target::Ignore => {}
        }
    }
    Ok((value, grads, used))
}

/// Classification plus regression losses summed over RPN and RoI instances.
/// Regression only applies to positives; ignored instances contribute zero.
pub fn sup_detection_loss(
    rpn_preds: &[InstancePrediction],
    rpn_targets: &[Target],
    roi_preds: &[InstancePrediction],
    roi_targets: &[Target],
) -> Result<LossOutput<DetectionGrads>> {
    let (rpn_value, rpn, rpn_used) = instance_terms(rpn_preds, rpn_targets, "rpn")?;
    let (roi_value, roi, roi_used) = instance_terms(roi_preds, roi_targets, "roi")?;
    let active = rpn_used + roi_used > 0;
    if !active {
        log::debug!("supervised detection loss evaluated with an empty target set");
    }
    Ok(LossOutput {
        value: rpn_value + roi_value,
        grad: DetectionGrads { rpn, roi },
        active,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeConfig {
    /// Below this probability the `p^gamma` factor applies.
    pub tau1: f64,
    /// Above this probability the `(1-p)^gamma` factor applies.
    pub tau2: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Class balance between the two branches.
    pub alpha: f64,
    /// Treat the modulating factor as a constant when differentiating.
    pub detach_modulator: bool,
}

impl Default for WeConfig {
    fn default() -> Self {
        Self {
            tau1: 0.25,
            tau2: 0.75,
            gamma: 4.0,
            alpha: 0.1,
            detach_modulator: false,
        }
    }
}

impl WeConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(open_unit(self.tau1) && open_unit(self.tau2) && self.tau1 < self.tau2) {
            return Err(Error::invalid(format!(
                "need 0 < tau1 < tau2 < 1, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// The modulating factor selected by the thresholds; zero inside `[tau1, tau2]`.
pub fn we_modulating_factor(p: f64, cfg: &WeConfig) -> f64 {
    if p < cfg.tau1 {
        (1.0 - cfg.alpha) * p.powf(cfg.gamma)
    } else if p > cfg.tau2 {
        cfg.alpha * (1.0 - p).powf(cfg.gamma)
    } else {
        0.0
    }
}

/// Weighted entropy over RoI nodule probabilities, summed over instances.
pub fn we_loss(probs: &[f64], cfg: &WeConfig) -> LossOutput<Vec<f64>> {
    let (a, g) = (cfg.alpha, cfg.gamma);
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (&p_raw, slot) in probs.iter().zip(grad.iter_mut()) {
        let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let factor = we_modulating_factor(p, cfg);
        if factor == 0.0 && !(p < cfg.tau1 || p > cfg.tau2) {
            continue;
        }
        let ent = -p * p.ln();
        value += factor * ent;
        if !(p_raw > PROB_EPS && p_raw < 1.0 - PROB_EPS) {
            continue;
        }
        let d_ent = -(p.ln() + 1.0);
        let d_factor = if cfg.detach_modulator {
            0.0
        } else if p < cfg.tau1 {
            (1.0 - a) * g * p.powf(g - 1.0)
        } else {
            -a * g * (1.0 - p).powf(g - 1.0)
        };
        *slot = d_factor * ent + factor * d_ent;
    }
    LossOutput {
        value,
        grad,
        active: true,
    }
}

/// `eta * sup + unsup`, values and gradients alike.
pub fn student_total_loss<G: Gradient>(
    sup: &LossOutput<G>,
    unsup: &LossOutput<G>,
    eta: f64,
) -> Result<LossOutput<G>> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::invalid(format!("eta must be finite and >= 0, got {eta}")));
    }
    Ok(LossOutput {
        value: eta * sup.value + unsup.value,
        grad: sup.grad.combine(eta, &unsup.grad, 1.0)?,
        active: sup.active || unsup.active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn feats(fg: &[&[f64]], bg: &[&[f64]]) -> InstanceFeatures {
        InstanceFeatures::new(
            fg.iter().map(|v| v.to_vec()).collect(),
            bg.iter().map(|v| v.to_vec()).collect(),
        )
        .unwrap()
    }

    /// Unit 2-vector at the angle whose cosine with (1, 0) is `s`.
    fn at_cos(s: f64) -> Vec<f64> {
        vec![s, (1.0 - s * s).sqrt()]
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_sim(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn instance_features_validation() {
        assert!(InstanceFeatures::new(vec![vec![1.0, 0.0]], vec![vec![1.0]]).is_err());
        assert!(InstanceFeatures::new(vec![vec![0.0, 0.0]], vec![]).is_err());
        assert!(InstanceFeatures::new(vec![vec![]], vec![]).is_err());
        assert!(InstanceFeatures::new(vec![], vec![]).is_ok());
    }

    #[test]
    fn rank_weight_examples() {
        assert_eq!(rank_weights(&[0.3], 0.25), vec![1.0]);
        let w = rank_weights(&[0.9, 0.5], 0.25);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - (-0.25f64).exp()).abs() < 1e-15);
        assert!((w[1] - 0.7788).abs() < 1e-4);
        assert_eq!(rank_weights(&[0.4; 5], 0.7), vec![1.0; 5]);
        // competition ranking: 0.9, 0.5, 0.5, 0.1 -> ranks 0, 1, 1, 3
        let w = rank_weights(&[0.5, 0.9, 0.1, 0.5], 1.0);
        let ranks: Vec<f64> = w.iter().map(|x| -x.ln()).collect();
        for (r, e) in ranks.iter().zip([1.0, 0.0, 3.0, 1.0]) {
            assert!((r - e).abs() < 1e-12);
        }
    }

    #[test]
    fn neg_loss_examples() {
        let cfg = ContrastiveConfig::default();
        let out = contrastive_neg_loss(&feats(&[&[1.0, 0.0]], &[&[0.0, 1.0]]), &cfg);
        assert!(out.active);
        assert!(out.value.abs() < 1e-15);

        let out = contrastive_neg_loss(&feats(&[&[1.0, 0.0]], &[&at_cos(0.5)]), &cfg);
        assert!((out.value - LN2).abs() < 1e-12);

        let out = contrastive_neg_loss(&feats(&[&[1.0, 2.0]], &[&[1.0, 2.0]]), &cfg);
        assert!((out.value - 13.815_510_557_964_274).abs() < 1e-6);

        let out = contrastive_neg_loss(&feats(&[&[1.0, 2.0]], &[]), &cfg);
        assert!(!out.active);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn pos_loss_examples() {
        let cfg = ContrastiveConfig::default();
        let out = contrastive_pos_loss(&feats(&[&[1.0, 2.0], &[1.0, 2.0]], &[&[1.0, 0.0]]), &cfg);
        assert!((out.value - 1e-6).abs() < 1e-11);

        let out = contrastive_pos_loss(&feats(&[&[1.0, 0.0], &at_cos(0.5)], &[]), &cfg);
        assert!((out.value - LN2).abs() < 1e-12);

        let out = contrastive_pos_loss(&feats(&[&[1.0, 0.0]], &[&[0.0, 1.0]]), &cfg);
        assert!(!out.active);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn pos_loss_floors_negative_similarities() {
        let cfg = ContrastiveConfig::default();
        let out = contrastive_pos_loss(&feats(&[&[1.0, 0.0], &[-1.0, 0.1]], &[]), &cfg);
        assert!((out.value + (1e-6f64).ln()).abs() < 1e-9);
        assert!(out.grad.foreground.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn contrastive_composition() {
        let cfg = ContrastiveConfig::default();
        let empty = feats(&[], &[]);
        assert_eq!(contrastive_loss(&empty, &cfg).unwrap().value, 0.0);
        let one_each = feats(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        assert_eq!(contrastive_loss(&one_each, &cfg).unwrap().value, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f = random_features(&mut rng);
            let total = contrastive_loss(&f, &cfg).unwrap().value;
            let sum = contrastive_neg_loss(&f, &cfg).value + contrastive_pos_loss(&f, &cfg).value;
            assert_eq!(total.to_bits(), sum.to_bits());
        }
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(1.0, true).value < 1.1e-6);
        assert!((bce_loss(0.5, true).value - LN2).abs() < 1e-12);
        assert!((bce_loss(0.5, false).value - LN2).abs() < 1e-12);
        assert!((bce_loss(0.9, false).value - std::f64::consts::LN_10).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_examples() {
        let z = [0.0; 6];
        assert_eq!(smooth_l1(&z, &z).value, 0.0);
        assert_eq!(smooth_l1(&[0.5, 0.0, 0.0, 0.0, 0.0, 0.0], &z).value, 0.125);
        assert_eq!(smooth_l1(&[0.0, 0.0, 2.0, 0.0, 0.0, 0.0], &z).value, 1.5);
    }

    #[test]
    fn sup_detection_examples() {
        let p = |prob| InstancePrediction {
            prob,
            offsets: [0.0; 6],
        };
        let out = sup_detection_loss(
            &[p(1.0), p(0.0)],
            &[Target::Positive([0.0; 6]), Target::Negative],
            &[p(1.0)],
            &[Target::Positive([0.0; 6])],
        )
        .unwrap();
        assert!(out.value < 1e-5);

        let out = sup_detection_loss(&[p(0.5)], &[Target::Positive([0.0; 6])], &[], &[]).unwrap();
        assert!((out.value - LN2).abs() < 1e-12);

        let out = sup_detection_loss(&[p(0.3)], &[Target::Ignore], &[], &[]).unwrap();
        assert!(!out.active);
        assert_eq!(out.value, 0.0);
        assert_eq!(out.grad, DetectionGrads::zeros(1, 0));

        assert!(sup_detection_loss(&[p(0.3)], &[], &[], &[]).is_err());
    }

    #[test]
    fn sup_detection_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (preds, targets) = random_instances(&mut rng, 6);
            let (roi, roi_t) = random_instances(&mut rng, 4);
            let out = sup_detection_loss(&preds, &targets, &roi, &roi_t).unwrap();
            let mut expect = 0.0;
            for (p, t) in preds.iter().zip(&targets).chain(roi.iter().zip(&roi_t)) {
                expect += match t {
                    Target::Positive(o) => bce_loss(p.prob, true).value + smooth_l1(&p.offsets, o).value,
                    Target::Negative => bce_loss(p.prob, false).value,
                    Target::Ignore => 0.0,
                };
            }
            assert!((out.value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn we_examples() {
        let cfg = WeConfig::default();
        assert_eq!(we_loss(&[0.5], &cfg).value, 0.0);
        // 0.9 * 0.1^4 * (-0.1 ln 0.1)
        let v = we_loss(&[0.1], &cfg).value;
        assert!((v / 2.072_326_583_694_641_4e-5 - 1.0).abs() < 1e-12, "{v}");
        // 0.1 * 0.1^4 * (-0.9 ln 0.9)
        let v = we_loss(&[0.9], &cfg).value;
        assert!((v / 9.482_446_409_204_368e-7 - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn we_factor_monotone() {
        let cfg = WeConfig::default();
        let grid = |lo: f64, hi: f64| (0..1000).map(move |i| lo + (hi - lo) * i as f64 / 999.0);
        let low: Vec<f64> = grid(0.0, cfg.tau1 - 1e-9).map(|p| we_modulating_factor(p, &cfg)).collect();
        assert!(low.windows(2).all(|w| w[1] >= w[0]));
        let high: Vec<f64> = grid(cfg.tau2 + 1e-9, 1.0).map(|p| we_modulating_factor(p, &cfg)).collect();
        assert!(high.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn student_total_examples() {
        let sup = LossOutput { value: 2.0, grad: vec![1.0, -2.0], active: true };
        let unsup = LossOutput { value: 0.5, grad: vec![0.25, 0.5], active: true };
        let t = student_total_loss(&sup, &unsup, 0.0).unwrap();
        assert_eq!(t.value, 0.5);
        assert_eq!(t.grad, unsup.grad);
        let t = student_total_loss(&sup, &unsup, 1.0).unwrap();
        assert_eq!(t.value, 2.5);
        let t = student_total_loss(&sup, &unsup, 3.0).unwrap();
        assert_eq!(t.grad, vec![3.25, -5.5]);
        assert!(student_total_loss(&sup, &unsup, -1.0).is_err());
        let short = LossOutput { value: 0.0, grad: vec![0.0], active: true };
        assert!(student_total_loss(&sup, &short, 1.0).is_err());
    }

    pub(crate) fn random_features(rng: &mut ChaCha8Rng) -> InstanceFeatures {
        let d = rng.random_range(2..6);
        let m = rng.random_range(0..5);
        let k = rng.random_range(0..5);
        // mostly-positive vectors like ReLU features, with occasional negative entries
        let mut v = || -> Vec<f64> { (0..d).map(|_| rng.random_range(-0.3..1.0)).collect() };
        let fg = (0..m).map(|_| v()).collect();
        let bg = (0..k).map(|_| v()).collect();
        InstanceFeatures::new(fg, bg).unwrap()
    }

    fn random_instances(rng: &mut ChaCha8Rng, n: usize) -> (Vec<InstancePrediction>, Vec<Target>) {
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            preds.push(InstancePrediction {
                prob: rng.random_range(0.01..0.99),
                offsets: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            });
            targets.push(match rng.random_range(0..3) {
                0 => Target::Positive(std::array::from_fn(|_| rng.random_range(-2.0..2.0))),
                1 => Target::Negative,
                _ => Target::Ignore,
            });
        }
        (preds, targets)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn contrastive_scale_invariant(seed in 0u64..10_000, which in 0usize..8, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&mut rng);
            let cfg = ContrastiveConfig::default();
            let base = contrastive_loss(&f, &cfg).unwrap().value;
            let mut fg = f.foreground().to_vec();
            let mut bg = f.background().to_vec();
            let n = fg.len() + bg.len();
            prop_assume!(n > 0);
            let idx = which % n;
            let v = if idx < fg.len() { &mut fg[idx] } else { &mut bg[idx - fg.len()] };
            v.iter_mut().for_each(|x| *x *= c);
            let scaled = contrastive_loss(&InstanceFeatures::new(fg, bg).unwrap(), &cfg).unwrap().value;
            prop_assert!((scaled - base).abs() <= 1e-9);
        }

        #[test]
        fn contrastive_permutation_invariant(seed in 0u64..10_000, rot_f in 0usize..5, rot_b in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_features(&mut rng);
            let cfg = ContrastiveConfig::default();
            let base = contrastive_loss(&f, &cfg).unwrap().value;
            let mut fg = f.foreground().to_vec();
            let mut bg = f.background().to_vec();
            if !fg.is_empty() { let r = rot_f % fg.len(); fg.rotate_left(r); fg.reverse(); }
            if !bg.is_empty() { let r = rot_b % bg.len(); bg.rotate_left(r); }
            let permuted = contrastive_loss(&InstanceFeatures::new(fg, bg).unwrap(), &cfg).unwrap().value;
            prop_assert!((permuted - base).abs() <= 1e-12);
        }

        #[test]
        fn rank_weights_equivariant(sims in prop::collection::vec(-1.0f64..1.0, 1..20), omega in 0.0f64..2.0, shift in 0usize..20) {
            let w = rank_weights(&sims, omega);
            prop_assert!(w.iter().all(|x| *x > 0.0 && *x <= 1.0));
            let mut rotated = sims.clone();
            let r = shift % sims.len();
            rotated.rotate_left(r);
            let mut w_rot = w.clone();
            w_rot.rotate_left(r);
            prop_assert_eq!(rank_weights(&rotated, omega), w_rot);
            prop_assert!(rank_weights(&sims, 0.0).iter().all(|x| *x == 1.0));
        }

        #[test]
        fn we_nonnegative_and_dead_zone(probs in prop::collection::vec(0.0f64..=1.0, 0..30)) {
            let cfg = WeConfig::default();
            let out = we_loss(&probs, &cfg);
            prop_assert!(out.value >= 0.0);
            let all_dead = probs.iter().all(|p| (cfg.tau1..=cfg.tau2).contains(p));
            if all_dead {
                prop_assert_eq!(out.value, 0.0);
            } else {
                prop_assert!(out.value > 0.0);
            }
        }
    }

    // Finite-difference checks: step 1e-5, 64-bit, relative error <= 1e-4.

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn far_from_ties(sims: &[f64]) -> bool {
        let mut s = sims.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[1] - w[0] > 1e-3)
    }

    fn pair_sims(set: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                out.push(cosine_sim(&set[i], &set[j]).unwrap());
            }
        }
        out
    }

    fn check_feature_grads(
        f: &InstanceFeatures,
        loss: impl Fn(&InstanceFeatures) -> LossOutput<FeatureGrads>,
    ) {
        let analytic = loss(f);
        for set in 0..2 {
            let vecs = if set == 0 { f.foreground() } else { f.background() };
            for (i, v) in vecs.iter().enumerate() {
                for d in 0..v.len() {
                    let eval = |x: f64| {
                        let mut fg = f.foreground().to_vec();
                        let mut bg = f.background().to_vec();
                        if set == 0 { fg[i][d] = x } else { bg[i][d] = x }
                        loss(&InstanceFeatures::new(fg, bg).unwrap()).value
                    };
                    let numeric = central_difference(eval, v[d], H);
                    let g = if set == 0 { &analytic.grad.foreground } else { &analytic.grad.background };
                    let err = rel_error(g[i][d], numeric);
                    assert!(err <= TOL, "set {set} vec {i} dim {d}: analytic {} numeric {numeric}", g[i][d]);
                }
            }
        }
    }

    /// True when no similarity sits within 1e-4 of a clamp boundary.
    fn away_from_clamps(f: &InstanceFeatures, eps: f64) -> bool {
        let mut all = pair_sims(f.foreground());
        all.extend(pair_sims(f.background()));
        for a in f.foreground() {
            for b in f.background() {
                all.push(cosine_sim(a, b).unwrap());
            }
        }
        all.iter().all(|s| (s - eps).abs() > 1e-4 && (s - 1.0 + eps).abs() > 1e-4 && (s + 1.0 - eps).abs() > 1e-4)
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let cfg = ContrastiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 100 {
            let f = random_features(&mut rng);
            if !far_from_ties(&pair_sims(f.foreground())) || !far_from_ties(&pair_sims(f.background())) {
                continue;
            }
            if !away_from_clamps(&f, cfg.sim_clamp_eps) {
                continue;
            }
            check_feature_grads(&f, |x| contrastive_neg_loss(x, &cfg));
            check_feature_grads(&f, |x| contrastive_pos_loss(x, &cfg));
            check_feature_grads(&f, |x| contrastive_loss(x, &cfg).unwrap());
            checked += 1;
        }
    }

    #[test]
    fn scalar_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = WeConfig::default();
        for _ in 0..100 {
            let p: f64 = rng.random_range(0.001..0.999);
            for t in [true, false] {
                let n = central_difference(|x| bce_loss(x, t).value, p, H);
                assert!(rel_error(bce_loss(p, t).grad, n) <= TOL);
            }

            let mut q: f64 = rng.random_range(0.001..0.999);
            while (q - cfg.tau1).abs() < 1e-4 || (q - cfg.tau2).abs() < 1e-4 {
                q = rng.random_range(0.001..0.999);
            }
            let n = central_difference(|x| we_loss(&[x], &cfg).value, q, H);
            assert!(rel_error(we_loss(&[q], &cfg).grad[0], n) <= TOL, "p = {q}");

            let pred: Offsets = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let target: Offsets = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            if (0..6).any(|i| ((pred[i] - target[i]).abs() - 1.0).abs() < 1e-4) {
                continue;
            }
            let analytic = smooth_l1(&pred, &target).grad;
            for i in 0..6 {
                let n = central_difference(
                    |x| {
                        let mut pp = pred;
                        pp[i] = x;
                        smooth_l1(&pp, &target).value
                    },
                    pred[i],
                    H,
                );
                assert!(rel_error(analytic[i], n) <= TOL);
            }
        }
    }

    #[test]
    fn detached_we_gradient_drops_factor_derivative() {
        let cfg = WeConfig { detach_modulator: true, ..WeConfig::default() };
        let p = 0.1f64;
        let g = we_loss(&[p], &cfg).grad[0];
        let expect = -we_modulating_factor(p, &cfg) * (p.ln() + 1.0);
        assert!((g - expect).abs() < 1e-18);
    }
}
