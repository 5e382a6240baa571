//! Source-free adaptation in two steps.
//!
//! Step 1 pulls target-domain instance features apart with the contrastive
//! loss, using the model's own confident and unconfident proposals as
//! foreground and background. Step 2 trains a student on pseudo nodules from
//! an EMA teacher, with the weighted-entropy term on the student's RoI
//! probabilities.

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{crop_patches, ScanRecord, Volume};
use crate::detector::{
    assign_by_iou, detect, epoch_batches, forward, loss_gradient, propose, roi_features,
    select_rpn_instances, sgd_step, AssignConfig, DetectorConfig, DetectorParams, FeatureMap,
    LossSpec, OptimState, ParamGroup, PatchPlan, Proposal, SgdConfig,
};
use crate::froc::{evaluate, FrocResult, ScanEval};
use crate::geom::Box3;
use crate::losses::{ContrastiveConfig, InstanceFeatures, Target, WeConfig, MIN_FEATURE_NORM};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// RPN score at or above which a proposal is a foreground instance.
    pub t_fg: f64,
    /// RPN score at or below which a proposal is a background instance.
    pub t_bg: f64,
    pub max_fg: usize,
    pub max_bg: usize,
    /// Teacher score needed for a pseudo nodule.
    pub delta: f64,
    /// EMA smoothing of the teacher.
    pub beta: f64,
    /// Weight of the pseudo-supervised term in the student loss.
    pub eta: f64,
    pub contrastive: ContrastiveConfig,
    pub we: WeConfig,
    pub sgd: SgdConfig,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            t_fg: 0.9,
            t_bg: 0.1,
            max_fg: 16,
            max_bg: 32,
            delta: 0.7,
            beta: 0.9996,
            eta: 1.0,
            contrastive: ContrastiveConfig::default(),
            we: WeConfig::default(),
            sgd: SgdConfig::default(),
            step1_epochs: 100,
            step2_epochs: 100,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_bg && self.t_bg < self.t_fg && self.t_fg <= 1.0) {
            return Err(Error::invalid(format!(
                "need 0 <= t_bg < t_fg <= 1, got t_bg={} t_fg={}",
                self.t_bg, self.t_fg
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::invalid(format!("eta must be >= 0, got {}", self.eta)));
        }
        self.contrastive.validate()?;
        self.we.validate()?;
        self.sgd.validate()
    }
}

// ---------------------------------------------------------------------------
// Step 1

/// Foreground and background instances chosen from scored proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoLabels {
    pub features: InstanceFeatures,
    pub fg_boxes: Vec<Box3>,
    pub bg_boxes: Vec<Box3>,
}

/// Proposals scoring at least `t_fg` become foreground (highest `max_fg` by
/// score), those at most `t_bg` background (`max_bg` drawn uniformly with
/// `rng`). Instances whose pooled feature is numerically zero are skipped,
/// since cosine similarity is undefined for them.
pub fn auto_label_instances(
    proposals: &[Proposal],
    features: &FeatureMap,
    cfg: &AdaptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AutoLabels> {
    let usable = |p: &&Proposal| {
        let f = roi_features(features, &p.bbox);
        f.iter().map(|x| x * x).sum::<f64>().sqrt() > MIN_FEATURE_NORM
    };
    let mut fg: Vec<&Proposal> = proposals.iter().filter(|p| p.score >= cfg.t_fg).filter(usable).collect();
    fg.sort_by(|a, b| b.score.total_cmp(&a.score));
    fg.truncate(cfg.max_fg);
    let bg_all: Vec<&Proposal> = proposals.iter().filter(|p| p.score <= cfg.t_bg).filter(usable).collect();
    let bg: Vec<&Proposal> = if bg_all.len() > cfg.max_bg {
        let mut idx = sample(rng, bg_all.len(), cfg.max_bg).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| bg_all[i]).collect()
    } else {
        bg_all
    };
    let fg_boxes: Vec<Box3> = fg.iter().map(|p| p.bbox).collect();
    let bg_boxes: Vec<Box3> = bg.iter().map(|p| p.bbox).collect();
    let features = InstanceFeatures::new(
        fg_boxes.iter().map(|b| roi_features(features, b)).collect(),
        bg_boxes.iter().map(|b| roi_features(features, b)).collect(),
    )?;
    Ok(AutoLabels {
        features,
        fg_boxes,
        bg_boxes,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Step1Report {
    pub epoch_losses: Vec<f64>,
    /// Foreground instances per epoch, summed over patches.
    pub fg_counts: Vec<usize>,
    pub bg_counts: Vec<usize>,
    /// Batches whose gradient was identically zero and so skipped the update.
    pub skipped_batches: Vec<usize>,
}

pub fn target_patches(scans: &[ScanRecord], det: &DetectorConfig) -> Result<Vec<Volume<u8>>> {
    let mut out = Vec::new();
    for s in scans {
        out.extend(crop_patches(&s.voxels, det.patch_side, det.patch_overlap)?.into_iter().map(|p| p.voxels));
    }
    if out.is_empty() {
        return Err(Error::Empty("no target patches to adapt on".into()));
    }
    Ok(out)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Applies an optimizer step unless the gradient is identically zero, so
/// batches with no active term leave parameters and momentum untouched.
fn step_if_nonzero(params: &mut DetectorParams, grad: &[f64], opt: &mut OptimState) -> Result<bool> {
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(false);
    }
    sgd_step(params, grad, opt)?;
    Ok(true)
}

/// Contrastive adaptation of the backbone and RPN on unlabeled target scans.
/// `on_epoch` sees the parameters after every epoch.
pub fn step1_adapt(
    source: &DetectorParams,
    target_scans: &[ScanRecord],
    cfg: &AdaptConfig,
    det: &DetectorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &DetectorParams) -> Result<()>,
) -> Result<(DetectorParams, Step1Report)> {
    cfg.validate()?;
    det.validate()?;
    let patches = target_patches(target_scans, det)?;
    let mut params = source.clone();
    let mut opt = OptimState::new(cfg.sgd).with_groups(&[ParamGroup::Backbone, ParamGroup::Rpn]);
    let mut rng = stream_rng(seed, 1);
    let spec = LossSpec::Contrastive(cfg.contrastive);
    let mut report = Step1Report::default();
    for epoch in 0..cfg.step1_epochs {
        let (mut loss, mut n_fg, mut n_bg, mut skipped) = (0.0, 0, 0, 0);
        let batches = epoch_batches(patches.len(), cfg.sgd.batch_size, &mut rng);
        for batch in &batches {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let labels = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let st = forward(&params, &patches[i])?;
                    let props = propose(&st.rpn, &st.anchors(), det.top_n, det.nms_iou, det.pre_nms);
                    auto_label_instances(&props, &st.features, cfg, &mut ChaCha8Rng::seed_from_u64(s))
                })
                .collect::<Vec<Result<AutoLabels>>>()
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let plans: Vec<PatchPlan> = labels
                .iter()
                .map(|l| {
                    n_fg += l.fg_boxes.len();
                    n_bg += l.bg_boxes.len();
                    PatchPlan {
                        contrastive_fg: l.fg_boxes.clone(),
                        contrastive_bg: l.bg_boxes.clone(),
                        ..PatchPlan::default()
                    }
                })
                .collect();
            let vols: Vec<Volume<u8>> = batch.iter().map(|&i| patches[i].clone()).collect();
            let (v, g, _) = loss_gradient(&params, &vols, &plans, &spec)?;
            if !step_if_nonzero(&mut params, &g, &mut opt)? {
                skipped += 1;
            }
            loss += v;
        }
        let mean = loss / batches.len() as f64;
        log::info!("step 1 epoch {epoch}: loss {mean:.4}, fg {n_fg}, bg {n_bg}");
        report.epoch_losses.push(mean);
        report.fg_counts.push(n_fg);
        report.bg_counts.push(n_bg);
        report.skipped_batches.push(skipped);
        on_epoch(epoch, &params)?;
    }
    Ok((params, report))
}

// ---------------------------------------------------------------------------
// Step 2

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoNodule {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub score: f64,
}

/// Teacher RPN proposals (after NMS) scoring at least `delta`.
pub fn make_pseudo_labels(
    teacher: &DetectorParams,
    patch: &Volume<u8>,
    delta: f64,
    det: &DetectorConfig,
) -> Result<Vec<PseudoNodule>> {
    let st = forward(teacher, patch)?;
    Ok(pseudo_from_proposals(
        &propose(&st.rpn, &st.anchors(), det.top_n, det.nms_iou, det.pre_nms),
        delta,
    ))
}

pub fn pseudo_from_proposals(proposals: &[Proposal], delta: f64) -> Vec<PseudoNodule> {
    proposals
        .iter()
        .filter(|p| p.score >= delta)
        .map(|p| PseudoNodule {
            bbox: p.bbox,
            score: p.score,
        })
        .collect()
}

/// Targets for candidate boxes against pseudo nodules, by the supervised
/// IoU rule.
pub fn assign_targets(pseudo: &[PseudoNodule], candidates: &[Box3], cfg: &AssignConfig) -> Vec<Target> {
    let gt: Vec<Box3> = pseudo.iter().map(|p| p.bbox).collect();
    assign_by_iou(&gt, candidates, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent {
    pub teacher: DetectorParams,
    pub student: DetectorParams,
}

impl TeacherStudent {
    pub fn new(params: &DetectorParams) -> Self {
        Self {
            teacher: params.clone(),
            student: params.clone(),
        }
    }

    pub fn ema_update(&mut self, beta: f64) -> Result<()> {
        ema_update(self.teacher.values_mut(), self.student.values(), beta)
    }
}

/// `teacher <- beta * teacher + (1 - beta) * student`, elementwise. The result
/// is kept within the closed interval between the two inputs.
pub fn ema_update(teacher: &mut [f64], student: &[f64], beta: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch(format!(
            "teacher has {} values, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        let next = *t + (1.0 - beta) * (s - *t);
        *t = next.clamp(t.min(s), t.max(s));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Step2Report {
    pub epoch_losses: Vec<f64>,
    /// Pseudo nodules per epoch, summed over patches.
    pub pseudo_counts: Vec<usize>,
    /// Student RoI probabilities scored per epoch.
    pub roi_counts: Vec<usize>,
    /// Of those, the ones outside the weighted-entropy dead zone.
    pub roi_outside_dead_zone: Vec<usize>,
    pub skipped_batches: Vec<usize>,
}

/// Student plan: when the teacher found pseudo nodules, RPN anchors and RoI
/// boxes are supervised against them; otherwise only the weighted-entropy
/// term sees the student's proposals.
pub fn student_plan(
    student: &DetectorParams,
    patch: &Volume<u8>,
    pseudo: &[PseudoNodule],
    det: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatchPlan> {
    let st = forward(student, patch)?;
    let anchors = st.anchors();
    let mut roi_boxes: Vec<Box3> = propose(&st.rpn, &anchors, det.top_n, det.nms_iou, det.pre_nms)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    if pseudo.is_empty() {
        return Ok(PatchPlan {
            roi: roi_boxes.into_iter().map(|b| (b, Target::Ignore)).collect(),
            ..PatchPlan::default()
        });
    }
    let anchor_targets = assign_targets(pseudo, &anchors.boxes(), &det.assign);
    let rpn = select_rpn_instances(&anchor_targets, &st.rpn.probs, det, rng);
    roi_boxes.extend(pseudo.iter().map(|p| p.bbox));
    let roi_targets = assign_targets(pseudo, &roi_boxes, &det.assign);
    Ok(PatchPlan {
        rpn,
        roi: roi_boxes.into_iter().zip(roi_targets).collect(),
        ..PatchPlan::default()
    })
}

/// Teacher-student training from `adapted`; returns the final student.
/// `on_epoch` sees the student after every epoch.
pub fn step2_adapt(
    adapted: &DetectorParams,
    target_scans: &[ScanRecord],
    cfg: &AdaptConfig,
    det: &DetectorConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &DetectorParams) -> Result<()>,
) -> Result<(DetectorParams, Step2Report)> {
    cfg.validate()?;
    det.validate()?;
    let patches = target_patches(target_scans, det)?;
    let mut ts = TeacherStudent::new(adapted);
    let mut opt = OptimState::new(cfg.sgd);
    let mut rng = stream_rng(seed, 2);
    let spec = LossSpec::StudentTotal {
        eta: cfg.eta,
        we: cfg.we,
    };
    let mut report = Step2Report::default();
    for epoch in 0..cfg.step2_epochs {
        let (mut loss, mut n_pseudo, mut n_roi, mut n_out, mut skipped) = (0.0, 0, 0, 0, 0);
        let batches = epoch_batches(patches.len(), cfg.sgd.batch_size, &mut rng);
        for batch in &batches {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let planned = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let pseudo = make_pseudo_labels(&ts.teacher, &patches[i], cfg.delta, det)?;
                    let plan = student_plan(&ts.student, &patches[i], &pseudo, det, &mut ChaCha8Rng::seed_from_u64(s))?;
                    Ok((pseudo.len(), plan))
                })
                .collect::<Vec<Result<(usize, PatchPlan)>>>()
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            n_pseudo += planned.iter().map(|(n, _)| n).sum::<usize>();
            let plans: Vec<PatchPlan> = planned.into_iter().map(|(_, p)| p).collect();
            let vols: Vec<Volume<u8>> = batch.iter().map(|&i| patches[i].clone()).collect();
            let (v, g, stats) = loss_gradient(&ts.student, &vols, &plans, &spec)?;
            for s in &stats {
                n_roi += s.roi_probs.len();
                n_out += s.roi_probs.iter().filter(|&&p| p < cfg.we.tau1 || p > cfg.we.tau2).count();
            }
            if !step_if_nonzero(&mut ts.student, &g, &mut opt)? {
                skipped += 1;
            }
            ts.ema_update(cfg.beta)?;
            loss += v;
        }
        let mean = loss / batches.len() as f64;
        log::info!("step 2 epoch {epoch}: loss {mean:.4}, pseudo {n_pseudo}, confident RoIs {n_out}/{n_roi}");
        report.epoch_losses.push(mean);
        report.pseudo_counts.push(n_pseudo);
        report.roi_counts.push(n_roi);
        report.roi_outside_dead_zone.push(n_out);
        report.skipped_batches.push(skipped);
        on_epoch(epoch, &ts.student)?;
    }
    Ok((ts.student, report))
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Steps {
    One,
    Two,
    All,
}

impl Steps {
    fn step1(self) -> bool {
        matches!(self, Steps::One | Steps::All)
    }

    fn step2(self) -> bool {
        matches!(self, Steps::Two | Steps::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocSnapshot {
    pub stage: String,
    pub froc: FrocResult,
}

/// Validation FROC after every epoch of one step and the epoch kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSelection {
    pub stage: String,
    pub val_froc: Vec<f64>,
    pub selected_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub steps: Steps,
    pub config: AdaptConfig,
    pub detector: DetectorConfig,
    pub step1: Option<Step1Report>,
    pub step2: Option<Step2Report>,
    pub selection: Vec<StageSelection>,
    pub froc: Vec<FrocSnapshot>,
}

/// FROC of `params` on annotated scans.
pub fn froc_on(params: &DetectorParams, scans: &[ScanRecord], det: &DetectorConfig) -> Result<FrocResult> {
    let evals = scans
        .iter()
        .map(|s| {
            Ok(ScanEval {
                detections: detect(params, &s.voxels, det)?,
                annotations: s.annotations.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&evals)?.0)
}

/// Keeps the epoch with the highest validation FROC (earliest on ties).
struct Selector<'a> {
    val: &'a [ScanRecord],
    det: &'a DetectorConfig,
    best: Option<(f64, DetectorParams)>,
    record: StageSelection,
}

impl<'a> Selector<'a> {
    fn new(stage: &str, val: &'a [ScanRecord], det: &'a DetectorConfig) -> Self {
        let record = StageSelection {
            stage: stage.to_string(),
            val_froc: Vec::new(),
            selected_epoch: None,
        };
        Self { val, det, best: None, record }
    }

    fn observe(&mut self, epoch: usize, params: &DetectorParams) -> Result<()> {
        let f = froc_on(params, self.val, self.det)?.average;
        log::info!("{} epoch {epoch}: validation FROC {f:.4}", self.record.stage);
        self.record.val_froc.push(f);
        if self.best.as_ref().is_none_or(|(b, _)| f > *b) {
            self.best = Some((f, params.clone()));
            self.record.selected_epoch = Some(epoch);
        }
        Ok(())
    }

    /// The selected parameters, or `last` when no epoch ran.
    fn finish(self, last: DetectorParams) -> (DetectorParams, StageSelection) {
        (self.best.map_or(last, |(_, p)| p), self.record)
    }
}

/// Runs the selected steps. Each step trains for its configured number of
/// epochs; with `val` scans the epoch with the best validation FROC is kept,
/// otherwise the last. When `monitor` scans are given, a FROC snapshot is
/// taken before adapting and after each step. Annotations of the training
/// scans are never read.
#[allow(clippy::too_many_arguments)]
pub fn adapt_pipeline(
    source: &DetectorParams,
    target_scans: &[ScanRecord],
    cfg: &AdaptConfig,
    det: &DetectorConfig,
    steps: Steps,
    seed: u64,
    val: Option<&[ScanRecord]>,
    monitor: Option<&[ScanRecord]>,
) -> Result<(DetectorParams, RunReport)> {
    let mut report = RunReport {
        seed,
        steps,
        config: *cfg,
        detector: *det,
        step1: None,
        step2: None,
        selection: Vec::new(),
        froc: Vec::new(),
    };
    let snapshot = |stage: &str, p: &DetectorParams, report: &mut RunReport| -> Result<()> {
        if let Some(scans) = monitor {
            report.froc.push(FrocSnapshot {
                stage: stage.to_string(),
                froc: froc_on(p, scans, det)?,
            });
        }
        Ok(())
    };
    let mut params = source.clone();
    snapshot("source", &params, &mut report)?;
    if steps.step1() {
        let mut sel = val.map(|v| Selector::new("step1", v, det));
        let (p, r) = step1_adapt(&params, target_scans, cfg, det, seed, |e, p| {
            sel.as_mut().map_or(Ok(()), |s| s.observe(e, p))
        })?;
        params = match sel {
            Some(s) => {
                let (p, rec) = s.finish(p);
                report.selection.push(rec);
                p
            }
            None => p,
        };
        report.step1 = Some(r);
        snapshot("step1", &params, &mut report)?;
    }
    if steps.step2() {
        let mut sel = val.map(|v| Selector::new("step2", v, det));
        let (p, r) = step2_adapt(&params, target_scans, cfg, det, seed, |e, p| {
            sel.as_mut().map_or(Ok(()), |s| s.observe(e, p))
        })?;
        params = match sel {
            Some(s) => {
                let (p, rec) = s.finish(p);
                report.selection.push(rec);
                p
            }
            None => p,
        };
        report.step2 = Some(r);
        snapshot("step2", &params, &mut report)?;
    }
    Ok((params, report))
}
