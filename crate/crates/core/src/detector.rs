//! A small two-stage 3D detector with exact gradients.
//!
//! Backbone: two `3x3x3` stride-2 convolutions (1 -> 8 -> 16 channels, ReLU),
//! so the feature map is the input downsampled by [`STRIDE`]. The RPN head is
//! a `1x1x1` convolution producing, per feature voxel and anchor, one
//! objectness logit and six box offsets. The RoI head average-pools the
//! feature map inside a proposal and runs a `16 -> 32 -> 7` MLP.
//!
//! All parameters live in one flat vector described by [`ParamLayout`].
//! Losses are evaluated against a [`PatchPlan`]: the fixed, non-differentiable
//! choice of anchors, proposal boxes and targets for one patch.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{crop_patches, pad_to_multiple, ScanRecord, Volume};
use crate::geom::{decode_offsets, iou3d, nms_indices, Box3, Detection, Vec3};
use crate::losses::{
    contrastive_loss, student_total_loss, sup_detection_loss, we_loss, ContrastiveConfig,
    DetectionGrads, InstanceFeatures, InstancePrediction, LossOutput, Target, WeConfig,
};
use crate::{Error, Result};

pub const STRIDE: usize = 4;
pub const ANCHOR_SIDES: [f64; 3] = [6.0, 10.0, 16.0];
pub const NUM_ANCHORS: usize = ANCHOR_SIDES.len();
pub const C1: usize = 8;
pub const C2: usize = 16;
pub const HIDDEN: usize = 32;
/// Per anchor: one logit and six offsets.
pub const HEAD_OUT: usize = 7;
const RPN_CH: usize = NUM_ANCHORS * HEAD_OUT;
/// Smallest extent a clipped proposal keeps, in voxels.
pub const MIN_PROPOSAL_SIZE: f64 = 1.0;

pub const CHECKPOINT_MAGIC: &[u8] = b"SUPICI-CKPT-1";

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Rpn,
    Roi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub group: ParamGroup,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Shape manifest of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

const LAYERS: &[(&str, &[usize], ParamGroup)] = &[
    ("backbone.conv1.weight", &[C1, 1, 3, 3, 3], ParamGroup::Backbone),
    ("backbone.conv1.bias", &[C1], ParamGroup::Backbone),
    ("backbone.conv2.weight", &[C2, C1, 3, 3, 3], ParamGroup::Backbone),
    ("backbone.conv2.bias", &[C2], ParamGroup::Backbone),
    ("rpn.weight", &[RPN_CH, C2], ParamGroup::Rpn),
    ("rpn.bias", &[RPN_CH], ParamGroup::Rpn),
    ("roi.fc1.weight", &[HIDDEN, C2], ParamGroup::Roi),
    ("roi.fc1.bias", &[HIDDEN], ParamGroup::Roi),
    ("roi.fc2.weight", &[HEAD_OUT, HIDDEN], ParamGroup::Roi),
    ("roi.fc2.bias", &[HEAD_OUT], ParamGroup::Roi),
];

static LAYOUT: LazyLock<ParamLayout> = LazyLock::new(|| {
    let mut offset = 0;
    let segments = LAYERS
        .iter()
        .map(|(name, shape, group)| {
            let len = shape.iter().product();
            let s = Segment {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
                len,
                group: *group,
            };
            offset += len;
            s
        })
        .collect();
    ParamLayout {
        segments,
        total: offset,
    }
});

impl ParamLayout {
    pub fn standard() -> &'static ParamLayout {
        &LAYOUT
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(Segment::range)
            .unwrap_or_else(|| panic!("unknown parameter tensor {name}"))
    }

    /// Per-coordinate flag: true when the coordinate belongs to `groups`.
    pub fn mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for s in &self.segments {
            if groups.contains(&s.group) {
                m[s.range()].iter_mut().for_each(|x| *x = true);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    values: Vec<f64>,
}

impl DetectorParams {
    pub fn zeros() -> Self {
        Self {
            values: vec![0.0; LAYOUT.total],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != LAYOUT.total {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                LAYOUT.total
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self { values })
    }

    /// He-normal convolution and hidden weights, small head weights, and an
    /// objectness bias giving a low prior probability.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        let mut fill = |name: &str, std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            let r = LAYOUT.range(name);
            for v in &mut p.values[r] {
                *v = normal.sample(rng);
            }
        };
        fill("backbone.conv1.weight", (2.0 / 27.0f64).sqrt(), &mut rng);
        fill("backbone.conv2.weight", (2.0 / (27.0 * C1 as f64)).sqrt(), &mut rng);
        fill("rpn.weight", 0.01, &mut rng);
        fill("roi.fc1.weight", (2.0 / C2 as f64).sqrt(), &mut rng);
        fill("roi.fc2.weight", 0.01, &mut rng);
        let rb = LAYOUT.range("rpn.bias");
        for a in 0..NUM_ANCHORS {
            p.values[rb.start + a * HEAD_OUT] = -4.0;
        }
        p
    }

    pub fn layout(&self) -> &'static ParamLayout {
        &LAYOUT
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn tensor(&self, name: &str) -> &[f64] {
        &self.values[LAYOUT.range(name)]
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, u64 LE manifest length, JSON manifest, f64 LE values.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    layout: ParamLayout,
}

pub fn write_checkpoint(path: &Path, params: &DetectorParams) -> Result<()> {
    let manifest = serde_json::to_vec(&CheckpointManifest {
        format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        layout: LAYOUT.clone(),
    })?;
    let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + manifest.len() + 8 * params.values.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<DetectorParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        what: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| bad("missing SUPICI-CKPT-1 magic".into()))?;
    if rest.len() < 8 {
        return Err(bad("truncated manifest length".into()));
    }
    let mlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < mlen {
        return Err(bad("truncated manifest".into()));
    }
    let manifest: CheckpointManifest =
        serde_json::from_slice(&rest[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.layout != *LAYOUT {
        return Err(bad("shape manifest does not match this detector".into()));
    }
    let data = &rest[mlen..];
    if data.len() != 8 * LAYOUT.total {
        return Err(bad(format!(
            "expected {} parameter bytes, found {}",
            8 * LAYOUT.total,
            data.len()
        )));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DetectorParams::from_values(values).map_err(|e| bad(e.to_string()))
}

// ---------------------------------------------------------------------------
// Convolutions: 3x3x3 kernel, stride 2, padding 1, channel-major tensors.
// Lowered to im2col so the inner loops run over contiguous output voxels.

fn half(d: [usize; 3]) -> [usize; 3] {
    d.map(|n| n / 2)
}

/// Column matrix with one row per (input channel, kernel tap), laid out like
/// the weight tensor, and one column per output voxel. Taps falling in the
/// zero padding stay zero.
fn im2col(inp: &[f64], cin: usize, d: [usize; 3]) -> Vec<f64> {
    let o = half(d);
    let (on, inn) = (o[0] * o[1] * o[2], d[0] * d[1] * d[2]);
    let mut col = vec![0.0; cin * 27 * on];
    for ic in 0..cin {
        let in_c = &inp[ic * inn..(ic + 1) * inn];
        for k in 0..27 {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &mut col[(ic * 27 + k) * on..][..on];
            let ox0 = usize::from(kx == 0);
            for oz in usize::from(kz == 0)..o[0] {
                let iz = 2 * oz + kz - 1;
                for oy in usize::from(ky == 0)..o[1] {
                    let iy = 2 * oy + ky - 1;
                    let in_row = &in_c[(iz * d[1] + iy) * d[2]..][..d[2]];
                    let out_row = &mut row[(oz * o[1] + oy) * o[2]..][..o[2]];
                    for ox in ox0..o[2] {
                        out_row[ox] = in_row[2 * ox + kx - 1];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column-matrix gradient back onto the input grid.
fn col2im(gcol: &[f64], cin: usize, d: [usize; 3]) -> Vec<f64> {
    let o = half(d);
    let (on, inn) = (o[0] * o[1] * o[2], d[0] * d[1] * d[2]);
    let mut gin = vec![0.0; cin * inn];
    for ic in 0..cin {
        let g_c = &mut gin[ic * inn..(ic + 1) * inn];
        for k in 0..27 {
            let (kz, ky, kx) = (k / 9, (k / 3) % 3, k % 3);
            let row = &gcol[(ic * 27 + k) * on..][..on];
            let ox0 = usize::from(kx == 0);
            for oz in usize::from(kz == 0)..o[0] {
                let iz = 2 * oz + kz - 1;
                for oy in usize::from(ky == 0)..o[1] {
                    let iy = 2 * oy + ky - 1;
                    let g_row = &mut g_c[(iz * d[1] + iy) * d[2]..][..d[2]];
                    let src = &row[(oz * o[1] + oy) * o[2]..][..o[2]];
                    for ox in ox0..o[2] {
                        g_row[2 * ox + kx - 1] += src[ox];
                    }
                }
            }
        }
    }
    gin
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv_forward(col: &[f64], w: &[f64], b: &[f64], cout: usize, on: usize) -> Vec<f64> {
    let k = col.len() / on;
    let mut out = vec![0.0; cout * on];
    for oc in 0..cout {
        let out_c = &mut out[oc * on..(oc + 1) * on];
        out_c.fill(b[oc]);
        for r in 0..k {
            let wv = w[oc * k + r];
            if wv != 0.0 {
                axpy(out_c, wv, &col[r * on..(r + 1) * on]);
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the column-matrix gradient
/// when `want_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    col: &[f64],
    w: &[f64],
    cout: usize,
    on: usize,
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let k = col.len() / on;
    let mut gcol = want_input.then(|| vec![0.0; col.len()]);
    for oc in 0..cout {
        let g_c = &gout[oc * on..(oc + 1) * on];
        if g_c.iter().all(|g| *g == 0.0) {
            continue;
        }
        gb[oc] += g_c.iter().sum::<f64>();
        for r in 0..k {
            let c_r = &col[r * on..(r + 1) * on];
            gw[oc * k + r] += dot(g_c, c_r);
            if let Some(gcol) = gcol.as_mut() {
                axpy(&mut gcol[r * on..(r + 1) * on], w[oc * k + r], g_c);
            }
        }
    }
    gcol
}

// ---------------------------------------------------------------------------
// Forward pass

/// Backbone output: `C2` channels over `dims`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel_vector(&self, v: usize) -> Vec<f64> {
        let n = self.voxels();
        (0..C2).map(|c| self.data[c * n + v]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorGrid {
    pub dims: [usize; 3],
    pub stride: usize,
}

impl AnchorGrid {
    pub fn new(feature_dims: [usize; 3]) -> Self {
        Self {
            dims: feature_dims,
            stride: STRIDE,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product::<usize>() * NUM_ANCHORS
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor `i` is anchor size `i % NUM_ANCHORS` at feature voxel
    /// `i / NUM_ANCHORS`.
    pub fn anchor(&self, i: usize) -> Box3 {
        let v = i / NUM_ANCHORS;
        let a = i % NUM_ANCHORS;
        let (hw, w) = (self.dims[1] * self.dims[2], self.dims[2]);
        let idx = [v / hw, (v / w) % self.dims[1], v % w];
        let s = self.stride as f64;
        Box3::cube(idx.map(|k| (k as f64 + 0.5) * s), ANCHOR_SIDES[a]).expect("positive anchor")
    }

    pub fn boxes(&self) -> Vec<Box3> {
        (0..self.len()).map(|i| self.anchor(i)).collect()
    }

    pub fn bounds(&self) -> Vec3 {
        self.dims.map(|d| (d * self.stride) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub offsets: Vec<[f64; 6]>,
}

/// Intermediate activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardState {
    input_dims: [usize; 3],
    col1: Vec<f64>,
    z1: Vec<f64>,
    col2: Vec<f64>,
    z2: Vec<f64>,
    pub features: FeatureMap,
    pub rpn: RpnOutput,
}

impl ForwardState {
    pub fn anchors(&self) -> AnchorGrid {
        AnchorGrid::new(self.features.dims)
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Backbone and RPN on one volume whose sides are multiples of [`STRIDE`].
/// Voxels are scaled from `[0, 255]` to `[0, 1]`.
pub fn forward(params: &DetectorParams, patch: &Volume<u8>) -> Result<ForwardState> {
    let d = patch.dims();
    if d.iter().any(|&n| n == 0 || n % STRIDE != 0) {
        return Err(Error::invalid(format!(
            "volume dims {d:?} must be positive multiples of {STRIDE}"
        )));
    }
    let input: Vec<f64> = patch.data().iter().map(|&v| v as f64 / 255.0).collect();
    let d1 = half(d);
    let d2 = half(d1);
    let n1 = d1.iter().product::<usize>();
    let n2 = d2.iter().product::<usize>();
    let col1 = im2col(&input, 1, d);
    let z1 = conv_forward(
        &col1,
        params.tensor("backbone.conv1.weight"),
        params.tensor("backbone.conv1.bias"),
        C1,
        n1,
    );
    let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    let col2 = im2col(&a1, C1, d1);
    let z2 = conv_forward(
        &col2,
        params.tensor("backbone.conv2.weight"),
        params.tensor("backbone.conv2.bias"),
        C2,
        n2,
    );
    let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();

    let (w, b) = (params.tensor("rpn.weight"), params.tensor("rpn.bias"));
    let mut raw = vec![0.0; RPN_CH * n2];
    for o in 0..RPN_CH {
        let row = &mut raw[o * n2..(o + 1) * n2];
        row.fill(b[o]);
        for c in 0..C2 {
            let wv = w[o * C2 + c];
            let feat = &a2[c * n2..(c + 1) * n2];
            for (r, f) in row.iter_mut().zip(feat) {
                *r += wv * f;
            }
        }
    }
    let n_anchor = n2 * NUM_ANCHORS;
    let mut logits = Vec::with_capacity(n_anchor);
    let mut offsets = Vec::with_capacity(n_anchor);
    for v in 0..n2 {
        for a in 0..NUM_ANCHORS {
            let base = a * HEAD_OUT;
            logits.push(raw[base * n2 + v]);
            offsets.push(std::array::from_fn(|k| raw[(base + 1 + k) * n2 + v]));
        }
    }
    let probs = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(ForwardState {
        input_dims: d,
        col1,
        z1,
        col2,
        z2,
        features: FeatureMap { dims: d2, data: a2 },
        rpn: RpnOutput {
            logits,
            probs,
            offsets,
        },
    })
}

/// Flat feature-voxel indices pooled for `bbox` (input-voxel coordinates):
/// voxels whose centers fall inside the box scaled by `1/STRIDE`, or the
/// single voxel nearest the box center when none do.
pub fn pool_indices(dims: [usize; 3], bbox: &Box3) -> Vec<usize> {
    let s = STRIDE as f64;
    let (lo, hi, c) = (bbox.lo(), bbox.hi(), bbox.center());
    let mut ranges = [(0usize, 0usize); 3];
    let mut empty = false;
    for a in 0..3 {
        let first = ((lo[a] / s) - 0.5).ceil().max(0.0);
        let last = ((hi[a] / s) - 0.5).floor().min(dims[a] as f64 - 1.0);
        if last < first {
            empty = true;
            break;
        }
        ranges[a] = (first as usize, last as usize);
    }
    if empty {
        let v = [0, 1, 2].map(|a| ((c[a] / s).floor().max(0.0) as usize).min(dims[a] - 1));
        return vec![(v[0] * dims[1] + v[1]) * dims[2] + v[2]];
    }
    let mut out = Vec::new();
    for z in ranges[0].0..=ranges[0].1 {
        for y in ranges[1].0..=ranges[1].1 {
            for x in ranges[2].0..=ranges[2].1 {
                out.push((z * dims[1] + y) * dims[2] + x);
            }
        }
    }
    out
}

pub fn roi_features(features: &FeatureMap, bbox: &Box3) -> Vec<f64> {
    pool(features, &pool_indices(features.dims, bbox))
}

fn pool(features: &FeatureMap, idx: &[usize]) -> Vec<f64> {
    let n = features.voxels();
    let inv = 1.0 / idx.len() as f64;
    (0..C2)
        .map(|c| idx.iter().map(|&v| features.data[c * n + v]).sum::<f64>() * inv)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiOutput {
    pub logit: f64,
    pub prob: f64,
    pub offsets: [f64; 6],
    hidden_pre: Vec<f64>,
}

pub fn forward_roi(params: &DetectorParams, pooled: &[f64]) -> RoiOutput {
    let (w1, b1) = (params.tensor("roi.fc1.weight"), params.tensor("roi.fc1.bias"));
    let (w2, b2) = (params.tensor("roi.fc2.weight"), params.tensor("roi.fc2.bias"));
    let hidden_pre: Vec<f64> = (0..HIDDEN)
        .map(|h| b1[h] + (0..C2).map(|c| w1[h * C2 + c] * pooled[c]).sum::<f64>())
        .collect();
    let out: Vec<f64> = (0..HEAD_OUT)
        .map(|o| b2[o] + (0..HIDDEN).map(|h| w2[o * HIDDEN + h] * hidden_pre[h].max(0.0)).sum::<f64>())
        .collect();
    RoiOutput {
        logit: out[0],
        prob: sigmoid(out[0]),
        offsets: std::array::from_fn(|k| out[k + 1]),
        hidden_pre,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: Box3,
    pub score: f64,
    pub anchor: usize,
}

/// Decodes the highest-scoring `pre_nms` anchors, clips them to `bounds`,
/// applies NMS and keeps the best `top_n`.
pub fn propose(
    rpn: &RpnOutput,
    anchors: &AnchorGrid,
    top_n: usize,
    nms_iou: f64,
    pre_nms: usize,
) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..rpn.probs.len()).collect();
    order.sort_by(|&i, &j| rpn.probs[j].total_cmp(&rpn.probs[i]));
    order.truncate(pre_nms.max(top_n));
    let bounds = anchors.bounds();
    let boxes: Vec<Box3> = order
        .iter()
        .map(|&i| decode_offsets(&rpn.offsets[i], &anchors.anchor(i)).clip_to(bounds, MIN_PROPOSAL_SIZE))
        .collect();
    let scores: Vec<f64> = order.iter().map(|&i| rpn.probs[i]).collect();
    nms_indices(&boxes, &scores, nms_iou)
        .into_iter()
        .take(top_n)
        .map(|k| Proposal {
            bbox: boxes[k],
            score: scores[k],
            anchor: order[k],
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Plans and losses

/// Fixed selections for one patch: which anchors and boxes enter the loss
/// and with which targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchPlan {
    pub rpn: Vec<(usize, Target)>,
    /// RoI boxes; `Ignore` entries still feed the weighted-entropy term.
    pub roi: Vec<(Box3, Target)>,
    pub contrastive_fg: Vec<Box3>,
    pub contrastive_bg: Vec<Box3>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Contrastive(ContrastiveConfig),
    Supervised,
    StudentTotal { eta: f64, we: WeConfig },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Contrastive(_) => "contrastive",
            LossSpec::Supervised => "supervised",
            LossSpec::StudentTotal { .. } => "student_total",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanStats {
    pub roi_probs: Vec<f64>,
    pub active: bool,
}

fn finite(value: f64, term: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term })
    }
}

/// Loss value and exact parameter gradient for one patch under a fixed plan.
pub fn plan_loss(
    params: &DetectorParams,
    patch: &Volume<u8>,
    plan: &PatchPlan,
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>, PlanStats)> {
    let st = forward(params, patch)?;
    let n2 = st.features.voxels();
    let mut grad = vec![0.0; LAYOUT.total];
    let mut d_rpn = vec![0.0; RPN_CH * n2];
    let mut d_a2 = vec![0.0; C2 * n2];
    let mut value = 0.0;
    let mut stats = PlanStats::default();

    let roi_idx: Vec<Vec<usize>> = plan.roi.iter().map(|(b, _)| pool_indices(st.features.dims, b)).collect();
    let scatter_pooled = |d_a2: &mut [f64], idx: &[usize], g: &[f64]| {
        let inv = 1.0 / idx.len() as f64;
        for c in 0..C2 {
            let gc = g[c] * inv;
            if gc != 0.0 {
                for &v in idx {
                    d_a2[c * n2 + v] += gc;
                }
            }
        }
    };

    match spec {
        LossSpec::Supervised | LossSpec::StudentTotal { .. } => {
            let rpn_preds: Vec<InstancePrediction> = plan
                .rpn
                .iter()
                .map(|(i, _)| InstancePrediction {
                    prob: st.rpn.probs[*i],
                    offsets: st.rpn.offsets[*i],
                })
                .collect();
            let rpn_targets: Vec<Target> = plan.rpn.iter().map(|(_, t)| *t).collect();
            let pooled: Vec<Vec<f64>> = roi_idx.iter().map(|idx| pool(&st.features, idx)).collect();
            let roi_out: Vec<RoiOutput> = pooled.iter().map(|p| forward_roi(params, p)).collect();
            let roi_preds: Vec<InstancePrediction> = roi_out
                .iter()
                .map(|r| InstancePrediction {
                    prob: r.prob,
                    offsets: r.offsets,
                })
                .collect();
            let roi_targets: Vec<Target> = plan.roi.iter().map(|(_, t)| *t).collect();
            let sup = sup_detection_loss(&rpn_preds, &rpn_targets, &roi_preds, &roi_targets)?;
            finite(sup.value, "sup_detection")?;
            stats.roi_probs = roi_preds.iter().map(|p| p.prob).collect();
            let total = match spec {
                LossSpec::StudentTotal { eta, we } => {
                    let w = we_loss(&stats.roi_probs, we);
                    finite(w.value, "weighted_entropy")?;
                    let unsup = LossOutput {
                        value: w.value,
                        grad: DetectionGrads::from_roi_probs(rpn_preds.len(), &w.grad),
                        active: w.active,
                    };
                    student_total_loss(&sup, &unsup, *eta)?
                }
                _ => sup,
            };
            value += finite(total.value, "student_total")?;
            stats.active |= total.active;

            for ((i, _), g) in plan.rpn.iter().zip(&total.grad.rpn) {
                let (v, a) = (i / NUM_ANCHORS, i % NUM_ANCHORS);
                let p = st.rpn.probs[*i];
                let base = a * HEAD_OUT;
                d_rpn[base * n2 + v] += g.prob * p * (1.0 - p);
                for k in 0..6 {
                    d_rpn[(base + 1 + k) * n2 + v] += g.offsets[k];
                }
            }
            for (((r, g), p), idx) in roi_out.iter().zip(&total.grad.roi).zip(&pooled).zip(&roi_idx) {
                let mut d_out = [0.0; HEAD_OUT];
                d_out[0] = g.prob * r.prob * (1.0 - r.prob);
                d_out[1..].copy_from_slice(&g.offsets);
                let d_pooled = roi_backward(params, p, r, &d_out, &mut grad);
                scatter_pooled(&mut d_a2, idx, &d_pooled);
            }
        }
        LossSpec::Contrastive(cfg) => {
            let fg_idx: Vec<Vec<usize>> =
                plan.contrastive_fg.iter().map(|b| pool_indices(st.features.dims, b)).collect();
            let bg_idx: Vec<Vec<usize>> =
                plan.contrastive_bg.iter().map(|b| pool_indices(st.features.dims, b)).collect();
            let fg: Vec<Vec<f64>> = fg_idx.iter().map(|i| pool(&st.features, i)).collect();
            let bg: Vec<Vec<f64>> = bg_idx.iter().map(|i| pool(&st.features, i)).collect();
            let feats = InstanceFeatures::new(fg, bg)?;
            let out = contrastive_loss(&feats, cfg)?;
            value += finite(out.value, "contrastive")?;
            stats.active |= out.active;
            for (idx, g) in fg_idx.iter().zip(&out.grad.foreground) {
                scatter_pooled(&mut d_a2, idx, g);
            }
            for (idx, g) in bg_idx.iter().zip(&out.grad.background) {
                scatter_pooled(&mut d_a2, idx, g);
            }
        }
    }

    backbone_backward(params, &st, &d_rpn, d_a2, &mut grad);
    Ok((value, grad, stats))
}

fn roi_backward(
    params: &DetectorParams,
    pooled: &[f64],
    r: &RoiOutput,
    d_out: &[f64; HEAD_OUT],
    grad: &mut [f64],
) -> Vec<f64> {
    let (w1, w2) = (params.tensor("roi.fc1.weight"), params.tensor("roi.fc2.weight"));
    let (rw1, rb1) = (LAYOUT.range("roi.fc1.weight"), LAYOUT.range("roi.fc1.bias"));
    let (rw2, rb2) = (LAYOUT.range("roi.fc2.weight"), LAYOUT.range("roi.fc2.bias"));
    let mut d_hidden = [0.0; HIDDEN];
    for o in 0..HEAD_OUT {
        let d = d_out[o];
        if d == 0.0 {
            continue;
        }
        grad[rb2.start + o] += d;
        for h in 0..HIDDEN {
            grad[rw2.start + o * HIDDEN + h] += d * r.hidden_pre[h].max(0.0);
            d_hidden[h] += d * w2[o * HIDDEN + h];
        }
    }
    let mut d_pooled = vec![0.0; C2];
    for h in 0..HIDDEN {
        if r.hidden_pre[h] <= 0.0 || d_hidden[h] == 0.0 {
            continue;
        }
        let d = d_hidden[h];
        grad[rb1.start + h] += d;
        for c in 0..C2 {
            grad[rw1.start + h * C2 + c] += d * pooled[c];
            d_pooled[c] += d * w1[h * C2 + c];
        }
    }
    d_pooled
}

fn backbone_backward(
    params: &DetectorParams,
    st: &ForwardState,
    d_rpn: &[f64],
    mut d_a2: Vec<f64>,
    grad: &mut [f64],
) {
    let n2 = st.features.voxels();
    let w = params.tensor("rpn.weight");
    let (rw, rb) = (LAYOUT.range("rpn.weight"), LAYOUT.range("rpn.bias"));
    for o in 0..RPN_CH {
        let d_row = &d_rpn[o * n2..(o + 1) * n2];
        if d_row.iter().all(|x| *x == 0.0) {
            continue;
        }
        grad[rb.start + o] += d_row.iter().sum::<f64>();
        for c in 0..C2 {
            let feat = &st.features.data[c * n2..(c + 1) * n2];
            grad[rw.start + o * C2 + c] += d_row.iter().zip(feat).map(|(d, f)| d * f).sum::<f64>();
            let wv = w[o * C2 + c];
            for (g, d) in d_a2[c * n2..(c + 1) * n2].iter_mut().zip(d_row) {
                *g += wv * d;
            }
        }
    }
    if d_a2.iter().all(|x| *x == 0.0) {
        return;
    }
    for (g, z) in d_a2.iter_mut().zip(&st.z2) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let d = st.input_dims;
    let d1 = half(d);
    let n1 = d1.iter().product::<usize>();
    let n2 = half(d1).iter().product::<usize>();
    let (w2r, b2r) = (LAYOUT.range("backbone.conv2.weight"), LAYOUT.range("backbone.conv2.bias"));
    let (w1r, b1r) = (LAYOUT.range("backbone.conv1.weight"), LAYOUT.range("backbone.conv1.bias"));
    let (mut gw2, mut gb2) = (vec![0.0; w2r.len()], vec![0.0; b2r.len()]);
    let gcol2 = conv_backward(
        &st.col2,
        params.tensor("backbone.conv2.weight"),
        C2,
        n2,
        &d_a2,
        &mut gw2,
        &mut gb2,
        true,
    )
    .expect("input gradient requested");
    let mut d_a1 = col2im(&gcol2, C1, d1);
    for (g, z) in d_a1.iter_mut().zip(&st.z1) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    let (mut gw1, mut gb1) = (vec![0.0; w1r.len()], vec![0.0; b1r.len()]);
    conv_backward(
        &st.col1,
        params.tensor("backbone.conv1.weight"),
        C1,
        n1,
        &d_a1,
        &mut gw1,
        &mut gb1,
        false,
    );
    for (range, g) in [(w2r, gw2), (b2r, gb2), (w1r, gw1), (b1r, gb1)] {
        for (dst, v) in grad[range].iter_mut().zip(g) {
            *dst += v;
        }
    }
}

/// Mean loss and gradient over a batch, reduced in patch order.
pub fn plan_loss_batch(
    params: &DetectorParams,
    patches: &[Volume<u8>],
    plans: &[PatchPlan],
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>)> {
    let (v, g, _) = loss_gradient(params, patches, plans, spec)?;
    Ok((v, g))
}

/// Batch loss gradient: per-patch losses under fixed plans, evaluated in
/// parallel and averaged in patch order. Also returns per-patch stats.
pub fn loss_gradient(
    params: &DetectorParams,
    patches: &[Volume<u8>],
    plans: &[PatchPlan],
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>, Vec<PlanStats>)> {
    if patches.len() != plans.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches but {} plans",
            patches.len(),
            plans.len()
        )));
    }
    if patches.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    let per: Vec<Result<(f64, Vec<f64>, PlanStats)>> = patches
        .par_iter()
        .zip(plans.par_iter())
        .map(|(p, plan)| plan_loss(params, p, plan, spec))
        .collect();
    let inv = 1.0 / patches.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; LAYOUT.total];
    let mut stats = Vec::with_capacity(per.len());
    for r in per {
        let (v, g, s) = r?;
        value += v * inv;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b * inv;
        }
        stats.push(s);
    }
    Ok((value, grad, stats))
}

// ---------------------------------------------------------------------------
// Target assignment

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            positive_iou: 0.3,
            negative_iou: 0.1,
        }
    }
}

/// IoU-based targets: positive at IoU `>= positive_iou` or when the
/// candidate is a ground-truth box's best match, negative below
/// `negative_iou`, ignored in between. Offsets encode the matched box
/// relative to the candidate.
pub fn assign_by_iou(gt: &[Box3], candidates: &[Box3], cfg: &AssignConfig) -> Vec<Target> {
    let mut best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); candidates.len()];
    let mut forced: Vec<Option<usize>> = vec![None; candidates.len()];
    for (g, gbox) in gt.iter().enumerate() {
        let mut arg: Option<(f64, usize)> = None;
        for (c, cbox) in candidates.iter().enumerate() {
            let iou = iou3d(gbox, cbox);
            if iou > best[c].0 {
                best[c] = (iou, g);
            }
            if iou > 0.0 && arg.is_none_or(|(b, _)| iou > b) {
                arg = Some((iou, c));
            }
        }
        if let Some((_, c)) = arg {
            if forced[c].is_none() {
                forced[c] = Some(g);
            }
        }
    }
    candidates
        .iter()
        .enumerate()
        .map(|(c, cbox)| {
            let (iou, g) = best[c];
            if iou >= cfg.positive_iou {
                Target::Positive(crate::geom::encode_offsets(&gt[g], cbox))
            } else if let Some(fg) = forced[c] {
                Target::Positive(crate::geom::encode_offsets(&gt[fg], cbox))
            } else if iou < cfg.negative_iou {
                Target::Negative
            } else {
                Target::Ignore
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Optimiser

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight decay be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<f64>,
    pub cfg: SgdConfig,
    trainable: Vec<bool>,
}

impl OptimState {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            velocity: vec![0.0; LAYOUT.total],
            cfg,
            trainable: vec![true; LAYOUT.total],
        }
    }

    /// Restricts updates to the given parameter groups.
    pub fn with_groups(mut self, groups: &[ParamGroup]) -> Self {
        self.trainable = LAYOUT.mask(groups);
        self
    }
}

/// `v <- momentum * v + grad + weight_decay * params; params <- params - lr * v`
/// on trainable coordinates.
pub fn sgd_step(params: &mut DetectorParams, grad: &[f64], opt: &mut OptimState) -> Result<()> {
    if grad.len() != params.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} values, parameters {}",
            grad.len(),
            params.values.len()
        )));
    }
    let SgdConfig { lr, momentum, weight_decay, .. } = opt.cfg;
    let slots = grad.iter().zip(&opt.trainable).zip(opt.velocity.iter_mut()).zip(params.values.iter_mut());
    for (((&g, &trainable), vel), w) in slots {
        if trainable {
            *vel = momentum * *vel + g + weight_decay * *w;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference and source training

/// How a refined detection is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Geometric mean of the RPN objectness and the RoI probability, so a box
    /// must convince both stages.
    #[default]
    Product,
    /// RoI probability alone.
    Roi,
}

impl ScoreMode {
    pub fn combine(self, rpn_prob: f64, roi_prob: f64) -> f64 {
        match self {
            Self::Product => (rpn_prob * roi_prob).sqrt(),
            Self::Roi => roi_prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Training patch side, a multiple of the stride.
    pub patch_side: usize,
    pub patch_overlap: usize,
    /// Proposals kept after NMS.
    pub top_n: usize,
    /// Anchors decoded before NMS.
    pub pre_nms: usize,
    pub nms_iou: f64,
    /// Highest-scoring negative anchors per patch in the RPN loss.
    pub hard_negatives: usize,
    /// Uniformly drawn negative anchors per patch in the RPN loss.
    pub random_negatives: usize,
    pub assign: AssignConfig,
    pub score: ScoreMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            patch_side: 32,
            patch_overlap: 0,
            top_n: 64,
            pre_nms: 256,
            nms_iou: 0.1,
            hard_negatives: 16,
            random_negatives: 16,
            assign: AssignConfig::default(),
            score: ScoreMode::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || !self.patch_side.is_multiple_of(STRIDE) {
            return Err(Error::invalid(format!(
                "patch_side {} must be a positive multiple of {STRIDE}",
                self.patch_side
            )));
        }
        if self.top_n == 0 {
            return Err(Error::invalid("top_n must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("nms_iou must lie in [0, 1]"));
        }
        let a = &self.assign;
        if !(0.0 <= a.negative_iou && a.negative_iou <= a.positive_iou && a.positive_iou <= 1.0) {
            return Err(Error::invalid("need 0 <= negative_iou <= positive_iou <= 1"));
        }
        Ok(())
    }
}

/// Runs both stages on a whole scan (padded to the stride with the pad value)
/// and returns RoI-refined detections after NMS, in scan coordinates, scored
/// per `cfg.score`.
pub fn detect(params: &DetectorParams, volume: &Volume<u8>, cfg: &DetectorConfig) -> Result<Vec<Detection>> {
    let padded = pad_to_multiple(volume, STRIDE);
    let st = forward(params, &padded)?;
    let anchors = st.anchors();
    let proposals = propose(&st.rpn, &anchors, cfg.top_n, cfg.nms_iou, cfg.pre_nms);
    let bounds = anchors.bounds();
    let mut boxes = Vec::with_capacity(proposals.len());
    let mut scores = Vec::with_capacity(proposals.len());
    for p in &proposals {
        let r = forward_roi(params, &roi_features(&st.features, &p.bbox));
        boxes.push(decode_offsets(&r.offsets, &p.bbox).clip_to(bounds, MIN_PROPOSAL_SIZE));
        scores.push(cfg.score.combine(p.score, r.prob));
    }
    nms_indices(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .map(|k| Detection::new(boxes[k], scores[k]))
        .collect()
}

/// RPN anchors for the supervised loss: every non-ignored positive, the
/// hardest negatives by current score, and a seeded uniform draw of the rest.
pub fn select_rpn_instances(
    targets: &[Target],
    probs: &[f64],
    cfg: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Target)> {
    let mut out: Vec<(usize, Target)> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, Target::Positive(_)))
        .map(|(i, t)| (i, *t))
        .collect();
    let mut neg: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == Target::Negative).collect();
    neg.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]));
    let hard = cfg.hard_negatives.min(neg.len());
    out.extend(neg[..hard].iter().map(|&i| (i, Target::Negative)));
    let mut rest = neg[hard..].to_vec();
    rest.shuffle(rng);
    out.extend(rest.iter().take(cfg.random_negatives).map(|&i| (i, Target::Negative)));
    out
}

/// Supervised plan against known boxes: RPN anchors by IoU, RoI candidates
/// are the model's own proposals plus the ground-truth boxes.
pub fn supervised_plan(
    st: &ForwardState,
    gt: &[Box3],
    cfg: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> PatchPlan {
    let anchors = st.anchors();
    let targets = assign_by_iou(gt, &anchors.boxes(), &cfg.assign);
    let rpn = select_rpn_instances(&targets, &st.rpn.probs, cfg, rng);
    let mut roi_boxes: Vec<Box3> = propose(&st.rpn, &anchors, cfg.top_n, cfg.nms_iou, cfg.pre_nms)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    roi_boxes.extend_from_slice(gt);
    let roi_targets = assign_by_iou(gt, &roi_boxes, &cfg.assign);
    PatchPlan {
        rpn,
        roi: roi_boxes.into_iter().zip(roi_targets).collect(),
        ..PatchPlan::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub init_seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            sgd: SgdConfig {
                lr: 0.002,
                ..SgdConfig::default()
            },
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
}

/// A training patch with its annotations in patch coordinates.
#[derive(Debug, Clone)]
pub struct TrainPatch {
    pub voxels: Volume<u8>,
    pub boxes: Vec<Box3>,
}

pub fn labeled_patches(scans: &[ScanRecord], cfg: &DetectorConfig) -> Result<Vec<TrainPatch>> {
    let mut out = Vec::new();
    for s in scans {
        for p in crop_patches(&s.voxels, cfg.patch_side, cfg.patch_overlap)? {
            let boxes = p.annotations_within(&s.annotations).iter().map(|a| a.as_box()).collect();
            out.push(TrainPatch { voxels: p.voxels, boxes });
        }
    }
    Ok(out)
}

/// Seeded epoch order of `n` items, split into batches.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Supervised training on labeled source scans. Calls `on_epoch` after every
/// epoch with the epoch index, mean loss and current parameters (used for
/// checkpointing).
pub fn train_source(
    scans: &[ScanRecord],
    det_cfg: &DetectorConfig,
    train_cfg: &SourceTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &DetectorParams) -> Result<()>,
) -> Result<(DetectorParams, TrainHistory)> {
    det_cfg.validate()?;
    train_cfg.sgd.validate()?;
    let patches = labeled_patches(scans, det_cfg)?;
    if patches.is_empty() {
        return Err(Error::Empty("no source patches to train on".into()));
    }
    let mut params = DetectorParams::init(train_cfg.init_seed ^ seed);
    let mut opt = OptimState::new(train_cfg.sgd);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = TrainHistory { epoch_losses: Vec::new() };
    for epoch in 0..train_cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(patches.len(), train_cfg.sgd.batch_size, &mut rng);
        for batch in &batches {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let plans: Vec<Result<PatchPlan>> = batch
                .par_iter()
                .zip(&seeds)
                .map(|(&i, &s)| {
                    let st = forward(&params, &patches[i].voxels)?;
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    Ok(supervised_plan(&st, &patches[i].boxes, det_cfg, &mut r))
                })
                .collect();
            let plans = plans.into_iter().collect::<Result<Vec<_>>>()?;
            let vols: Vec<Volume<u8>> = batch.iter().map(|&i| patches[i].voxels.clone()).collect();
            let (v, g, _) = loss_gradient(&params, &vols, &plans, &LossSpec::Supervised)?;
            sgd_step(&mut params, &g, &mut opt)?;
            total += v;
        }
        let mean = total / batches.len() as f64;
        log::info!("source epoch {epoch}: loss {mean:.4}");
        history.epoch_losses.push(mean);
        on_epoch(epoch, mean, &params)?;
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_detector_suite, detector_check_case, spread_params};

    fn random_volume(side: usize, seed: u64) -> Volume<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..side * side * side).map(|_| rng.random()).collect();
        Volume::new([side; 3], data).unwrap()
    }

    #[test]
    fn layout_counts() {
        let l = ParamLayout::standard();
        assert_eq!(l.total(), 224 + 3472 + 357 + 544 + 231);
        assert_eq!(l.mask(&[ParamGroup::Roi]).iter().filter(|x| **x).count(), 775);
    }

    #[test]
    fn zero_model_gives_half_probabilities() {
        let p = DetectorParams::zeros();
        let st = forward(&p, &Volume::filled([32; 3], 0u8)).unwrap();
        assert_eq!(st.features.dims, [8; 3]);
        assert_eq!(st.rpn.probs.len(), 8 * 8 * 8 * 3);
        assert!(st.rpn.probs.iter().all(|&x| x == 0.5));
        let r = forward_roi(&p, &[0.0; C2]);
        assert_eq!(r.prob, 0.5);
        assert_eq!(r.offsets, [0.0; 6]);
    }

    #[test]
    fn forward_rejects_bad_dims_and_is_deterministic() {
        let p = DetectorParams::init(1);
        assert!(forward(&p, &Volume::filled([30, 32, 32], 0u8)).is_err());
        let v = random_volume(16, 3);
        let a = forward(&p, &v).unwrap();
        let b = forward(&p, &v).unwrap();
        assert_eq!(a.rpn, b.rpn);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn forward_is_translation_consistent() {
        let p = spread_params(4);
        let big = random_volume(36, 5);
        let crop = |z0: usize| {
            let mut data = Vec::new();
            for z in z0..z0 + 32 {
                for y in 0..32 {
                    for x in 0..32 {
                        data.push(big.get(z, y, x));
                    }
                }
            }
            Volume::new([32; 3], data).unwrap()
        };
        let a = forward(&p, &crop(0)).unwrap().features;
        let b = forward(&p, &crop(4)).unwrap().features;
        let n = a.voxels();
        for c in 0..C2 {
            for z in 1..7 {
                for y in 1..7 {
                    for x in 1..7 {
                        let ia = ((z + 1) * 8 + y) * 8 + x;
                        let ib = (z * 8 + y) * 8 + x;
                        assert!((a.data[c * n + ia] - b.data[c * n + ib]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn anchors_tile_the_feature_map() {
        let g = AnchorGrid::new([2, 2, 2]);
        assert_eq!(g.len(), 24);
        let a = g.anchor(0);
        assert_eq!(a.center(), [2.0; 3]);
        assert_eq!(a.size(), [6.0; 3]);
        let last = g.anchor(23);
        assert_eq!(last.center(), [6.0; 3]);
        assert_eq!(last.size(), [16.0; 3]);
    }

    #[test]
    fn roi_pooling_examples() {
        let dims = [4, 4, 4];
        let n = 64;
        let constant = FeatureMap { dims, data: vec![2.5; C2 * n] };
        let b = Box3::from_corners([0.0; 3], [16.0; 3]).unwrap();
        assert_eq!(roi_features(&constant, &b), vec![2.5; C2]);

        let mut data = vec![0.0; C2 * n];
        for c in 0..C2 {
            data[c * n + 4 + 1] = 1.0 + c as f64; // voxel (0,1,1)
            data[c * n + 4 + 2] = 3.0 + c as f64; // voxel (0,1,2)
        }
        let fm = FeatureMap { dims, data };
        let one = Box3::from_corners([0.0, 4.0, 4.0], [4.0, 8.0, 8.0]).unwrap();
        assert_eq!(pool_indices(dims, &one), vec![4 + 1]);
        assert_eq!(roi_features(&fm, &one)[0], 1.0);
        let two = Box3::from_corners([0.0, 4.0, 4.0], [4.0, 8.0, 12.0]).unwrap();
        let f = roi_features(&fm, &two);
        assert_eq!(f[0], 2.0);
        assert_eq!(f[5], 7.0);

        // a box too small to contain any voxel center falls back to the nearest voxel
        let tiny = Box3::cube([1.0, 5.0, 5.0], 0.5).unwrap();
        assert_eq!(pool_indices(dims, &tiny), vec![4 + 1]);
    }

    #[test]
    fn propose_examples() {
        let p = DetectorParams::zeros();
        let st = forward(&p, &Volume::filled([16; 3], 0u8)).unwrap();
        let g = st.anchors();
        let a = propose(&st.rpn, &g, 5, 0.1, 256);
        let b = propose(&st.rpn, &g, 5, 0.1, 256);
        assert_eq!(a, b);
        assert!(a.len() <= 5);
        assert!(!a.is_empty());

        let mut rpn = st.rpn.clone();
        rpn.probs[17] = 0.99;
        let props = propose(&rpn, &g, 4, 0.1, 256);
        assert_eq!(props[0].anchor, 17);
        assert_eq!(props[0].score, 0.99);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            for v in rpn.probs.iter_mut() {
                *v = rng.random();
            }
            for o in rpn.offsets.iter_mut() {
                *o = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
            }
            let n = rng.random_range(1..30);
            let props = propose(&rpn, &g, n, 0.3, 256);
            assert!(props.len() <= n);
            for pr in &props {
                for a in 0..3 {
                    assert!(pr.bbox.lo()[a] >= 0.0 && pr.bbox.hi()[a] <= 16.0);
                }
            }
        }
    }

    #[test]
    fn roi_probabilities_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let vals = (0..LAYOUT.total).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = DetectorParams::from_values(vals).unwrap();
            let pooled: Vec<f64> = (0..C2).map(|_| rng.random_range(0.0..3.0)).collect();
            let r = forward_roi(&p, &pooled);
            assert!((0.0..=1.0).contains(&r.prob));
            assert_eq!(r, forward_roi(&p, &pooled));
        }
    }

    #[test]
    fn assignment_examples() {
        let anchors: Vec<Box3> = AnchorGrid::new([2, 2, 2]).boxes();
        assert!(assign_by_iou(&[], &anchors, &AssignConfig::default())
            .iter()
            .all(|t| *t == Target::Negative));
        let t = assign_by_iou(&[anchors[4]], &anchors, &AssignConfig::default());
        assert_eq!(t[4], Target::Positive([0.0; 6]));
    }

    #[test]
    fn sgd_examples() {
        let mut p = DetectorParams::init(1);
        let before = p.clone();
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::default() };
        let mut opt = OptimState::new(cfg);
        sgd_step(&mut p, &vec![0.0; LAYOUT.total], &mut opt).unwrap();
        assert_eq!(p, before);

        let g: Vec<f64> = (0..LAYOUT.total).map(|i| (i % 7) as f64 - 3.0).collect();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        for ((b, gi), v) in before.values.iter().zip(&g).zip(&p.values) {
            assert!((b - cfg.lr * gi - v).abs() < 1e-15);
        }
        sgd_step(&mut p, &g, &mut opt).unwrap();
        for ((b, gi), v) in before.values.iter().zip(&g).zip(&p.values) {
            let expect = b - cfg.lr * (2.0 + cfg.momentum) * gi;
            assert!((expect - v).abs() < 1e-12);
        }
        assert!(sgd_step(&mut p, &[0.0], &mut opt).is_err());
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut p = DetectorParams::init(1);
        let before = p.clone();
        let mut opt = OptimState::new(SgdConfig::default()).with_groups(&[ParamGroup::Backbone, ParamGroup::Rpn]);
        sgd_step(&mut p, &vec![1.0; LAYOUT.total], &mut opt).unwrap();
        let roi = LAYOUT.mask(&[ParamGroup::Roi]);
        for ((v, b), frozen) in p.values.iter().zip(&before.values).zip(roi) {
            assert_eq!(v == b, frozen);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = DetectorParams::init(9);
        write_checkpoint(&path, &p).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), p);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"SUPICI-CKPT-1"));
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(&path).is_err());
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (cin, cout, d) = (3, 5, [6, 4, 8]);
        let inp: Vec<f64> = (0..cin * 192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..cout * cin * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let o = half(d);
        let on = o.iter().product::<usize>();
        let got = conv_forward(&im2col(&inp, cin, d), &w, &b, cout, on);
        for oc in 0..cout {
            for v in 0..on {
                let (oz, oy, ox) = (v / (o[1] * o[2]), (v / o[2]) % o[1], v % o[2]);
                let mut acc = b[oc];
                for ic in 0..cin {
                    for k in 0..27 {
                        let iz = (2 * oz + k / 9) as isize - 1;
                        let iy = (2 * oy + (k / 3) % 3) as isize - 1;
                        let ix = (2 * ox + k % 3) as isize - 1;
                        if iz < 0 || iy < 0 || ix < 0 || iz >= 6 || iy >= 4 || ix >= 8 {
                            continue;
                        }
                        let i = ((ic * 6 + iz as usize) * 4 + iy as usize) * 8 + ix as usize;
                        acc += w[(oc * cin + ic) * 27 + k] * inp[i];
                    }
                }
                assert!((got[oc * on + v] - acc).abs() < 1e-12);
            }
        }
        // col2im is the adjoint of im2col: <im2col(x), y> == <x, col2im(y)>
        let y: Vec<f64> = (0..cin * 27 * on).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&im2col(&inp, cin, d), &y);
        let rhs = dot(&inp, &col2im(&y, cin, d));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn score_modes() {
        assert_eq!(ScoreMode::Roi.combine(0.2, 0.7), 0.7);
        assert!((ScoreMode::Product.combine(0.25, 0.64) - 0.4).abs() < 1e-15);
        let p = spread_params(3);
        let vol = random_volume(20, 4);
        let roi = detect(&p, &vol, &DetectorConfig { score: ScoreMode::Roi, ..DetectorConfig::default() }).unwrap();
        let prod = detect(&p, &vol, &DetectorConfig::default()).unwrap();
        assert!(!prod.is_empty());
        for d in roi.iter().chain(&prod) {
            assert!((0.0..=1.0).contains(&d.score));
        }
        let cfg: DetectorConfig = serde_json::from_str(r#"{"score": "roi"}"#).unwrap();
        assert_eq!(cfg.score, ScoreMode::Roi);
    }

    #[test]
    fn detector_gradients_match_finite_differences() {
        let per_tensor: usize = DetectorParams::zeros().layout().segments().iter().map(|s| s.len.min(20)).sum();
        for r in check_detector_suite(21, 20).unwrap() {
            assert!(r.passed, "{r:?}");
            assert_eq!(r.coordinates, per_tensor);
        }
    }

    #[test]
    fn gradient_scales_with_eta() {
        let (params, vols, plans) = detector_check_case(3).unwrap();
        let we = WeConfig { tau1: 1e-9, tau2: 1.0 - 1e-9, ..WeConfig::default() };
        let (_, g1, _) = loss_gradient(&params, &vols, &plans, &LossSpec::StudentTotal { eta: 1.0, we }).unwrap();
        let (_, g3, _) = loss_gradient(&params, &vols, &plans, &LossSpec::StudentTotal { eta: 3.0, we }).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn dead_zone_with_zero_eta_is_stationary() {
        let (params, vols, plans) = detector_check_case(4).unwrap();
        let we = WeConfig { tau1: 1e-9, tau2: 1.0 - 1e-9, ..WeConfig::default() };
        let (v, g, _) = loss_gradient(&params, &vols, &plans, &LossSpec::StudentTotal { eta: 0.0, we }).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-9);
    }
}
