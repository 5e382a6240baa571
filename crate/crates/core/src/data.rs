//! Volumes, CT-style preprocessing, patch tiling, the synthetic domain-shift
//! generator and the on-disk scan/dataset formats.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geom::{intersection_volume, Annotation, Box3, Vec3};
use crate::{Error, Result};

/// Fill value for padding and everything outside the region of interest.
pub const PAD_VALUE: u8 = 170;
pub const HU_MIN: f64 = -1200.0;
pub const HU_MAX: f64 = 600.0;
pub const SCAN_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn pad_value() -> u8 {
    PAD_VALUE
}

/// Dense 3D array, `z`-major (`x` fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Rounds half away from zero, the single rounding mode used for all
/// intensity quantisation.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn quantize_u8(x: f64) -> u8 {
    round_half_away(x).clamp(0.0, 255.0) as u8
}

/// Clips Hounsfield units to `[-1200, 600]` and maps them linearly onto
/// `[0, 255]`.
pub fn hu_clip_rescale(hu: &Volume<f64>) -> Volume<u8> {
    hu.map(|v| {
        let c = v.clamp(HU_MIN, HU_MAX);
        quantize_u8((c - HU_MIN) / (HU_MAX - HU_MIN) * 255.0)
    })
}

/// Trilinear resampling to 1 mm isotropic spacing. Voxel `i` of the output
/// sits at `i` mm, voxel `j` of the input at `j * spacing` mm; samples past
/// the last input voxel clamp to it.
pub fn resample_isotropic(volume: &Volume<f64>, spacing: Vec3) -> Result<Volume<f64>> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    let din = volume.dims();
    let dout: [usize; 3] =
        std::array::from_fn(|a| ((din[a] as f64 * spacing[a]).round() as usize).max(1));
    // per axis: (lower index, upper index, weight of upper)
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..dout[a])
            .map(|i| {
                let pos = (i as f64 / spacing[a]).clamp(0.0, (din[a] - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(din[a] - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(dout.iter().product());
    for &(z0, z1, wz) in &az {
        for &(y0, y1, wy) in &ay {
            for &(x0, x1, wx) in &ax {
                let lerp_x = |z, y| {
                    volume.get(z, y, x0) * (1.0 - wx) + volume.get(z, y, x1) * wx
                };
                let plane = |z| lerp_x(z, y0) * (1.0 - wy) + lerp_x(z, y1) * wy;
                out.push(plane(z0) * (1.0 - wz) + plane(z1) * wz);
            }
        }
    }
    Volume::new(dout, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub voxels: Volume<u8>,
    /// Scan coordinate of the patch's voxel `(0, 0, 0)`.
    pub offset: [usize; 3],
}

impl Patch {
    pub fn to_scan_coords(&self, q: Vec3) -> Vec3 {
        std::array::from_fn(|a| q[a] + self.offset[a] as f64)
    }

    pub fn to_patch_coords(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| p[a] - self.offset[a] as f64)
    }

    /// Annotations whose `2R` cube overlaps the patch, in patch coordinates.
    pub fn annotations_within(&self, anns: &[Annotation]) -> Vec<Annotation> {
        let side: Vec3 = self.voxels.dims().map(|d| d as f64);
        let bounds = Box3::from_corners([0.0; 3], side).expect("non-empty patch");
        anns.iter()
            .map(|a| Annotation {
                center: self.to_patch_coords(a.center),
                radius: a.radius,
            })
            .filter(|a| intersection_volume(&a.as_box(), &bounds) > 0.0)
            .collect()
    }
}

fn tile_starts(n: usize, side: usize, overlap: usize) -> Vec<usize> {
    if n <= side {
        return vec![0];
    }
    let step = side - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + side < n).collect();
    starts.push(n - side);
    starts.dedup();
    starts
}

/// Tiles a volume into cubes of `side` voxels overlapping by `overlap`. The
/// last tile on each axis is aligned to the volume end; regions beyond a
/// volume smaller than one tile are filled with [`PAD_VALUE`].
pub fn crop_patches(volume: &Volume<u8>, side: usize, overlap: usize) -> Result<Vec<Patch>> {
    if side == 0 || !side.is_multiple_of(crate::detector::STRIDE) {
        return Err(Error::invalid(format!(
            "patch side {side} must be a positive multiple of {}",
            crate::detector::STRIDE
        )));
    }
    if overlap >= side {
        return Err(Error::invalid(format!("overlap {overlap} must be below patch side {side}")));
    }
    let d = volume.dims();
    let starts: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(d[a], side, overlap)).collect();
    let mut patches = Vec::new();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let mut p = Volume::filled([side; 3], PAD_VALUE);
                for z in 0..side.min(d[0] - z0) {
                    for y in 0..side.min(d[1] - y0) {
                        let src = volume.index(z0 + z, y0 + y, x0);
                        let len = side.min(d[2] - x0);
                        let dst = p.index(z, y, 0);
                        p.data[dst..dst + len].copy_from_slice(&volume.data[src..src + len]);
                    }
                }
                patches.push(Patch {
                    voxels: p,
                    offset: [z0, y0, x0],
                });
            }
        }
    }
    Ok(patches)
}

/// Pads every axis up to a multiple of `multiple` with [`PAD_VALUE`].
pub fn pad_to_multiple(volume: &Volume<u8>, multiple: usize) -> Volume<u8> {
    let d = volume.dims();
    let nd = d.map(|n| n.div_ceil(multiple).max(1) * multiple);
    if nd == d {
        return volume.clone();
    }
    let mut out = Volume::filled(nd, PAD_VALUE);
    for z in 0..d[0] {
        for y in 0..d[1] {
            let src = volume.index(z, y, 0);
            let dst = out.index(z, y, 0);
            out.data[dst..dst + d[2]].copy_from_slice(&volume.data[src..src + d[2]]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scans and the synthetic generator

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub id: String,
    pub voxels: Volume<u8>,
    pub spacing: Vec3,
    pub annotations: Vec<Annotation>,
}

/// Parameters of one synthetic imaging domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomainSpec {
    pub side: usize,
    pub nodules_min: usize,
    pub nodules_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Intensity at a nodule core before contrast scaling.
    pub peak_intensity: f64,
    /// Mean background intensity.
    pub background_intensity: f64,
    /// Standard deviation of the smoothed background noise.
    pub noise_std: f64,
    /// Gaussian smoothing width of the noise field, in voxels.
    pub noise_smoothing: f64,
    /// Scales the nodule-to-background intensity difference.
    pub contrast: f64,
    /// Slope of the logistic nodule boundary, per voxel.
    pub edge_sharpness: f64,
    /// Bright non-nodule blobs per scan (vessel cross-sections, scars).
    pub distractors_min: usize,
    pub distractors_max: usize,
    /// Radius of distractor blobs.
    pub distractor_radius: f64,
    /// Distractor core intensity relative to nodule contrast, before the
    /// contrast scale.
    pub distractor_intensity: f64,
    pub seed: u64,
}

impl SynthDomainSpec {
    pub fn source_default() -> Self {
        Self {
            side: 64,
            nodules_min: 1,
            nodules_max: 3,
            radius_min: 3.0,
            radius_max: 6.0,
            peak_intensity: 200.0,
            background_intensity: 60.0,
            noise_std: 12.0,
            noise_smoothing: 1.0,
            contrast: 1.0,
            edge_sharpness: 2.0,
            distractors_min: 0,
            distractors_max: 0,
            distractor_radius: 2.0,
            distractor_intensity: 0.0,
            seed: 1,
        }
    }

    pub fn target_default() -> Self {
        Self {
            radius_min: 2.0,
            radius_max: 8.0,
            background_intensity: 90.0,
            noise_std: 16.0,
            contrast: 0.6,
            edge_sharpness: 1.0,
            seed: 2,
            ..Self::source_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.side < 8 {
            return bad(format!("volume side {} too small", self.side));
        }
        if self.nodules_min > self.nodules_max || self.distractors_min > self.distractors_max {
            return bad("count ranges need min <= max".into());
        }
        let quarter = self.side as f64 / 4.0;
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max < quarter) {
            return bad(format!(
                "radius range [{}, {}] must lie in (0, {quarter})",
                self.radius_min, self.radius_max
            ));
        }
        let finite = [
            self.peak_intensity,
            self.background_intensity,
            self.noise_std,
            self.noise_smoothing,
            self.contrast,
            self.edge_sharpness,
            self.distractor_radius,
            self.distractor_intensity,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("intensities must be finite".into());
        }
        if !(0.0..=255.0).contains(&self.background_intensity) {
            return bad(format!("background {} outside [0, 255]", self.background_intensity));
        }
        if self.noise_std < 0.0 || self.noise_smoothing < 0.0 || self.edge_sharpness <= 0.0 {
            return bad("noise and edge parameters must be non-negative".into());
        }
        if self.distractors_max > 0 && self.distractor_radius <= 0.0 {
            return bad("distractor radius must be positive".into());
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with clamped borders.
fn smooth(field: &mut Volume<f64>, kernel: &[f64]) {
    if kernel.len() == 1 {
        return;
    }
    let r = (kernel.len() / 2) as i64;
    let d = field.dims();
    for axis in 0..3 {
        let src = field.clone();
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let p = [z, y, x];
                    let mut acc = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let mut q = p;
                        let c = p[axis] as i64 + ki as i64 - r;
                        q[axis] = c.clamp(0, d[axis] as i64 - 1) as usize;
                        acc += w * src.get(q[0], q[1], q[2]);
                    }
                    field.set(z, y, x, acc);
                }
            }
        }
    }
}

fn place_blobs(
    rng: &mut ChaCha8Rng,
    count: usize,
    radius: impl Fn(&mut ChaCha8Rng) -> f64,
    side: f64,
    occupied: &mut Vec<(Vec3, f64)>,
) -> Vec<(Vec3, f64)> {
    let mut placed = Vec::new();
    for _ in 0..count {
        for _attempt in 0..200 {
            let r = radius(rng);
            let margin = r + 1.0;
            if side - 2.0 * margin <= 0.0 {
                break;
            }
            let c: Vec3 = std::array::from_fn(|_| rng.random_range(margin..side - margin));
            let clear = occupied
                .iter()
                .all(|(o, orad)| crate::geom::distance(*o, c) > r + orad);
            if clear {
                occupied.push((c, r));
                placed.push((c, r));
                break;
            }
        }
    }
    placed
}

/// Deterministic synthetic scan number `index` of a domain.
pub fn gen_synth_scan(spec: &SynthDomainSpec, index: u64) -> Result<ScanRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let side = spec.side;
    let sidef = side as f64;

    let mut occupied = Vec::new();
    let n_nod = rng.random_range(spec.nodules_min..=spec.nodules_max);
    let (rmin, rmax) = (spec.radius_min, spec.radius_max);
    let nodules = place_blobs(
        &mut rng,
        n_nod,
        |r| if rmax > rmin { r.random_range(rmin..=rmax) } else { rmin },
        sidef,
        &mut occupied,
    );
    let n_dis = rng.random_range(spec.distractors_min..=spec.distractors_max);
    let dr = spec.distractor_radius;
    let distractors = place_blobs(&mut rng, n_dis, |_| dr, sidef, &mut occupied);

    let mut noise = Volume::filled([side; 3], 0.0f64);
    for v in noise.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let kernel = gaussian_kernel(spec.noise_smoothing);
    smooth(&mut noise, &kernel);
    // renormalise smoothed white noise to the requested standard deviation
    let gain = kernel.iter().map(|w| w * w).sum::<f64>().powf(1.5);
    let noise_scale = spec.noise_std / gain;

    let amp = spec.contrast * (spec.peak_intensity - spec.background_intensity);
    let blobs: Vec<(Vec3, f64, f64)> = nodules
        .iter()
        .map(|&(c, r)| (c, r, amp))
        .chain(distractors.iter().map(|&(c, r)| (c, r, amp * spec.distractor_intensity)))
        .collect();

    let mut voxels = Volume::filled([side; 3], 0u8);
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let mut v = spec.background_intensity + noise_scale * noise.get(z, y, x);
                for &(c, r, a) in &blobs {
                    let d = crate::geom::distance(p, c);
                    if d < r + 12.0 / spec.edge_sharpness {
                        v += a / (1.0 + (spec.edge_sharpness * (d - r)).exp());
                    }
                }
                voxels.set(z, y, x, quantize_u8(v));
            }
        }
    }
    let annotations = nodules
        .iter()
        .map(|&(c, r)| Annotation::new(c, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScanRecord {
        id: format!("{index:04}"),
        voxels,
        spacing: [1.0; 3],
        annotations,
    })
}

// ---------------------------------------------------------------------------
// On-disk formats

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanHeader {
    format_version: u32,
    dims: [usize; 3],
    spacing: Vec3,
    dtype: String,
}

pub fn scan_dir(root: &Path, id: &str) -> PathBuf {
    root.join(format!("scan_{id}"))
}

/// Writes `scan_<id>/header.json` and `scan_<id>/voxels.raw` under `root`.
/// Annotations live in the dataset-level CSV, not here.
pub fn write_scan(root: &Path, scan: &ScanRecord) -> Result<()> {
    let dir = scan_dir(root, &scan.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let header = ScanHeader {
        format_version: SCAN_FORMAT_VERSION,
        dims: scan.voxels.dims(),
        spacing: scan.spacing,
        dtype: "u8".into(),
    };
    let hp = dir.join("header.json");
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    let rp = dir.join("voxels.raw");
    fs::write(&rp, scan.voxels.data()).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

pub fn read_scan(root: &Path, id: &str) -> Result<ScanRecord> {
    let dir = scan_dir(root, id);
    let hp = dir.join("header.json");
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: ScanHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "scan header",
        path: hp.clone(),
        reason: e.to_string(),
    })?;
    let malformed = |reason: String| Error::Format {
        what: "scan header",
        path: hp.clone(),
        reason,
    };
    if header.format_version != SCAN_FORMAT_VERSION {
        return Err(malformed(format!("unsupported format version {}", header.format_version)));
    }
    if header.dtype != "u8" {
        return Err(malformed(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(malformed(format!("non-positive spacing {:?}", header.spacing)));
    }
    let rp = dir.join("voxels.raw");
    let raw = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expect: usize = header.dims.iter().product();
    if raw.len() != expect {
        return Err(Error::Format {
            what: "voxel file",
            path: rp,
            reason: format!(
                "size mismatch: dims {:?} imply {expect} bytes, found {}",
                header.dims,
                raw.len()
            ),
        });
    }
    Ok(ScanRecord {
        id: id.to_string(),
        voxels: Volume::new(header.dims, raw)?,
        spacing: header.spacing,
        annotations: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scans: Vec<ManifestEntry>,
}

/// Train/val/test sizes in the ratio 7:1:2, rounded half away from zero;
/// the test split takes the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = round_half_away(n as f64 * 0.7) as usize;
    let val = (round_half_away(n as f64 * 0.1) as usize).min(n - train);
    (train, val, n - train - val)
}

pub fn assign_splits(n: usize) -> Vec<Split> {
    let (train, val, _) = split_sizes(n);
    (0..n)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "dataset.json";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";

/// A directory of scans with a manifest and a shared annotations CSV.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub annotations: Vec<(String, Annotation)>,
}

impl Dataset {
    pub fn write(root: &Path, entries: &[(ManifestEntry, ScanRecord)]) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut annotations = Vec::new();
        for (entry, scan) in entries {
            write_scan(root, scan)?;
            annotations.extend(scan.annotations.iter().map(|a| (entry.id.clone(), *a)));
        }
        let manifest = DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            scans: entries.iter().map(|(e, _)| e.clone()).collect(),
        };
        let mp = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        crate::froc::write_annotations_csv(&root.join(ANNOTATIONS_FILE), &annotations)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            annotations,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let mp = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "dataset manifest",
            path: mp.clone(),
            reason: e.to_string(),
        })?;
        let annotations = crate::froc::read_annotations_csv(&root.join(ANNOTATIONS_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            annotations,
        })
    }

    pub fn entries(&self, domain: &str, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        let domain = domain.to_string();
        self.manifest
            .scans
            .iter()
            .filter(move |e| e.domain == domain && e.split == split)
    }

    /// Loads the scans of one domain and split, attaching annotations when
    /// `with_annotations` is set.
    pub fn load(&self, domain: &str, split: Split, with_annotations: bool) -> Result<Vec<ScanRecord>> {
        self.entries(domain, split)
            .map(|e| {
                let mut scan = read_scan(&self.root, &e.id)?;
                if with_annotations {
                    scan.annotations = self
                        .annotations
                        .iter()
                        .filter(|(id, _)| *id == e.id)
                        .map(|(_, a)| *a)
                        .collect();
                }
                Ok(scan)
            })
            .collect()
    }
}
