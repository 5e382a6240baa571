//! FROC evaluation: sensitivity averaged over seven false-positive rates.
//!
//! A detection hits an annotation when its center lies within the annotation
//! radius. Per scan, detections are matched in descending score order; a
//! detection hitting only already-matched annotations is ignored (neither TP
//! nor FP), one hitting nothing is a false positive.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{center_hit, distance, Annotation, Box3, Detection};
use crate::{Error, Result};

/// False positives per scan at which sensitivity is read off.
pub const FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanMatch {
    /// One label per input detection, in input order.
    pub labels: Vec<MatchLabel>,
    pub hit: Vec<bool>,
}

/// Matches one scan's detections against its annotations.
pub fn match_detections(dets: &[Detection], anns: &[Annotation]) -> ScanMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    let mut labels = vec![MatchLabel::FalsePositive; dets.len()];
    let mut hit = vec![false; anns.len()];
    for i in order {
        let det = &dets[i];
        let mut any = false;
        let mut best: Option<(f64, usize)> = None;
        for (a, ann) in anns.iter().enumerate() {
            if !center_hit(det, ann) {
                continue;
            }
            any = true;
            if hit[a] {
                continue;
            }
            let d = distance(det.bbox.center(), ann.center);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, a));
            }
        }
        labels[i] = match (any, best) {
            (_, Some((_, a))) => {
                hit[a] = true;
                MatchLabel::TruePositive
            }
            (true, None) => MatchLabel::Ignored,
            (false, _) => MatchLabel::FalsePositive,
        };
    }
    ScanMatch { labels, hit }
}

/// Detections and annotations of one scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanEval {
    pub detections: Vec<Detection>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// Operating points over all distinct score thresholds, descending. The
/// curve always starts with the implicit point `(0, 0)` above the highest
/// score.
pub fn froc_curve(scans: &[ScanEval]) -> Result<Vec<CurvePoint>> {
    if scans.is_empty() {
        return Err(Error::Empty("FROC needs at least one scan".into()));
    }
    let total: usize = scans.iter().map(|s| s.annotations.len()).sum();
    if total == 0 {
        return Err(Error::Empty("FROC is undefined without annotations".into()));
    }
    // (score, tp delta, fp delta)
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for scan in scans {
        let m = match_detections(&scan.detections, &scan.annotations);
        for (d, label) in scan.detections.iter().zip(&m.labels) {
            match label {
                MatchLabel::TruePositive => events.push((d.score, 1, 0)),
                MatchLabel::FalsePositive => events.push((d.score, 0, 1)),
                MatchLabel::Ignored => {}
            }
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_scans = scans.len() as f64;
    let mut curve = vec![CurvePoint {
        threshold: f64::INFINITY,
        fp_per_scan: 0.0,
        sensitivity: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            tp += events[i].1;
            fp += events[i].2;
            i += 1;
        }
        curve.push(CurvePoint {
            threshold: t,
            fp_per_scan: fp as f64 / n_scans,
            sensitivity: tp as f64 / total as f64,
        });
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    pub fp_rates: [f64; 7],
    pub sensitivities: [f64; 7],
    pub average: f64,
}

impl FrocResult {
    /// One header and one value row in the fixed column order
    /// `0.125 0.25 0.5 1 2 4 8 Avg`, sensitivities in percent.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (f, s) in self.fp_rates.iter().zip(&self.sensitivities) {
            head.push_str(&format!("{:>8}", f));
            row.push_str(&format!("{:>8.2}", 100.0 * s));
        }
        head.push_str(&format!("{:>8}", "Avg"));
        row.push_str(&format!("{:>8.2}", 100.0 * self.average));
        format!("{head}\n{row}")
    }
}

/// Staircase read-off: the sensitivity at rate `f` is the best sensitivity
/// among points with at most `f` false positives per scan.
pub fn froc_at_points(curve: &[CurvePoint]) -> FrocResult {
    let sensitivities = FP_RATES.map(|f| {
        curve
            .iter()
            .filter(|p| p.fp_per_scan <= f)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    });
    FrocResult {
        fp_rates: FP_RATES,
        sensitivities,
        average: sensitivities.iter().sum::<f64>() / FP_RATES.len() as f64,
    }
}

pub fn evaluate(scans: &[ScanEval]) -> Result<(FrocResult, Vec<CurvePoint>)> {
    let curve = froc_curve(scans)?;
    Ok((froc_at_points(&curve), curve))
}

/// Reference evaluator: re-matches every scan from scratch at each distinct
/// score threshold and reads sensitivities off the resulting points. Slow
/// (quadratic in the detection count) but free of incremental bookkeeping;
/// used to check `evaluate`.
pub fn froc_brute_force(scans: &[ScanEval]) -> Result<FrocResult> {
    if scans.is_empty() {
        return Err(Error::Empty("FROC needs at least one scan".into()));
    }
    let total: usize = scans.iter().map(|s| s.annotations.len()).sum();
    if total == 0 {
        return Err(Error::Empty("FROC is undefined without annotations".into()));
    }
    let mut thresholds: Vec<f64> = scans.iter().flat_map(|s| s.detections.iter().map(|d| d.score)).collect();
    thresholds.push(f64::INFINITY);
    let mut points = Vec::new();
    for &t in &thresholds {
        let (mut tp, mut fp) = (0usize, 0usize);
        for scan in scans {
            let mut kept: Vec<&Detection> = scan.detections.iter().filter(|d| d.score >= t).collect();
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut taken = vec![false; scan.annotations.len()];
            for d in kept {
                let c = d.bbox.center();
                let dist = |a: &Annotation| {
                    let dz = c[0] - a.center[0];
                    let dy = c[1] - a.center[1];
                    let dx = c[2] - a.center[2];
                    (dz * dz + dy * dy + dx * dx).sqrt()
                };
                let inside: Vec<usize> = (0..scan.annotations.len())
                    .filter(|&a| dist(&scan.annotations[a]) <= scan.annotations[a].radius)
                    .collect();
                if inside.is_empty() {
                    fp += 1;
                    continue;
                }
                let free = inside.into_iter().filter(|&a| !taken[a]);
                let nearest = free.fold(None, |best: Option<usize>, a| match best {
                    Some(b) if dist(&scan.annotations[b]) <= dist(&scan.annotations[a]) => Some(b),
                    _ => Some(a),
                });
                if let Some(a) = nearest {
                    taken[a] = true;
                    tp += 1;
                }
            }
        }
        points.push((fp as f64 / scans.len() as f64, tp as f64 / total as f64));
    }
    let sensitivities = FP_RATES.map(|f| {
        points
            .iter()
            .filter(|(fpr, _)| *fpr <= f)
            .map(|(_, s)| *s)
            .fold(0.0, f64::max)
    });
    Ok(FrocResult {
        fp_rates: FP_RATES,
        sensitivities,
        average: sensitivities.iter().sum::<f64>() / FP_RATES.len() as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FrocReport {
    pub scans: usize,
    pub annotations: usize,
    pub detections: usize,
    pub froc: FrocResult,
    pub curve: Vec<CurvePoint>,
}

/// Groups predictions and annotations by scan id. Every annotated scan and
/// every id in `scan_ids` counts as a scan, even without detections.
pub fn group_by_scan(
    predictions: &[(String, Detection)],
    annotations: &[(String, Annotation)],
    scan_ids: &[String],
) -> Vec<ScanEval> {
    let mut by: BTreeMap<&str, ScanEval> = BTreeMap::new();
    for id in scan_ids {
        by.entry(id).or_default();
    }
    for (id, a) in annotations {
        by.entry(id).or_default().annotations.push(*a);
    }
    for (id, d) in predictions {
        by.entry(id).or_default().detections.push(*d);
    }
    by.into_values().collect()
}

pub fn report(scans: &[ScanEval]) -> Result<FrocReport> {
    let (froc, curve) = evaluate(scans)?;
    Ok(FrocReport {
        scans: scans.len(),
        annotations: scans.iter().map(|s| s.annotations.len()).sum(),
        detections: scans.iter().map(|s| s.detections.len()).sum(),
        froc,
        curve,
    })
}

// ---------------------------------------------------------------------------
// CSV interfaces

pub const PREDICTIONS_HEADER: [&str; 8] = ["scan_id", "z", "y", "x", "dz", "dy", "dx", "score"];
pub const ANNOTATIONS_HEADER: [&str; 5] = ["scan_id", "z", "y", "x", "r"];

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    scan_id: String,
    z: f64,
    y: f64,
    x: f64,
    dz: f64,
    dy: f64,
    dx: f64,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    scan_id: String,
    z: f64,
    y: f64,
    x: f64,
    r: f64,
}

fn check_header(path: &Path, found: &csv::StringRecord, expect: &[&str]) -> Result<()> {
    if found.iter().ne(expect.iter().copied()) {
        return Err(Error::Format {
            what: "csv header",
            path: path.to_path_buf(),
            reason: format!("expected {}, found {}", expect.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn row_error(path: &Path, line: usize, reason: impl ToString) -> Error {
    Error::Format {
        what: "csv row",
        path: path.to_path_buf(),
        reason: format!("line {line}: {}", reason.to_string()),
    }
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<(String, Detection)>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, rdr.headers()?, &PREDICTIONS_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let r = row.map_err(|e| row_error(path, i + 2, e))?;
        let bbox = Box3::new([r.z, r.y, r.x], [r.dz, r.dy, r.dx]).map_err(|e| row_error(path, i + 2, e))?;
        let det = Detection::new(bbox, r.score).map_err(|e| row_error(path, i + 2, e))?;
        out.push((r.scan_id, det));
    }
    Ok(out)
}

pub fn write_predictions_csv(path: &Path, preds: &[(String, Detection)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(PREDICTIONS_HEADER)?;
    for (id, d) in preds {
        let (c, s) = (d.bbox.center(), d.bbox.size());
        w.serialize(PredictionRow {
            scan_id: id.clone(),
            z: c[0],
            y: c[1],
            x: c[2],
            dz: s[0],
            dy: s[1],
            dx: s[2],
            score: d.score,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_annotations_csv(path: &Path) -> Result<Vec<(String, Annotation)>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, rdr.headers()?, &ANNOTATIONS_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let r = row.map_err(|e| row_error(path, i + 2, e))?;
        let ann = Annotation::new([r.z, r.y, r.x], r.r).map_err(|e| row_error(path, i + 2, e))?;
        out.push((r.scan_id, ann));
    }
    Ok(out)
}

pub fn write_annotations_csv(path: &Path, anns: &[(String, Annotation)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(ANNOTATIONS_HEADER)?;
    for (id, a) in anns {
        w.serialize(AnnotationRow {
            scan_id: id.clone(),
            z: a.center[0],
            y: a.center[1],
            x: a.center[2],
            r: a.radius,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn det(c: [f64; 3], score: f64) -> Detection {
        Detection::new(Box3::cube(c, 4.0).unwrap(), score).unwrap()
    }

    fn ann(c: [f64; 3], r: f64) -> Annotation {
        Annotation::new(c, r).unwrap()
    }

    #[test]
    fn matching_examples() {
        let a = [ann([10.0; 3], 5.0)];
        let m = match_detections(&[det([11.0, 10.0, 10.0], 0.9)], &a);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive]);
        assert_eq!(m.hit, vec![true]);

        let m = match_detections(&[det([11.0, 10.0, 10.0], 0.9), det([9.0, 10.0, 10.0], 0.8)], &a);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive, MatchLabel::Ignored]);

        let m = match_detections(&[det([11.0, 10.0, 10.0], 0.9), det([30.0; 3], 0.8)], &a);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive, MatchLabel::FalsePositive]);
    }

    #[test]
    fn overlapping_annotations_use_nearest_center() {
        let anns = [ann([10.0; 3], 6.0), ann([14.0, 10.0, 10.0], 6.0)];
        let m = match_detections(&[det([13.0, 10.0, 10.0], 0.9), det([11.0, 10.0, 10.0], 0.5)], &anns);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive, MatchLabel::TruePositive]);
        assert_eq!(m.hit, vec![true, true]);
        // the first detection alone takes the nearer annotation
        let m = match_detections(&[det([13.0, 10.0, 10.0], 0.9)], &anns);
        assert_eq!(m.hit, vec![false, true]);
    }

    #[test]
    fn curve_examples() {
        let perfect = [ScanEval { detections: vec![det([10.0; 3], 0.9)], annotations: vec![ann([10.0; 3], 3.0)] }];
        let curve = froc_curve(&perfect).unwrap();
        assert!(curve.iter().any(|p| p.fp_per_scan == 0.0 && p.sensitivity == 1.0));
        let r = froc_at_points(&curve);
        assert_eq!(r.sensitivities, [1.0; 7]);
        assert_eq!(r.average, 1.0);

        let none = [ScanEval { detections: vec![], annotations: vec![ann([10.0; 3], 3.0)] }];
        let curve = froc_curve(&none).unwrap();
        assert_eq!(curve.len(), 1);
        assert_eq!((curve[0].fp_per_scan, curve[0].sensitivity), (0.0, 0.0));

        let worked = [ScanEval {
            detections: vec![det([11.0, 10.0, 10.0], 0.9), det([30.0; 3], 0.8)],
            annotations: vec![ann([10.0; 3], 5.0)],
        }];
        let curve = froc_curve(&worked).unwrap();
        let pts: Vec<(f64, f64)> = curve[1..].iter().map(|p| (p.fp_per_scan, p.sensitivity)).collect();
        assert_eq!(pts, vec![(0.0, 1.0), (1.0, 1.0)]);
        let r = froc_at_points(&curve);
        assert_eq!(r.sensitivities, [1.0; 7]);
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn curve_errors() {
        assert!(froc_curve(&[]).is_err());
        let empty = [ScanEval { detections: vec![det([1.0; 3], 0.5)], annotations: vec![] }];
        assert!(froc_curve(&empty).is_err());
    }

    #[test]
    fn table_column_order() {
        let r = FrocResult { fp_rates: FP_RATES, sensitivities: [0.5; 7], average: 0.5 };
        let t = r.table();
        let head: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(head, ["0.125", "0.25", "0.5", "1", "2", "4", "8", "Avg"]);
        assert!(t.lines().nth(1).unwrap().contains("50.00"));
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        let preds = vec![("a".to_string(), det([1.0, 2.0, 3.5], 0.25))];
        write_predictions_csv(&p, &preds).unwrap();
        assert_eq!(read_predictions_csv(&p).unwrap(), preds);

        write_predictions_csv(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "scan_id,z,y,x,dz,dy,dx,score\n");
        assert!(read_predictions_csv(&p).unwrap().is_empty());

        let a = dir.path().join("ann.csv");
        let anns = vec![("a".to_string(), ann([1.0, 2.0, 3.0], 2.5))];
        write_annotations_csv(&a, &anns).unwrap();
        assert_eq!(read_annotations_csv(&a).unwrap(), anns);

        std::fs::write(&a, "id,z,y,x,r\na,1,2,3,4\n").unwrap();
        assert!(matches!(read_annotations_csv(&a), Err(Error::Format { .. })));
        std::fs::write(&a, "scan_id,z,y,x,r\na,1,2,3,-4\n").unwrap();
        assert!(matches!(read_annotations_csv(&a), Err(Error::Format { .. })));
    }
    /// Small instance on an integer grid with scores drawn from a short list,
    /// so boundary hits and tied scores both occur.
    pub(crate) fn random_instance(rng: &mut impl rand::Rng) -> Vec<ScanEval> {
        let n_scans = rng.random_range(1..=5);
        let mut scans: Vec<ScanEval> = (0..n_scans)
            .map(|_| {
                let anns = (0..rng.random_range(0..=3))
                    .map(|_| {
                        let c = [0; 3].map(|_| rng.random_range(0..12) as f64);
                        ann(c, rng.random_range(1..=4) as f64)
                    })
                    .collect();
                let dets = (0..rng.random_range(0..=8))
                    .map(|_| {
                        let c = [0; 3].map(|_| rng.random_range(0..12) as f64);
                        det(c, rng.random_range(1..=6) as f64 / 8.0)
                    })
                    .collect();
                ScanEval { detections: dets, annotations: anns }
            })
            .collect();
        if scans.iter().all(|s| s.annotations.is_empty()) {
            scans[0].annotations.push(ann([5.0; 3], 3.0));
        }
        scans
    }

    #[test]
    fn fast_evaluator_matches_brute_force() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..50 {
            let scans = random_instance(&mut rng);
            assert_eq!(evaluate(&scans).unwrap().0, froc_brute_force(&scans).unwrap());
        }
        assert!(froc_brute_force(&[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn froc_properties(seed in 0u64..u64::MAX, far in 100.0f64..200.0, score in 0.01f64..1.0, pick in 0usize..64) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scans = random_instance(&mut rng);
            let base = evaluate(&scans).unwrap().0;
            proptest::prop_assert_eq!(&base, &froc_brute_force(&scans).unwrap());
            for w in base.sensitivities.windows(2) {
                proptest::prop_assert!(w[0] <= w[1]);
            }
            proptest::prop_assert!(base.sensitivities.iter().all(|s| (0.0..=1.0).contains(s)));
            let mean = base.sensitivities.iter().sum::<f64>() / 7.0;
            proptest::prop_assert!((base.average - mean).abs() < 1e-15);

            let k = pick % scans.len();
            let mut with_fp = scans.clone();
            with_fp[k].detections.push(det([far; 3], score));
            let r = evaluate(&with_fp).unwrap().0;
            for (a, b) in r.sensitivities.iter().zip(&base.sensitivities) {
                proptest::prop_assert!(a <= b);
            }

            if let Some((s, a)) = scans.iter().enumerate().find_map(|(i, s)| s.annotations.first().map(|a| (i, *a))) {
                let mut with_tp = scans.clone();
                with_tp[s].detections.push(det(a.center, score));
                let r = evaluate(&with_tp).unwrap().0;
                for (a, b) in r.sensitivities.iter().zip(&base.sensitivities) {
                    proptest::prop_assert!(a >= b);
                }
            }

            let mut shuffled = scans.clone();
            shuffled.rotate_left(k);
            shuffled.reverse();
            proptest::prop_assert_eq!(evaluate(&shuffled).unwrap().0, base);
        }
    }
}
