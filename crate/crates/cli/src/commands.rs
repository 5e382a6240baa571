//! One function per subcommand. Each returns a serialisable report; the
//! binary writes it as JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sfuda_core::adapt::{adapt_pipeline, froc_on, RunReport, StageSelection, Steps};
use sfuda_core::data::{assign_splits, gen_synth_scan, Dataset, ManifestEntry, ScanRecord, Split, SynthDomainSpec};
use sfuda_core::detector::{detect, read_checkpoint, train_source, write_checkpoint, DetectorParams};
use sfuda_core::froc::{
    group_by_scan, read_annotations_csv, read_predictions_csv, report, write_predictions_csv, FrocReport, FrocResult,
};
use sfuda_core::geom::Detection;
use sfuda_core::gradcheck::{check_detector_suite, check_kernels, CheckReport};

use crate::config::{DataConfig, ModelSelection, RunConfig};
use crate::CliError;

pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

/// Minimum FROC gain of the adapted model over the source model on the
/// reference seed.
pub const MIN_GAIN: f64 = 0.05;

// ---------------------------------------------------------------------------
// Data

fn domain_scans(spec: &SynthDomainSpec, domain: &str, n: usize) -> Result<Vec<(ManifestEntry, ScanRecord)>, CliError> {
    let splits = assign_splits(n);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut scan = gen_synth_scan(spec, i as u64)?;
            scan.id = format!("{domain}_{i:04}");
            let entry = ManifestEntry {
                id: scan.id.clone(),
                domain: domain.to_string(),
                split: splits[i],
            };
            Ok((entry, scan))
        })
        .collect()
}

/// Both synthetic corpora, source first, each split 7:1:2 in index order.
pub fn generate_corpus(data: &DataConfig) -> Result<Vec<(ManifestEntry, ScanRecord)>, CliError> {
    let mut all = domain_scans(&data.source, SOURCE, data.source_scans)?;
    all.extend(domain_scans(&data.target, TARGET, data.target_scans)?);
    Ok(all)
}

fn select(corpus: &[(ManifestEntry, ScanRecord)], domain: &str, split: Split) -> Vec<ScanRecord> {
    corpus
        .iter()
        .filter(|(e, _)| e.domain == domain && e.split == split)
        .map(|(_, s)| s.clone())
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub annotations: usize,
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataReport {
    pub root: PathBuf,
    pub domains: BTreeMap<String, DomainSummary>,
}

fn summarize(corpus: &[(ManifestEntry, ScanRecord)], domain: &str) -> DomainSummary {
    let scans: Vec<&(ManifestEntry, ScanRecord)> = corpus.iter().filter(|(e, _)| e.domain == domain).collect();
    let count = |s: Split| scans.iter().filter(|(e, _)| e.split == s).count();
    let voxels: usize = scans.iter().map(|(_, s)| s.voxels.len()).sum();
    let total: f64 = scans.iter().flat_map(|(_, s)| s.voxels.data().iter().map(|&v| v as f64)).sum();
    DomainSummary {
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
        annotations: scans.iter().map(|(_, s)| s.annotations.len()).sum(),
        mean_intensity: if voxels == 0 { 0.0 } else { total / voxels as f64 },
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataReport, CliError> {
    let corpus = generate_corpus(&cfg.data)?;
    Dataset::write(out, &corpus)?;
    let domains = [SOURCE, TARGET].map(|d| (d.to_string(), summarize(&corpus, d))).into_iter().collect();
    Ok(GenDataReport {
        root: out.to_path_buf(),
        domains,
    })
}

// ---------------------------------------------------------------------------
// Training and adaptation

/// Fraction of consecutive epoch pairs whose mean loss did not increase.
pub fn non_increasing_fraction(losses: &[f64]) -> f64 {
    if losses.len() < 2 {
        return 1.0;
    }
    let ok = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    ok as f64 / (losses.len() - 1) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub non_increasing_fraction: f64,
    pub source_test_froc: Option<FrocResult>,
    pub target_test_froc: Option<FrocResult>,
    pub checkpoint: PathBuf,
}

fn froc_if_annotated(params: &DetectorParams, scans: &[ScanRecord], cfg: &RunConfig) -> Result<Option<FrocResult>, CliError> {
    if scans.iter().all(|s| s.annotations.is_empty()) {
        return Ok(None);
    }
    Ok(Some(froc_on(params, scans, &cfg.detector)?))
}

/// Trains the source model on the labeled source train split, writing a
/// checkpoint after every epoch under `<out>.epochs/`.
pub fn train_source_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainReport, CliError> {
    let ds = Dataset::open(data)?;
    let train = ds.load(SOURCE, Split::Train, true)?;
    let epoch_dir = out.with_extension("epochs");
    std::fs::create_dir_all(&epoch_dir).map_err(|e| CliError::Io(format!("{}: {e}", epoch_dir.display())))?;
    let (params, history) = train_source(&train, &cfg.detector, &cfg.source_train, cfg.seed, |e, _, p| {
        write_checkpoint(&epoch_dir.join(format!("epoch_{e:03}.ckpt")), p)
    })?;
    write_checkpoint(out, &params)?;
    Ok(TrainReport {
        seed: cfg.seed,
        non_increasing_fraction: non_increasing_fraction(&history.epoch_losses),
        epoch_losses: history.epoch_losses,
        source_test_froc: froc_if_annotated(&params, &ds.load(SOURCE, Split::Test, true)?, cfg)?,
        target_test_froc: froc_if_annotated(&params, &ds.load(TARGET, Split::Test, true)?, cfg)?,
        checkpoint: out.to_path_buf(),
    })
}

/// Adapts a source checkpoint on the unlabeled target train split. Target
/// validation annotations are read only for model selection, target test
/// annotations only for the FROC snapshots in the report.
pub fn adapt_cmd(cfg: &RunConfig, data: &Path, source: &Path, steps: Steps, out: &Path) -> Result<RunReport, CliError> {
    let ds = Dataset::open(data)?;
    let params = read_checkpoint(source)?;
    let train = ds.load(TARGET, Split::Train, false)?;
    let val = match cfg.eval.model_selection {
        ModelSelection::ValFroc => Some(ds.load(TARGET, Split::Val, true)?),
        ModelSelection::Last => None,
    };
    let test = ds.load(TARGET, Split::Test, true)?;
    let monitor = (!test.iter().all(|s| s.annotations.is_empty())).then_some(&test[..]);
    let val = val.filter(|v| !v.iter().all(|s| s.annotations.is_empty()));
    let (adapted, rep) = adapt_pipeline(&params, &train, &cfg.adapt, &cfg.detector, steps, cfg.seed, val.as_deref(), monitor)?;
    write_checkpoint(out, &adapted)?;
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Inference and evaluation

#[derive(Debug, Clone, Serialize)]
pub struct InferReport {
    pub scans: usize,
    pub detections: usize,
    pub predictions: PathBuf,
}

pub fn infer_cmd(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    domain: &str,
    split: Split,
    out: &Path,
) -> Result<InferReport, CliError> {
    let ds = Dataset::open(data)?;
    let params = read_checkpoint(checkpoint)?;
    let scans = ds.load(domain, split, false)?;
    let per_scan = scans
        .par_iter()
        .map(|s| Ok(detect(&params, &s.voxels, &cfg.detector)?.into_iter().map(|d| (s.id.clone(), d)).collect()))
        .collect::<Result<Vec<Vec<(String, Detection)>>, CliError>>()?;
    let preds: Vec<(String, Detection)> = per_scan.into_iter().flatten().collect();
    write_predictions_csv(out, &preds)?;
    Ok(InferReport {
        scans: scans.len(),
        detections: preds.len(),
        predictions: out.to_path_buf(),
    })
}

/// FROC of a predictions CSV against an annotations CSV. Every id in
/// `scan_ids` counts as a scan even without annotations or detections.
pub fn froc_cmd(predictions: &Path, annotations: &Path, scan_ids: &[String]) -> Result<FrocReport, CliError> {
    let preds = read_predictions_csv(predictions)?;
    let anns = read_annotations_csv(annotations)?;
    let known: std::collections::BTreeSet<&str> =
        scan_ids.iter().chain(anns.iter().map(|(id, _)| id)).map(String::as_str).collect();
    if !scan_ids.is_empty() {
        if let Some((id, _)) = preds.iter().find(|(id, _)| !known.contains(id.as_str())) {
            return Err(CliError::Config(format!("prediction for unknown scan `{id}`")));
        }
    }
    let anns: Vec<_> = if scan_ids.is_empty() {
        anns
    } else {
        anns.into_iter().filter(|(id, _)| scan_ids.contains(id)).collect()
    };
    Ok(report(&group_by_scan(&preds, &anns, scan_ids))?)
}

/// Scan ids of one domain and split of a dataset.
pub fn split_ids(data: &Path, domain: &str, split: Split) -> Result<Vec<String>, CliError> {
    Ok(Dataset::open(data)?.entries(domain, split).map(|e| e.id.clone()).collect())
}

// ---------------------------------------------------------------------------
// Verification

/// Kernels need at least this many random instances each.
pub const MIN_KERNEL_INSTANCES: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub kernels: Vec<CheckReport>,
    pub detector: Vec<CheckReport>,
    pub passed: bool,
}

pub fn gradcheck_cmd(instances: usize, seed: u64) -> Result<GradcheckReport, CliError> {
    let kernels = check_kernels(instances.max(MIN_KERNEL_INSTANCES), seed);
    let detector = check_detector_suite(seed, 20)?;
    let passed = kernels.iter().chain(&detector).all(|r| r.passed);
    Ok(GradcheckReport { kernels, detector, passed })
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, Serialize)]
pub struct BenchRun {
    pub seed: u64,
    pub steps: Steps,
    /// Target test FROC after each stage, starting with the source model.
    pub stages: Vec<(String, f64)>,
    pub froc: FrocResult,
    pub selection: Vec<StageSelection>,
    pub pseudo_counts: Vec<usize>,
    pub roi_outside_dead_zone: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub config: RunConfig,
    pub source_epoch_losses: Vec<f64>,
    pub source_non_increasing_fraction: f64,
    /// Source model on the source test split.
    pub source_domain_froc: FrocResult,
    /// Source model on the target test split.
    pub source_only: FrocResult,
    pub runs: Vec<BenchRun>,
    pub reference_gain: f64,
    pub mean_full: f64,
    pub mean_step2_only: f64,
    pub gain_passed: bool,
    pub ordering_passed: bool,
}

fn bench_run(
    source: &DetectorParams,
    cfg: &RunConfig,
    train: &[ScanRecord],
    val: Option<&[ScanRecord]>,
    test: &[ScanRecord],
    steps: Steps,
    seed: u64,
) -> Result<BenchRun, CliError> {
    let (_, rep) = adapt_pipeline(source, train, &cfg.adapt, &cfg.detector, steps, seed, val, Some(test))?;
    let last = rep.froc.last().expect("monitor snapshots present").froc.clone();
    let step2 = rep.step2.unwrap_or_default();
    log::info!("benchmark seed {seed} {steps:?}: FROC {:.4}", last.average);
    Ok(BenchRun {
        seed,
        steps,
        stages: rep.froc.iter().map(|f| (f.stage.clone(), f.froc.average)).collect(),
        froc: last,
        selection: rep.selection,
        pseudo_counts: step2.pseudo_counts,
        roi_outside_dead_zone: step2.roi_outside_dead_zone,
    })
}

/// End-to-end synthetic benchmark: generate both corpora, train the source
/// model, then for every benchmark seed run the full pipeline and step 2
/// alone, all evaluated on the target test split.
pub fn benchmark(cfg: &RunConfig) -> Result<BenchmarkReport, CliError> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.data)?;
    let s_train = select(&corpus, SOURCE, Split::Train);
    let s_test = select(&corpus, SOURCE, Split::Test);
    let t_train: Vec<ScanRecord> = select(&corpus, TARGET, Split::Train)
        .into_iter()
        .map(|s| ScanRecord { annotations: Vec::new(), ..s })
        .collect();
    let t_val = select(&corpus, TARGET, Split::Val);
    let t_test = select(&corpus, TARGET, Split::Test);
    let (source, history) = train_source(&s_train, &cfg.detector, &cfg.source_train, cfg.seed, |e, l, _| {
        log::info!("benchmark source epoch {e}: loss {l:.4}");
        Ok(())
    })?;
    let source_only = froc_on(&source, &t_test, &cfg.detector)?;
    let val = matches!(cfg.eval.model_selection, ModelSelection::ValFroc).then_some(&t_val[..]);
    let mut runs = Vec::new();
    for &seed in &cfg.eval.benchmark_seeds {
        for steps in [Steps::All, Steps::Two] {
            runs.push(bench_run(&source, cfg, &t_train, val, &t_test, steps, seed)?);
        }
    }
    let mean = |steps: Steps| {
        let v: Vec<f64> = runs.iter().filter(|r| r.steps == steps).map(|r| r.froc.average).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (mean_full, mean_step2_only) = (mean(Steps::All), mean(Steps::Two));
    let reference_gain = runs[0].froc.average - source_only.average;
    Ok(BenchmarkReport {
        config: cfg.clone(),
        source_non_increasing_fraction: non_increasing_fraction(&history.epoch_losses),
        source_epoch_losses: history.epoch_losses,
        source_domain_froc: froc_on(&source, &s_test, &cfg.detector)?,
        source_only,
        gain_passed: reference_gain >= MIN_GAIN,
        ordering_passed: mean_full > mean_step2_only,
        runs,
        reference_gain,
        mean_full,
        mean_step2_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_increasing_fraction_examples() {
        assert_eq!(non_increasing_fraction(&[]), 1.0);
        assert_eq!(non_increasing_fraction(&[3.0, 2.0, 2.0, 2.5, 1.0]), 0.75);
    }

    #[test]
    fn corpus_is_deterministic_and_split() {
        let data = DataConfig { source_scans: 10, target_scans: 3, ..DataConfig::default() };
        let a = generate_corpus(&data).unwrap();
        let b = generate_corpus(&data).unwrap();
        assert_eq!(a.len(), 13);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1));
        let s = summarize(&a, SOURCE);
        assert_eq!((s.train, s.val, s.test), (7, 1, 2));
        assert_eq!(a[10].0.id, "target_0000");
    }
}
