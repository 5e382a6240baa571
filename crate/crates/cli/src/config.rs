//! Run configuration: one JSON document shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sfuda_core::adapt::AdaptConfig;
use sfuda_core::data::SynthDomainSpec;
use sfuda_core::detector::{DetectorConfig, SourceTrainConfig};

use crate::CliError;

/// Which checkpoint of an adaptation step is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// Epoch with the best FROC on the target validation split.
    ValFroc,
    /// Final epoch.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SynthDomainSpec,
    pub target: SynthDomainSpec,
    pub source_scans: usize,
    pub target_scans: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SynthDomainSpec { side: 48, ..SynthDomainSpec::source_default() },
            target: SynthDomainSpec { side: 48, ..SynthDomainSpec::target_default() },
            source_scans: 40,
            target_scans: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub model_selection: ModelSelection,
    /// Seeds averaged by the benchmark; the first is the reference seed.
    pub benchmark_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            model_selection: ModelSelection::ValFroc,
            benchmark_seeds: vec![17, 18, 19],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub source_train: SourceTrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            out_dir: PathBuf::from("runs/reference"),
            workers: 0,
            data: DataConfig::default(),
            detector: DetectorConfig { patch_side: 48, ..DetectorConfig::default() },
            source_train: SourceTrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: sfuda_core::Error| CliError::Config(e.to_string());
        self.data.source.validate().map_err(wrap)?;
        self.data.target.validate().map_err(wrap)?;
        self.detector.validate().map_err(wrap)?;
        self.source_train.sgd.validate().map_err(wrap)?;
        self.adapt.validate().map_err(wrap)?;
        if self.eval.benchmark_seeds.is_empty() {
            return Err(CliError::Config("eval.benchmark_seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// Every config key with its meaning and, where the value follows the
/// published method, where it comes from. Rendered into `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data order, sampling and initialisation"),
    ("out_dir", "directory for datasets, checkpoints and reports"),
    ("workers", "worker threads, 0 = all cores (the --workers flag overrides)"),
    ("data.source / data.target", "synthetic domain specs: side, nodules_min/max, radius_min/max, peak_intensity, background_intensity, noise_std, noise_smoothing, contrast, edge_sharpness, distractors_min/max, distractor_radius, distractor_intensity, seed (all keys required when given)"),
    ("data.source_scans / data.target_scans", "corpus sizes, split train:val:test = 7:1:2 [published data protocol]"),
    ("detector.patch_side", "training patch side, multiple of the stride 4"),
    ("detector.patch_overlap", "overlap between training patches"),
    ("detector.top_n", "proposals kept per patch after NMS"),
    ("detector.pre_nms", "anchors decoded before NMS"),
    ("detector.nms_iou", "NMS IoU threshold"),
    ("detector.hard_negatives / detector.random_negatives", "negative anchors per patch in the RPN loss"),
    ("detector.assign.positive_iou", "IoU for a positive anchor, 0.3 (argmax anchors are positive too)"),
    ("detector.assign.negative_iou", "IoU below which an anchor is negative, 0.1"),
    ("detector.score", "detection score: product (geometric mean of RPN and RoI probabilities) or roi"),
    ("source_train.epochs", "source-model training epochs"),
    ("source_train.sgd.*", "source-model optimiser (lr, momentum, weight_decay, batch_size)"),
    ("source_train.init_seed", "parameter initialisation seed, mixed with the run seed"),
    ("adapt.t_fg / adapt.t_bg", "RPN score thresholds for foreground and background instances in the contrastive step, 0.9 / 0.1"),
    ("adapt.max_fg / adapt.max_bg", "instance caps per patch in the contrastive step, 16 / 32"),
    ("adapt.delta", "pseudo-nodule threshold, 0.7 [published: best threshold in the pseudo-label threshold study]"),
    ("adapt.beta", "EMA smoothing of the teacher, 0.9996 [published: teacher-student EMA setting]"),
    ("adapt.eta", "weight of the pseudo-supervised term in the student loss, 1 [published: loss-weight study]"),
    ("adapt.we.gamma", "weighted-entropy focusing exponent, 4 [published: weighted-entropy hyper-parameter study]"),
    ("adapt.we.alpha", "weighted-entropy class balance, 0.1 [published: weighted-entropy hyper-parameter study]"),
    ("adapt.we.tau1 / adapt.we.tau2", "weighted-entropy dead zone, 0.25 / 0.75"),
    ("adapt.we.detach_modulator", "treat the modulating factor as constant when differentiating"),
    ("adapt.contrastive.omega", "rank-weight smoothing of the contrastive negative term"),
    ("adapt.contrastive.sim_clamp_eps", "distance of clamped similarities from the log singularities"),
    ("adapt.sgd.lr", "learning rate 5e-4 [published implementation details]"),
    ("adapt.sgd.momentum", "SGD momentum 0.9 [published implementation details]"),
    ("adapt.sgd.weight_decay", "weight decay 1e-4 [published implementation details]"),
    ("adapt.sgd.batch_size", "patches per batch, 8 [published implementation details]"),
    ("adapt.step1_epochs / adapt.step2_epochs", "maximum epochs per adaptation step, 100 [published implementation details]"),
    ("eval.model_selection", "val_froc keeps the epoch with the best target-validation FROC, last keeps the final one"),
    ("eval.benchmark_seeds", "seeds of the benchmark; the first is the reference seed"),
];

pub fn keys_help() -> String {
    let mut s = String::from("Config keys (JSON, unknown keys rejected, missing keys take the defaults):\n");
    for (k, v) in CONFIG_KEYS {
        s.push_str(&format!("  {k}\n      {v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.adapt, cfg.adapt);
    }

    #[test]
    fn shipped_reference_config_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"adapt": {"dleta": 0.5}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.adapt.delta = 1.5;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn help_lists_every_top_level_key() {
        let help = keys_help();
        let value = serde_json::to_value(RunConfig::default()).unwrap();
        for (k, v) in value.as_object().unwrap() {
            match v.as_object() {
                Some(inner) if k != "data" => {
                    for sub in inner.keys() {
                        assert!(help.contains(&format!("{k}.{sub}")), "{k}.{sub} undocumented");
                    }
                }
                _ => assert!(help.contains(k.as_str()), "{k} undocumented"),
            }
        }
    }
}
