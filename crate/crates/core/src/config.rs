//! Run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distortion::{DistortionType, Schedule};
use crate::dsm::{DsmKind, DsmProvider, PatchRegressor};
use crate::dsmix::MAX_SOURCES;
use crate::error::{Error, Result};
use crate::losses::{CosineTerm, LossWeights};
use crate::trainkit::{ProbeConfig, QepConfig};

/// Distillation switch for pre-training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdMode {
    #[default]
    On,
    Off,
    /// Subtract `1 − cos` instead of `cos` for the pooled term.
    LiteralSign,
}

impl FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(KdMode::On),
            "off" => Ok(KdMode::Off),
            "literal-sign" => Ok(KdMode::LiteralSign),
            other => Err(Error::validation(format!(
                "unknown KD mode `{other}` (expected on, off or literal-sign)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub kd: KdMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            kd: KdMode::On,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let q = QepConfig::default();
        Self {
            epochs: q.epochs,
            lr: q.lr,
            batch_size: q.batch_size,
            momentum: q.momentum,
            weight_decay: q.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Crop side for five-crop training and inference.
    pub crop: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            crop: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmPredictorSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for DsmPredictorSection {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub patch_size: usize,
    pub mix_max: usize,
    pub dsm_source: DsmKind,
    pub distortions: Vec<DistortionType>,
    /// Number of augmented samples produced by `augment`.
    pub samples: usize,
    pub jobs: usize,
    /// Optional custom level schedule; the built-in one is used otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PathBuf>,
    /// Weights for the `pred` sensitivity-map source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsm_model: Option<PathBuf>,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub dsm_predictor: DsmPredictorSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            patch_size: 8,
            mix_max: MAX_SOURCES,
            dsm_source: DsmKind::GroundTruth,
            distortions: DistortionType::ALL.to_vec(),
            samples: 1000,
            jobs: 1,
            schedule: None,
            dsm_model: None,
            loss: LossSection::default(),
            train: TrainSection::default(),
            probe: ProbeSection::default(),
            dsm_predictor: DsmPredictorSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if !(1..=MAX_SOURCES).contains(&self.mix_max) {
            return bad(format!("mix_max must be in 1..={MAX_SOURCES}, got {}", self.mix_max));
        }
        if self.distortions.is_empty() {
            return bad("distortion subset is empty".into());
        }
        let mut seen = self.distortions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.distortions.len() {
            return bad("distortion subset lists a type twice".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        LossWeights::new(self.loss.lambda1, self.loss.lambda2)?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr >= 0.0 && t.lr.is_finite()) {
            return bad("train: batch_size must be positive and lr finite, >= 0".into());
        }
        if !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) {
            return bad("train: momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        let p = &self.probe;
        if p.batch_size == 0 || !(p.lr >= 0.0 && p.lr.is_finite()) || p.crop == 0 {
            return bad("probe: batch_size and crop must be positive, lr finite and >= 0".into());
        }
        if self.dsm_source == DsmKind::TinyPredictor && self.dsm_model.is_none() {
            return bad("dsm_source = tiny_predictor needs dsm_model".into());
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        let mut w = LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            cosine: CosineTerm::Similarity,
        };
        match self.loss.kd {
            KdMode::On => {}
            KdMode::Off => w = LossWeights::disabled(),
            KdMode::LiteralSign => w.cosine = CosineTerm::LiteralDistance,
        }
        w
    }

    pub fn qep_config(&self) -> QepConfig {
        QepConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            seed: self.seed,
            weights: self.loss_weights(),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            lr: self.probe.lr,
            batch_size: self.probe.batch_size,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match &self.schedule {
            Some(path) => Schedule::load(path),
            None => Ok(Schedule::builtin()),
        }
    }

    pub fn dsm_provider(&self) -> Result<DsmProvider> {
        Ok(match self.dsm_source {
            DsmKind::GroundTruth => DsmProvider::ground_truth(self.patch_size),
            DsmKind::GradientMap => DsmProvider::gradient_map(self.patch_size),
            DsmKind::TinyPredictor => {
                let path = self
                    .dsm_model
                    .as_ref()
                    .ok_or_else(|| Error::validation("no dsm_model configured"))?;
                let model = PatchRegressor::load(path)?;
                if model.patch_size != self.patch_size {
                    return Err(Error::validation(format!(
                        "DSM model patch size {} differs from patch_size {}",
                        model.patch_size, self.patch_size
                    )));
                }
                DsmProvider::predictor(model)
            }
        })
    }
}

/// Parses a comma-separated distortion list such as `gaussian_noise,pixelate`.
pub fn parse_distortions(list: &str) -> Result<Vec<DistortionType>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse(
            "seed = 7\npatch_size = 8\nmix_max = 2\ndsm_source = \"gradient_map\"\n\
             distortions = [\"gaussian_noise\"]\nsamples = 10\njobs = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.mix_max, 2);
        assert_eq!(cfg.loss, LossSection::default());

        let cfg = RunConfig::parse("seed = 3\n[train]\nepochs = 4\n").unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs), (3, 4));
        assert_eq!(cfg.train.lr, TrainSection::default().lr);
        assert_eq!(cfg.patch_size, RunConfig::default().patch_size);
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.mix_max = 4;
        assert!(RunConfig::parse(&cfg.to_toml()).is_err());
        let text = RunConfig::default().to_toml() + "\nbogus = 1\n";
        assert!(RunConfig::parse(&text).is_err());
        let mut cfg = RunConfig::default();
        cfg.loss.lambda1 = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kd_modes() {
        let mut cfg = RunConfig::default();
        cfg.loss.kd = "off".parse().unwrap();
        assert_eq!(cfg.loss_weights(), LossWeights::disabled());
        cfg.loss.kd = "literal-sign".parse().unwrap();
        assert_eq!(cfg.loss_weights().cosine, CosineTerm::LiteralDistance);
        assert!("maybe".parse::<KdMode>().is_err());
    }
}
