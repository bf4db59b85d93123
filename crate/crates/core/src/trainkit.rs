//! Encoder pre-training, linear probing and five-crop inference.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distortion::CLASS_SPACE;
use crate::dsmix::MixOutput;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::label::SoftLabel;
use crate::losses::{loss_kd, loss_qc, loss_score, FeatureSource, FeatureStack, LossWeights};
use crate::nn::{NetShape, TinyNet};
use crate::rng;

/// Anything that maps an image to a pooled feature vector.
pub trait Encoder {
    fn embed(&self, img: &ImageRgb) -> Result<Vec<f64>>;
    fn checksum(&self) -> String;
    fn is_frozen(&self) -> bool;
}

impl Encoder for TinyNet {
    fn embed(&self, img: &ImageRgb) -> Result<Vec<f64>> {
        TinyNet::embed(self, img)
    }

    fn checksum(&self) -> String {
        TinyNet::checksum(self)
    }

    fn is_frozen(&self) -> bool {
        TinyNet::is_frozen(self)
    }
}

/// The fixed random-weight teacher for a run.
pub fn teacher_net(seed: u64) -> TinyNet {
    TinyNet::new(NetShape::default(), rng::child_seed(seed, "teacher", 0)).freeze()
}

/// The freshly initialized student that [`qep_train`] starts from.
pub fn student_init(shape: NetShape, seed: u64) -> TinyNet {
    TinyNet::new(shape, rng::child_seed(seed, "student", 0))
}

/// One pre-training example.
#[derive(Clone, Debug)]
pub struct QepSample {
    pub image: ImageRgb,
    pub label: SoftLabel,
    pub is_reference: bool,
}

impl QepSample {
    pub fn from_mix(out: MixOutput) -> Self {
        let is_reference = out.manifest.is_reference();
        Self {
            image: out.image,
            label: out.label,
            is_reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QepConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for QepConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl QepConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::validation("momentum must be in [0, 1), weight decay >= 0"));
        }
        Ok(())
    }

    fn kd_enabled(&self) -> bool {
        self.weights.lambda1 != 0.0 || self.weights.lambda2 != 0.0
    }
}

#[derive(Clone, Debug)]
pub struct QepOutcome {
    pub student: TinyNet,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub batch_losses: Vec<f64>,
}

/// SGD with optional momentum and weight decay; both scale with `lr`, so a
/// zero learning rate leaves the parameters untouched.
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    fn step(&mut self, net: &mut TinyNet, grad: &[f64]) -> Result<()> {
        let params = net.params();
        let mut update = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i] + self.weight_decay * params[i];
            self.velocity[i] = self.momentum * self.velocity[i] + g;
            update[i] = self.lr * self.velocity[i];
        }
        net.apply_update(&update)
    }
}

/// Trains a fresh student on the classification objective plus distillation
/// on reference rows. The batch loss averages classification over all rows
/// and distillation over the reference rows of the batch.
pub fn qep_train(corpus: &[QepSample], teacher: &TinyNet, cfg: &QepConfig) -> Result<QepOutcome> {
    if corpus.is_empty() {
        return Err(Error::validation("pre-training corpus is empty"));
    }
    if !teacher.is_frozen() {
        return Err(Error::State("teacher network must be frozen".into()));
    }
    cfg.validate()?;
    let teacher_sum = teacher.checksum();

    let type_targets = corpus
        .iter()
        .map(|s| s.label.type_marginal(&CLASS_SPACE))
        .collect::<Result<Vec<_>>>()?;
    let level_targets = corpus
        .iter()
        .map(|s| s.label.level_marginal(&CLASS_SPACE))
        .collect::<Result<Vec<_>>>()?;
    let kd = cfg.kd_enabled();
    let teacher_feats: Vec<Option<FeatureStack>> = corpus
        .iter()
        .map(|s| {
            if kd && s.is_reference {
                teacher.stage_features(&s.image, FeatureSource::Teacher).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut student = student_init(teacher.shape().clone(), cfg.seed);
    let mut opt = Sgd {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        velocity: vec![0.0; student.num_params()],
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::new();
    let mut grad = vec![0.0; student.num_params()];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "qep_shuffle", epoch as u64));
        let mut epoch_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let n = batch.len() as f64;
            let n_ref = batch.iter().filter(|&&i| teacher_feats[i].is_some()).count();
            let (mut qc_sum, mut kd_sum) = (0.0, 0.0);
            for &i in batch {
                let cache = student.forward(&corpus[i].image)?;
                let (lt, mut dt) = loss_qc(&cache.type_logits, &type_targets[i])?;
                let (ll, mut dl) = loss_qc(&cache.level_logits, &level_targets[i])?;
                qc_sum += lt + ll;
                dt.iter_mut().chain(dl.iter_mut()).for_each(|g| *g /= n);
                let kd_grad = match &teacher_feats[i] {
                    Some(t) => {
                        let mut out = loss_kd(&cache.features(FeatureSource::Student), t, &cfg.weights)?;
                        kd_sum += out.value;
                        let scale = 1.0 / n_ref as f64;
                        for stage in out.grad.stages.iter_mut() {
                            stage.data.iter_mut().for_each(|g| *g *= scale);
                        }
                        Some(out.grad)
                    }
                    None => None,
                };
                student.backward(&cache, &dt, &dl, kd_grad.as_ref(), &mut grad)?;
            }
            let mut loss = qc_sum / n;
            if n_ref > 0 {
                loss += kd_sum / n_ref as f64;
            }
            opt.step(&mut student, &grad)?;
            batch_losses.push(loss);
            epoch_sum += loss;
            n_batches += 1;
        }
        epoch_losses.push(epoch_sum / n_batches as f64);
    }

    if teacher.checksum() != teacher_sum {
        return Err(Error::State("teacher weights changed during training".into()));
    }
    Ok(QepOutcome {
        student,
        epoch_losses,
        batch_losses,
    })
}

/// Linear regression head on standardized encoder features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProbeHead {
    /// Zero weights; standardization statistics taken from `features`.
    pub fn init(features: &[Vec<f64>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::validation("probe needs at least one feature vector"))?;
        let d = first.len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::validation("feature vectors must share a nonzero width"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var
            .iter()
            .map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self {
            mean,
            scale,
            weights: vec![0.0; d],
            bias: 0.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.input_dim() {
            return Err(Error::validation(format!(
                "probe expects {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        let z = self.standardize(features);
        Ok(self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("probe serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trains a [`ProbeHead`] with the Smooth-L1 score loss on top of a frozen encoder.
pub fn linear_probe<E: Encoder>(
    encoder: &E,
    labeled: &[(ImageRgb, f64)],
    cfg: &ProbeConfig,
) -> Result<ProbeHead> {
    if !encoder.is_frozen() {
        return Err(Error::State("probe encoder must be frozen".into()));
    }
    if labeled.is_empty() {
        return Err(Error::validation("probe needs labeled data"));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::validation("probe batch size must be positive, lr finite and >= 0"));
    }
    let before = encoder.checksum();
    let features = labeled
        .iter()
        .map(|(img, _)| encoder.embed(img))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = labeled.iter().map(|(_, s)| *s).collect();
    let head = fit_probe(&features, &targets, cfg)?;
    if encoder.checksum() != before {
        return Err(Error::State("encoder weights changed during probing".into()));
    }
    Ok(head)
}

/// Probe fitting on precomputed features.
pub fn fit_probe(features: &[Vec<f64>], targets: &[f64], cfg: &ProbeConfig) -> Result<ProbeHead> {
    if features.len() != targets.len() {
        return Err(Error::validation("feature and target counts differ"));
    }
    let mut head = ProbeHead::init(features)?;
    let z: Vec<Vec<f64>> = features.iter().map(|f| head.standardize(f)).collect();
    let mut order: Vec<usize> = (0..z.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "probe_shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let pred: Vec<f64> = batch
                .iter()
                .map(|&i| head.bias + z[i].iter().zip(&head.weights).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let gt: Vec<f64> = batch.iter().map(|&i| targets[i]).collect();
            let (_, g) = loss_score(&pred, &gt)?;
            let mut gw = vec![0.0; head.weights.len()];
            let mut gb = 0.0;
            for (k, &i) in batch.iter().enumerate() {
                gb += g[k];
                for (w, x) in gw.iter_mut().zip(&z[i]) {
                    *w += g[k] * x;
                }
            }
            head.bias -= cfg.lr * gb;
            for (w, d) in head.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * d;
            }
        }
    }
    Ok(head)
}

/// Crop origins: four corners, then the center.
pub fn five_patch_origins(width: usize, height: usize, patch: usize) -> Result<[(usize, usize); 5]> {
    if patch == 0 || width < patch || height < patch {
        return Err(Error::validation(format!(
            "image {width}x{height} is smaller than patch {patch}"
        )));
    }
    let (dx, dy) = (width - patch, height - patch);
    Ok([(0, 0), (dx, 0), (0, dy), (dx, dy), (dx / 2, dy / 2)])
}

/// The five crops used by [`five_patch_predict`].
pub fn five_patches(img: &ImageRgb, patch: usize) -> Result<Vec<ImageRgb>> {
    five_patch_origins(img.width(), img.height(), patch)?
        .iter()
        .map(|&(x, y)| img.crop(x, y, patch, patch))
        .collect()
}

/// Mean probe score over the four corner crops and the center crop.
pub fn five_patch_predict<E: Encoder>(
    encoder: &E,
    head: &ProbeHead,
    img: &ImageRgb,
    patch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for crop in five_patches(img, patch)? {
        sum += head.predict(&encoder.embed(&crop)?)?;
    }
    Ok(sum / 5.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_for_double_patch() {
        assert_eq!(
            five_patch_origins(64, 64, 32).unwrap(),
            [(0, 0), (32, 0), (0, 32), (32, 32), (16, 16)]
        );
        assert_eq!(five_patch_origins(8, 8, 8).unwrap(), [(0, 0); 5]);
        assert!(five_patch_origins(7, 9, 8).is_err());
    }

    #[test]
    fn zero_epoch_probe_is_init() {
        let feats = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 2.0]];
        let head = fit_probe(&feats, &[0.1, 0.2, 0.3], &ProbeConfig { epochs: 0, ..Default::default() })
            .unwrap();
        assert_eq!(head, ProbeHead::init(&feats).unwrap());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            qep_train(&[], &teacher_net(0), &QepConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unfrozen_teacher_rejected() {
        let sample = QepSample {
            image: ImageRgb::constant(8, 8, 0.5).unwrap(),
            label: SoftLabel::one_hot(0, 41).unwrap(),
            is_reference: true,
        };
        let teacher = TinyNet::new(NetShape::default(), 0);
        assert!(qep_train(&[sample], &teacher, &QepConfig::default()).is_err());
    }
}
