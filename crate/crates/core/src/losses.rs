//! Training objectives with analytic gradients.
//!
//! | loss            | inputs                          | gradient w.r.t.  |
//! |-----------------|---------------------------------|------------------|
//! | [`loss_ds`]     | predicted / target DSM          | prediction       |
//! | [`loss_qc`]     | logits, soft target             | logits           |
//! | [`loss_kd`]     | student / teacher stage features| student features |
//! | [`loss_quality`]| classification + distillation   | both             |
//! | [`loss_score`]  | predicted / target scores       | predictions      |

use serde::{Deserialize, Serialize};

use crate::dsm::Dsm;
use crate::error::{Error, Result};
use crate::label::SoftLabel;

/// Dense `channels × height × width` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn zeros_like(other: &FeatureMap) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Spatial mean per channel.
    pub fn global_avg_pool(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        self.data
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Student,
    Teacher,
}

/// Features of the three encoder stages used for distillation: stages 2 and
/// 3 feed the reconstruction term, stage 4 the pooled cosine term.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub stages: [FeatureMap; 3],
    pub source: FeatureSource,
}

impl FeatureStack {
    pub fn new(stages: [FeatureMap; 3], source: FeatureSource) -> Self {
        Self { stages, source }
    }

    pub fn stage2(&self) -> &FeatureMap {
        &self.stages[0]
    }

    pub fn stage3(&self) -> &FeatureMap {
        &self.stages[1]
    }

    pub fn stage4(&self) -> &FeatureMap {
        &self.stages[2]
    }

    pub fn zeros_like(&self) -> FeatureStack {
        FeatureStack {
            stages: [
                FeatureMap::zeros_like(&self.stages[0]),
                FeatureMap::zeros_like(&self.stages[1]),
                FeatureMap::zeros_like(&self.stages[2]),
            ],
            source: self.source,
        }
    }
}

/// How the pooled stage-4 term enters the distillation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineTerm {
    /// `L_KD = λ1·L_FR − λ2·cos(s, t)`: minimizing aligns pooled features.
    #[default]
    Similarity,
    /// `L_KD = λ1·L_FR − λ2·(1 − cos(s, t))`, the literal distance form.
    LiteralDistance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub cosine: CosineTerm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            cosine: CosineTerm::Similarity,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::validation("loss weights must be finite and >= 0"));
        }
        Ok(Self {
            lambda1,
            lambda2,
            cosine: CosineTerm::Similarity,
        })
    }

    pub fn disabled() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            cosine: CosineTerm::Similarity,
        }
    }
}

/// Mean squared error over DSM cells.
pub fn loss_ds(pred: &Dsm, gt: &Dsm) -> Result<(f64, Vec<f64>)> {
    if !pred.same_grid(gt) {
        return Err(Error::validation(format!(
            "DSM grids differ: {}x{} vs {}x{}",
            pred.grid_w(),
            pred.grid_h(),
            gt.grid_w(),
            gt.grid_h()
        )));
    }
    mse(pred.values(), gt.values())
}

/// Mean squared error on raw slices; also used for unclamped predictions.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::validation("MSE inputs must be non-empty and equal length"));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Log-sum-exp stabilized log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Soft-target cross entropy `−Σ_c target[c] · log softmax(logits)[c]`.
///
/// Gradient is `softmax(logits) − target`.
pub fn loss_qc(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::validation(format!(
            "{} logits for a {}-class target",
            logits.len(),
            target.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::validation("logits must be finite"));
    }
    let logp = log_softmax(logits);
    let loss = -target
        .iter()
        .zip(&logp)
        .map(|(t, lp)| if *t == 0.0 { 0.0 } else { t * lp })
        .sum::<f64>();
    let grad = logp.iter().zip(target).map(|(lp, t)| lp.exp() - t).collect();
    Ok((loss, grad))
}

/// [`loss_qc`] against a validated [`SoftLabel`].
pub fn loss_qc_label(logits: &[f64], target: &SoftLabel) -> Result<(f64, Vec<f64>)> {
    loss_qc(logits, target.probs())
}

/// Breakdown of the distillation loss.
#[derive(Clone, Debug)]
pub struct KdOutput {
    pub value: f64,
    /// Sum of stage-2 and stage-3 mean absolute errors.
    pub reconstruction: f64,
    /// Cosine similarity of the pooled stage-4 vectors.
    pub cosine_similarity: f64,
    /// Gradient with respect to the student features.
    pub grad: FeatureStack,
}

fn check_shapes(student: &FeatureStack, teacher: &FeatureStack) -> Result<()> {
    for (i, (s, t)) in student.stages.iter().zip(&teacher.stages).enumerate() {
        if s.shape() != t.shape() {
            return Err(Error::validation(format!(
                "stage {} shapes differ: student {:?}, teacher {:?}",
                i + 2,
                s.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// `λ1·Σ_{l∈{2,3}} MAE(F_l^S, F_l^T) − λ2·C`, where `C` is the cosine
/// similarity of the globally pooled stage-4 vectors (or `1 − similarity`
/// with [`CosineTerm::LiteralDistance`]). The MAE subgradient at a tie is 0.
pub fn loss_kd(student: &FeatureStack, teacher: &FeatureStack, w: &LossWeights) -> Result<KdOutput> {
    check_shapes(student, teacher)?;
    let mut grad = student.zeros_like();

    let mut reconstruction = 0.0;
    for l in 0..2 {
        let (s, t) = (&student.stages[l], &teacher.stages[l]);
        let n = s.data.len() as f64;
        let mut sum = 0.0;
        for ((g, a), b) in grad.stages[l].data.iter_mut().zip(&s.data).zip(&t.data) {
            let d = a - b;
            sum += d.abs();
            *g = w.lambda1 * sign(d) / n;
        }
        reconstruction += sum / n;
    }

    let s4 = student.stage4();
    let a = s4.global_avg_pool();
    let b = teacher.stage4().global_avg_pool();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::validation(
            "pooled stage-4 feature has zero norm; cosine undefined",
        ));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    // d cos / d a = b / (|a||b|) − cos · a / |a|²
    let dterm_dcos = match w.cosine {
        CosineTerm::Similarity => -w.lambda2,
        CosineTerm::LiteralDistance => w.lambda2,
    };
    let hw = (s4.height * s4.width) as f64;
    for (c, chunk) in grad.stages[2].data.chunks_exact_mut(s4.height * s4.width).enumerate() {
        let dcos_da = b[c] / (na * nb) - cos * a[c] / (na * na);
        let g = dterm_dcos * dcos_da / hw;
        chunk.fill(g);
    }

    let cd_term = match w.cosine {
        CosineTerm::Similarity => cos,
        CosineTerm::LiteralDistance => 1.0 - cos,
    };
    Ok(KdOutput {
        value: w.lambda1 * reconstruction - w.lambda2 * cd_term,
        reconstruction,
        cosine_similarity: cos,
        grad,
    })
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `L_QC + 𝟙[reference] · L_KD` for a single sample.
pub fn loss_quality(
    logits: &[f64],
    target: &[f64],
    student: &FeatureStack,
    teacher: &FeatureStack,
    is_reference: bool,
    w: &LossWeights,
) -> Result<f64> {
    let (qc, _) = loss_qc(logits, target)?;
    if !is_reference {
        return Ok(qc);
    }
    Ok(qc + loss_kd(student, teacher, w)?.value)
}

/// One row of a [`loss_quality_batch`] call.
pub struct QualityRow<'a> {
    pub logits: &'a [f64],
    pub target: &'a [f64],
    pub student: &'a FeatureStack,
    pub teacher: &'a FeatureStack,
    pub is_reference: bool,
}

/// Batch objective: classification averaged over all rows plus distillation
/// averaged over the reference rows only. Non-reference teacher features are
/// never read.
pub fn loss_quality_batch(rows: &[QualityRow<'_>], w: &LossWeights) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let mut qc = 0.0;
    let mut kd = 0.0;
    let mut n_ref = 0usize;
    for row in rows {
        qc += loss_qc(row.logits, row.target)?.0;
        if row.is_reference {
            kd += loss_kd(row.student, row.teacher, w)?.value;
            n_ref += 1;
        }
    }
    let qc = qc / rows.len() as f64;
    Ok(if n_ref == 0 { qc } else { qc + kd / n_ref as f64 })
}

/// Smooth-L1 averaged over elements: `0.5 d²` if `|d| < 1`, else `|d| − 0.5`.
pub fn loss_score(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() {
        return Err(Error::validation("score loss needs at least one element"));
    }
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(x, y)| {
            let d = x - y;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d / n
            } else {
                loss += d.abs() - 0.5;
                sign(d) / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}
