//! Soft labels over the joint `(type, level) + reference` class space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ probs = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Joint class layout: index 0 is the reference class, then
/// `1 + type * n_levels + (level - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpace {
    pub n_types: usize,
    pub n_levels: usize,
}

impl ClassSpace {
    pub const fn new(n_types: usize, n_levels: usize) -> Self {
        Self { n_types, n_levels }
    }

    pub const fn num_classes(&self) -> usize {
        self.n_types * self.n_levels + 1
    }

    /// Width of the type-marginal label (types plus reference).
    pub const fn num_type_classes(&self) -> usize {
        self.n_types + 1
    }

    /// Width of the level-marginal label (levels plus reference).
    pub const fn num_level_classes(&self) -> usize {
        self.n_levels + 1
    }

    /// `(type, level)` with 0-based type and 1-based level; `None` for reference.
    pub fn decompose(&self, class: usize) -> Option<(usize, usize)> {
        if class == 0 || class >= self.num_classes() {
            return None;
        }
        let k = class - 1;
        Some((k / self.n_levels, k % self.n_levels + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("soft label must have at least one class"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation("soft label entries must be finite and >= 0"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::validation(format!("soft label sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::validation(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Convex combination `Σ_k weights[k] · labels[k]`.
    pub fn mix(labels: &[&SoftLabel], weights: &[f64]) -> Result<Self> {
        if labels.is_empty() || labels.len() != weights.len() {
            return Err(Error::validation(format!(
                "{} labels but {} weights",
                labels.len(),
                weights.len()
            )));
        }
        let n = labels[0].len();
        if labels.iter().any(|l| l.len() != n) {
            return Err(Error::validation("labels have different class counts"));
        }
        let mut probs = vec![0.0; n];
        for (label, &w) in labels.iter().zip(weights) {
            for (acc, &p) in probs.iter_mut().zip(&label.probs) {
                *acc += w * p;
            }
        }
        Self::new(probs)
    }

    /// Marginal over distortion type: `[reference, type_0, .., type_{T-1}]`.
    pub fn type_marginal(&self, space: &ClassSpace) -> Result<Vec<f64>> {
        self.check_space(space)?;
        let mut out = vec![0.0; space.num_type_classes()];
        out[0] = self.probs[0];
        for (class, &p) in self.probs.iter().enumerate().skip(1) {
            let (t, _) = space.decompose(class).expect("class in range");
            out[t + 1] += p;
        }
        Ok(out)
    }

    /// Marginal over level: `[reference, level_1, .., level_L]`.
    pub fn level_marginal(&self, space: &ClassSpace) -> Result<Vec<f64>> {
        self.check_space(space)?;
        let mut out = vec![0.0; space.num_level_classes()];
        out[0] = self.probs[0];
        for (class, &p) in self.probs.iter().enumerate().skip(1) {
            let (_, level) = space.decompose(class).expect("class in range");
            out[level] += p;
        }
        Ok(out)
    }

    fn check_space(&self, space: &ClassSpace) -> Result<()> {
        if self.len() != space.num_classes() {
            return Err(Error::validation(format!(
                "label has {} classes, class space has {}",
                self.len(),
                space.num_classes()
            )));
        }
        Ok(())
    }
}

impl Serialize for SoftLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.probs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SoftLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        SoftLabel::new(probs).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPACE: ClassSpace = ClassSpace::new(8, 5);

    #[test]
    fn rejects_invalid() {
        assert!(SoftLabel::new(vec![0.5, 0.4]).is_err());
        assert!(SoftLabel::new(vec![1.5, -0.5]).is_err());
        assert!(SoftLabel::new(vec![]).is_err());
        assert!(SoftLabel::one_hot(3, 3).is_err());
    }

    #[test]
    fn marginals_of_joint_label() {
        let mut probs = vec![0.0; 41];
        probs[0] = 0.1; // reference
        probs[1] = 0.2; // type 0, level 1
        probs[1 + 5 + 2] = 0.3; // type 1, level 3
        probs[40] = 0.4; // type 7, level 5
        let label = SoftLabel::new(probs).unwrap();
        let t = label.type_marginal(&SPACE).unwrap();
        let l = label.level_marginal(&SPACE).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(l.len(), 6);
        assert_eq!(t, vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.4]);
        assert_eq!(l, vec![0.1, 0.2, 0.0, 0.3, 0.0, 0.4]);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_one_hots() {
        let a = SoftLabel::one_hot(3, 41).unwrap();
        let b = SoftLabel::one_hot(17, 41).unwrap();
        let m = SoftLabel::mix(&[&a, &b], &[0.75, 0.25]).unwrap();
        assert_eq!(m.probs()[3], 0.75);
        assert_eq!(m.probs()[17], 0.25);
        let same = SoftLabel::mix(&[&a, &a], &[0.3, 0.7]).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn json_is_a_plain_array() {
        let l = SoftLabel::one_hot(1, 3).unwrap();
        assert_eq!(serde_json::to_string(&l).unwrap(), "[0.0,1.0,0.0]");
        assert!(serde_json::from_str::<SoftLabel>("[0.5,0.6]").is_err());
    }
}
