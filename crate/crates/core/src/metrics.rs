//! Rank-order and linear correlation between ground-truth and predicted scores.

use std::path::Path;

use crate::error::{Error, Result};

/// Paired ground-truth / prediction vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePairs {
    pub gt: Vec<f64>,
    pub pred: Vec<f64>,
}

impl ScorePairs {
    pub fn new(gt: Vec<f64>, pred: Vec<f64>) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(Error::validation(format!(
                "{} ground-truth scores but {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        if gt.iter().chain(&pred).any(|v| !v.is_finite()) {
            return Err(Error::validation("scores must be finite"));
        }
        Ok(Self { gt, pred })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    /// Reads a CSV with a header row and columns `gt, pred`.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let (mut gt, mut pred) = (Vec::new(), Vec::new());
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(path, e))?;
            if record.len() < 2 {
                return Err(Error::validation(format!(
                    "{}: row {} has fewer than two columns",
                    path.display(),
                    i + 2
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::validation(format!("{}: row {}: `{s}` is not a number", path.display(), i + 2))
                })
            };
            gt.push(parse(&record[0])?);
            pred.push(parse(&record[1])?);
        }
        Self::new(gt, pred)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Fractional ranks (1-based); tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Spearman rank-order correlation, `1 − 6 Σ d² / (n (n² − 1))` on average
/// ranks. Undefined when either vector is constant.
pub fn srcc(pairs: &ScorePairs) -> Result<f64> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::validation(format!("SRCC needs n >= 3, got {n}")));
    }
    if is_constant(&pairs.gt) || is_constant(&pairs.pred) {
        return Err(Error::Undefined("SRCC of a constant vector".into()));
    }
    let ru = average_ranks(&pairs.gt);
    let rv = average_ranks(&pairs.pred);
    let d2: f64 = ru.iter().zip(&rv).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = n as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Pearson linear correlation. Undefined when either vector has zero variance.
pub fn plcc(pairs: &ScorePairs) -> Result<f64> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::validation(format!("PLCC needs n >= 2, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mu, mv) = (mean(&pairs.gt), mean(&pairs.pred));
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (u, v) in pairs.gt.iter().zip(&pairs.pred) {
        let (du, dv) = (u - mu, v - mv);
        suv += du * dv;
        suu += du * du;
        svv += dv * dv;
    }
    if suu == 0.0 || svv == 0.0 {
        return Err(Error::Undefined("PLCC with a zero-variance vector".into()));
    }
    Ok(suv / (suu.sqrt() * svv.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(u: &[f64], v: &[f64]) -> ScorePairs {
        ScorePairs::new(u.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn srcc_worked_examples() {
        assert_eq!(srcc(&pairs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap(), 1.0);
        assert_eq!(srcc(&pairs(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])).unwrap(), -1.0);
        assert_eq!(
            srcc(&pairs(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0])).unwrap(),
            0.8
        );
    }

    #[test]
    fn srcc_errors() {
        assert!(srcc(&pairs(&[1.0, 2.0], &[1.0, 2.0])).is_err());
        assert!(matches!(
            srcc(&pairs(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn plcc_affine_relations() {
        let u = [0.3, 1.7, -2.0, 4.5, 0.0];
        let v: Vec<f64> = u.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((plcc(&pairs(&u, &v)).unwrap() - 1.0).abs() < 1e-15);
        let v: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((plcc(&pairs(&u, &v)).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            plcc(&pairs(&u, &[2.0; 5])),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn signed_range_is_not_clamped() {
        let r = plcc(&pairs(&[1.0, 2.0, 3.0, 4.0], &[4.0, 1.0, 3.0, 0.5])).unwrap();
        assert!(r < 0.0 && r >= -1.0);
    }

    #[test]
    fn pairs_validation() {
        assert!(ScorePairs::new(vec![1.0], vec![]).is_err());
        assert!(ScorePairs::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn csv_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "gt,pred\n1,0.5\n2, 0.7\n3,0.6\n").unwrap();
        let p = ScorePairs::from_csv(&path).unwrap();
        assert_eq!(p.gt, vec![1.0, 2.0, 3.0]);
        assert_eq!(p.pred, vec![0.5, 0.7, 0.6]);
        std::fs::write(&path, "gt,pred\n1,x\n").unwrap();
        assert!(ScorePairs::from_csv(&path).is_err());
    }
}
