//! Synthetic distortion bank.
//!
//! Eight degradation families, five levels each, with strength parameters
//! read from a versioned schedule file (`config/distortions.toml`). Every
//! distortion is a pure function of `(image, spec, seed)` and clamps its
//! output to `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::label::ClassSpace;
use crate::rng;

pub const NUM_LEVELS: usize = 5;

/// Class space of the bank: 8 types × 5 levels + reference = 41 classes.
pub const CLASS_SPACE: ClassSpace = ClassSpace::new(DistortionType::ALL.len(), NUM_LEVELS);

pub const DEFAULT_SCHEDULE_TOML: &str = include_str!("../config/distortions.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionType {
    GaussianNoise,
    GaussianBlur,
    JpegBlocking,
    ContrastShift,
    Fnoise,
    MotionBlur,
    Pixelate,
    ColorSaturate,
}

impl DistortionType {
    pub const ALL: [DistortionType; 8] = [
        DistortionType::GaussianNoise,
        DistortionType::GaussianBlur,
        DistortionType::JpegBlocking,
        DistortionType::ContrastShift,
        DistortionType::Fnoise,
        DistortionType::MotionBlur,
        DistortionType::Pixelate,
        DistortionType::ColorSaturate,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionType::GaussianNoise => "gaussian_noise",
            DistortionType::GaussianBlur => "gaussian_blur",
            DistortionType::JpegBlocking => "jpeg_blocking",
            DistortionType::ContrastShift => "contrast_shift",
            DistortionType::Fnoise => "fnoise",
            DistortionType::MotionBlur => "motion_blur",
            DistortionType::Pixelate => "pixelate",
            DistortionType::ColorSaturate => "color_saturate",
        }
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown distortion type `{s}`")))
    }
}

/// A resolved `(type, level)` pair with its strength parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionSpec {
    pub dtype: DistortionType,
    pub level: u8,
    pub param: f64,
}

impl DistortionSpec {
    /// Resolves the parameter from the built-in schedule.
    pub fn new(dtype: DistortionType, level: u8) -> Result<Self> {
        Schedule::builtin().spec(dtype, level)
    }

    pub fn class_index(&self) -> usize {
        class_index(Some((self.dtype, self.level)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScheduleEntry {
    parameter: String,
    levels: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScheduleFile {
    version: u32,
    #[serde(flatten)]
    entries: BTreeMap<DistortionType, ScheduleEntry>,
}

/// Per-type level schedules.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub version: u32,
    params: BTreeMap<DistortionType, (String, [f64; NUM_LEVELS])>,
}

impl Schedule {
    pub fn builtin() -> Schedule {
        Self::parse(DEFAULT_SCHEDULE_TOML).expect("built-in schedule is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Schedule> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Schedule> {
        let file: ScheduleFile =
            toml::from_str(text).map_err(|e| Error::validation(format!("schedule: {e}")))?;
        let mut params = BTreeMap::new();
        for t in DistortionType::ALL {
            let entry = file
                .entries
                .get(&t)
                .ok_or_else(|| Error::validation(format!("schedule is missing `{t}`")))?;
            let levels: [f64; NUM_LEVELS] = entry.levels.as_slice().try_into().map_err(|_| {
                Error::validation(format!("`{t}` needs exactly {NUM_LEVELS} levels"))
            })?;
            if levels.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::validation(format!("`{t}` levels must be positive")));
            }
            if levels.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::validation(format!(
                    "`{t}` levels must be strictly increasing"
                )));
            }
            params.insert(t, (entry.parameter.clone(), levels));
        }
        Ok(Schedule {
            version: file.version,
            params,
        })
    }

    pub fn to_toml(&self) -> String {
        let file = ScheduleFile {
            version: self.version,
            entries: self
                .params
                .iter()
                .map(|(t, (name, levels))| {
                    (
                        *t,
                        ScheduleEntry {
                            parameter: name.clone(),
                            levels: levels.to_vec(),
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&file).expect("schedule serializes")
    }

    pub fn spec(&self, dtype: DistortionType, level: u8) -> Result<DistortionSpec> {
        if !(1..=NUM_LEVELS as u8).contains(&level) {
            return Err(Error::validation(format!("level {level} not in 1..=5")));
        }
        let (_, levels) = &self.params[&dtype];
        Ok(DistortionSpec {
            dtype,
            level,
            param: levels[usize::from(level) - 1],
        })
    }

    pub fn parameter_name(&self, dtype: DistortionType) -> &str {
        &self.params[&dtype].0
    }
}

/// Joint class index: reference (`None`) is 0, then `(type, level)` in
/// lexicographic order.
pub fn class_index(spec: Option<(DistortionType, u8)>) -> usize {
    match spec {
        None => 0,
        Some((t, level)) => 1 + t.index() * NUM_LEVELS + usize::from(level) - 1,
    }
}

/// Inverse of [`class_index`].
pub fn class_from_index(class: usize) -> Result<Option<(DistortionType, u8)>> {
    if class >= CLASS_SPACE.num_classes() {
        return Err(Error::validation(format!(
            "class {class} out of range for {} classes",
            CLASS_SPACE.num_classes()
        )));
    }
    Ok(CLASS_SPACE
        .decompose(class)
        .map(|(t, level)| (DistortionType::ALL[t], level as u8)))
}

/// `Σ_{i=1..slots} C(slots, i) · i!`, i.e. the number of ordered selections
/// without repetition of 1..=slots items out of `slots`, optionally counting
/// the empty selection.
pub fn count_degradation_space(slots: u32, include_empty: bool) -> Result<u128> {
    if slots == 0 {
        return Err(Error::validation("slots must be at least 1"));
    }
    let overflow = || Error::Overflow(format!("degradation space for {slots} slots"));
    // C(n, i) · i! = n! / (n - i)!, accumulated as a falling factorial.
    let mut total: u128 = u128::from(include_empty);
    let mut falling: u128 = 1;
    for i in 0..slots {
        falling = falling
            .checked_mul(u128::from(slots - i))
            .ok_or_else(overflow)?;
        total = total.checked_add(falling).ok_or_else(overflow)?;
    }
    Ok(total)
}

/// Applies `spec` to `img`. Deterministic in `(img, spec, seed)`.
pub fn apply_distortion(img: &ImageRgb, spec: &DistortionSpec, seed: u64) -> Result<ImageRgb> {
    if !(1..=NUM_LEVELS as u8).contains(&spec.level) {
        return Err(Error::validation(format!("level {} not in 1..=5", spec.level)));
    }
    if !spec.param.is_finite() || spec.param <= 0.0 {
        return Err(Error::validation(format!(
            "distortion parameter {} must be positive",
            spec.param
        )));
    }
    let p = spec.param;
    let out = match spec.dtype {
        DistortionType::GaussianNoise => gaussian_noise(img, p, seed),
        DistortionType::GaussianBlur => gaussian_blur(img, p),
        DistortionType::JpegBlocking => jpeg_blocking(img, p),
        DistortionType::ContrastShift => contrast_shift(img, p),
        DistortionType::Fnoise => fnoise(img, p, seed),
        DistortionType::MotionBlur => motion_blur(img, p.round() as usize, seed),
        DistortionType::Pixelate => pixelate(img, p.round() as usize),
        DistortionType::ColorSaturate => color_saturate(img, p),
    };
    Ok(out)
}

fn gaussian_noise(img: &ImageRgb, sigma: f64, seed: u64) -> ImageRgb {
    let mut rng = rng::stream(seed, "gaussian_noise", 0);
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let data = img
        .data()
        .iter()
        .map(|&v| v + normal.sample(&mut rng))
        .collect();
    ImageRgb::from_unclamped(img.width(), img.height(), data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Convolves along x (`horizontal`) or y with clamp-to-edge borders.
fn convolve_1d(data: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let d = i as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    acc += k * data[(sy * w + sx) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

fn gaussian_blur(img: &ImageRgb, sigma: f64) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let k = gaussian_kernel(sigma);
    let tmp = convolve_1d(img.data(), w, h, &k, true);
    ImageRgb::from_unclamped(w, h, convolve_1d(&tmp, w, h, &k, false))
}

fn motion_blur(img: &ImageRgb, length: usize, seed: u64) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let length = length.max(1) | 1;
    let r = (length / 2) as isize;
    // One of four line directions, chosen by the seed.
    let dir: (isize, isize) = match rng::stream(seed, "motion_blur", 0).random_range(0..4) {
        0 => (1, 0),
        1 => (0, 1),
        2 => (1, 1),
        _ => (1, -1),
    };
    let weight = 1.0 / length as f64;
    let src = img.data();
    let mut data = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for t in -r..=r {
                    let sx = (x as isize + t * dir.0).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + t * dir.1).clamp(0, h as isize - 1) as usize;
                    acc += src[(sy * w + sx) * 3 + c];
                }
                data[(y * w + x) * 3 + c] = acc * weight;
            }
        }
    }
    ImageRgb::from_unclamped(w, h, data)
}

const JPEG_LUMA_TABLE: [[f64; 8]; 8] = [
    [16., 11., 10., 16., 24., 40., 51., 61.],
    [12., 12., 14., 19., 26., 58., 60., 55.],
    [14., 13., 16., 24., 40., 57., 69., 56.],
    [14., 17., 22., 29., 51., 87., 80., 62.],
    [18., 22., 37., 56., 68., 109., 103., 77.],
    [24., 35., 55., 64., 81., 104., 113., 92.],
    [49., 64., 78., 87., 103., 121., 120., 101.],
    [72., 92., 95., 98., 112., 100., 103., 99.],
];

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Quantizes orthonormal 8×8 block DCT coefficients with the JPEG luminance
/// table scaled by `scale / 16`. Partial border blocks are edge-padded.
fn jpeg_blocking(img: &ImageRgb, scale: f64) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let basis = dct_basis();
    let mut data = img.data().to_vec();
    let mut block = [[0.0; 8]; 8];
    let mut coef = [[0.0; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for c in 0..3 {
                for (j, row) in block.iter_mut().enumerate() {
                    for (i, v) in row.iter_mut().enumerate() {
                        let x = (bx + i).min(w - 1);
                        let y = (by + j).min(h - 1);
                        *v = img.get(x, y, c) - 0.5;
                    }
                }
                // Forward: coef = B · block · Bᵀ
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for (y, row) in block.iter().enumerate() {
                            for (x, &s) in row.iter().enumerate() {
                                acc += basis[v][y] * basis[u][x] * s;
                            }
                        }
                        let step = scale * JPEG_LUMA_TABLE[v][u] / 16.0;
                        coef[v][u] = (acc / step).round() * step;
                    }
                }
                for j in 0..8 {
                    for i in 0..8 {
                        let (x, y) = (bx + i, by + j);
                        if x >= w || y >= h {
                            continue;
                        }
                        let mut acc = 0.0;
                        for (v, row) in coef.iter().enumerate() {
                            for (u, &q) in row.iter().enumerate() {
                                acc += basis[v][j] * basis[u][i] * q;
                            }
                        }
                        data[(y * w + x) * 3 + c] = acc + 0.5;
                    }
                }
            }
        }
    }
    ImageRgb::from_unclamped(w, h, data)
}

fn channel_means(img: &ImageRgb) -> [f64; 3] {
    let mut sums = [0.0; 3];
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            sums[c] += px[c];
        }
    }
    let n = (img.width() * img.height()) as f64;
    sums.map(|s| s / n)
}

fn contrast_shift(img: &ImageRgb, loss: f64) -> ImageRgb {
    let means = channel_means(img);
    let gain = (1.0 - loss).max(0.0);
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| means[c] + (px[c] - means[c]) * gain))
        .collect();
    ImageRgb::from_unclamped(img.width(), img.height(), data)
}

fn color_saturate(img: &ImageRgb, gain: f64) -> ImageRgb {
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            (0..3).map(move |c| gray + (px[c] - gray) * (1.0 + gain))
        })
        .collect();
    ImageRgb::from_unclamped(img.width(), img.height(), data)
}

fn pixelate(img: &ImageRgb, block: usize) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let block = block.max(1);
    let mut data = vec![0.0; w * h * 3];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (x1, y1) = ((bx + block).min(w), (by + block).min(h));
            let n = ((x1 - bx) * (y1 - by)) as f64;
            let mut mean = [0.0; 3];
            for y in by..y1 {
                for x in bx..x1 {
                    for (c, m) in mean.iter_mut().enumerate() {
                        *m += img.get(x, y, c);
                    }
                }
            }
            let mean = mean.map(|s| s / n);
            for y in by..y1 {
                for x in bx..x1 {
                    data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&mean);
                }
            }
        }
    }
    ImageRgb::from_unclamped(w, h, data)
}

/// Zero-mean, unit-variance noise field with a 1/f amplitude spectrum.
fn pink_field(w: usize, h: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(w);
    let col_fwd = planner.plan_fft_forward(h);
    let row_inv = planner.plan_fft_inverse(w);
    let col_inv = planner.plan_fft_inverse(h);

    let mut grid: Vec<Complex<f64>> = (0..w * h)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut column = vec![Complex::new(0.0, 0.0); h];

    let transform_columns = |grid: &mut [Complex<f64>], column: &mut [Complex<f64>], inverse| {
        for x in 0..w {
            for y in 0..h {
                column[y] = grid[y * w + x];
            }
            if inverse {
                col_inv.process(column);
            } else {
                col_fwd.process(column);
            }
            for y in 0..h {
                grid[y * w + x] = column[y];
            }
        }
    };

    for row in grid.chunks_exact_mut(w) {
        row_fwd.process(row);
    }
    transform_columns(&mut grid, &mut column, false);
    for y in 0..h {
        let fy = y.min(h - y) as f64 / h as f64;
        for x in 0..w {
            let fx = x.min(w - x) as f64 / w as f64;
            let f = (fx * fx + fy * fy).sqrt();
            grid[y * w + x] *= if f == 0.0 { 0.0 } else { 1.0 / f };
        }
    }
    transform_columns(&mut grid, &mut column, true);
    for row in grid.chunks_exact_mut(w) {
        row_inv.process(row);
    }

    let mut field: Vec<f64> = grid.iter().map(|z| z.re).collect();
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in &mut field {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
    field
}

fn fnoise(img: &ImageRgb, sigma: f64, seed: u64) -> ImageRgb {
    let (w, h) = (img.width(), img.height());
    let mut data = img.data().to_vec();
    for c in 0..3 {
        let mut rng = rng::stream(seed, "fnoise", c as u64);
        let field = pink_field(w, h, &mut rng);
        for (i, n) in field.iter().enumerate() {
            data[i * 3 + c] += sigma * n;
        }
    }
    ImageRgb::from_unclamped(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> ImageRgb {
        ImageRgb::from_fn(w, h, |x, y, c| {
            0.5 + 0.3 * ((x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.45).cos())
        })
        .unwrap()
    }

    #[test]
    fn builtin_schedule_round_trips() {
        let s = Schedule::builtin();
        assert_eq!(s.version, 1);
        assert_eq!(Schedule::parse(&s.to_toml()).unwrap(), s);
        assert_eq!(
            s.spec(DistortionType::GaussianNoise, 3).unwrap().param,
            0.08
        );
        assert!(s.spec(DistortionType::Pixelate, 0).is_err());
        assert!(s.spec(DistortionType::Pixelate, 6).is_err());
    }

    #[test]
    fn schedule_rejects_non_monotone_levels() {
        let bad = DEFAULT_SCHEDULE_TOML.replace(
            "levels = [0.5, 1.0, 2.0, 4.0, 8.0]",
            "levels = [0.5, 1.0, 1.0, 4.0, 8.0]",
        );
        assert!(Schedule::parse(&bad).is_err());
        let short = DEFAULT_SCHEDULE_TOML.replace(
            "levels = [0.5, 1.0, 2.0, 4.0, 8.0]",
            "levels = [0.5, 1.0]",
        );
        assert!(Schedule::parse(&short).is_err());
    }

    #[test]
    fn class_indices() {
        assert_eq!(class_index(None), 0);
        assert_eq!(class_index(Some((DistortionType::GaussianNoise, 1))), 1);
        assert_eq!(class_index(Some((DistortionType::ColorSaturate, 5))), 40);
        assert_eq!(CLASS_SPACE.num_classes(), 41);
        assert!(class_from_index(41).is_err());
    }

    #[test]
    fn class_index_round_trip_enumerates_all() {
        let mut seen = vec![false; 41];
        seen[class_index(None)] = true;
        for t in DistortionType::ALL {
            for level in 1..=5u8 {
                let c = class_index(Some((t, level)));
                assert!(!seen[c]);
                seen[c] = true;
                assert_eq!(class_from_index(c).unwrap(), Some((t, level)));
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(class_from_index(0).unwrap(), None);
    }

    #[test]
    fn count_small_cases() {
        assert_eq!(count_degradation_space(1, false).unwrap(), 1);
        assert_eq!(count_degradation_space(1, true).unwrap(), 2);
        assert_eq!(count_degradation_space(3, false).unwrap(), 15);
        assert_eq!(count_degradation_space(9, false).unwrap(), 986_409);
        assert_eq!(count_degradation_space(9, true).unwrap(), 986_410);
        assert!(count_degradation_space(0, false).is_err());
    }

    #[test]
    fn count_overflow_is_reported() {
        assert!(count_degradation_space(33, false).is_ok());
        assert!(matches!(
            count_degradation_space(40, false),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn noise_mean_is_preserved() {
        let img = ImageRgb::constant(64, 64, 0.5).unwrap();
        let spec = DistortionSpec::new(DistortionType::GaussianNoise, 1).unwrap();
        let out = apply_distortion(&img, &spec, 11).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert_ne!(out, img);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = ImageRgb::constant(24, 16, 0.37).unwrap();
        for level in 1..=5 {
            for t in [DistortionType::GaussianBlur, DistortionType::MotionBlur] {
                let spec = DistortionSpec::new(t, level).unwrap();
                let out = apply_distortion(&img, &spec, 5).unwrap();
                for (a, b) in out.data().iter().zip(img.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pixelate_is_blockwise_constant() {
        let img = textured(64, 64);
        let spec = DistortionSpec::new(DistortionType::Pixelate, 5).unwrap();
        let out = apply_distortion(&img, &spec, 0).unwrap();
        let b = spec.param as usize;
        for by in (0..64).step_by(b) {
            for bx in (0..64).step_by(b) {
                for c in 0..3 {
                    let vals: Vec<f64> = (by..(by + b).min(64))
                        .flat_map(|y| (bx..(bx + b).min(64)).map(move |x| (x, y)))
                        .map(|(x, y)| out.get(x, y, c))
                        .collect();
                    assert!(vals.iter().all(|&v| v == vals[0]));
                }
            }
        }
    }

    #[test]
    fn jpeg_blocking_identity_on_flat_mid_gray() {
        // A flat 0.5 block has all-zero coefficients, which quantize to zero.
        let img = ImageRgb::constant(16, 16, 0.5).unwrap();
        let spec = DistortionSpec::new(DistortionType::JpegBlocking, 5).unwrap();
        let out = apply_distortion(&img, &spec, 0).unwrap();
        for v in out.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn every_distortion_keeps_shape_range_and_determinism() {
        let img = textured(40, 24);
        for t in DistortionType::ALL {
            for level in 1..=5 {
                let spec = DistortionSpec::new(t, level).unwrap();
                let a = apply_distortion(&img, &spec, 99).unwrap();
                let b = apply_distortion(&img, &spec, 99).unwrap();
                assert_eq!((a.width(), a.height()), (40, 24));
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(a, b, "{t} level {level}");
            }
        }
    }

    #[test]
    fn fnoise_field_is_normalized() {
        let mut rng = rng::stream(3, "t", 0);
        let f = pink_field(32, 16, &mut rng);
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn type_names_parse() {
        for t in DistortionType::ALL {
            assert_eq!(t.name().parse::<DistortionType>().unwrap(), t);
        }
        assert!("sharpen".parse::<DistortionType>().is_err());
    }
}
