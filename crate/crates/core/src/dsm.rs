//! Distortion sensitivity maps.
//!
//! A DSM is a `(H/p) × (W/p)` grid of nonnegative per-patch distortion
//! magnitudes. The ground-truth map needs the pristine reference; the
//! gradient map and the patch regressor are blind.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageRgb, Plane};
use crate::rng;

pub const DEFAULT_PATCH_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dsm {
    grid_w: usize,
    grid_h: usize,
    patch_size: usize,
    values: Vec<f64>,
}

impl Dsm {
    pub fn new(grid_w: usize, grid_h: usize, patch_size: usize, values: Vec<f64>) -> Result<Self> {
        if patch_size == 0 || grid_w == 0 || grid_h == 0 {
            return Err(Error::validation("DSM grid and patch size must be non-zero"));
        }
        if values.len() != grid_w * grid_h {
            return Err(Error::validation(format!(
                "DSM {grid_w}x{grid_h} needs {} cells, got {}",
                grid_w * grid_h,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("DSM cells must be finite and >= 0"));
        }
        Ok(Self {
            grid_w,
            grid_h,
            patch_size,
            values,
        })
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, gx: usize, gy: usize) -> f64 {
        self.values[gy * self.grid_w + gx]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_grid(&self, other: &Dsm) -> bool {
        self.grid_w == other.grid_w && self.grid_h == other.grid_h
    }

    /// Little-endian `u32 grid_w, u32 grid_h` followed by `f32` cells, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&(self.grid_w as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid_h as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], patch_size: usize) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::validation("DSM file shorter than its header"));
        }
        let grid_w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let grid_h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != grid_w * grid_h * 4 {
            return Err(Error::validation(format!(
                "DSM body has {} bytes, header implies {}",
                body.len(),
                grid_w * grid_h * 4
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        Dsm::new(grid_w, grid_h, patch_size, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, patch_size: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, patch_size)
    }

    /// Grayscale heatmap at full resolution, normalized by the map maximum.
    pub fn save_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let p = self.patch_size;
        let img = ImageRgb::from_fn(self.grid_w * p, self.grid_h * p, |x, y, _| {
            self.get(x / p, y / p) * scale
        })?;
        crate::image::save_image(&img, path)
    }
}

fn check_multiple(w: usize, h: usize, p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::validation("patch size must be at least 1"));
    }
    if w % p != 0 || h % p != 0 {
        return Err(Error::validation(format!(
            "{w}x{h} is not a multiple of patch size {p}; crop first"
        )));
    }
    Ok(())
}

/// Mean over each `p`×`p` block, visiting pixels in row-major block order.
///
/// Uses a running mean so that a uniform block pools to its exact value.
pub fn avg_pool(plane: &Plane, p: usize) -> Result<Dsm> {
    check_multiple(plane.width, plane.height, p)?;
    let (gw, gh) = (plane.width / p, plane.height / p);
    let mut values = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut mean = 0.0;
            let mut k = 0.0;
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    k += 1.0;
                    mean += (plane.get(x, y) - mean) / k;
                }
            }
            values.push(mean);
        }
    }
    Dsm::new(gw, gh, p, values)
}

/// Channel-mean absolute difference between `dist` and `ref`.
pub fn abs_diff_plane(dist: &ImageRgb, reference: &ImageRgb) -> Result<Plane> {
    if !dist.same_dims(reference) {
        return Err(Error::validation(format!(
            "distorted image is {}x{}, reference is {}x{}",
            dist.width(),
            dist.height(),
            reference.width(),
            reference.height()
        )));
    }
    let values = dist
        .data()
        .chunks_exact(3)
        .zip(reference.data().chunks_exact(3))
        .map(|(d, r)| {
            crate::image::running_mean3(
                (d[0] - r[0]).abs(),
                (d[1] - r[1]).abs(),
                (d[2] - r[2]).abs(),
            )
        })
        .collect();
    Plane::new(dist.width(), dist.height(), values)
}

/// Ground-truth DSM: channel-mean `|dist − ref|`, average-pooled with kernel `p`.
pub fn gt_dsm(dist: &ImageRgb, reference: &ImageRgb, p: usize) -> Result<Dsm> {
    let diff = abs_diff_plane(dist, reference)?;
    avg_pool(&diff, p)
}

/// Gradient magnitude of the channel-mean image, average-pooled with kernel `p`.
///
/// Central differences in the interior, one-sided differences on the border.
pub fn gradient_dsm(dist: &ImageRgb, p: usize) -> Result<Dsm> {
    check_multiple(dist.width(), dist.height(), p)?;
    let gray = dist.channel_mean();
    let (w, h) = (gray.width, gray.height);
    let mut mag = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = derivative(x, w, |i| gray.get(i, y));
            let gy = derivative(y, h, |j| gray.get(x, j));
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    avg_pool(&Plane::new(w, h, mag)?, p)
}

fn derivative(i: usize, len: usize, at: impl Fn(usize) -> f64) -> f64 {
    if len == 1 {
        0.0
    } else if i == 0 {
        at(1) - at(0)
    } else if i == len - 1 {
        at(len - 1) - at(len - 2)
    } else {
        (at(i + 1) - at(i - 1)) / 2.0
    }
}

/// Bilinear upsampling of a DSM to `p·grid_h × p·grid_w` with half-pixel
/// alignment: each cell value sits at its patch center and the border is
/// clamped.
pub fn upsample_bilinear(dsm: &Dsm) -> Plane {
    let p = dsm.patch_size;
    let (gw, gh) = (dsm.grid_w, dsm.grid_h);
    let axis = |i: usize, cells: usize| -> (usize, usize, f64) {
        let g = ((i as f64 + 0.5) / p as f64 - 0.5).clamp(0.0, (cells - 1) as f64);
        let i0 = g.floor() as usize;
        let i1 = (i0 + 1).min(cells - 1);
        (i0, i1, g - i0 as f64)
    };
    let (w, h) = (gw * p, gh * p);
    let xs: Vec<_> = (0..w).map(|x| axis(x, gw)).collect();
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, ty) = axis(y, gh);
        for &(x0, x1, tx) in &xs {
            let top = lerp(dsm.get(x0, y0), dsm.get(x1, y0), tx);
            let bottom = lerp(dsm.get(x0, y1), dsm.get(x1, y1), tx);
            values.push(lerp(top, bottom, ty));
        }
    }
    Plane {
        width: w,
        height: h,
        values,
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Shared per-patch linear regressor: each `p×p×3` patch is flattened in
/// row-major, channel-interleaved order and mapped to `max(0, w·x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRegressor {
    pub patch_size: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PatchRegressor {
    pub fn zeros(patch_size: usize) -> Self {
        Self {
            patch_size,
            weights: vec![0.0; 3 * patch_size * patch_size],
            bias: 0.0,
        }
    }

    fn patch_features(img: &ImageRgb, p: usize, gx: usize, gy: usize, out: &mut Vec<f64>) {
        out.clear();
        for y in gy * p..(gy + 1) * p {
            for x in gx * p..(gx + 1) * p {
                out.extend_from_slice(&img.pixel(x, y));
            }
        }
    }

    fn raw(&self, feats: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(feats)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, img: &ImageRgb) -> Result<Dsm> {
        let p = self.patch_size;
        check_multiple(img.width(), img.height(), p)?;
        if self.weights.len() != 3 * p * p {
            return Err(Error::State(format!(
                "regressor has {} weights, expected {}",
                self.weights.len(),
                3 * p * p
            )));
        }
        let (gw, gh) = (img.width() / p, img.height() / p);
        let mut feats = Vec::with_capacity(3 * p * p);
        let mut values = Vec::with_capacity(gw * gh);
        for gy in 0..gh {
            for gx in 0..gw {
                Self::patch_features(img, p, gx, gy, &mut feats);
                values.push(self.raw(&feats).max(0.0));
            }
        }
        Dsm::new(gw, gh, p, values)
    }

    /// Fits the regressor on `(distorted, ground-truth DSM)` pairs by
    /// minibatch gradient descent on the per-cell squared error. The clamp
    /// is applied only at prediction time, so training is plain least
    /// squares.
    pub fn train(
        &mut self,
        pairs: &[(ImageRgb, Dsm)],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let p = self.patch_size;
        let mut samples: Vec<(Vec<f64>, f64)> = Vec::new();
        for (img, gt) in pairs {
            check_multiple(img.width(), img.height(), p)?;
            if gt.grid_w * p != img.width() || gt.grid_h * p != img.height() {
                return Err(Error::validation("DSM grid does not match image"));
            }
            for gy in 0..gt.grid_h {
                for gx in 0..gt.grid_w {
                    let mut feats = Vec::with_capacity(3 * p * p);
                    Self::patch_features(img, p, gx, gy, &mut feats);
                    samples.push((feats, gt.get(gx, gy)));
                }
            }
        }
        if samples.is_empty() {
            return Err(Error::validation("no training pairs"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let batch = 32usize;
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut rng::stream(seed, "dsm_regressor_epoch", epoch as u64));
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let mut gw = vec![0.0; self.weights.len()];
                let mut gb = 0.0;
                for &i in chunk {
                    let (x, y) = &samples[i];
                    let r = self.raw(x) - y;
                    epoch_loss += r * r;
                    for (g, xi) in gw.iter_mut().zip(x) {
                        *g += 2.0 * r * xi;
                    }
                    gb += 2.0 * r;
                }
                let scale = lr / chunk.len() as f64;
                for (w, g) in self.weights.iter_mut().zip(&gw) {
                    *w -= scale * g;
                }
                self.bias -= scale * gb;
            }
            history.push(epoch_loss / samples.len() as f64);
        }
        Ok(history)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).expect("regressor serializes");
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsmKind {
    GroundTruth,
    GradientMap,
    TinyPredictor,
}

impl std::str::FromStr for DsmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "ground_truth" => Ok(DsmKind::GroundTruth),
            "grad" | "gradient_map" => Ok(DsmKind::GradientMap),
            "pred" | "tiny_predictor" => Ok(DsmKind::TinyPredictor),
            other => Err(Error::validation(format!(
                "unknown DSM source `{other}` (expected gt, grad or pred)"
            ))),
        }
    }
}

/// Source of sensitivity maps for label mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct DsmProvider {
    kind: DsmKind,
    patch_size: usize,
    predictor: Option<PatchRegressor>,
}

impl DsmProvider {
    pub fn ground_truth(patch_size: usize) -> Self {
        Self {
            kind: DsmKind::GroundTruth,
            patch_size,
            predictor: None,
        }
    }

    pub fn gradient_map(patch_size: usize) -> Self {
        Self {
            kind: DsmKind::GradientMap,
            patch_size,
            predictor: None,
        }
    }

    /// A predictor provider without weights; querying it is a state error.
    pub fn untrained_predictor(patch_size: usize) -> Self {
        Self {
            kind: DsmKind::TinyPredictor,
            patch_size,
            predictor: None,
        }
    }

    pub fn predictor(model: PatchRegressor) -> Self {
        Self {
            kind: DsmKind::TinyPredictor,
            patch_size: model.patch_size,
            predictor: Some(model),
        }
    }

    pub fn kind(&self) -> DsmKind {
        self.kind
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn needs_reference(&self) -> bool {
        self.kind == DsmKind::GroundTruth
    }

    /// Predicts the DSM of `dist`. The reference is required by, and only
    /// used by, the ground-truth provider.
    pub fn predict(&self, dist: &ImageRgb, reference: Option<&ImageRgb>) -> Result<Dsm> {
        match self.kind {
            DsmKind::GroundTruth => {
                let reference = reference.ok_or_else(|| {
                    Error::validation("ground-truth DSM needs the reference image")
                })?;
                gt_dsm(dist, reference, self.patch_size)
            }
            DsmKind::GradientMap => gradient_dsm(dist, self.patch_size),
            DsmKind::TinyPredictor => self
                .predictor
                .as_ref()
                .ok_or_else(|| Error::State("DSM predictor has no weights".into()))?
                .predict(dist),
        }
    }
}

/// Blind DSM prediction (`reference` only consulted by the ground-truth provider).
pub fn predict_dsm(
    dist: &ImageRgb,
    reference: Option<&ImageRgb>,
    provider: &DsmProvider,
) -> Result<Dsm> {
    provider.predict(dist, reference)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_pair() -> (ImageRgb, ImageRgb) {
        let reference = ImageRgb::constant(16, 16, 0.1).unwrap();
        let dist =
            ImageRgb::from_fn(16, 16, |x, y, _| if x < 8 && y < 8 { 0.5 } else { 0.1 }).unwrap();
        (dist, reference)
    }

    #[test]
    fn identical_images_give_zero_map() {
        let (d, _) = block_pair();
        let dsm = gt_dsm(&d, &d, 8).unwrap();
        assert!(dsm.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_difference_survives_pooling() {
        let r = ImageRgb::constant(16, 8, 0.2).unwrap();
        let d = ImageRgb::constant(16, 8, 0.6).unwrap();
        let dsm = gt_dsm(&d, &r, 8).unwrap();
        assert_eq!((dsm.grid_w(), dsm.grid_h()), (2, 1));
        for v in dsm.values() {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn block_indicator_pools_exactly() {
        let (d, r) = block_pair();
        let dsm = gt_dsm(&d, &r, 8).unwrap();
        assert_eq!(dsm.values(), &[0.4, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gt_dsm_validates_inputs() {
        let a = ImageRgb::constant(16, 16, 0.0).unwrap();
        let b = ImageRgb::constant(16, 8, 0.0).unwrap();
        assert!(gt_dsm(&a, &b, 8).is_err());
        let c = ImageRgb::constant(12, 12, 0.0).unwrap();
        assert!(gt_dsm(&c, &c, 8).is_err());
        assert!(gt_dsm(&a, &a, 0).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = ImageRgb::constant(16, 16, 0.7).unwrap();
        assert!(gradient_dsm(&img, 8)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_lights_only_adjacent_blocks() {
        // Step between columns 7 and 8, on the boundary of blocks 0 and 1.
        let img = ImageRgb::from_fn(32, 16, |x, _, _| if x < 8 { 0.0 } else { 1.0 }).unwrap();
        let dsm = gradient_dsm(&img, 8).unwrap();
        for gy in 0..2 {
            // Each block has one column at |g| = 0.5 out of 8.
            assert!((dsm.get(0, gy) - 0.5 / 8.0).abs() < 1e-15);
            assert!((dsm.get(1, gy) - 0.5 / 8.0).abs() < 1e-15);
            assert_eq!(dsm.get(2, gy), 0.0);
            assert_eq!(dsm.get(3, gy), 0.0);
        }
    }

    #[test]
    fn ramp_has_uniform_gradient() {
        let s = 0.01;
        let img = ImageRgb::from_fn(32, 32, |x, _, _| x as f64 * s).unwrap();
        let dsm = gradient_dsm(&img, 8).unwrap();
        for v in dsm.values() {
            assert!((v - s).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_constant_and_single_cell() {
        let c = Dsm::new(3, 2, 4, vec![0.3; 6]).unwrap();
        let up = upsample_bilinear(&c);
        assert_eq!((up.width, up.height), (12, 8));
        assert!(up.values.iter().all(|&v| v == 0.3));

        let one = Dsm::new(1, 1, 8, vec![0.9]).unwrap();
        let up = upsample_bilinear(&one);
        assert_eq!((up.width, up.height), (8, 8));
        assert!(up.values.iter().all(|&v| v == 0.9));
    }

    #[test]
    fn upsample_two_by_two_by_hand() {
        let dsm = Dsm::new(2, 2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&dsm);
        // Grid coordinate of output x is (x + 0.5) / 2 - 0.5, clamped to [0, 1]:
        // x = 0 → 0, x = 1 → 0.25, x = 2 → 0.75, x = 3 → 1.
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert!((up.get(x, y) - expected[x]).abs() < 1e-15);
            }
            for x in 1..4 {
                assert!(up.get(x, y) >= up.get(x - 1, y));
            }
        }
    }

    #[test]
    fn binary_format_layout() {
        let dsm = Dsm::new(2, 1, 8, vec![0.5, 0.25]).unwrap();
        let bytes = dsm.to_bytes();
        assert_eq!(&bytes[0..8], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &0.5f32.to_le_bytes());
        assert_eq!(Dsm::from_bytes(&bytes, 8).unwrap(), dsm);
        assert!(Dsm::from_bytes(&bytes[..10], 8).is_err());
    }

    #[test]
    fn zero_predictor_outputs_bias() {
        let img = ImageRgb::from_fn(16, 16, |x, y, c| ((x + y + c) % 5) as f64 / 5.0).unwrap();
        let provider = DsmProvider::predictor(PatchRegressor::zeros(8));
        let dsm = predict_dsm(&img, None, &provider).unwrap();
        assert!(dsm.values().iter().all(|&v| v == 0.0));

        let mut biased = PatchRegressor::zeros(8);
        biased.bias = 0.2;
        let dsm = biased.predict(&img).unwrap();
        assert!(dsm.values().iter().all(|&v| v == 0.2));

        biased.bias = -0.2;
        assert!(biased.predict(&img).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn provider_delegation_and_state() {
        let (d, r) = block_pair();
        let gt = DsmProvider::ground_truth(8);
        assert_eq!(gt.predict(&d, Some(&r)).unwrap(), gt_dsm(&d, &r, 8).unwrap());
        assert!(gt.predict(&d, None).is_err());
        assert!(matches!(
            DsmProvider::untrained_predictor(8).predict(&d, None),
            Err(Error::State(_))
        ));
        assert_eq!(
            DsmProvider::gradient_map(8).predict(&d, None).unwrap(),
            gradient_dsm(&d, 8).unwrap()
        );
    }
}
