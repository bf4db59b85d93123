//! A small convolutional encoder with hand-written backprop.
//!
//! Three stages of `3×3 conv → leaky ReLU → 2×2 average pool` with widths
//! 8, 16 and 32 (called stages 2, 3 and 4 to line up with the distillation
//! loss), a global average pool, and two classification heads (distortion
//! type and distortion level), each a single hidden layer MLP.
//!
//! All parameters live in one flat `Vec<f64>` so that optimizers, checksums
//! and serialization treat the network as a single buffer.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::losses::{FeatureMap, FeatureSource, FeatureStack};
use crate::rng;

pub const STAGE_WIDTHS: [usize; 3] = [8, 16, 32];
pub const HEAD_HIDDEN: usize = 64;
pub const LEAK: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub hidden: usize,
    pub type_classes: usize,
    pub level_classes: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        let space = crate::distortion::CLASS_SPACE;
        Self {
            in_channels: 3,
            widths: STAGE_WIDTHS,
            hidden: HEAD_HIDDEN,
            type_classes: space.num_type_classes(),
            level_classes: space.num_level_classes(),
        }
    }
}

impl NetShape {
    pub fn embedding_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    in_c: usize,
    out_c: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    convs: [ConvLayer; 3],
    type_head: [DenseLayer; 2],
    level_head: [DenseLayer; 2],
    len: usize,
}

impl Layout {
    fn new(shape: &NetShape) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let mut conv = |in_c: usize, out_c: usize| ConvLayer {
            in_c,
            out_c,
            weight: take(out_c * in_c * 9),
            bias: take(out_c),
        };
        let w = shape.widths;
        let convs = [
            conv(shape.in_channels, w[0]),
            conv(w[0], w[1]),
            conv(w[1], w[2]),
        ];
        let mut dense = |in_dim: usize, out_dim: usize| DenseLayer {
            in_dim,
            out_dim,
            weight: take(out_dim * in_dim),
            bias: take(out_dim),
        };
        let type_head = [
            dense(w[2], shape.hidden),
            dense(shape.hidden, shape.type_classes),
        ];
        let level_head = [
            dense(w[2], shape.hidden),
            dense(shape.hidden, shape.level_classes),
        ];
        Layout {
            convs,
            type_head,
            level_head,
            len: at,
        }
    }

    fn tensors(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(TensorInfo::new(format!("stage{}.conv.weight", i + 2), vec![c.out_c, c.in_c, 3, 3], &c.weight));
            out.push(TensorInfo::new(format!("stage{}.conv.bias", i + 2), vec![c.out_c], &c.bias));
        }
        for (name, head) in [("type_head", &self.type_head), ("level_head", &self.level_head)] {
            for (i, d) in head.iter().enumerate() {
                out.push(TensorInfo::new(format!("{name}.{i}.weight"), vec![d.out_dim, d.in_dim], &d.weight));
                out.push(TensorInfo::new(format!("{name}.{i}.bias"), vec![d.out_dim], &d.bias));
            }
        }
        out
    }
}

/// Shape and offset of one tensor inside a flat weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    fn new(name: String, shape: Vec<usize>, range: &Range<usize>) -> Self {
        Self {
            name,
            shape,
            offset: range.start,
        }
    }
}

/// JSON sidecar describing a flat little-endian weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSidecar {
    pub dtype: String,
    pub count: usize,
    pub shape: NetShape,
    pub frozen: bool,
    pub tensors: Vec<TensorInfo>,
}

/// Channel-planar activation tensor `c × h × w`.
#[derive(Clone, Debug)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    fn into_feature_map(self) -> FeatureMap {
        FeatureMap {
            channels: self.c,
            height: self.h,
            width: self.w,
            data: self.data,
        }
    }
}

/// Cached intermediate values of one forward pass.
pub struct ForwardCache {
    input: Tensor,
    /// Pre-activation conv outputs per stage.
    pre: Vec<Tensor>,
    /// Pooled stage outputs (stages 2, 3, 4).
    pooled: Vec<Tensor>,
    embedding: Vec<f64>,
    type_hidden_pre: Vec<f64>,
    level_hidden_pre: Vec<f64>,
    pub type_logits: Vec<f64>,
    pub level_logits: Vec<f64>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn features(&self, source: FeatureSource) -> FeatureStack {
        FeatureStack::new(
            [
                self.pooled[0].clone().into_feature_map(),
                self.pooled[1].clone().into_feature_map(),
                self.pooled[2].clone().into_feature_map(),
            ],
            source,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyNet {
    shape: NetShape,
    layout: Layout,
    params: Vec<f64>,
    frozen: bool,
}

impl TinyNet {
    /// He-uniform conv/dense weights, zero biases.
    pub fn new(shape: NetShape, seed: u64) -> Self {
        let layout = Layout::new(&shape);
        let mut params = vec![0.0; layout.len];
        let mut rng = rng::stream(seed, "tinynet_init", 0);
        let mut fill = |range: &Range<usize>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[range.clone()] {
                *p = rng.random_range(-bound..bound);
            }
        };
        for c in &layout.convs {
            fill(&c.weight, c.in_c * 9);
        }
        for d in layout.type_head.iter().chain(&layout.level_head) {
            fill(&d.weight, d.in_dim);
        }
        Self {
            shape,
            layout,
            params,
            frozen: false,
        }
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Applies `params -= step` element-wise. Refused on a frozen network.
    pub fn apply_update(&mut self, step: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::State("cannot update a frozen network".into()));
        }
        if step.len() != self.params.len() {
            return Err(Error::validation("update length does not match parameters"));
        }
        for (p, s) in self.params.iter_mut().zip(step) {
            *p -= s;
        }
        Ok(())
    }

    /// Mutable access for tests and finite-difference checks.
    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::State("cannot modify a frozen network".into()));
        }
        Ok(&mut self.params)
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn input_tensor(&self, img: &ImageRgb) -> Result<Tensor> {
        let (w, h) = (img.width(), img.height());
        if w % 8 != 0 || h % 8 != 0 {
            return Err(Error::validation(format!(
                "network input {w}x{h} must be a multiple of 8"
            )));
        }
        let mut t = Tensor::zeros(3, h, w);
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                t.data[c * h * w + i] = px[c] - 0.5;
            }
        }
        Ok(t)
    }

    pub fn forward(&self, img: &ImageRgb) -> Result<ForwardCache> {
        let input = self.input_tensor(img)?;
        let mut pre = Vec::with_capacity(3);
        let mut pooled: Vec<Tensor> = Vec::with_capacity(3);
        for (s, conv) in self.layout.convs.iter().enumerate() {
            let x = if s == 0 { &input } else { &pooled[s - 1] };
            let z = conv_forward(conv, &self.params, x);
            let a = Tensor {
                data: z.data.iter().map(|&v| leaky(v)).collect(),
                ..z.clone()
            };
            pooled.push(avg_pool2(&a));
            pre.push(z);
        }
        let last = &pooled[2];
        let embedding = FeatureMap {
            channels: last.c,
            height: last.h,
            width: last.w,
            data: last.data.clone(),
        }
        .global_avg_pool();
        let (type_hidden_pre, type_logits) = mlp_forward(&self.layout.type_head, &self.params, &embedding);
        let (level_hidden_pre, level_logits) =
            mlp_forward(&self.layout.level_head, &self.params, &embedding);
        Ok(ForwardCache {
            input,
            pre,
            pooled,
            embedding,
            type_hidden_pre,
            level_hidden_pre,
            type_logits,
            level_logits,
        })
    }

    /// Globally pooled stage-4 features.
    pub fn embed(&self, img: &ImageRgb) -> Result<Vec<f64>> {
        Ok(self.forward(img)?.embedding)
    }

    pub fn stage_features(&self, img: &ImageRgb, source: FeatureSource) -> Result<FeatureStack> {
        Ok(self.forward(img)?.features(source))
    }

    /// Accumulates parameter gradients into `grad` given the loss gradients
    /// with respect to both logit vectors and, optionally, the stage features.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_type_logits: &[f64],
        d_level_logits: &[f64],
        d_features: Option<&FeatureStack>,
        grad: &mut [f64],
    ) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::validation("gradient buffer has the wrong length"));
        }
        let mut d_emb = vec![0.0; cache.embedding.len()];
        mlp_backward(
            &self.layout.type_head,
            &self.params,
            &cache.embedding,
            &cache.type_hidden_pre,
            d_type_logits,
            grad,
            &mut d_emb,
        );
        mlp_backward(
            &self.layout.level_head,
            &self.params,
            &cache.embedding,
            &cache.level_hidden_pre,
            d_level_logits,
            grad,
            &mut d_emb,
        );

        let last = &cache.pooled[2];
        let hw = (last.h * last.w) as f64;
        let mut d_pooled = Tensor::zeros(last.c, last.h, last.w);
        for (c, chunk) in d_pooled.data.chunks_exact_mut(last.h * last.w).enumerate() {
            chunk.fill(d_emb[c] / hw);
        }
        for s in (0..3).rev() {
            if let Some(df) = d_features {
                let f = &df.stages[s];
                if f.shape() != (d_pooled.c, d_pooled.h, d_pooled.w) {
                    return Err(Error::validation("feature gradient shape mismatch"));
                }
                for (d, g) in d_pooled.data.iter_mut().zip(&f.data) {
                    *d += g;
                }
            }
            let z = &cache.pre[s];
            let mut dz = avg_pool2_backward(&d_pooled, z.h, z.w);
            for (d, &zv) in dz.data.iter_mut().zip(&z.data) {
                *d *= leaky_grad(zv);
            }
            let x = if s == 0 {
                &cache.input
            } else {
                &cache.pooled[s - 1]
            };
            let need_input = s > 0;
            let dx = conv_backward(&self.layout.convs[s], &self.params, x, &dz, grad, need_input);
            if let Some(dx) = dx {
                d_pooled = dx;
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let sidecar = WeightSidecar {
            dtype: "f64".into(),
            count: self.params.len(),
            shape: self.shape.clone(),
            frozen: self.frozen,
            tensors: self.layout.tensors(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: WeightSidecar = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: json.clone(),
            message: e.to_string(),
        })?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let params: Vec<f64> = match sidecar.dtype.as_str() {
            "f64" => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            "f32" => bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
                .collect(),
            other => {
                return Err(Error::validation(format!("unsupported weight dtype `{other}`")))
            }
        };
        let layout = Layout::new(&sidecar.shape);
        if params.len() != layout.len || sidecar.count != layout.len {
            return Err(Error::validation(format!(
                "{} holds {} weights, shape needs {}",
                bin.display(),
                params.len(),
                layout.len
            )));
        }
        Ok(Self {
            shape: sidecar.shape,
            layout,
            params,
            frozen: sidecar.frozen,
        })
    }
}

#[inline]
fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAK * v
    }
}

#[inline]
fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAK
    }
}

/// Unfolds zero-padded 3×3 neighbourhoods into a `(in_c·9) × (h·w)` matrix.
fn im2col(x: &Tensor) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![0.0; x.c * 9 * hw];
    for i in 0..x.c {
        let plane = &x.data[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    row[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`], accumulating overlapping contributions.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for i in 0..c {
        let plane = &mut out.data[i * hw..(i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((i * 3 + ky) * 3 + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Zero-padded 3×3 convolution, stride 1.
fn conv_forward(layer: &ConvLayer, params: &[f64], x: &Tensor) -> Tensor {
    let hw = x.h * x.w;
    let k = layer.in_c * 9;
    let weight = &params[layer.weight.clone()];
    let bias = &params[layer.bias.clone()];
    let cols = im2col(x);
    let mut out = Tensor::zeros(layer.out_c, x.h, x.w);
    for (o, dst) in out.data.chunks_exact_mut(hw).enumerate() {
        dst.fill(bias[o]);
        for (j, &wv) in weight[o * k..(o + 1) * k].iter().enumerate() {
            for (d, s) in dst.iter_mut().zip(&cols[j * hw..(j + 1) * hw]) {
                *d += wv * s;
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients; returns the input gradient if asked.
fn conv_backward(
    layer: &ConvLayer,
    params: &[f64],
    x: &Tensor,
    dz: &Tensor,
    grad: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let hw = x.h * x.w;
    let k = layer.in_c * 9;
    let weight = &params[layer.weight.clone()];
    let cols = im2col(x);
    let mut dcols = need_input.then(|| vec![0.0; k * hw]);
    for (o, g) in dz.data.chunks_exact(hw).enumerate() {
        grad[layer.bias.start + o] += g.iter().sum::<f64>();
        for j in 0..k {
            let col = &cols[j * hw..(j + 1) * hw];
            grad[layer.weight.start + o * k + j] += dot(g, col);
            if let Some(dc) = dcols.as_mut() {
                let wv = weight[o * k + j];
                for (d, gv) in dc[j * hw..(j + 1) * hw].iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
    dcols.map(|dc| col2im(&dc, layer.in_c, x.h, x.w))
}

fn avg_pool2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                out.data[(c * h2 + y) * w2 + xx] =
                    0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward(d: &Tensor, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros(d.c, h, w);
    for c in 0..d.c {
        for y in 0..d.h {
            for x in 0..d.w {
                let g = 0.25 * d.data[(c * d.h + y) * d.w + x];
                let base = c * h * w + 2 * y * w + 2 * x;
                out.data[base] = g;
                out.data[base + 1] = g;
                out.data[base + w] = g;
                out.data[base + w + 1] = g;
            }
        }
    }
    out
}

fn dense_forward(layer: &DenseLayer, params: &[f64], x: &[f64]) -> Vec<f64> {
    let weight = &params[layer.weight.clone()];
    let bias = &params[layer.bias.clone()];
    (0..layer.out_dim)
        .map(|o| {
            bias[o]
                + weight[o * layer.in_dim..(o + 1) * layer.in_dim]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    layer: &DenseLayer,
    params: &[f64],
    x: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    dx: &mut [f64],
) {
    let weight = &params[layer.weight.clone()];
    for o in 0..layer.out_dim {
        grad[layer.bias.start + o] += dy[o];
        let row = layer.weight.start + o * layer.in_dim;
        for i in 0..layer.in_dim {
            grad[row + i] += dy[o] * x[i];
            dx[i] += dy[o] * weight[o * layer.in_dim + i];
        }
    }
}

fn mlp_forward(head: &[DenseLayer; 2], params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hidden_pre = dense_forward(&head[0], params, x);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| leaky(v)).collect();
    let logits = dense_forward(&head[1], params, &hidden);
    (hidden_pre, logits)
}

fn mlp_backward(
    head: &[DenseLayer; 2],
    params: &[f64],
    x: &[f64],
    hidden_pre: &[f64],
    d_logits: &[f64],
    grad: &mut [f64],
    dx: &mut [f64],
) {
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| leaky(v)).collect();
    let mut d_hidden = vec![0.0; hidden.len()];
    dense_backward(&head[1], params, &hidden, d_logits, grad, &mut d_hidden);
    for (d, &z) in d_hidden.iter_mut().zip(hidden_pre) {
        *d *= leaky_grad(z);
    }
    dense_backward(&head[0], params, x, &d_hidden, grad, dx);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_kd, loss_qc, LossWeights};

    fn image(seed: u64) -> ImageRgb {
        let mut rng = rng::stream(seed, "img", 0);
        ImageRgb::from_fn(16, 16, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn stage_shapes_shrink() {
        let net = TinyNet::new(NetShape::default(), 1);
        let f = net.stage_features(&image(0), FeatureSource::Student).unwrap();
        assert_eq!(f.stage2().shape(), (8, 8, 8));
        assert_eq!(f.stage3().shape(), (16, 4, 4));
        assert_eq!(f.stage4().shape(), (32, 2, 2));
        assert_eq!(net.embed(&image(0)).unwrap().len(), 32);
        assert!(net.forward(&ImageRgb::constant(12, 16, 0.5).unwrap()).is_err());
    }

    #[test]
    fn frozen_network_refuses_updates() {
        let net = TinyNet::new(NetShape::default(), 2).freeze();
        let before = net.checksum();
        let mut net = net;
        assert!(net.apply_update(&vec![0.1; net.num_params()]).is_err());
        assert!(net.params_mut().is_err());
        assert_eq!(net.checksum(), before);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = TinyNet::new(NetShape::default(), 3).freeze();
        net.save(dir.path().join("w")).unwrap();
        let back = TinyNet::load(dir.path().join("w")).unwrap();
        assert_eq!(back, net);
        let sidecar: WeightSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("w.json")).unwrap()).unwrap();
        assert_eq!(sidecar.tensors[0].name, "stage2.conv.weight");
        assert_eq!(sidecar.tensors[0].shape, vec![8, 3, 3, 3]);
    }

    /// Loss used by the gradient checks below: both heads' soft cross entropy
    /// plus distillation against a fixed teacher stack.
    fn total_loss(net: &TinyNet, img: &ImageRgb, teacher: &FeatureStack) -> f64 {
        let cache = net.forward(img).unwrap();
        let t = [0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.1, 0.2, 0.1];
        let l = [0.3, 0.1, 0.1, 0.2, 0.2, 0.1];
        let (a, _) = loss_qc(&cache.type_logits, &t).unwrap();
        let (b, _) = loss_qc(&cache.level_logits, &l).unwrap();
        let kd = loss_kd(&cache.features(FeatureSource::Student), teacher, &LossWeights::default())
            .unwrap();
        a + b + kd.value
    }

    #[test]
    fn backward_matches_finite_differences() {
        let img = image(5);
        let teacher_net = TinyNet::new(NetShape::default(), 77);
        let teacher = teacher_net.stage_features(&img, FeatureSource::Teacher).unwrap();
        let mut net = TinyNet::new(NetShape::default(), 6);

        let cache = net.forward(&img).unwrap();
        let t = [0.1, 0.2, 0.05, 0.05, 0.1, 0.1, 0.1, 0.2, 0.1];
        let l = [0.3, 0.1, 0.1, 0.2, 0.2, 0.1];
        let (_, dt) = loss_qc(&cache.type_logits, &t).unwrap();
        let (_, dl) = loss_qc(&cache.level_logits, &l).unwrap();
        let kd = loss_kd(&cache.features(FeatureSource::Student), &teacher, &LossWeights::default())
            .unwrap();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&cache, &dt, &dl, Some(&kd.grad), &mut grad).unwrap();

        // Probe a spread of parameters across every layer; compare as vectors
        // so tiny entries are not swamped by finite-difference round-off.
        let h = 1e-6;
        let n = net.num_params();
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for idx in (0..n).step_by(97).chain([0, n - 1]) {
            let orig = net.params()[idx];
            net.params_mut().unwrap()[idx] = orig + h;
            let up = total_loss(&net, &img, &teacher);
            net.params_mut().unwrap()[idx] = orig - h;
            let down = total_loss(&net, &img, &teacher);
            net.params_mut().unwrap()[idx] = orig;
            num.push((up - down) / (2.0 * h));
            ana.push(grad[idx]);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = num.iter().zip(&ana).map(|(a, b)| a - b).collect();
        let max_rel = norm(&diff) / norm(&num).max(norm(&ana));
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
