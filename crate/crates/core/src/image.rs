//! RGB float rasters and PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// Dense RGB raster with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "expected {} samples for {width}x{height}x3, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from a closure, clamping every sample to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(clamp_unit(f(x, y, c)));
                }
            }
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height * 3])
    }

    /// Wraps raw samples, clamping them into range. Used by the distortions.
    pub(crate) fn from_unclamped(width: usize, height: usize, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        for v in &mut data {
            *v = clamp_unit(*v);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageRgb> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::validation(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(ImageRgb {
            width: w,
            height: h,
            data,
        })
    }

    /// Mirror image around the vertical axis.
    pub fn flip_horizontal(&self) -> ImageRgb {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(x, y));
            }
        }
        ImageRgb {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Per-pixel running mean of the three channels.
    ///
    /// The running form returns the channel value itself when all three
    /// channels agree, so uniform inputs stay bit-exact.
    pub fn channel_mean(&self) -> Plane {
        let values = self
            .data
            .chunks_exact(3)
            .map(|px| running_mean3(px[0], px[1], px[2]))
            .collect();
        Plane {
            width: self.width,
            height: self.height,
            values,
        }
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }
}

/// Single-channel float raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::validation(format!(
                "plane {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[inline]
pub(crate) fn running_mean3(a: f64, b: f64, c: f64) -> f64 {
    let mut m = a;
    m += (b - m) / 2.0;
    m += (c - m) / 3.0;
    m
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// Reads an 8- or 16-bit PNG into `[0, 1]` floats. Alpha is discarded and
/// gray images are expanded to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::validation(format!(
            "{} has zero dimension",
            path.display()
        )));
    }
    let data: Vec<f64> = match decoded {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => decoded
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
    };
    ImageRgb::new(w, h, data)
}

/// Writes an 8-bit RGB PNG, rounding to the nearest code value.
pub fn save_image(img: &ImageRgb, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Center crop to the largest size whose sides are multiples of `p`.
pub fn crop_to_multiple(img: &ImageRgb, p: usize) -> Result<ImageRgb> {
    if p == 0 {
        return Err(Error::validation("patch size must be at least 1"));
    }
    if img.width < p || img.height < p {
        return Err(Error::validation(format!(
            "{}x{} image is smaller than patch size {p}",
            img.width, img.height
        )));
    }
    let w = img.width / p * p;
    let h = img.height / p * p;
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    img.crop((img.width - w) / 2, (img.height - h) / 2, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImageRgb {
        ImageRgb::from_fn(w, h, |x, y, c| {
            ((x * 7 + y * 13 + c * 29) % 256) as f64 / 255.0
        })
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_length() {
        assert!(ImageRgb::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageRgb::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(ImageRgb::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn crop_floor_arithmetic() {
        let out = crop_to_multiple(&ramp(17, 9), 8).unwrap();
        assert_eq!((out.width(), out.height()), (16, 8));
        let img = ramp(224, 224);
        assert_eq!(crop_to_multiple(&img, 8).unwrap(), img);
    }

    #[test]
    fn crop_13_is_center_8() {
        let img = ramp(13, 13);
        let out = crop_to_multiple(&img, 8).unwrap();
        // (13 - 8) / 2 = 2
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(out.get(x, y, c), img.get(x + 2, y + 2, c));
                }
            }
        }
    }

    #[test]
    fn crop_rejects_small_images() {
        assert!(crop_to_multiple(&ramp(7, 20), 8).is_err());
        assert!(crop_to_multiple(&ramp(20, 7), 8).is_err());
        assert!(crop_to_multiple(&ramp(20, 20), 0).is_err());
    }

    #[test]
    fn channel_mean_is_exact_for_gray() {
        let img = ImageRgb::constant(2, 2, 0.4).unwrap();
        assert!(img.channel_mean().values.iter().all(|&v| v == 0.4));
    }

    #[test]
    fn black_and_white_png() {
        let dir = tempfile::tempdir().unwrap();
        for (value, byte) in [(0.0, 0u8), (1.0, 255u8)] {
            let path = dir.path().join(format!("{byte}.png"));
            image::RgbImage::from_pixel(2, 2, image::Rgb([byte; 3]))
                .save(&path)
                .unwrap();
            let img = load_image(&path).unwrap();
            assert_eq!((img.width(), img.height()), (2, 2));
            assert!(img.data().iter().all(|&v| v == value));
        }
    }

    #[test]
    fn sixteen_bit_png_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g16.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_pixel(3, 2, image::Luma([65535u16]))
            .save(&path)
            .unwrap();
        let img = load_image(&path).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn missing_and_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(load_image(&missing), Err(Error::Io { .. })));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Decode { .. })));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(5, 3);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(0, 1, 2), img.get(4, 1, 2));
    }
}
