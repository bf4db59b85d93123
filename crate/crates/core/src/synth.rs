//! Procedural reference images: smooth backgrounds with flat shapes,
//! gratings and checkerboards, so that maps have both flat and busy regions.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::Result;
use crate::image::ImageRgb;
use crate::rng;

#[derive(Clone, Copy, Debug)]
enum Fill {
    Flat([f64; 3]),
    Grating {
        a: [f64; 3],
        b: [f64; 3],
        freq: f64,
        angle: f64,
    },
    Checker {
        a: [f64; 3],
        b: [f64; 3],
        cell: usize,
    },
}

impl Fill {
    fn color(&self, x: usize, y: usize) -> [f64; 3] {
        match *self {
            Fill::Flat(c) => c,
            Fill::Grating { a, b, freq, angle } => {
                let t = x as f64 * angle.cos() + y as f64 * angle.sin();
                let s = 0.5 + 0.5 * (freq * t).sin();
                std::array::from_fn(|c| a[c] + s * (b[c] - a[c]))
            }
            Fill::Checker { a, b, cell } => {
                if (x / cell + y / cell) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
        }
    }
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.1..0.9))
}

/// Deterministic `width × height` reference image for `(seed, index)`.
pub fn procedural_reference(width: usize, height: usize, seed: u64, index: u64) -> Result<ImageRgb> {
    let mut rng = rng::stream(seed, "synth_reference", index);
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.random_range(0.0..2.0 * PI);
    let (w, h) = (width as f64, height as f64);
    let span = w.hypot(h);

    let n_shapes = rng.random_range(2..=5);
    let mut layers = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let shape = if rng.random_bool(0.5) {
            Shape::Disk {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(0.0..h),
                r: rng.random_range(0.1..0.35) * w.min(h),
            }
        } else {
            let (x0, y0) = (rng.random_range(0.0..0.7 * w), rng.random_range(0.0..0.7 * h));
            Shape::Rect {
                x0,
                y0,
                x1: x0 + rng.random_range(0.2..0.5) * w,
                y1: y0 + rng.random_range(0.2..0.5) * h,
            }
        };
        let fill = match rng.random_range(0..3) {
            0 => Fill::Flat(color(&mut rng)),
            1 => Fill::Grating {
                a: color(&mut rng),
                b: color(&mut rng),
                freq: rng.random_range(0.3..1.5),
                angle: rng.random_range(0.0..PI),
            },
            _ => Fill::Checker {
                a: color(&mut rng),
                b: color(&mut rng),
                cell: rng.random_range(1..=4),
            },
        };
        layers.push((shape, fill));
    }

    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let mut px = {
                let t = ((x as f64 - w / 2.0) * angle.cos() + (y as f64 - h / 2.0) * angle.sin()) / span + 0.5;
                let t = t.clamp(0.0, 1.0);
                std::array::from_fn::<f64, 3, _>(|c| c0[c] + t * (c1[c] - c0[c]))
            };
            for (shape, fill) in &layers {
                if shape.contains(x, y) {
                    px = fill.color(x, y);
                }
            }
            data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
        }
    }
    ImageRgb::new(width, height, data)
}
