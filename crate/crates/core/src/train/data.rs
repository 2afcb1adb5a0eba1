use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// A rainy image, its clean background and the rain layer, each `(1,3,h,w)`
/// in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RainPair {
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub rain: Tensor<f32>,
}

impl RainPair {
    /// Builds a pair with `rainy = clamp(clean + rain, 0, 1)`.
    pub fn compose(clean: Tensor<f32>, rain: Tensor<f32>) -> Result<Self> {
        if clean.shape() != rain.shape() {
            return Err(Error::ShapeMismatch {
                op: "RainPair::compose",
                lhs: clean.shape(),
                rhs: rain.shape(),
            });
        }
        let data = clean
            .data()
            .iter()
            .zip(rain.data())
            .map(|(b, r)| (b + r).clamp(0.0, 1.0))
            .collect();
        let rainy = Tensor::new(clean.shape(), data)?;
        Ok(RainPair { rainy, clean, rain })
    }

    /// Pairs a rainy image with its background, taking `max(rainy − clean, 0)`
    /// as the rain layer.
    pub fn from_images(rainy: Tensor<f32>, clean: Tensor<f32>) -> Result<Self> {
        if rainy.shape() != clean.shape() {
            return Err(Error::ShapeMismatch {
                op: "RainPair::from_images",
                lhs: rainy.shape(),
                rhs: clean.shape(),
            });
        }
        let data = rainy
            .data()
            .iter()
            .zip(clean.data())
            .map(|(o, b)| (o - b).max(0.0))
            .collect();
        let rain = Tensor::new(rainy.shape(), data)?;
        Ok(RainPair { rainy, clean, rain })
    }

    pub fn height(&self) -> usize {
        self.clean.shape().h
    }

    pub fn width(&self) -> usize {
        self.clean.shape().w
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.clean.shape();
        if y0 + h > s.h || x0 + w > s.w {
            return Err(Error::invalid(
                "crop",
                format!("window {h}x{w} at ({y0}, {x0}) exceeds {}x{}", s.h, s.w),
            ));
        }
        let cut = |t: &Tensor<f32>| {
            Tensor::from_fn(s.with_spatial(h, w), |n, c, y, x| t.at(n, c, y0 + y, x0 + x))
        };
        Ok(RainPair {
            rainy: cut(&self.rainy),
            clean: cut(&self.clean),
            rain: cut(&self.rain),
        })
    }
}

/// Crops the same random `size × size` window from all three images.
pub fn sample_patch(pair: &RainPair, size: usize, rng: &mut impl Rng) -> Result<RainPair> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h || size > w {
        return Err(Error::invalid(
            "sample_patch",
            format!("patch {size} does not fit a {h}x{w} image"),
        ));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    pair.crop(y0, x0, size, size)
}

/// Rain streak generator settings. Ranges are inclusive `(min, max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreakParams {
    pub count: (usize, usize),
    /// Streak length in pixels.
    pub length: (f64, f64),
    /// Angle from vertical in degrees.
    pub angle: (f64, f64),
    /// Line width in pixels.
    pub width: f64,
    pub intensity: (f64, f64),
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur: f64,
}

impl Default for StreakParams {
    fn default() -> Self {
        StreakParams {
            count: (8, 24),
            length: (4.0, 14.0),
            angle: (-25.0, 25.0),
            width: 1.0,
            intensity: (0.25, 0.7),
            blur: 0.6,
        }
    }
}

impl StreakParams {
    /// No streaks at all, giving `rainy == clean`.
    pub fn none() -> Self {
        StreakParams {
            count: (0, 0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::invalid("synth_rain_pair", what.to_string()));
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.count.0 > self.count.1 {
            return fail("count range is reversed");
        }
        if !ordered(self.length) || self.length.0 < 0.0 {
            return fail("length range must be ordered and non-negative");
        }
        if !ordered(self.angle) {
            return fail("angle range must be ordered");
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return fail("width must be positive");
        }
        if !ordered(self.intensity) || self.intensity.0 < 0.0 || self.intensity.1 > 1.0 {
            return fail("intensity range must be ordered within [0, 1]");
        }
        if !(self.blur >= 0.0 && self.blur.is_finite()) {
            return fail("blur must be non-negative");
        }
        Ok(())
    }
}

/// Generates a pair from `seed` alone: a smooth random background plus
/// anti-aliased, blurred line streaks.
pub fn synth_rain_pair(seed: u64, size: usize, streaks: &StreakParams) -> Result<RainPair> {
    streaks.validate()?;
    if size == 0 {
        return Err(Error::invalid("synth_rain_pair", "size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = smooth_background(&mut rng, size);

    let mut mask = vec![0.0f64; size * size];
    let count = rng.gen_range(streaks.count.0..=streaks.count.1);
    for _ in 0..count {
        let cy = rng.gen_range(0.0..size as f64);
        let cx = rng.gen_range(0.0..size as f64);
        let len = rng.gen_range(streaks.length.0..=streaks.length.1);
        let angle = rng.gen_range(streaks.angle.0..=streaks.angle.1).to_radians();
        let level = rng.gen_range(streaks.intensity.0..=streaks.intensity.1);
        let (dy, dx) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
        draw_segment(&mut mask, size, (cy - dy, cx - dx), (cy + dy, cx + dx), streaks.width, level);
    }
    if streaks.blur > 0.0 {
        mask = gaussian_blur(&mask, size, streaks.blur);
    }
    let rain = Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, y, x| {
        mask[y * size + x].clamp(0.0, 1.0) as f32
    });
    RainPair::compose(clean, rain)
}

/// Per-channel bilinear interpolation of a coarse random grid.
fn smooth_background(rng: &mut impl Rng, size: usize) -> Tensor<f32> {
    const CELLS: usize = 4;
    let grid: Vec<f64> = (0..3 * (CELLS + 1) * (CELLS + 1))
        .map(|_| rng.gen_range(0.1..0.9))
        .collect();
    let scale = CELLS as f64 / size.max(2).saturating_sub(1) as f64;
    Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, y, x| {
        let gy = y as f64 * scale;
        let gx = x as f64 * scale;
        let (iy, ix) = ((gy as usize).min(CELLS - 1), (gx as usize).min(CELLS - 1));
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let at = |yy: usize, xx: usize| grid[(c * (CELLS + 1) + yy) * (CELLS + 1) + xx];
        let top = at(iy, ix) * (1.0 - fx) + at(iy, ix + 1) * fx;
        let bottom = at(iy + 1, ix) * (1.0 - fx) + at(iy + 1, ix + 1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Adds a line with linear edge falloff; overlapping streaks keep the brighter value.
fn draw_segment(mask: &mut [f64], size: usize, a: (f64, f64), b: (f64, f64), width: f64, level: f64) {
    let reach = width / 2.0 + 1.0;
    let lo = |p: f64, q: f64| ((p.min(q) - reach).floor().max(0.0)) as usize;
    let hi = |p: f64, q: f64| ((p.max(q) + reach).ceil().max(0.0) as usize).min(size);
    let (abx, aby) = (b.1 - a.1, b.0 - a.0);
    let len2 = abx * abx + aby * aby;
    for y in lo(a.0, b.0)..hi(a.0, b.0) {
        for x in lo(a.1, b.1)..hi(a.1, b.1) {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.1) * abx + (py - a.0) * aby) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (px - (a.1 + t * abx), py - (a.0 + t * aby));
            let d = (ex * ex + ey * ey).sqrt();
            let coverage = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let cell = &mut mask[y * size + x];
            *cell = cell.max(level * coverage);
        }
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[y * size + clamp(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - radius) * size + x])
                .sum();
        }
    }
    out
}
