//! SSIM (as a differentiable graph and as a metric) and PSNR.

use crate::error::{Error, Result};
use crate::nn::ConvGeometry;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Gaussian-window SSIM settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalised 1-D Gaussian; the 2-D window is its outer product.
    pub fn window_1d(&self) -> Vec<f64> {
        let center = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    pub fn window_2d(&self) -> Vec<f64> {
        let g = self.window_1d();
        g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
    }
}

/// Separable Gaussian blur of every channel, valid positions only.
fn blur<T: Element>(tape: &mut Tape<T>, x: Var, cfg: &SsimConfig) -> Result<Var> {
    let s = tape.shape(x)?;
    let g = cfg.window_1d();
    let vertical = ConvGeometry::new(s.c, s.c, (cfg.window, 1), 1, 0, s.c)?;
    let horizontal = ConvGeometry::new(s.c, s.c, (1, cfg.window), 1, 0, s.c)?;
    let kv = Tensor::from_fn(vertical.weight_shape(), |_, _, y, _| T::of(g[y]));
    let kh = Tensor::from_fn(horizontal.weight_shape(), |_, _, _, x| T::of(g[x]));
    let kv = tape.constant(kv);
    let kh = tape.constant(kh);
    let v = tape.conv2d(x, kv, None, &vertical)?;
    tape.conv2d(v, kh, None, &horizontal)
}

/// Mean SSIM over all valid window positions, channels and samples, as a
/// `(1,1,1,1)` node differentiable in both inputs.
pub fn ssim_graph<T: Element>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let (xs, ys) = (tape.shape(x)?, tape.shape(y)?);
    if xs != ys {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: xs,
            rhs: ys,
        });
    }
    if xs.h < cfg.window || xs.w < cfg.window {
        return Err(Error::invalid(
            "ssim",
            format!("image {}x{} smaller than the {} window", xs.h, xs.w, cfg.window),
        ));
    }
    let (c1, c2) = (T::of(cfg.c1()), T::of(cfg.c2()));
    let two = T::of(2.0);

    let mu_x = blur(tape, x, cfg)?;
    let mu_y = blur(tape, y, cfg)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = blur(tape, xx, cfg)?;
    let e_yy = blur(tape, yy, cfg)?;
    let e_xy = blur(tape, xy, cfg)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let lum_num = tape.affine(mu_xy, two, c1)?;
    let con_num = tape.affine(cov, two, c2)?;
    let num = tape.mul(lum_num, con_num)?;
    let lum_den = tape.add(mu_xx, mu_yy)?;
    let lum_den = tape.affine(lum_den, T::one(), c1)?;
    let con_den = tape.add(var_x, var_y)?;
    let con_den = tape.affine(con_den, T::one(), c2)?;
    let den = tape.mul(lum_den, con_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `−SSIM(estimate, target)`. The target is detached, so only `estimate`
/// receives a gradient.
pub fn ssim_loss<T: Element>(
    tape: &mut Tape<T>,
    estimate: Var,
    target: Var,
    cfg: &SsimConfig,
) -> Result<Var> {
    let target = if tape.requires_grad(target)? {
        let v = tape.value(target)?.clone();
        tape.constant(v)
    } else {
        target
    };
    let s = ssim_graph(tape, estimate, target, cfg)?;
    tape.affine(s, -T::one(), T::zero())
}

pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let s = ssim_graph(&mut tape, xv, yv, cfg)?;
    Ok(tape.value(s)?.item()?.as_f64())
}

pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: x.shape(),
            rhs: y.shape(),
        });
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(total / x.numel().max(1) as f64)
}

/// `10·log10(peak² / MSE)` in decibels; `f64::INFINITY` for identical inputs.
pub fn psnr<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::invalid("psnr", format!("peak {peak} must be positive")));
    }
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Clamps to `[0, 1]`, as done before writing or scoring an image.
pub fn clamp_unit<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.max(T::zero()).min(T::one()))
}
