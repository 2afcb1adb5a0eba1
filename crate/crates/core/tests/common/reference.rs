//! Plain nested-loop versions of every forward op and of the whole network,
//! written independently of the tape.

use dcsfn::model::{BlockParams, DcsfnParams, LayerParams, NetConfig};
use dcsfn::nn::{ConvGeometry, ConvSpec, GruParams};
use dcsfn::{Shape, Tensor};

pub type T = Tensor<f64>;

pub fn conv(x: &T, w: &T, b: Option<&T>, g: &ConvGeometry) -> T {
    let s = x.shape();
    let (kh, kw) = g.kernel;
    let oh = (s.h + 2 * g.padding - kh) / g.stride + 1;
    let ow = (s.w + 2 * g.padding - kw) / g.stride + 1;
    let in_per = g.in_channels / g.groups;
    let out_per = g.out_channels / g.groups;
    Tensor::from_fn(Shape::new(s.n, g.out_channels, oh, ow), |n, o, y, xx| {
        let group = o / out_per;
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for ci in 0..in_per {
            let c = group * in_per + ci;
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (y * g.stride + ky) as isize - g.padding as isize;
                    let ix = (xx * g.stride + kx) as isize - g.padding as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    acc += w.at(o, ci, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

pub fn apply(x: &T, spec: &ConvSpec<T>) -> T {
    conv(x, &spec.weight, Some(&spec.bias), &spec.geometry)
}

pub fn lrelu(x: &T, alpha: f64) -> T {
    x.map(|v| if v >= 0.0 { v } else { alpha * v })
}

pub fn sigmoid(x: &T) -> T {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn tanh(x: &T) -> T {
    x.map(f64::tanh)
}

pub fn zip(a: &T, b: &T, f: impl Fn(f64, f64) -> f64) -> T {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |n, c, y, x| f(a.at(n, c, y, x), b.at(n, c, y, x)))
}

pub fn add(a: &T, b: &T) -> T {
    zip(a, b, |p, q| p + q)
}

pub fn max_pool(x: &T, k: usize) -> T {
    let s = x.shape();
    Tensor::from_fn(s.with_spatial(s.h / k, s.w / k), |n, c, y, xx| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..k {
            for dx in 0..k {
                m = m.max(x.at(n, c, y * k + dy, xx * k + dx));
            }
        }
        m
    })
}

pub fn avg_pool(x: &T, k: usize) -> T {
    let s = x.shape();
    Tensor::from_fn(s.with_spatial(s.h / k, s.w / k), |n, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                acc += x.at(n, c, y * k + dy, xx * k + dx);
            }
        }
        acc / (k * k) as f64
    })
}

pub fn upsample(x: &T, f: usize) -> T {
    let s = x.shape();
    Tensor::from_fn(s.with_spatial(s.h * f, s.w * f), |n, c, y, xx| x.at(n, c, y / f, xx / f))
}

pub fn concat(parts: &[&T]) -> T {
    let s = parts[0].shape();
    let total: usize = parts.iter().map(|p| p.shape().c).sum();
    Tensor::from_fn(s.with_channels(total), |n, c, y, x| {
        let mut c = c;
        for p in parts {
            if c < p.shape().c {
                return p.at(n, c, y, x);
            }
            c -= p.shape().c;
        }
        unreachable!()
    })
}

pub fn inner_block(x: &T, p: &BlockParams<T>, cfg: &NetConfig) -> T {
    let k = cfg.block_scales;
    let pooled: Vec<T> = (0..k).map(|i| max_pool(x, 1 << i)).collect();
    let mut ys: Vec<Option<T>> = vec![None; k];
    for i in (0..k).rev() {
        let connected = if i + 1 < k && cfg.inner_connection {
            let up = upsample(ys[i + 1].as_ref().unwrap(), 2);
            apply(&concat(&[&pooled[i], &up]), &p.links[i])
        } else {
            pooled[i].clone()
        };
        ys[i] = Some(lrelu(&apply(&connected, &p.branches[i]), cfg.alpha));
    }
    let ups: Vec<T> = ys
        .iter()
        .enumerate()
        .map(|(i, y)| upsample(y.as_ref().unwrap(), 1 << i))
        .collect();
    let refs: Vec<&T> = ups.iter().collect();
    add(&apply(&concat(&refs), &p.fuse), x)
}

fn layer(history: &[T], p: &LayerParams<T>, cfg: &NetConfig) -> T {
    let input = if cfg.dense {
        concat(&history.iter().collect::<Vec<_>>())
    } else {
        history.last().unwrap().clone()
    };
    inner_block(&apply(&input, &p.fuse), &p.block, cfg)
}

pub fn encoder(f0: &T, layers: &[LayerParams<T>], cfg: &NetConfig) -> Vec<T> {
    let mut history = vec![f0.clone()];
    for p in layers {
        let f = layer(&history, p, cfg);
        history.push(f);
    }
    history.split_off(1)
}

pub fn decoder(f0: &T, skips: &[T], layers: &[LayerParams<T>], cfg: &NetConfig) -> T {
    let mut history = vec![f0.clone()];
    for (p, skip) in layers.iter().zip(skips) {
        let mut f = layer(&history, p, cfg);
        if cfg.skip {
            f = add(&f, skip);
        }
        history.push(f);
    }
    history.pop().unwrap()
}

pub fn gru_step(x: &T, h: &T, p: &GruParams<T>) -> T {
    let xh = concat(&[x, h]);
    let z = sigmoid(&apply(&xh, &p.update));
    let r = sigmoid(&apply(&xh, &p.reset));
    let rh = zip(&r, h, |a, b| a * b);
    let cand = tanh(&apply(&concat(&[x, &rh]), &p.candidate));
    Tensor::from_fn(h.shape(), |n, c, y, xx| {
        let zz = z.at(n, c, y, xx);
        (1.0 - zz) * h.at(n, c, y, xx) + zz * cand.at(n, c, y, xx)
    })
}

pub fn cross_scale(encoded: &[T], p: &GruParams<T>) -> Vec<T> {
    let coarsest = encoded.last().unwrap().shape();
    let mut hidden = Tensor::zeros(coarsest.with_channels(p.hidden_channels()));
    let mut out = vec![hidden.clone(); encoded.len()];
    for s in (0..encoded.len()).rev() {
        if s + 1 < encoded.len() {
            hidden = upsample(&hidden, 2);
        }
        hidden = gru_step(&encoded[s], &hidden, p);
        out[s] = hidden.clone();
    }
    out
}

/// `(rain, background)`.
pub fn forward(input: &T, p: &DcsfnParams<T>) -> (T, T) {
    let cfg = &p.config;
    let mut encoded = Vec::new();
    let mut skips = Vec::new();
    for (s, sub) in p.subnets.iter().enumerate() {
        let scaled = avg_pool(input, 1 << s);
        let feats = encoder(&apply(&scaled, &sub.entry), &sub.encoder, cfg);
        encoded.push(feats.last().unwrap().clone());
        skips.push(feats);
    }
    let seeds = cross_scale(&encoded, &p.gru);
    let outs: Vec<T> = p
        .subnets
        .iter()
        .enumerate()
        .map(|(s, sub)| upsample(&decoder(&seeds[s], &skips[s], &sub.decoder, cfg), 1 << s))
        .collect();
    let refs: Vec<&T> = outs.iter().collect();
    let rain = apply(&apply(&concat(&refs), &p.head.fuse), &p.head.out);
    let background = zip(input, &rain, |o, r| o - r);
    (rain, background)
}
