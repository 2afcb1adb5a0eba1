//! Grouped 2-D cross-correlation.

use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let g = ConvGeometry {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        g.validate()?;
        Ok(g)
    }

    /// Stride-1, size-preserving `k × k` convolution (padding `k / 2`).
    pub fn same(in_channels: usize, out_channels: usize, k: usize, groups: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, (k, k), 1, k / 2, groups)
    }

    /// `1 × 1` channel fusion.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::same(in_channels, out_channels, 1, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("conv2d", format!("zero-sized geometry {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "groups {} must divide in_channels {} and out_channels {}",
                    self.groups, self.in_channels, self.out_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * self.padding;
            if padded < k || !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::invalid(
                    "conv2d",
                    format!(
                        "input {size} with kernel {k}, padding {}, stride {} gives a non-integral output",
                        self.padding, self.stride
                    ),
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((dim(h, self.kernel.0)?, dim(w, self.kernel.1)?))
    }
}

/// Convolution geometry plus its parameters. `P` is `Tensor<T>` for stored
/// parameters and [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<P> {
    pub geometry: ConvGeometry,
    pub weight: P,
    pub bias: P,
}

impl<P> ConvSpec<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvSpec<Q> {
        ConvSpec {
            geometry: self.geometry,
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
}

impl<T: Element> ConvSpec<Tensor<T>> {
    pub fn zeros(geometry: ConvGeometry) -> Self {
        ConvSpec {
            geometry,
            weight: Tensor::zeros(geometry.weight_shape()),
            bias: Tensor::zeros(geometry.bias_shape()),
        }
    }
}

impl<T: Element> Tape<T> {
    /// Cross-correlation of `x` with `weight`, plus `bias` if given.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: &ConvGeometry,
    ) -> Result<Var> {
        geometry.validate()?;
        let xs = self.shape(x)?;
        if xs.c != geometry.in_channels {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {} channels, expected {}", xs.c, geometry.in_channels),
            ));
        }
        let ws = self.shape(weight)?;
        if ws != geometry.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                lhs: ws,
                rhs: geometry.weight_shape(),
            });
        }
        if let Some(b) = bias {
            let bs = self.shape(b)?;
            if bs != geometry.bias_shape() {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: bs,
                    rhs: geometry.bias_shape(),
                });
            }
        }
        let (oh, ow) = geometry.output_size(xs.h, xs.w)?;
        let out_shape = Shape::new(xs.n, geometry.out_channels, oh, ow);
        let out = conv_forward(
            self.value(x)?,
            self.value(weight)?,
            bias.map(|b| self.value(b)).transpose()?,
            geometry,
            out_shape,
        );
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.record(&parents, out, Box::new(Conv2d { geometry: *geometry }))
    }

    pub fn conv(&mut self, x: Var, spec: &ConvSpec<Var>) -> Result<Var> {
        self.conv2d(x, spec.weight, Some(spec.bias), &spec.geometry)
    }
}

/// For output column `ox` the input column is `ox * stride + kx - padding`.
/// Returns the half-open range of output columns (or rows) that land inside
/// the input.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - padding <= in_len - 1
    let hi = if in_len + padding < k + 1 {
        0
    } else {
        ((in_len + padding - k - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

struct Geo {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

/// Calls `f(ky, kx, oy, iy, ix0, ox_lo, ox_hi)` for every kernel tap and
/// every output row `oy` that reads input row `iy`. Output columns
/// `ox_lo..ox_hi` read input columns starting at `ix0`.
#[inline]
fn for_each_tap(g: &Geo, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
    for ky in 0..g.kh {
        let (oy_lo, oy_hi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
        for kx in 0..g.kw {
            let (ox_lo, ox_hi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
            if ox_lo >= ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                let ix0 = ox_lo * g.stride + kx - g.pad;
                f(ky, kx, oy, iy, ix0, ox_lo, ox_hi);
            }
        }
    }
}

fn conv_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geometry: &ConvGeometry,
    out_shape: Shape,
) -> Tensor<T> {
    let xs = x.shape();
    let g = Geo {
        h: xs.h,
        w: xs.w,
        oh: out_shape.h,
        ow: out_shape.w,
        kh: geometry.kernel.0,
        kw: geometry.kernel.1,
        stride: geometry.stride,
        pad: geometry.padding,
    };
    let icpg = geometry.in_channels / geometry.groups;
    let ocpg = geometry.out_channels / geometry.groups;
    let mut out = Tensor::zeros(out_shape);
    let oplane = out_shape.plane();
    let wd = w.data();
    for n in 0..xs.n {
        for oc in 0..geometry.out_channels {
            let group = oc / ocpg;
            let start = (n * out_shape.c + oc) * oplane;
            let dst = &mut out.data_mut()[start..start + oplane];
            if let Some(b) = b {
                dst.fill(b.data()[oc]);
            }
            for icl in 0..icpg {
                let src = x.plane(n, group * icpg + icl);
                let wbase = (oc * icpg + icl) * g.kh * g.kw;
                for_each_tap(&g, |ky, kx, oy, iy, ix0, lo, hi| {
                    let wv = wd[wbase + ky * g.kw + kx];
                    let drow = &mut dst[oy * g.ow + lo..oy * g.ow + hi];
                    let srow = &src[iy * g.w..];
                    if g.stride == 1 {
                        for (d, &s) in drow.iter_mut().zip(&srow[ix0..ix0 + (hi - lo)]) {
                            *d = *d + wv * s;
                        }
                    } else {
                        for (j, d) in drow.iter_mut().enumerate() {
                            *d = *d + wv * srow[ix0 + j * g.stride];
                        }
                    }
                });
            }
        }
    }
    out
}

struct Conv2d {
    geometry: ConvGeometry,
}

impl<T: Element> BackwardRule<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geometry = &self.geometry;
        let xs = x.shape();
        let gs = grad.shape();
        let g = Geo {
            h: xs.h,
            w: xs.w,
            oh: gs.h,
            ow: gs.w,
            kh: geometry.kernel.0,
            kw: geometry.kernel.1,
            stride: geometry.stride,
            pad: geometry.padding,
        };
        let icpg = geometry.in_channels / geometry.groups;
        let ocpg = geometry.out_channels / geometry.groups;
        let taps = g.kh * g.kw;

        let mut dx = needs[0].then(|| Tensor::zeros(xs));
        let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
        let wd = w.data();
        let xplane = xs.plane();

        for n in 0..xs.n {
            for oc in 0..geometry.out_channels {
                let group = oc / ocpg;
                let gplane = grad.plane(n, oc);
                for icl in 0..icpg {
                    let ic = group * icpg + icl;
                    let wbase = (oc * icpg + icl) * taps;
                    if let Some(dx) = dx.as_mut() {
                        let start = (n * xs.c + ic) * xplane;
                        let dst = &mut dx.data_mut()[start..start + xplane];
                        for_each_tap(&g, |ky, kx, oy, iy, ix0, lo, hi| {
                            let wv = wd[wbase + ky * g.kw + kx];
                            let grow = &gplane[oy * g.ow + lo..oy * g.ow + hi];
                            let drow = &mut dst[iy * g.w..];
                            if g.stride == 1 {
                                for (d, &gv) in drow[ix0..ix0 + (hi - lo)].iter_mut().zip(grow) {
                                    *d = *d + wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let d = &mut drow[ix0 + j * g.stride];
                                    *d = *d + wv * gv;
                                }
                            }
                        });
                    }
                    if let Some(dw) = dw.as_mut() {
                        let src = x.plane(n, ic);
                        let dwd = &mut dw.data_mut()[wbase..wbase + taps];
                        for_each_tap(&g, |ky, kx, oy, iy, ix0, lo, hi| {
                            let grow = &gplane[oy * g.ow + lo..oy * g.ow + hi];
                            let srow = &src[iy * g.w..];
                            let mut acc = T::zero();
                            if g.stride == 1 {
                                for (&gv, &s) in grow.iter().zip(&srow[ix0..ix0 + (hi - lo)]) {
                                    acc = acc + gv * s;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * srow[ix0 + j * g.stride];
                                }
                            }
                            let d = &mut dwd[ky * g.kw + kx];
                            *d = *d + acc;
                        });
                    }
                }
            }
        }

        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            let db = needs[2].then(|| {
                let mut db = Tensor::zeros(inputs[2].shape());
                for n in 0..gs.n {
                    for oc in 0..gs.c {
                        let s = grad.plane(n, oc).iter().fold(T::zero(), |a, &v| a + v);
                        db.data_mut()[oc] = db.data()[oc] + s;
                    }
                }
                db
            });
            out.push(db);
        }
        out
    }
}
