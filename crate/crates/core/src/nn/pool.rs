//! Resolution changes: strided max pooling, area averaging and
//! nearest-neighbour upsampling. All three work on non-overlapping square
//! blocks, so pooling an upsampled map recovers the original exactly.

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Element, Shape, Tensor};

fn check_divisible(op: &'static str, s: Shape, k: usize) -> Result<Shape> {
    if k == 0 {
        return Err(Error::invalid(op, "window must be at least 1"));
    }
    if !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
        return Err(Error::invalid(
            op,
            format!("spatial size {}x{} not divisible by {k}", s.h, s.w),
        ));
    }
    Ok(s.with_spatial(s.h / k, s.w / k))
}

impl<T: Element> Tape<T> {
    /// Maximum over non-overlapping `k × k` windows (stride `k`). Ties go to
    /// the first element in row-major order.
    pub fn strided_max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x)?;
        let os = check_divisible("strided_max_pool", xs, k)?;
        let input = self.value(x)?;
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = (n * xs.c + c) * xs.plane();
                let plane = input.plane(n, c);
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut best = oy * k * xs.w + ox * k;
                        for dy in 0..k {
                            for dx in 0..k {
                                let i = (oy * k + dy) * xs.w + ox * k + dx;
                                if plane[i] > plane[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(plane[best]);
                        argmax.push(base + best);
                    }
                }
            }
        }
        let out = Tensor::new(os, out)?;
        self.record(&[x], out, Box::new(MaxPool { argmax }))
    }

    /// Mean over non-overlapping `k × k` windows.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x)?;
        let os = check_divisible("avg_pool", xs, k)?;
        let input = self.value(x)?;
        let inv = T::one() / T::of((k * k) as f64);
        let out = Tensor::from_fn(os, |n, c, oy, ox| {
            let mut acc = T::zero();
            for dy in 0..k {
                for dx in 0..k {
                    acc = acc + input.at(n, c, oy * k + dy, ox * k + dx);
                }
            }
            acc * inv
        });
        self.record(&[x], out, Box::new(AvgPool { k }))
    }

    /// Replicates every pixel into an `f × f` block.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
        }
        let xs = self.shape(x)?;
        let input = self.value(x)?;
        let os = xs.with_spatial(xs.h * f, xs.w * f);
        let out = Tensor::from_fn(os, |n, c, y, xx| input.at(n, c, y / f, xx / f));
        self.record(&[x], out, Box::new(Upsample { f }))
    }
}

struct MaxPool {
    argmax: Vec<usize>,
}

impl<T: Element> BackwardRule<T> for MaxPool {
    fn name(&self) -> &'static str {
        "strided_max_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&i, &g) in self.argmax.iter().zip(grad.data()) {
            d[i] = d[i] + g;
        }
        vec![Some(dx)]
    }

    fn branch_state(&self, _inputs: &[&Tensor<T>], state: &mut dyn Hasher) {
        for &i in &self.argmax {
            state.write_usize(i);
        }
    }
}

struct AvgPool {
    k: usize,
}

impl<T: Element> BackwardRule<T> for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let k = self.k;
        let inv = T::one() / T::of((k * k) as f64);
        let dx = Tensor::from_fn(inputs[0].shape(), |n, c, y, x| grad.at(n, c, y / k, x / k) * inv);
        vec![Some(dx)]
    }
}

struct Upsample {
    f: usize,
}

impl<T: Element> BackwardRule<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let f = self.f;
        let dx = Tensor::from_fn(inputs[0].shape(), |n, c, y, x| {
            let mut acc = T::zero();
            for dy in 0..f {
                for dx in 0..f {
                    acc = acc + grad.at(n, c, y * f + dy, x * f + dx);
                }
            }
            acc
        });
        vec![Some(dx)]
    }
}
