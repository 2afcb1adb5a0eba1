use crate::error::{Error, Result};
use crate::model::DcsfnParams;
use crate::tape::{Gradients, Var};
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moments, one pair per parameter in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self
    where
        T: 'a,
    {
        let m: Vec<_> = params.into_iter().map(Tensor::zeros_like).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_model(params: &DcsfnParams<Tensor<T>>) -> Self {
        Self::new(params.named().into_iter().map(|(_, t)| t))
    }

    /// One bias-corrected Adam update. `params[i]` is `(name, tensor)` and
    /// pairs with `grads[i]`. Nothing is modified if any gradient is missing
    /// or misshapen.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Option<&Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("adam_step", format!("learning rate {lr} must be non-negative")));
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (((name, p), g), m) in params.iter().zip(grads).zip(&self.m) {
            let g = g.ok_or_else(|| Error::MissingGradient(name.clone()))?;
            for other in [g.shape(), m.shape()] {
                if other != p.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape(),
                        rhs: other,
                    });
                }
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (one_b1, one_b2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let c1 = T::of(1.0 - BETA1.powi(t));
        let c2 = T::of(1.0 - BETA2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(EPSILON));
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.expect("checked above").data();
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to a model using the gradients of its bound copy.
pub fn adam_step<T: Element>(
    params: &mut DcsfnParams<Tensor<T>>,
    bound: &DcsfnParams<Var>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let names: Vec<String> = bound.named().into_iter().map(|(n, _)| n).collect();
    let g: Vec<Option<&Tensor<T>>> = bound.named().into_iter().map(|(_, v)| grads.get(*v)).collect();
    let mut slots: Vec<(String, &mut Tensor<T>)> = names.into_iter().zip(params.tensors_mut()).collect();
    state.step(&mut slots, &g, lr)
}
