//! Convolutional GRU cell.
//!
//! ```text
//! z  = σ(W_z ∗ [x, h])
//! r  = σ(W_r ∗ [x, h])
//! h̃  = tanh(W_h ∗ [x, r ⊙ h])
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use crate::error::{Error, Result};
use crate::nn::conv::{ConvGeometry, ConvSpec};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<P> {
    pub update: ConvSpec<P>,
    pub reset: ConvSpec<P>,
    pub candidate: ConvSpec<P>,
}

impl<P> GruParams<P> {
    pub fn geometry(input_channels: usize, hidden_channels: usize) -> Result<ConvGeometry> {
        ConvGeometry::same(input_channels + hidden_channels, hidden_channels, 3, 1)
    }

    pub fn hidden_channels(&self) -> usize {
        self.update.geometry.out_channels
    }

    pub fn input_channels(&self) -> usize {
        self.update.geometry.in_channels - self.hidden_channels()
    }

    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> GruParams<Q> {
        GruParams {
            update: self.update.map(f),
            reset: self.reset.map(f),
            candidate: self.candidate.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.update.visit(&format!("{prefix}.update"), f);
        self.reset.visit(&format!("{prefix}.reset"), f);
        self.candidate.visit(&format!("{prefix}.candidate"), f);
    }
}

impl<T: Element> GruParams<Tensor<T>> {
    pub fn zeros(input_channels: usize, hidden_channels: usize) -> Result<Self> {
        let g = Self::geometry(input_channels, hidden_channels)?;
        Ok(GruParams {
            update: ConvSpec::zeros(g),
            reset: ConvSpec::zeros(g),
            candidate: ConvSpec::zeros(g),
        })
    }
}

impl<T: Element> Tape<T> {
    /// One GRU update of hidden state `h` given input `x`; the result has
    /// `h`'s shape.
    pub fn conv_gru_step(&mut self, x: Var, h: Var, p: &GruParams<Var>) -> Result<Var> {
        let (xs, hs) = (self.shape(x)?, self.shape(h)?);
        if (xs.n, xs.h, xs.w) != (hs.n, hs.h, hs.w) {
            return Err(Error::ShapeMismatch {
                op: "conv_gru_step",
                lhs: xs,
                rhs: hs,
            });
        }
        if xs.c != p.input_channels() || hs.c != p.hidden_channels() {
            return Err(Error::invalid(
                "conv_gru_step",
                format!(
                    "got input/hidden channels {}/{}, cell expects {}/{}",
                    xs.c,
                    hs.c,
                    p.input_channels(),
                    p.hidden_channels()
                ),
            ));
        }
        let xh = self.concat_channels(&[x, h])?;
        let z = self.conv(xh, &p.update)?;
        let z = self.sigmoid(z)?;
        let r = self.conv(xh, &p.reset)?;
        let r = self.sigmoid(r)?;
        let rh = self.mul(r, h)?;
        let xrh = self.concat_channels(&[x, rh])?;
        let cand = self.conv(xrh, &p.candidate)?;
        let cand = self.tanh(cand)?;
        let keep = self.affine(z, -T::one(), T::one())?;
        let kept = self.mul(keep, h)?;
        let fresh = self.mul(z, cand)?;
        self.add(kept, fresh)
    }
}
