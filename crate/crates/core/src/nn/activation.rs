use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tape::{BackwardRule, Tape, Var};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tape<T> {
    /// `x` for `x >= 0`, `alpha * x` otherwise. The derivative at 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Result<Var> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::invalid("leaky_relu", format!("slope {alpha} outside (0, 1)")));
        }
        let out = self.value(x)?.map(|v| if v >= T::zero() { v } else { alpha * v });
        self.record(&[x], out, Box::new(LeakyRelu(alpha)))
    }
}

struct LeakyRelu<T>(T);

impl<T: Element> BackwardRule<T> for LeakyRelu<T> {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let data = grad
            .data()
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x >= T::zero() { g } else { g * self.0 })
            .collect();
        vec![Some(Tensor::new(grad.shape(), data).expect("same shape"))]
    }

    fn branch_state(&self, inputs: &[&Tensor<T>], state: &mut dyn Hasher) {
        let mut word = 0u64;
        for (i, &x) in inputs[0].data().iter().enumerate() {
            word = (word << 1) | (x >= T::zero()) as u64;
            if i % 64 == 63 {
                state.write_u64(word);
                word = 0;
            }
        }
        state.write_u64(word);
    }
}
