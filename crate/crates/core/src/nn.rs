//! Parameterized layers on top of the tape.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_fan_uniform(
                format!("{name}.weight"),
                &[fan_in, fan_out],
                fan_in,
                rng,
            ),
            bias: Some(store.add_const(format!("{name}.bias"), &[fan_out], 0.0)),
            fan_in,
            fan_out,
        }
    }

    pub fn without_bias<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_fan_uniform(
                format!("{name}.weight"),
                &[fan_in, fan_out],
                fan_in,
                rng,
            ),
            bias: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Expands a per-row mask to a multiplier over `cols` columns.
pub fn row_mask<F: Real>(mask: &[bool], cols: usize) -> Vec<F> {
    mask.iter()
        .flat_map(|&m| std::iter::repeat_n(if m { F::one() } else { F::zero() }, cols))
        .collect()
}

/// Zeroes rows of `x` (last axis length `cols`) where `mask` is false.
pub fn zero_masked_rows<F: Real>(g: &mut Graph<'_, F>, x: Var, mask: &[bool]) -> Result<Var> {
    let cols = g.value(x).cols();
    g.mul_const(x, row_mask(mask, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        store.get_mut(lin.bias.unwrap()).value = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let x = vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0];
        let mut g = Graph::with_params(&store);
        let xv = g.constant(Tensor::new(&[2, 3], x.clone()).unwrap());
        let y = lin.forward(&mut g, xv).unwrap();
        let w = store.value(lin.weight).data();
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = [0.5, -1.0][c];
                for k in 0..3 {
                    acc += x[r * 3 + k] * w[k * 2 + c];
                }
                assert!((g.value(y).data()[r * 2 + c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_masked_rows_clears_padding() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::full(&[3, 2], 7.0));
        let y = zero_masked_rows(&mut g, x, &[true, false, true]).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 7.0, 0.0, 0.0, 7.0, 7.0]);
    }
}
