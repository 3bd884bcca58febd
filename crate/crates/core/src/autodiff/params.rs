use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Gradients, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a trainable parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Owns every trainable tensor of a model. Layers hold [`ParamId`]s, so two
/// layers holding the same id share one tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_fan_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape product"))
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::of(std * z)
            })
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape product"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, F::of(value)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(F::zero());
        }
    }

    /// Adds the gradients of one backward pass onto the stored grads.
    /// Grads accumulate across calls until [`zero_grads`](Self::zero_grads).
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.param_grads() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, &s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_finite_grads(&self) -> Result<()> {
        match self.params.iter().find(|p| !p.grad.is_finite()) {
            Some(p) => Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    /// Copies values from `other` by name and shape.
    pub fn load_values(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_values",
                    p.value.shape(),
                    src.value.shape(),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
