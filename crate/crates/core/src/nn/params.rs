use std::collections::HashMap;

use super::graph::Gradients;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with gradient buffers of identical shape, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Tensor<F>>,
    lookup: HashMap<String, ParamId>,
}

impl<F: Float> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.names.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.id(name)
            .map(|id| self.value(id))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replace a value; the shape may change (the gradient buffer follows).
    pub fn replace(&mut self, id: ParamId, value: Tensor<F>) {
        self.grads[id.0] = Tensor::zeros(value.shape());
        self.values[id.0] = value;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x = F::zero());
        }
    }

    /// Add one backward sweep's parameter gradients, scaled by `scale`.
    pub fn accumulate(&mut self, grads: &Gradients<F>, scale: f64) -> Result<()> {
        let s = F::of(scale);
        for (id, g) in grads.params() {
            let Some(g) = g else { continue };
            let dst = &mut self.grads[id.0];
            if dst.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "accumulate",
                    left: dst.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            dst.data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += *b * s);
        }
        Ok(())
    }

    /// Detach the gradients of one sweep into a dense per-parameter buffer.
    pub fn collect(&self, grads: &Gradients<F>) -> GradBuffer<F> {
        let mut buf: Vec<Option<Tensor<F>>> = vec![None; self.len()];
        for (id, g) in grads.params() {
            if let Some(g) = g {
                buf[id.0] = Some(g.clone());
            }
        }
        GradBuffer(buf)
    }

    pub fn accumulate_buffer(&mut self, buf: &GradBuffer<F>) -> Result<()> {
        for (dst, g) in self.grads.iter_mut().zip(&buf.0) {
            if let Some(g) = g {
                dst.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        let s = F::of(s);
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn check_finite_grads(&self) -> Result<()> {
        for (name, g) in self.names.iter().zip(&self.grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients detached from a store, for sharded accumulation.
#[derive(Debug, Clone)]
pub struct GradBuffer<F>(Vec<Option<Tensor<F>>>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Float>(config: AdamConfig, store: &ParameterStore<F>) -> Self {
        let zeros = || store.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients currently held in `store`.
    pub fn step<F: Float>(&mut self, store: &mut ParameterStore<F>, lr: f64) -> Result<()> {
        store.check_finite_grads()?;
        if self.m.len() != store.len() {
            return Err(Error::invalid(
                "optimizer state does not match the parameter store",
            ));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (value, grad)) in store.values.iter_mut().zip(&store.grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + eps);
                *w = F::of(w.as_f64() - upd);
            }
        }
        Ok(())
    }
}

/// One Adam update of `store` from its accumulated gradients.
pub fn adam_step<F: Float>(store: &mut ParameterStore<F>, state: &mut Adam, lr: f64) -> Result<()> {
    state.step(store, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    fn quadratic_store(w0: &[f64]) -> (ParameterStore<f64>, ParamId) {
        let mut s = ParameterStore::new();
        let id = s
            .add("w", Tensor::new(vec![w0.len()], w0.to_vec()).unwrap())
            .unwrap();
        (s, id)
    }

    /// Gradient of ||w - c||^2 written straight into the store.
    fn set_quadratic_grad(s: &mut ParameterStore<f64>, id: ParamId, c: &[f64]) {
        let w = s.value(id).data().to_vec();
        s.zero_grad();
        let g: Vec<f64> = w.iter().zip(c).map(|(w, c)| 2.0 * (w - c)).collect();
        s.grads[id.0] = Tensor::new(vec![g.len()], g).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = quadratic_store(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn one_step_moves_toward_minimum() {
        let (mut s, id) = quadratic_store(&[3.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        set_quadratic_grad(&mut s, id, &[0.0]);
        adam.step(&mut s, 0.1).unwrap();
        assert!(s.value(id).data()[0] < 3.0);
    }

    #[test]
    fn converges_on_quadratic() {
        let c = [0.5, -1.5, 2.0];
        let (mut s, id) = quadratic_store(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(
            AdamConfig {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            &s,
        );
        for _ in 0..200 {
            set_quadratic_grad(&mut s, id, &c);
            adam.step(&mut s, 0.1).unwrap();
        }
        let dist: f64 = s
            .value(id)
            .data()
            .iter()
            .zip(&c)
            .map(|(w, c)| (w - c) * (w - c))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "distance {dist}");
    }

    #[test]
    fn rejects_non_finite_gradient_by_name() {
        let (mut s, id) = quadratic_store(&[1.0]);
        s.grads[id.0] = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        match adam.step(&mut s, 0.1) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = quadratic_store(&[1.0]);
        assert!(s.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn detached_parameter_gets_zero_gradient() {
        let mut s = ParameterStore::<f64>::new();
        let a = s.add("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = s.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::new();
        let va = g.param(&s, a);
        let loss = g.sum(va);
        let grads = g.backward(loss).unwrap();
        s.accumulate(&grads, 1.0).unwrap();
        assert_eq!(s.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(s.grad(b).data(), &[0.0, 0.0]);
    }
}
