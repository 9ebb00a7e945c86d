//! Tape-based reverse-mode differentiation.
//!
//! Every call on [`Graph`] evaluates its op eagerly and appends a node; the
//! tape order is a valid topological order, so [`Graph::backward`] is a single
//! reverse sweep. Parameters enter through [`Graph::param`], which copies the
//! current value out of the [`ParameterStore`] and remembers its id so the
//! gradient can be routed back.

use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{self, AttnLayout};
use super::params::{ParamId, ParameterStore};
use super::tensor::{gemm, Float, Operand, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One term of a weighted negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllTerm {
    pub row: usize,
    pub target: usize,
    pub weight: f64,
}

enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<F>,
    },
    Softmax(Var),
    LogSoftmax {
        x: Var,
        banned: Option<usize>,
    },
    MeanPool {
        x: Var,
        segments: Vec<(usize, usize)>,
    },
    Sum(Var),
    Nll {
        logp: Var,
        terms: Vec<NllTerm>,
        smoothing: f64,
        smooth_cols: Vec<usize>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    /// An empty graph. Also turns on subnormal flushing for the calling
    /// thread, since every evaluation starts here.
    pub fn new() -> Self {
        super::fpenv::flush_subnormals();
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// A constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParameterStore<F>, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a b^T`, with `b` stored as `[n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same numel");
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, rstd) =
            ops::layer_norm_saved(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding(self.value(table), ids)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.embedding(x, rows)
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (out, probs) =
            ops::attention_saved(self.value(q), self.value(k), self.value(v), heads, &layout)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn log_softmax(&mut self, x: Var, banned: Option<usize>) -> Result<Var> {
        let out = ops::log_softmax_rows(self.value(x), banned)?;
        Ok(self.push(out, Op::LogSoftmax { x, banned }))
    }

    pub fn mean_pool(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let out = ops::mean_pool(self.value(x), segments)?;
        Ok(self.push(
            out,
            Op::MeanPool {
                x,
                segments: segments.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum_i w_i [(1 - eps)(-logp[r_i, y_i]) + eps mean_{c in C}(-logp[r_i, c])]`.
    pub fn nll(
        &mut self,
        logp: Var,
        terms: Vec<NllTerm>,
        smoothing: f64,
        smooth_cols: Vec<usize>,
    ) -> Result<Var> {
        let (m, n) = self.value(logp).dims2()?;
        if smoothing > 0.0 && smooth_cols.is_empty() {
            return Err(Error::invalid("label smoothing needs at least one column"));
        }
        let lp = self.value(logp).data();
        let mut total = 0.0f64;
        for term in &terms {
            if term.row >= m || term.target >= n {
                return Err(Error::invalid(format!(
                    "nll term ({}, {}) outside [{m}, {n}]",
                    term.row, term.target
                )));
            }
            total += term.weight
                * smoothed_nll(
                    &lp[term.row * n..(term.row + 1) * n],
                    term.target,
                    smoothing,
                    &smooth_cols,
                );
        }
        Ok(self.push(
            Tensor::scalar(F::of(total)),
            Op::Nll {
                logp,
                terms,
                smoothing,
                smooth_cols,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: self.value(loss).shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC B^T ; dB = A^T dC
                acc_with(grads, *a, self.value(*a).shape(), |ga| {
                    gemm(Operand::plain(gd, m, n), Operand::t(bv, k, n), ga, F::one())
                });
                acc_with(grads, *b, self.value(*b).shape(), |gb| {
                    gemm(Operand::t(av, m, k), Operand::plain(gd, m, n), gb, F::one())
                });
            }
            Op::MatMulBT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (n, _) = self.value(*b).dims2().unwrap();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // C = A B^T: dA = dC B ; dB = dC^T A
                acc_with(grads, *a, self.value(*a).shape(), |ga| {
                    gemm(
                        Operand::plain(gd, m, n),
                        Operand::plain(bv, n, k),
                        ga,
                        F::one(),
                    )
                });
                acc_with(grads, *b, self.value(*b).shape(), |gb| {
                    gemm(Operand::t(gd, m, n), Operand::plain(av, m, k), gb, F::one())
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc_with(grads, v, g.shape(), |x| add_into(x, gd));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc_with(grads, *a, g.shape(), |x| {
                    x.iter_mut()
                        .zip(gd.iter().zip(bv))
                        .for_each(|(o, (g, b))| *o += *g * *b)
                });
                acc_with(grads, *b, g.shape(), |x| {
                    x.iter_mut()
                        .zip(gd.iter().zip(av))
                        .for_each(|(o, (g, a))| *o += *g * *a)
                });
            }
            Op::AddBias(x, b) => {
                acc_with(grads, *x, g.shape(), |t| add_into(t, gd));
                let n = self.value(*b).numel();
                acc_with(grads, *b, self.value(*b).shape(), |t| {
                    for row in gd.chunks_exact(n) {
                        add_into(t, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc_with(grads, *x, g.shape(), |t| {
                    t.iter_mut().zip(gd).for_each(|(o, g)| *o += *g * *s)
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc_with(grads, *x, g.shape(), |t| {
                    for ((o, g), x) in t.iter_mut().zip(gd).zip(xv) {
                        *o += *g * ops::gelu_grad_scalar(*x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                acc_with(grads, *beta, self.value(*beta).shape(), |t| {
                    for row in gd.chunks_exact(n) {
                        add_into(t, row);
                    }
                });
                let gam = self.value(*gamma).data();
                let nf = F::of(n as f64);
                acc_with(grads, *gamma, self.value(*gamma).shape(), |t| {
                    for (grow, hrow) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            t[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc_with(grads, *x, g.shape(), |t| {
                    let mut dxhat = vec![F::zero(); n];
                    for (r, (grow, hrow)) in
                        gd.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate()
                    {
                        let mut sum = F::zero();
                        let mut dot = F::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gam[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * hrow[j];
                        }
                        let scale = rstd[r] / nf;
                        let out = &mut t[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += scale * (nf * dxhat[j] - sum - hrow[j] * dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).dims2().unwrap().1;
                acc_with(grads, *table, self.value(*table).shape(), |t| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut t[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    gd,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    *heads,
                    layout,
                    probs,
                );
                let shape = g.shape();
                acc_with(grads, *q, shape, |t| add_into(t, &dq));
                acc_with(grads, *k, shape, |t| add_into(t, &dk));
                acc_with(grads, *v, shape, |t| add_into(t, &dv));
            }
            Op::Softmax(x) => {
                let n = g.dims2().unwrap().1;
                let y = node.value.data();
                acc_with(grads, *x, g.shape(), |t| {
                    for ((out, grow), yrow) in t
                        .chunks_exact_mut(n)
                        .zip(gd.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum::<F>();
                        for j in 0..n {
                            out[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x, banned } => {
                let n = g.dims2().unwrap().1;
                let y = node.value.data();
                acc_with(grads, *x, g.shape(), |t| {
                    for ((out, grow), yrow) in t
                        .chunks_exact_mut(n)
                        .zip(gd.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let total = (0..n)
                            .filter(|&j| Some(j) != *banned)
                            .map(|j| grow[j])
                            .sum::<F>();
                        for j in 0..n {
                            if Some(j) != *banned {
                                out[j] += grow[j] - yrow[j].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::MeanPool { x, segments } => {
                let d = g.dims2().unwrap().1;
                acc_with(grads, *x, self.value(*x).shape(), |t| {
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = F::one() / F::of(len as f64);
                        let grow = &gd[s * d..(s + 1) * d];
                        for r in start..start + len {
                            for (o, g) in t[r * d..(r + 1) * d].iter_mut().zip(grow) {
                                *o += *g * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                acc_with(grads, *x, self.value(*x).shape(), |t| {
                    t.iter_mut().for_each(|o| *o += s)
                });
            }
            Op::Nll {
                logp,
                terms,
                smoothing,
                smooth_cols,
            } => {
                let n = self.value(*logp).dims2().unwrap().1;
                let up = gd[0];
                let eps = *smoothing;
                acc_with(grads, *logp, self.value(*logp).shape(), |t| {
                    for term in terms {
                        let w = up * F::of(term.weight);
                        let row = &mut t[term.row * n..(term.row + 1) * n];
                        row[term.target] -= w * F::of(1.0 - eps);
                        if eps > 0.0 {
                            let share = w * F::of(eps / smooth_cols.len() as f64);
                            for &c in smooth_cols {
                                row[c] -= share;
                            }
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn smoothed_nll<F: Float>(
    row: &[F],
    target: usize,
    smoothing: f64,
    smooth_cols: &[usize],
) -> f64 {
    let mut nll = -(row[target].as_f64()) * (1.0 - smoothing);
    if smoothing > 0.0 {
        let mean =
            smooth_cols.iter().map(|&c| -(row[c].as_f64())).sum::<f64>() / smooth_cols.len() as f64;
        nll += smoothing * mean;
    }
    nll
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

fn acc_with<F: Float>(
    grads: &mut [Option<Tensor<F>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [F]),
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn attention_backward<F: Float>(
    gd: &[F],
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    layout: &AttnLayout,
    probs: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (m, d) = q.dims2().unwrap();
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let (offsets, _) = layout.prob_offsets(heads);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![F::zero(); m * d];
    let mut dk = vec![F::zero(); m * d];
    let mut dv = vec![F::zero(); m * d];
    let mut dp = Vec::new();
    for (s, &(start, len)) in layout.segments.iter().enumerate() {
        dp.resize(len, F::zero());
        for h in 0..heads {
            let c0 = h * dh;
            let base = offsets[s] + h * len * len;
            for i in 0..len {
                let p = &probs[base + i * len..base + (i + 1) * len];
                let gi = &gd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                // dV_j += p_ij dO_i ; dP_ij = dO_i . V_j
                let mut dot = F::zero();
                for j in 0..len {
                    if p[j] == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    let vj = &vd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| *a * *b).sum::<F>();
                    dot += dp[j] * p[j];
                    let pj = p[j];
                    let dvj = &mut dv[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    dvj.iter_mut().zip(gi).for_each(|(o, g)| *o += pj * *g);
                }
                let qi = &qd[(start + i) * d + c0..(start + i) * d + c0 + dh];
                for j in 0..len {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &kd[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    let dqi = &mut dq[(start + i) * d + c0..(start + i) * d + c0 + dh];
                    dqi.iter_mut().zip(kj).for_each(|(o, k)| *o += ds * *k);
                    let dkj = &mut dk[(start + j) * d + c0..(start + j) * d + c0 + dh];
                    dkj.iter_mut().zip(qi).for_each(|(o, q)| *o += ds * *q);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradients from one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the loss with respect to `v` (zeros if unreachable).
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// `(param, gradient)` pairs for every parameter that reached the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<F>>)> {
        self.params
            .iter()
            .map(|&(id, v)| (id, self.grads[v.0].as_ref()))
    }
}
