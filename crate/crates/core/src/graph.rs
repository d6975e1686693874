//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value and a closure that maps the output gradient to input
//! gradients. [`Graph::backward`] walks the tape in reverse, releasing each
//! node's value as soon as its own backward step has run.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::float::{cst, Float};
use crate::kernels;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Maps `(inputs, output, output_grad)` to one optional gradient per input.
pub type BackwardFn<F> =
    Box<dyn FnOnce(&[&Tensor<F>], &Tensor<F>, &Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Option<Arc<Tensor<F>>>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    mixed_precision: bool,
    rng: Option<ChaCha8Rng>,
}

/// Output of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound into the graph, indexed by
    /// [`ParamId`]. Parameters that were never used get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore<F>) -> ParamGrads<F> {
        let grads = store
            .ids()
            .map(|id| {
                let g = self
                    .param_vars
                    .get(&id)
                    .and_then(|v| self.grads[v.0].take());
                Some(g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            })
            .collect();
        ParamGrads::new(grads)
    }
}

impl<F: Float> Graph<F> {
    pub fn new(training: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training,
            mixed_precision: false,
            rng: None,
        }
    }

    /// Source of dropout masks; required when training with nonzero dropout.
    pub fn with_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Round matmul operands, outputs and their gradients to half precision.
    pub fn with_mixed_precision(mut self, on: bool) -> Self {
        self.mixed_precision = on;
        self
    }

    pub fn take_rng(&mut self) -> Option<ChaCha8Rng> {
        self.rng.take()
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn mixed_precision(&self) -> bool {
        self.mixed_precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        self.nodes[var.0]
            .value
            .as_deref()
            .expect("node value released by backward")
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    fn push(
        &mut self,
        value: Arc<Tensor<F>>,
        inputs: Vec<Var>,
        backward: Option<BackwardFn<F>>,
        leaf_grad: bool,
    ) -> Var {
        let requires_grad = leaf_grad || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node {
            value: Some(value),
            inputs,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Arc::new(t), vec![], None, false)
    }

    /// Free variable that receives gradients (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(Arc::new(t), vec![], None, true)
    }

    /// Bind a stored parameter; repeated binds return the same node so
    /// shared (tied) uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.shared(id), vec![], None, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Record a custom operation.
    pub fn op(&mut self, value: Tensor<F>, inputs: &[Var], backward: BackwardFn<F>) -> Var {
        self.push(Arc::new(value), inputs.to_vec(), Some(backward), false)
    }

    /// Run reverse-mode differentiation from a scalar `loss`, seeding its
    /// gradient with `seed` (1 for plain training, the loss scale otherwise).
    pub fn backward(mut self, loss: Var, seed: F) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), seed));
        let n = loss.0 + 1;
        self.nodes.truncate(n);
        for i in (0..n).rev() {
            let node = self.nodes.pop().expect("node present");
            let Some(backward) = node.backward else {
                if node.inputs.is_empty() {
                    // Leaves keep their gradient.
                    continue;
                }
                grads[i] = None;
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let output = node.value.expect("value present");
            let input_vals: Vec<&Tensor<F>> = node
                .inputs
                .iter()
                .map(|v| {
                    self.nodes[v.0]
                        .value
                        .as_deref()
                        .expect("input value present")
                })
                .collect();
            let input_grads = backward(&input_vals, &output, &grad);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars,
        })
    }

    fn autocast(&self, data: &[F]) -> Vec<F> {
        data.iter().map(|v| v.round_to_half()).collect()
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.op(
            out,
            &[a, b],
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.op(
            out,
            &[a, b],
            Box::new(|inp, _, g| {
                let ga = g.zip_map(inp[1], |g, y| g * y).expect("same shape");
                let gb = g.zip_map(inp[0], |g, x| g * x).expect("same shape");
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.op(
            out,
            &[x],
            Box::new(|_, y, g| {
                vec![Some(
                    g.zip_map(y, |g, s| g * s * (F::one() - s))
                        .expect("same shape"),
                )]
            }),
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.op(
            out,
            &[x],
            Box::new(|inp, _, g| {
                let gx = g
                    .zip_map(inp[0], |g, v| {
                        let s = kernels::sigmoid(v);
                        g * s * (F::one() + v * (F::one() - s))
                    })
                    .expect("same shape");
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.op(
            out,
            &[x],
            Box::new(move |_, _, g| vec![Some(g.clone().reshape(&in_shape).expect("same numel"))]),
        ))
    }

    /// Columns `[start, start + len)` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if start + len > width {
            return Err(shape_err!(
                "slice {}..{} of trailing axis {}",
                start,
                start + len,
                width
            ));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let data: Vec<F> = xv
            .data()
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(&shape, data)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.op(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let mut gx = Tensor::zeros(&in_shape);
                for (dst, src) in gx
                    .data_mut()
                    .chunks_exact_mut(width)
                    .zip(g.data().chunks_exact(len))
                {
                    dst[start..start + len].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout: identity unless training with `rate > 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Config("training graph with dropout needs an RNG".into()))?;
        let keep_scale: F = cst(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.as_ref().expect("live").numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let mask = Tensor::new(self.shape(x), mask)?;
        let out = self.value(x).zip_map(&mask, |v, m| v * m)?;
        Ok(self.op(
            out,
            &[x],
            Box::new(move |_, _, g| {
                vec![Some(g.zip_map(&mask, |g, m| g * m).expect("same shape"))]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    /// `x[..., K] · w[K, N] (+ b[N])`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ndim() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(shape_err!(
                "linear: input {:?} with weight {:?}",
                xv.shape(),
                wv.shape()
            ));
        }
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        let m = xv.numel() / k;
        if let Some(b) = b {
            self.value(b).expect_shape(&[n])?;
        }
        let mixed = self.mixed_precision;
        let saved = mixed.then(|| (self.autocast(xv.data()), self.autocast(wv.data())));
        let (xd, wd) = match &saved {
            Some((x, w)) => (x.as_slice(), w.as_slice()),
            None => (xv.data(), wv.data()),
        };
        let mut out = kernels::matmul(xd, wd, m, k, n);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        if mixed {
            out = self.autocast(&out);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.op(
            out,
            &inputs,
            Box::new(move |inp, _, g| {
                let (xd, wd) = match &saved {
                    Some((x, w)) => (x.as_slice(), w.as_slice()),
                    None => (inp[0].data(), inp[1].data()),
                };
                let gd: Vec<F> = if mixed {
                    g.data().iter().map(|v| v.round_to_half()).collect()
                } else {
                    g.data().to_vec()
                };
                let gx = kernels::matmul_a_bt(&gd, wd, m, n, k);
                let gw = kernels::matmul_at_b(xd, &gd, m, k, n);
                let mut grads = vec![
                    Some(Tensor::new(inp[0].shape(), gx).expect("shape")),
                    Some(Tensor::new(inp[1].shape(), gw).expect("shape")),
                ];
                if inp.len() == 3 {
                    let mut gb = vec![F::zero(); n];
                    for row in gd.chunks_exact(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    grads.push(Some(Tensor::new(&[n], gb).expect("shape")));
                }
                grads
            }),
        ))
    }

    /// `x[..., K] · e[N, K]ᵀ`, used by the tied output head.
    pub fn linear_transposed(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xv, ev) = (self.value(x), self.value(e));
        if ev.ndim() != 2 || xv.last_dim() != ev.shape()[1] {
            return Err(shape_err!(
                "tied head: input {:?} with table {:?}",
                xv.shape(),
                ev.shape()
            ));
        }
        let (n, k) = (ev.shape()[0], ev.shape()[1]);
        let m = xv.numel() / k;
        let mixed = self.mixed_precision;
        let saved = mixed.then(|| (self.autocast(xv.data()), self.autocast(ev.data())));
        let (xd, ed) = match &saved {
            Some((x, e)) => (x.as_slice(), e.as_slice()),
            None => (xv.data(), ev.data()),
        };
        let mut out = kernels::matmul_a_bt(xd, ed, m, k, n);
        if mixed {
            out = self.autocast(&out);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = n;
        let out = Tensor::new(&shape, out)?;
        Ok(self.op(
            out,
            &[x, e],
            Box::new(move |inp, _, g| {
                let (xd, ed) = match &saved {
                    Some((x, e)) => (x.as_slice(), e.as_slice()),
                    None => (inp[0].data(), inp[1].data()),
                };
                let gd: Vec<F> = if mixed {
                    g.data().iter().map(|v| v.round_to_half()).collect()
                } else {
                    g.data().to_vec()
                };
                let gx = kernels::matmul(&gd, ed, m, n, k);
                let ge = kernels::matmul_at_b(&gd, xd, m, n, k);
                vec![
                    Some(Tensor::new(inp[0].shape(), gx).expect("shape")),
                    Some(Tensor::new(inp[1].shape(), ge).expect("shape")),
                ]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Embeddings and losses
    // ---------------------------------------------------------------------

    /// Rows of `table[V, D]` selected by `ids`, shaped `[batch, seq, D]`.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(shape_err!(
                "embedding table must be 2-D, got {:?}",
                tv.shape()
            ));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if ids.len() != batch * seq {
            return Err(shape_err!(
                "{} token ids for a {}x{} batch",
                ids.len(),
                batch,
                seq
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            data.extend_from_slice(&tv.data()[t * d..(t + 1) * d]);
        }
        let out = Tensor::new(&[batch, seq, d], data)?;
        let ids = ids.to_vec();
        Ok(self.op(
            out,
            &[table],
            Box::new(move |inp, _, g| {
                let mut gt = Tensor::zeros(inp[0].shape());
                let gtd = gt.data_mut();
                for (&t, row) in ids.iter().zip(g.data().chunks_exact(d)) {
                    for (acc, &v) in gtd[t * d..(t + 1) * d].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }

    /// `h[B, T, D] + pos[0..T]` with `pos` of shape `[T_max, D]`.
    pub fn add_positional(&mut self, h: Var, pos: Var) -> Result<Var> {
        let (hv, pv) = (self.value(h), self.value(pos));
        if hv.ndim() != 3 || pv.ndim() != 2 || hv.shape()[2] != pv.shape()[1] {
            return Err(shape_err!(
                "positional: {:?} with table {:?}",
                hv.shape(),
                pv.shape()
            ));
        }
        let (t, d) = (hv.shape()[1], hv.shape()[2]);
        if t > pv.shape()[0] {
            return Err(Error::Input(format!(
                "sequence length {t} exceeds positional table of {}",
                pv.shape()[0]
            )));
        }
        let mut out = hv.clone();
        let pd = &pv.data()[..t * d];
        for seq in out.data_mut().chunks_exact_mut(t * d) {
            for (o, &p) in seq.iter_mut().zip(pd) {
                *o += p;
            }
        }
        Ok(self.op(
            out,
            &[h, pos],
            Box::new(move |inp, _, g| {
                let mut gp = Tensor::zeros(inp[1].shape());
                let gpd = &mut gp.data_mut()[..t * d];
                for seq in g.data().chunks_exact(t * d) {
                    for (acc, &v) in gpd.iter_mut().zip(seq) {
                        *acc += v;
                    }
                }
                vec![Some(g.clone()), Some(gp)]
            }),
        ))
    }

    /// Mean token cross-entropy of `logits[..., V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows {
            return Err(shape_err!(
                "{} targets for {} logit rows",
                targets.len(),
                rows
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        // Softmax probabilities are computed in f64 for the loss reduction.
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = 0.0f64;
        for (row, &t) in lv.data().chunks_exact(v).zip(targets) {
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
            let sum: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t].as_f64();
            probs.extend(row.iter().map(|&x| F::from_f64((x.as_f64() - lse).exp())));
        }
        let loss = Tensor::scalar(F::from_f64(total / rows as f64));
        let targets = targets.to_vec();
        let shape = lv.shape().to_vec();
        Ok(self.op(
            loss,
            &[logits],
            Box::new(move |_, _, g| {
                let scale = g.item() / cst::<F>(rows as f64);
                let mut gl = probs;
                for (row, &t) in gl.chunks_exact_mut(v).zip(&targets) {
                    row[t] -= F::one();
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                vec![Some(Tensor::new(&shape, gl).expect("shape"))]
            }),
        ))
    }

    /// `Σ x²`, a convenient scalar for gradient checks.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_squares());
        self.op(
            out,
            &[x],
            Box::new(|inp, _, g| {
                let s = g.item() + g.item();
                vec![Some(inp[0].map(|v| v * s))]
            }),
        )
    }

    /// `Σ x ⊙ w` for a fixed weight tensor `w` of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<F>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_shape(w.shape())?;
        let out = Tensor::scalar(kernels::dot(xv.data(), w.data()));
        let w = w.clone();
        Ok(self.op(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let s = g.item();
                vec![Some(w.map(|v| v * s))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Check d/dx of `Σ w ⊙ op(x)` for a random projection `w`.
    fn check_unary(shape: &[usize], op: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
        let x0 = rand_tensor(shape, 1);
        let f = |p: &[f64]| {
            let mut g = Graph::new(false);
            let x = g.leaf(Tensor::new(shape, p.to_vec()).unwrap());
            let y = op(&mut g, x);
            let w = rand_tensor(g.shape(y), 99);
            let l = g.weighted_sum(y, &w).unwrap();
            let val = g.value(l).item();
            let grads = g.backward(l, 1.0).unwrap();
            (val, grads.wrt(x).unwrap().to_f64_vec())
        };
        finite_difference_check(f, x0.data(), 1e-6).unwrap()
    }

    #[test]
    fn elementwise_gradients() {
        assert!(check_unary(&[3, 4], |g, x| g.silu(x)) < 1e-7);
        assert!(check_unary(&[3, 4], |g, x| g.sigmoid(x)) < 1e-7);
        assert!(check_unary(&[3, 4], |g, x| g.mul(x, x).unwrap()) < 1e-7);
        assert!(check_unary(&[3, 4], |g, x| g.slice_last(x, 1, 2).unwrap()) < 1e-7);
        assert!(check_unary(&[2, 6], |g, x| g.reshape(x, &[3, 4]).unwrap()) < 1e-7);
    }

    #[test]
    fn linear_gradients_for_all_inputs() {
        let w = rand_tensor(&[4, 3], 5);
        let b = rand_tensor(&[3], 6);
        let err = check_unary(&[2, 5, 4], |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            g.linear(x, w, Some(b)).unwrap()
        });
        assert!(err < 1e-7, "{err}");
        let x = rand_tensor(&[2, 5, 4], 7);
        let err = check_unary(&[4, 3], |g, w| {
            let x = g.constant(x.clone());
            g.linear(x, w, None).unwrap()
        });
        assert!(err < 1e-7, "{err}");
        let w2 = rand_tensor(&[4, 3], 8);
        let err = check_unary(&[3], |g, b| {
            let x = g.constant(x.clone());
            let w = g.constant(w2.clone());
            g.linear(x, w, Some(b)).unwrap()
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn tied_head_gradients() {
        let e = rand_tensor(&[7, 4], 3);
        let err = check_unary(&[2, 3, 4], |g, x| {
            let e = g.constant(e.clone());
            g.linear_transposed(x, e).unwrap()
        });
        assert!(err < 1e-7);
        let x = rand_tensor(&[2, 3, 4], 4);
        let err = check_unary(&[7, 4], |g, e| {
            let x = g.constant(x.clone());
            g.linear_transposed(x, e).unwrap()
        });
        assert!(err < 1e-7);
    }

    #[test]
    fn embedding_and_positional_gradients() {
        let ids = [0usize, 3, 3, 1, 2, 0];
        let err = check_unary(&[4, 5], |g, t| g.embedding(t, &ids, 2, 3).unwrap());
        assert!(err < 1e-7);
        let h = rand_tensor(&[2, 3, 5], 2);
        let err = check_unary(&[4, 5], |g, p| {
            let h = g.constant(h.clone());
            g.add_positional(h, p).unwrap()
        });
        assert!(err < 1e-7);
    }

    #[test]
    fn cross_entropy_gradient() {
        let targets = [1usize, 4, 0, 2];
        let err = check_unary(&[2, 2, 5], |g, x| g.cross_entropy(x, &targets).unwrap());
        assert!(err < 1e-7);
    }

    #[test]
    fn tied_parameter_accumulates_both_uses() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add(
                "e",
                Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
                true,
            )
            .unwrap();
        let mut g = Graph::new(false);
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let l = g.sum_squares(y);
        let grads = g.backward(l, 1.0).unwrap().into_param_grads(&store);
        // d/dx Σ x⁴ = 4x³
        let got = grads.get(id).unwrap().to_f64_vec();
        assert_eq!(got, vec![4.0, 32.0, 108.0, 256.0]);
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut g = Graph::<f64>::new(false);
        let x = g.leaf(rand_tensor(&[10], 1));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::<f64>::new(true);
        let x = g.leaf(rand_tensor(&[10], 1));
        assert!(g.dropout(x, 0.5).is_err(), "training dropout without rng");
        assert_eq!(g.dropout(x, 0.0).unwrap(), x);
    }

    #[test]
    fn dropout_masks_are_seeded() {
        let run = || {
            let mut g = Graph::<f64>::new(true).with_rng(ChaCha8Rng::seed_from_u64(5));
            let x = g.leaf(Tensor::full(&[1000], 1.0));
            let y = g.dropout(x, 0.25).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.bit_eq(&b));
        let zeros = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&zeros), "{zeros}");
        assert!(a
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    }

    #[test]
    fn mixed_precision_rounds_matmul_outputs() {
        let mut g = Graph::<f32>::new(false).with_mixed_precision(true);
        let x = g.constant(Tensor::new(&[1, 1], vec![1.0001]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y).item(), 1.0);
    }
}
