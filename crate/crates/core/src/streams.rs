//! Static multi-stream residual topology: expansion into `n` streams,
//! simplex pre-mixing into the block input, post-scattering of the block
//! output, Sinkhorn-projected residual mixing, and final aggregation.
//!
//! Stream tensors are laid out `[B, T, n, D]`; every kernel below walks the
//! `B·T` positions as rows of `n·D` values.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::numerics::{self, DoublyStochasticMatrix, SimplexWeights};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Multi-stream activation `[B, T, n, D]`.
#[derive(Debug, Clone)]
pub struct StreamState<F> {
    x: Tensor<F>,
}

impl<F: Float> StreamState<F> {
    pub fn new(x: Tensor<F>) -> Result<Self> {
        if x.ndim() != 4 || x.shape()[2] == 0 {
            return Err(shape_err!(
                "stream state must be [B, T, n>=1, D], got {:?}",
                x.shape()
            ));
        }
        Ok(StreamState { x })
    }

    /// `n` copies of `h[B, T, D]`.
    pub fn replicate(h: &Tensor<F>, n: usize) -> Result<Self> {
        let [b, t, d] = dims3(h)?;
        let mut data = Vec::with_capacity(h.numel() * n);
        for row in h.data().chunks_exact(d) {
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        Self::new(Tensor::new(&[b, t, n, d], data)?)
    }

    pub fn streams(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.x
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.x
    }

    /// Stream `i` as `[B, T, D]`.
    pub fn stream(&self, i: usize) -> Tensor<F> {
        let s = self.x.shape();
        let (n, d) = (s[2], s[3]);
        let data: Vec<F> = self
            .x
            .data()
            .chunks_exact(n * d)
            .flat_map(|row| row[i * d..(i + 1) * d].iter().copied())
            .collect();
        Tensor::new(&[s[0], s[1], d], data).expect("shape")
    }
}

fn dims3<F: Float>(t: &Tensor<F>) -> Result<[usize; 3]> {
    match *t.shape() {
        [b, tt, d] => Ok([b, tt, d]),
        _ => Err(shape_err!("expected [B, T, D], got {:?}", t.shape())),
    }
}

fn dims4<F: Float>(t: &Tensor<F>) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, tt, n, d] => Ok([b, tt, n, d]),
        _ => Err(shape_err!("expected [B, T, n, D], got {:?}", t.shape())),
    }
}

/// Stream expander weights: `[D, n·D]` plus bias `[n·D]`.
#[derive(Debug, Clone)]
pub struct ExpanderParams<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Float> ExpanderParams<F> {
    /// `n` stacked identities with zero bias: every stream starts as a copy.
    pub fn replicate(d: usize, n: usize) -> Self {
        let weight = Tensor::from_fn(&[d, n * d], |idx| {
            let (r, c) = (idx / (n * d), idx % (n * d));
            if c % d == r {
                F::one()
            } else {
                F::zero()
            }
        });
        ExpanderParams {
            weight,
            bias: Tensor::zeros(&[n * d]),
        }
    }

    /// Replicate initialization plus Gaussian noise of scale `noise`.
    pub fn init(d: usize, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::replicate(d, n);
        if noise > 0.0 {
            let dist = Normal::new(0.0, noise).expect("finite noise");
            for w in p.weight.data_mut() {
                *w += F::from_f64(dist.sample(rng));
            }
        }
        p
    }
}

/// `h[B, T, D] → X[B, T, n, D]` through the learned expander.
pub fn expand<F: Float>(h: &Tensor<F>, p: &ExpanderParams<F>, n: usize) -> Result<StreamState<F>> {
    let [b, t, d] = dims3(h)?;
    p.weight.expect_shape(&[d, n * d])?;
    p.bias.expect_shape(&[n * d])?;
    let mut out = kernels::matmul(h.data(), p.weight.data(), b * t, d, n * d);
    for row in out.chunks_exact_mut(n * d) {
        for (o, &bb) in row.iter_mut().zip(p.bias.data()) {
            *o += bb;
        }
    }
    StreamState::new(Tensor::new(&[b, t, n, d], out)?)
}

/// Graph form of [`expand`].
pub fn expand_op<F: Float>(
    g: &mut Graph<F>,
    h: Var,
    weight: Var,
    bias: Var,
    n: usize,
) -> Result<Var> {
    let [b, t, d] = dims3(g.value(h))?;
    let flat = g.linear(h, weight, Some(bias))?;
    g.reshape(flat, &[b, t, n, d])
}

fn check_weights<F: Float>(n: usize, w: &[F]) -> Result<()> {
    if w.len() != n {
        return Err(shape_err!("{} stream weights for {} streams", w.len(), n));
    }
    Ok(())
}

/// `out[r, :] = Σ_i w_i · x[r, i, :]`, shared by pre-mixing and aggregation.
fn weighted_stream_sum<F: Float>(x: &[F], w: &[F], n: usize, d: usize) -> Vec<F> {
    let rows = x.len() / (n * d);
    let mut out = Vec::with_capacity(rows * d);
    for row in x.chunks_exact(n * d) {
        let start = out.len();
        out.extend(row[..d].iter().map(|&v| w[0] * v));
        let acc = &mut out[start..];
        for (i, &wi) in w.iter().enumerate().skip(1) {
            for (a, &v) in acc.iter_mut().zip(&row[i * d..(i + 1) * d]) {
                *a += wi * v;
            }
        }
    }
    out
}

/// `u = Σ_i w_i X_i`
pub fn pre_mix<F: Float>(x: &StreamState<F>, w: &SimplexWeights<F>) -> Result<Tensor<F>> {
    let [b, t, n, d] = dims4(x.tensor())?;
    check_weights(n, w.weights())?;
    Tensor::new(
        &[b, t, d],
        weighted_stream_sum(x.tensor().data(), w.weights(), n, d),
    )
}

/// `h_out = Σ_i w_i X_i`; the same kernel as [`pre_mix`].
pub fn aggregate<F: Float>(x: &StreamState<F>, w: &SimplexWeights<F>) -> Result<Tensor<F>> {
    pre_mix(x, w)
}

/// Differentiable weighted sum over the stream axis: `[B,T,n,D] × [n] → [B,T,D]`.
pub fn stream_sum_op<F: Float>(g: &mut Graph<F>, x: Var, w: Var) -> Result<Var> {
    let [b, t, n, d] = dims4(g.value(x))?;
    check_weights(n, g.value(w).data())?;
    let out = Tensor::new(
        &[b, t, d],
        weighted_stream_sum(g.value(x).data(), g.value(w).data(), n, d),
    )?;
    Ok(g.op(
        out,
        &[x, w],
        Box::new(move |inp, _, grad| {
            let (xv, wv) = (inp[0].data(), inp[1].data());
            let mut gx = Vec::with_capacity(xv.len());
            let mut gw = vec![F::zero(); n];
            for (row, grow) in xv.chunks_exact(n * d).zip(grad.data().chunks_exact(d)) {
                for i in 0..n {
                    gx.extend(grow.iter().map(|&gv| wv[i] * gv));
                    gw[i] += kernels::dot(grow, &row[i * d..(i + 1) * d]);
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape(), gx).expect("shape")),
                Some(Tensor::new(&[n], gw).expect("shape")),
            ]
        }),
    ))
}

/// Scatter a single block output to every stream: `ΔX_i = w_i · y`.
pub fn scatter<F: Float>(y: &Tensor<F>, w: &SimplexWeights<F>) -> Result<StreamState<F>> {
    let [b, t, d] = dims3(y)?;
    let n = w.len();
    let mut out = Vec::with_capacity(y.numel() * n);
    for row in y.data().chunks_exact(d) {
        for &wi in w.weights() {
            out.extend(row.iter().map(|&v| wi * v));
        }
    }
    StreamState::new(Tensor::new(&[b, t, n, d], out)?)
}

/// Scatter per-stream block outputs: `ΔX_i = w_i · y_i`.
pub fn scatter_streams<F: Float>(
    y: &StreamState<F>,
    w: &SimplexWeights<F>,
) -> Result<StreamState<F>> {
    let [_, _, n, d] = dims4(y.tensor())?;
    check_weights(n, w.weights())?;
    let out: Vec<F> = y
        .tensor()
        .data()
        .chunks_exact(d)
        .enumerate()
        .flat_map(|(k, row)| {
            let wi = w.weights()[k % n];
            row.iter().map(move |&v| wi * v)
        })
        .collect();
    StreamState::new(Tensor::new(y.tensor().shape(), out)?)
}

/// Graph form of [`scatter`] (`y` is `[B,T,D]`) or [`scatter_streams`]
/// (`y` is `[B,T,n,D]`), chosen by the rank of `y`.
pub fn scatter_op<F: Float>(g: &mut Graph<F>, y: Var, w: Var) -> Result<Var> {
    let n = g.value(w).numel();
    let yv = g.value(y);
    let broadcast = yv.ndim() == 3;
    let (b, t, d) = match *yv.shape() {
        [b, t, d] => (b, t, d),
        [b, t, ny, d] if ny == n => (b, t, d),
        _ => {
            return Err(shape_err!(
                "cannot scatter {:?} over {} streams",
                yv.shape(),
                n
            ))
        }
    };
    let wv = g.value(w).data();
    let mut out = Vec::with_capacity(b * t * n * d);
    if broadcast {
        for row in yv.data().chunks_exact(d) {
            for &wi in wv {
                out.extend(row.iter().map(|&v| wi * v));
            }
        }
    } else {
        for (k, row) in yv.data().chunks_exact(d).enumerate() {
            let wi = wv[k % n];
            out.extend(row.iter().map(|&v| wi * v));
        }
    }
    let out = Tensor::new(&[b, t, n, d], out)?;
    Ok(g.op(
        out,
        &[y, w],
        Box::new(move |inp, _, grad| {
            let (yv, wv) = (inp[0].data(), inp[1].data());
            let mut gw = vec![F::zero(); n];
            let gy = if broadcast {
                let mut gy = Vec::with_capacity(yv.len());
                for (yrow, grow) in yv.chunks_exact(d).zip(grad.data().chunks_exact(n * d)) {
                    let start = gy.len();
                    gy.extend(grow[..d].iter().map(|&gv| wv[0] * gv));
                    let acc = &mut gy[start..];
                    for i in 1..n {
                        for (a, &gv) in acc.iter_mut().zip(&grow[i * d..(i + 1) * d]) {
                            *a += wv[i] * gv;
                        }
                    }
                    for i in 0..n {
                        gw[i] += kernels::dot(&grow[i * d..(i + 1) * d], yrow);
                    }
                }
                gy
            } else {
                let mut gy = Vec::with_capacity(yv.len());
                for (k, (yrow, grow)) in yv
                    .chunks_exact(d)
                    .zip(grad.data().chunks_exact(d))
                    .enumerate()
                {
                    let i = k % n;
                    gy.extend(grow.iter().map(|&gv| wv[i] * gv));
                    gw[i] += kernels::dot(grow, yrow);
                }
                gy
            };
            vec![
                Some(Tensor::new(inp[0].shape(), gy).expect("shape")),
                Some(Tensor::new(&[n], gw).expect("shape")),
            ]
        }),
    ))
}

/// `out[r, i, :] = Σ_j h_ij · x[r, j, :]`
fn mix_rows<F: Float>(x: &[F], h: &[F], n: usize, d: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(n * d) {
        for i in 0..n {
            let start = out.len();
            out.extend(row[..d].iter().map(|&v| h[i * n] * v));
            let acc = &mut out[start..];
            for j in 1..n {
                let hij = h[i * n + j];
                for (a, &v) in acc.iter_mut().zip(&row[j * d..(j + 1) * d]) {
                    *a += hij * v;
                }
            }
        }
    }
    out
}

/// `X_i^mixed = Σ_j H_ij X_j`
pub fn residual_mix<F: Float>(
    x: &StreamState<F>,
    h: &DoublyStochasticMatrix<F>,
) -> Result<StreamState<F>> {
    let [_, _, n, d] = dims4(x.tensor())?;
    if h.n() != n {
        return Err(shape_err!(
            "{}x{} mixing matrix for {} streams",
            h.n(),
            h.n(),
            n
        ));
    }
    StreamState::new(Tensor::new(
        x.tensor().shape(),
        mix_rows(x.tensor().data(), h.entries(), n, d),
    )?)
}

/// `X⁺ = residual_mix(X, H) + ΔX`
pub fn layer_update<F: Float>(
    x: &StreamState<F>,
    delta: &StreamState<F>,
    h: &DoublyStochasticMatrix<F>,
) -> Result<StreamState<F>> {
    let mut mixed = residual_mix(x, h)?.into_tensor();
    mixed.add_assign(delta.tensor())?;
    StreamState::new(mixed)
}

/// Differentiable [`residual_mix`] with `h` an `[n, n]` node.
pub fn residual_mix_op<F: Float>(g: &mut Graph<F>, x: Var, h: Var) -> Result<Var> {
    let [_, _, n, d] = dims4(g.value(x))?;
    g.value(h).expect_shape(&[n, n])?;
    let out = Tensor::new(
        g.shape(x),
        mix_rows(g.value(x).data(), g.value(h).data(), n, d),
    )?;
    Ok(g.op(
        out,
        &[x, h],
        Box::new(move |inp, _, grad| {
            let (xv, hv) = (inp[0].data(), inp[1].data());
            // gX_j = Σ_i H_ij gY_i  is a mix with Hᵀ.
            let mut ht = vec![F::zero(); n * n];
            for i in 0..n {
                for j in 0..n {
                    ht[j * n + i] = hv[i * n + j];
                }
            }
            let gx = mix_rows(grad.data(), &ht, n, d);
            let mut gh = vec![F::zero(); n * n];
            for (xrow, grow) in xv.chunks_exact(n * d).zip(grad.data().chunks_exact(n * d)) {
                for i in 0..n {
                    for j in 0..n {
                        gh[i * n + j] +=
                            kernels::dot(&grow[i * d..(i + 1) * d], &xrow[j * d..(j + 1) * d]);
                    }
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape(), gx).expect("shape")),
                Some(Tensor::new(&[n, n], gh).expect("shape")),
            ]
        }),
    ))
}

/// Per-layer stream mixing logits.
#[derive(Debug, Clone)]
pub struct StreamLayerParams<F> {
    pub pre_logits: Tensor<F>,
    pub post_logits: Tensor<F>,
    pub res_logits: Tensor<F>,
}

impl<F: Float> StreamLayerParams<F> {
    /// Zero logits: uniform pre/post weights and a uniform mixing matrix.
    pub fn zeros(n: usize) -> Self {
        StreamLayerParams {
            pre_logits: Tensor::zeros(&[n]),
            post_logits: Tensor::zeros(&[n]),
            res_logits: Tensor::zeros(&[n, n]),
        }
    }

    /// Zero pre/post logits and residual logits `diag` on the diagonal, so
    /// each stream initially keeps most of its own mass.
    pub fn init(n: usize, diag: f64) -> Self {
        let mut p = Self::zeros(n);
        for i in 0..n {
            p.res_logits.data_mut()[i * n + i] = F::from_f64(diag);
        }
        p
    }

    pub fn pre_weights(&self) -> Result<SimplexWeights<F>> {
        numerics::simplex_weights(self.pre_logits.data())
    }

    pub fn post_weights(&self) -> Result<SimplexWeights<F>> {
        numerics::simplex_weights(self.post_logits.data())
    }

    pub fn mixing(&self, iterations: usize) -> Result<DoublyStochasticMatrix<F>> {
        let n = self.pre_logits.numel();
        numerics::sinkhorn_project(
            &numerics::MixLogits::new(n, self.res_logits.data().to_vec())?,
            iterations,
        )
    }

    pub fn register(self, store: &mut ParamStore<F>, prefix: &str) -> Result<StreamLayer> {
        let n = self.pre_logits.numel();
        if n == 0 {
            return Err(Error::Config("stream layer needs n >= 1".into()));
        }
        Ok(StreamLayer {
            n,
            pre_logits: store.add(format!("{prefix}.pre_logits"), self.pre_logits, false)?,
            post_logits: store.add(format!("{prefix}.post_logits"), self.post_logits, false)?,
            res_logits: store.add(format!("{prefix}.res_logits"), self.res_logits, false)?,
        })
    }
}

/// Stored ids of one layer's stream mixing logits.
#[derive(Debug, Clone)]
pub struct StreamLayer {
    pub n: usize,
    pub pre_logits: ParamId,
    pub post_logits: ParamId,
    pub res_logits: ParamId,
}

impl StreamLayer {
    pub fn count(n: usize) -> usize {
        2 * n + n * n
    }
}
