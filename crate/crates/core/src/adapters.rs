//! Stream-specialized bottleneck adapters: one shared down/up projection per
//! adapter site with a per-stream scaling vector on the bottleneck.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::numerics::{self, rms_norm_op, RmsNormParams};
use crate::params::{ParamId, ParamStore};
use crate::streams::StreamState;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdapterParams<F> {
    pub norm: RmsNormParams<F>,
    /// `[D, r]`
    pub w_down: Tensor<F>,
    /// `[r, D]`
    pub w_up: Tensor<F>,
    /// `[n, r]`
    pub gamma: Tensor<F>,
    pub dropout_rate: f64,
}

impl<F: Float> AdapterParams<F> {
    /// Zero up-projection (exact identity at start), `N(0, 1/D)` down-projection, unit gammas.
    pub fn init(
        d: usize,
        r: usize,
        n: usize,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d == 0 || r == 0 || n == 0 {
            return Err(Error::Config(format!(
                "adapter needs D, r, n >= 1 (D={d}, r={r}, n={n})"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "adapter dropout {dropout_rate} outside [0, 1)"
            )));
        }
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
        Ok(AdapterParams {
            norm: RmsNormParams::ones(d),
            w_down: Tensor::from_fn(&[d, r], |_| F::from_f64(dist.sample(rng))),
            w_up: Tensor::zeros(&[r, d]),
            gamma: Tensor::full(&[n, r], F::one()),
            dropout_rate,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let [d, r] = [self.w_down.shape()[0], self.w_down.shape()[1]];
        (d, r, self.gamma.shape()[0])
    }

    fn validate(&self) -> Result<()> {
        let (d, r, n) = self.dims();
        self.w_up.expect_shape(&[r, d])?;
        self.gamma.expect_shape(&[n, r])?;
        if self.norm.gain.len() != d {
            return Err(shape_err!(
                "adapter norm of width {} for D = {}",
                self.norm.gain.len(),
                d
            ));
        }
        Ok(())
    }

    /// Scalars in one adapter: `2·D·r + n·r + D`.
    pub fn count(d: usize, r: usize, n: usize) -> usize {
        2 * d * r + n * r + d
    }

    pub fn register(self, store: &mut ParamStore<F>, prefix: &str) -> Result<Adapter> {
        self.validate()?;
        let (d, r, n) = self.dims();
        let gain = Tensor::new(&[d], self.norm.gain.clone())?;
        Ok(Adapter {
            d,
            r,
            n,
            epsilon: self.norm.epsilon(),
            dropout_rate: self.dropout_rate,
            norm_gain: store.add(format!("{prefix}.norm.gain"), gain, false)?,
            w_down: store.add(format!("{prefix}.down.weight"), self.w_down, true)?,
            w_up: store.add(format!("{prefix}.up.weight"), self.w_up, true)?,
            gamma: store.add(format!("{prefix}.gamma"), self.gamma, false)?,
        })
    }
}

/// An adapter whose tensors live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adapter {
    pub d: usize,
    pub r: usize,
    pub n: usize,
    pub epsilon: f64,
    pub dropout_rate: f64,
    pub norm_gain: ParamId,
    pub w_down: ParamId,
    pub w_up: ParamId,
    pub gamma: ParamId,
}

impl Adapter {
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.norm_gain, self.w_down, self.w_up, self.gamma]
    }

    /// `X_i + Drop(W↑(φ(W↓ Norm(X_i)) ⊙ γ_i))` over `x[B, T, n, D]`.
    pub fn pre<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[2] != self.n || s[3] != self.d {
            return Err(shape_err!(
                "pre-adapter (n={}, D={}) given {:?}",
                self.n,
                self.d,
                s
            ));
        }
        let up = self.bottleneck(g, store, x)?;
        let up = g.dropout(up, self.dropout_rate)?;
        g.add(x, up)
    }

    /// `y_i = y + Drop(W↑(φ(W↓ Norm(y)) ⊙ γ_i))`, `y[B, T, D] → [B, T, n, D]`.
    pub fn post<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, y: Var) -> Result<Var> {
        let s = g.shape(y).to_vec();
        if s.len() != 3 || s[2] != self.d {
            return Err(shape_err!("post-adapter (D={}) given {:?}", self.d, s));
        }
        let up = self.bottleneck(g, store, y)?;
        let up = g.dropout(up, self.dropout_rate)?;
        broadcast_add_op(g, y, up)
    }

    fn bottleneck<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.norm_gain);
        let down = g.param(store, self.w_down);
        let up = g.param(store, self.w_up);
        let gamma = g.param(store, self.gamma);
        let normed = rms_norm_op(g, x, gain, self.epsilon)?;
        let h = g.linear(normed, down, None)?;
        let h = g.silu(h);
        let scaled = stream_scale_op(g, h, gamma)?;
        g.linear(scaled, up, None)
    }
}

/// `out[.., i, :] = h[.., i, :] ⊙ γ_i` for `h[B,T,n,r]`, or `h[.., :] ⊙ γ_i`
/// for a shared `h[B,T,r]`, giving `[B,T,n,r]` either way.
fn stream_scale<F: Float>(h: &[F], gamma: &[F], n: usize, r: usize, shared: bool) -> Vec<F> {
    if shared {
        let mut out = Vec::with_capacity(h.len() * n);
        for row in h.chunks_exact(r) {
            for gi in gamma.chunks_exact(r) {
                out.extend(row.iter().zip(gi).map(|(&a, &b)| a * b));
            }
        }
        out
    } else {
        h.chunks_exact(r)
            .zip(gamma.chunks_exact(r).cycle())
            .flat_map(|(row, gi)| row.iter().zip(gi).map(|(&a, &b)| a * b))
            .collect()
    }
}

pub fn stream_scale_op<F: Float>(g: &mut Graph<F>, h: Var, gamma: Var) -> Result<Var> {
    let (hv, gv) = (g.value(h), g.value(gamma));
    let (n, r) = match *gv.shape() {
        [n, r] => (n, r),
        _ => return Err(shape_err!("gamma must be [n, r], got {:?}", gv.shape())),
    };
    let shared = match *hv.shape() {
        [_, _, rr] if rr == r => true,
        [_, _, nn, rr] if nn == n && rr == r => false,
        _ => {
            return Err(shape_err!(
                "cannot scale {:?} by gamma {:?}",
                hv.shape(),
                gv.shape()
            ))
        }
    };
    let s = hv.shape();
    let out_shape = [s[0], s[1], n, r];
    let out = Tensor::new(&out_shape, stream_scale(hv.data(), gv.data(), n, r, shared))?;
    Ok(g.op(
        out,
        &[h, gamma],
        Box::new(move |inp, _, grad| {
            let (hv, gv) = (inp[0].data(), inp[1].data());
            let mut ggamma = vec![F::zero(); n * r];
            let mut gh = Vec::with_capacity(hv.len());
            if shared {
                for (row, grow) in hv.chunks_exact(r).zip(grad.data().chunks_exact(n * r)) {
                    let start = gh.len();
                    gh.extend((0..r).map(|c| grow[c] * gv[c]));
                    let acc = &mut gh[start..];
                    for i in 1..n {
                        for c in 0..r {
                            acc[c] += grow[i * r + c] * gv[i * r + c];
                        }
                    }
                    for i in 0..n {
                        for c in 0..r {
                            ggamma[i * r + c] += grow[i * r + c] * row[c];
                        }
                    }
                }
            } else {
                for (k, (row, grow)) in hv
                    .chunks_exact(r)
                    .zip(grad.data().chunks_exact(r))
                    .enumerate()
                {
                    let i = k % n;
                    for c in 0..r {
                        gh.push(grow[c] * gv[i * r + c]);
                        ggamma[i * r + c] += grow[c] * row[c];
                    }
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape(), gh).expect("shape")),
                Some(Tensor::new(&[n, r], ggamma).expect("shape")),
            ]
        }),
    ))
}

/// `y[B,T,D] + z[B,T,n,D]` with `y` broadcast over streams.
pub fn broadcast_add_op<F: Float>(g: &mut Graph<F>, y: Var, z: Var) -> Result<Var> {
    let (yv, zv) = (g.value(y), g.value(z));
    let d = yv.last_dim();
    match (yv.shape(), zv.shape()) {
        ([b, t, _], [bz, tz, _, dz]) if b == bz && t == tz && *dz == d => {}
        _ => {
            return Err(shape_err!(
                "cannot broadcast {:?} onto {:?}",
                yv.shape(),
                zv.shape()
            ))
        }
    }
    let n = zv.shape()[2];
    let out: Vec<F> = zv
        .data()
        .chunks_exact(d)
        .enumerate()
        .flat_map(|(k, zrow)| {
            let yrow = &yv.data()[(k / n) * d..(k / n + 1) * d];
            yrow.iter().zip(zrow).map(|(&a, &b)| a + b)
        })
        .collect();
    let out = Tensor::new(zv.shape(), out)?;
    Ok(g.op(
        out,
        &[y, z],
        Box::new(move |inp, _, grad| {
            let mut gy = Vec::with_capacity(inp[0].numel());
            for grow in grad.data().chunks_exact(n * d) {
                let start = gy.len();
                gy.extend_from_slice(&grow[..d]);
                let acc = &mut gy[start..];
                for i in 1..n {
                    for (a, &v) in acc.iter_mut().zip(&grow[i * d..(i + 1) * d]) {
                        *a += v;
                    }
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape(), gy).expect("shape")),
                Some(grad.clone()),
            ]
        }),
    ))
}

fn bottleneck_plain<F: Float>(x: &Tensor<F>, p: &AdapterParams<F>) -> Result<Tensor<F>> {
    let (d, r, n) = p.dims();
    let normed = numerics::rms_norm(x, &p.norm)?;
    let rows = normed.numel() / d;
    let h = Tensor::new(
        &[rows, r],
        kernels::matmul(normed.data(), p.w_down.data(), rows, d, r),
    )?;
    let h = numerics::silu(&h);
    let shared = x.ndim() == 3;
    let scaled = stream_scale(h.data(), p.gamma.data(), n, r, shared);
    let out_rows = scaled.len() / r;
    let s = x.shape();
    Tensor::new(
        &[s[0], s[1], n, d],
        kernels::matmul(&scaled, p.w_up.data(), out_rows, r, d),
    )
}

fn apply_dropout<F: Float>(
    t: Tensor<F>,
    rate: f64,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<F>> {
    if !training || rate <= 0.0 {
        return Ok(t);
    }
    let mut g = Graph::new(true).with_rng(
        rng.as_ref()
            .map(|r| (**r).clone())
            .ok_or_else(|| Error::Config("training-mode dropout needs an rng".into()))?,
    );
    let v = g.constant(t);
    let out = g.dropout(v, rate)?;
    let result = g.value(out).clone();
    if let (Some(dst), Some(src)) = (rng, g.take_rng()) {
        *dst = src;
    }
    Ok(result)
}

/// Plain-tensor pre-adapter.
pub fn pre_adapter<F: Float>(
    x: &StreamState<F>,
    p: &AdapterParams<F>,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StreamState<F>> {
    p.validate()?;
    let (d, _, n) = p.dims();
    let s = x.tensor().shape();
    if s[2] != n || s[3] != d {
        return Err(shape_err!("pre-adapter (n={}, D={}) given {:?}", n, d, s));
    }
    let up = apply_dropout(
        bottleneck_plain(x.tensor(), p)?,
        p.dropout_rate,
        training,
        rng,
    )?;
    let mut out = x.tensor().clone();
    out.add_assign(&up)?;
    StreamState::new(out)
}

/// Plain-tensor post-adapter.
pub fn post_adapter<F: Float>(
    y: &Tensor<F>,
    p: &AdapterParams<F>,
    training: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StreamState<F>> {
    p.validate()?;
    let (d, _, n) = p.dims();
    if y.ndim() != 3 || y.last_dim() != d {
        return Err(shape_err!("post-adapter (D={}) given {:?}", d, y.shape()));
    }
    let mut up = apply_dropout(bottleneck_plain(y, p)?, p.dropout_rate, training, rng)?;
    for (k, zrow) in up.data_mut().chunks_exact_mut(d).enumerate() {
        let yrow = &y.data()[(k / n) * d..(k / n + 1) * d];
        for (z, &a) in zrow.iter_mut().zip(yrow) {
            *z = a + *z;
        }
    }
    StreamState::new(up)
}
