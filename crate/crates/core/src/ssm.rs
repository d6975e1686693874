//! Single-stream diagonal SSM block:
//! RMSNorm → gated projection → causal depthwise conv → SiLU → diagonal
//! scan → sigmoid gate → output projection → dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::float::{cst, Float};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::numerics::{self, rms_norm_op, RMS_EPS};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Margin keeping the decay strictly inside (0, 1).
pub const DECAY_CLAMP: f64 = 1e-4;

/// Tensors of one SSM block, outside any parameter store.
#[derive(Debug, Clone)]
pub struct SsmBlockParams<F> {
    pub norm_gain: Tensor<F>,
    /// `[D, 2D]`; the first `D` output channels feed the conv path, the rest the gate.
    pub in_proj: Tensor<F>,
    pub in_bias: Tensor<F>,
    /// Depthwise kernel `[D, k]`; tap `k − 1` multiplies the current position.
    pub conv_kernel: Tensor<F>,
    pub a_logits: Tensor<F>,
    pub b: Tensor<F>,
    pub c: Tensor<F>,
    pub d: Tensor<F>,
    pub out_proj: Tensor<F>,
    pub out_bias: Tensor<F>,
    pub dropout_rate: f64,
}

fn normal<F: Float>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
}

impl<F: Float> SsmBlockParams<F> {
    pub fn init(d: usize, k: usize, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::Config(format!(
                "ssm block needs D >= 1 and k >= 1 (D={d}, k={k})"
            )));
        }
        let conv_bound = 1.0 / (k as f64).sqrt();
        // Decay rates spread evenly over [0.5, 0.99] across channels.
        let a_logits = Tensor::from_fn(&[d], |i| {
            let frac = if d > 1 {
                i as f64 / (d - 1) as f64
            } else {
                0.0
            };
            let a = 0.5 + 0.49 * frac;
            F::from_f64((a / (1.0 - a)).ln())
        });
        Ok(SsmBlockParams {
            norm_gain: Tensor::full(&[d], F::one()),
            in_proj: normal(&[d, 2 * d], 1.0 / (d as f64).sqrt(), rng),
            in_bias: Tensor::zeros(&[2 * d]),
            conv_kernel: Tensor::from_fn(&[d, k], |_| {
                F::from_f64(rng.random_range(-conv_bound..conv_bound))
            }),
            a_logits,
            b: normal(&[d], 0.1, rng),
            c: normal(&[d], 0.1, rng),
            d: Tensor::full(&[d], F::one()),
            out_proj: normal(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            out_bias: Tensor::zeros(&[d]),
            dropout_rate,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.norm_gain.numel()
    }

    /// Number of scalar parameters: `3D² + (8 + k)·D`.
    pub fn count(d: usize, k: usize) -> usize {
        3 * d * d + (8 + k) * d
    }

    pub fn register(self, store: &mut ParamStore<F>, prefix: &str) -> Result<SsmBlock> {
        let d = self.model_dim();
        let k = self.conv_kernel.last_dim();
        Ok(SsmBlock {
            d,
            k,
            dropout_rate: self.dropout_rate,
            norm_gain: store.add(format!("{prefix}.norm.gain"), self.norm_gain, false)?,
            in_proj: store.add(format!("{prefix}.in_proj.weight"), self.in_proj, true)?,
            in_bias: store.add(format!("{prefix}.in_proj.bias"), self.in_bias, false)?,
            conv_kernel: store.add(format!("{prefix}.conv.weight"), self.conv_kernel, true)?,
            a_logits: store.add(format!("{prefix}.ssm.a_logits"), self.a_logits, false)?,
            b: store.add(format!("{prefix}.ssm.b"), self.b, false)?,
            c: store.add(format!("{prefix}.ssm.c"), self.c, false)?,
            d_skip: store.add(format!("{prefix}.ssm.d"), self.d, false)?,
            out_proj: store.add(format!("{prefix}.out_proj.weight"), self.out_proj, true)?,
            out_bias: store.add(format!("{prefix}.out_proj.bias"), self.out_bias, false)?,
        })
    }
}

/// An SSM block whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SsmBlock {
    pub d: usize,
    pub k: usize,
    pub dropout_rate: f64,
    pub norm_gain: ParamId,
    pub in_proj: ParamId,
    pub in_bias: ParamId,
    pub conv_kernel: ParamId,
    pub a_logits: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub d_skip: ParamId,
    pub out_proj: ParamId,
    pub out_bias: ParamId,
}

impl SsmBlock {
    pub fn param_ids(&self) -> [ParamId; 10] {
        [
            self.norm_gain,
            self.in_proj,
            self.in_bias,
            self.conv_kernel,
            self.a_logits,
            self.b,
            self.c,
            self.d_skip,
            self.out_proj,
            self.out_bias,
        ]
    }

    /// `h[B, T, D] → [B, T, D]`; dropout only when the graph is training.
    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h: Var,
    ) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(shape_err!(
                "ssm block of width {} given input {:?}",
                self.d,
                shape
            ));
        }
        let gain = g.param(store, self.norm_gain);
        let hn = rms_norm_op(g, h, gain, RMS_EPS)?;
        let (w_in, b_in) = (g.param(store, self.in_proj), g.param(store, self.in_bias));
        let proj = g.linear(hn, w_in, Some(b_in))?;
        let u = g.slice_last(proj, 0, self.d)?;
        let gate = g.slice_last(proj, self.d, self.d)?;
        let kernel = g.param(store, self.conv_kernel);
        let conv = causal_conv_op(g, u, kernel)?;
        let u_act = g.silu(conv);
        let a_logits = g.param(store, self.a_logits);
        let a = decay_op(g, a_logits);
        let (b, c, d) = (
            g.param(store, self.b),
            g.param(store, self.c),
            g.param(store, self.d_skip),
        );
        let z = diagonal_scan_op(g, u_act, a, b, c, d)?;
        let gate = g.sigmoid(gate);
        let gated = g.mul(z, gate)?;
        let (w_out, b_out) = (g.param(store, self.out_proj), g.param(store, self.out_bias));
        let out = g.linear(gated, w_out, Some(b_out))?;
        g.dropout(out, self.dropout_rate)
    }
}

/// Standalone block evaluation on plain tensors.
pub fn ssm_block_forward<F: Float>(
    h: &Tensor<F>,
    params: &SsmBlockParams<F>,
    training: bool,
    rng: Option<ChaCha8Rng>,
) -> Result<Tensor<F>> {
    let mut store = ParamStore::new();
    let block = params.clone().register(&mut store, "block")?;
    let mut g = Graph::new(training);
    if let Some(rng) = rng {
        g = g.with_rng(rng);
    }
    let x = g.constant(h.clone());
    let y = block.forward(&mut g, &store, x)?;
    Ok(g.value(y).clone())
}

fn dims3<F: Float>(t: &Tensor<F>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, tt, d] => Ok((b, tt, d)),
        _ => Err(shape_err!("{what} must be [B, T, D], got {:?}", t.shape())),
    }
}

/// Split `Linear_2D(h_norm)` into the input path `u` and gate `g`.
pub fn gated_projection<F: Float>(
    h_norm: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (_, _, d) = dims3(h_norm, "projection input")?;
    weight.expect_shape(&[d, 2 * d])?;
    bias.expect_shape(&[2 * d])?;
    let rows = h_norm.numel() / d;
    let mut p = kernels::matmul(h_norm.data(), weight.data(), rows, d, 2 * d);
    for row in p.chunks_exact_mut(2 * d) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    let mut u = Vec::with_capacity(rows * d);
    let mut g = Vec::with_capacity(rows * d);
    for row in p.chunks_exact(2 * d) {
        u.extend_from_slice(&row[..d]);
        g.extend_from_slice(&row[d..]);
    }
    Ok((
        Tensor::new(h_norm.shape(), u)?,
        Tensor::new(h_norm.shape(), g)?,
    ))
}

fn conv_forward<F: Float>(u: &[F], kernel: &[F], b: usize, t: usize, d: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); b * t * d];
    for bi in 0..b {
        let base = bi * t * d;
        for ti in 0..t {
            let o = &mut out[base + ti * d..base + (ti + 1) * d];
            for j in 0..k {
                // Tap j reads position ti − (k − 1) + j; earlier positions are zero padding.
                let Some(src) = (ti + j).checked_sub(k - 1) else {
                    continue;
                };
                let x = &u[base + src * d..base + (src + 1) * d];
                for ch in 0..d {
                    o[ch] += kernel[ch * k + j] * x[ch];
                }
            }
        }
    }
    out
}

/// Depthwise convolution over time with `k − 1` zeros of left padding.
pub fn causal_depthwise_conv<F: Float>(u: &Tensor<F>, kernel: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, t, d) = dims3(u, "conv input")?;
    if kernel.ndim() != 2 || kernel.shape()[0] != d {
        return Err(shape_err!(
            "conv kernel {:?} for {} channels",
            kernel.shape(),
            d
        ));
    }
    let k = kernel.shape()[1];
    if k < 1 {
        return Err(Error::Config("conv kernel size must be >= 1".into()));
    }
    Tensor::new(u.shape(), conv_forward(u.data(), kernel.data(), b, t, d, k))
}

pub fn causal_conv_op<F: Float>(g: &mut Graph<F>, u: Var, kernel: Var) -> Result<Var> {
    let out = causal_depthwise_conv(g.value(u), g.value(kernel))?;
    let (b, t, d) = dims3(&out, "conv input")?;
    let k = g.value(kernel).shape()[1];
    Ok(g.op(
        out,
        &[u, kernel],
        Box::new(move |inp, _, grad| {
            let (u, kern, go) = (inp[0].data(), inp[1].data(), grad.data());
            let mut gu = vec![F::zero(); u.len()];
            let mut gk = vec![F::zero(); kern.len()];
            for bi in 0..b {
                let base = bi * t * d;
                for ti in 0..t {
                    let gro = &go[base + ti * d..base + (ti + 1) * d];
                    for j in 0..k {
                        let Some(src) = (ti + j).checked_sub(k - 1) else {
                            continue;
                        };
                        let off = base + src * d;
                        for ch in 0..d {
                            gu[off + ch] += kern[ch * k + j] * gro[ch];
                            gk[ch * k + j] += u[off + ch] * gro[ch];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(inp[0].shape(), gu).expect("shape")),
                Some(Tensor::new(inp[1].shape(), gk).expect("shape")),
            ]
        }),
    ))
}

/// `clamp(sigmoid(a_logits), δ, 1 − δ)`
pub fn effective_decay<F: Float>(a_logits: &Tensor<F>) -> Tensor<F> {
    let (lo, hi) = (cst::<F>(DECAY_CLAMP), cst::<F>(1.0 - DECAY_CLAMP));
    a_logits.map(|v| kernels::sigmoid(v).max(lo).min(hi))
}

pub fn decay_op<F: Float>(g: &mut Graph<F>, a_logits: Var) -> Var {
    let out = effective_decay(g.value(a_logits));
    g.op(
        out,
        &[a_logits],
        Box::new(|inp, _, grad| {
            let (lo, hi) = (cst::<F>(DECAY_CLAMP), cst::<F>(1.0 - DECAY_CLAMP));
            let gx = inp[0]
                .zip_map(grad, |x, g| {
                    let s = kernels::sigmoid(x);
                    if s <= lo || s >= hi {
                        F::zero()
                    } else {
                        g * s * (F::one() - s)
                    }
                })
                .expect("shape");
            vec![Some(gx)]
        }),
    )
}

/// States `s_t` for every position plus outputs `z_t`.
fn scan_forward<F: Float>(
    u: &[F],
    a: &[F],
    bv: &[F],
    cv: &[F],
    dv: &[F],
    b: usize,
    t: usize,
    d: usize,
) -> (Vec<F>, Vec<F>) {
    let mut states = vec![F::zero(); b * t * d];
    let mut z = vec![F::zero(); b * t * d];
    for bi in 0..b {
        let mut s = vec![F::zero(); d];
        for ti in 0..t {
            let off = (bi * t + ti) * d;
            for ch in 0..d {
                let x = u[off + ch];
                s[ch] = a[ch] * s[ch] + bv[ch] * x;
                states[off + ch] = s[ch];
                z[off + ch] = cv[ch] * s[ch] + dv[ch] * x;
            }
        }
    }
    (states, z)
}

fn check_scan_args<F: Float>(
    u: &Tensor<F>,
    vecs: [&Tensor<F>; 4],
) -> Result<(usize, usize, usize)> {
    let (b, t, d) = dims3(u, "scan input")?;
    for v in vecs {
        v.expect_shape(&[d])?;
        if !v.all_finite() {
            return Err(Error::NumericDomain("non-finite scan parameter".into()));
        }
    }
    if !u.all_finite() {
        return Err(Error::NumericDomain("non-finite scan input".into()));
    }
    Ok((b, t, d))
}

/// `s_t = a ⊙ s_{t−1} + b ⊙ u_t`, `z_t = c ⊙ s_t + d ⊙ u_t`, with `s_0 = 0`.
pub fn diagonal_scan<F: Float>(
    u: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    c: &Tensor<F>,
    d: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (bs, t, dm) = check_scan_args(u, [a, b, c, d])?;
    let (_, z) = scan_forward(u.data(), a.data(), b.data(), c.data(), d.data(), bs, t, dm);
    Tensor::new(u.shape(), z)
}

/// Differentiable scan. The recurrence runs in the graph's element type
/// (never narrower than 32 bits); under mixed precision the output is
/// rounded back to half like any other activation.
pub fn diagonal_scan_op<F: Float>(
    g: &mut Graph<F>,
    u: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Var,
) -> Result<Var> {
    let (bs, t, dm) =
        check_scan_args(g.value(u), [g.value(a), g.value(b), g.value(c), g.value(d)])?;
    let (states, mut z) = scan_forward(
        g.value(u).data(),
        g.value(a).data(),
        g.value(b).data(),
        g.value(c).data(),
        g.value(d).data(),
        bs,
        t,
        dm,
    );
    if g.mixed_precision() {
        z.iter_mut().for_each(|v| *v = v.round_to_half());
    }
    let out = Tensor::new(g.shape(u), z)?;
    Ok(g.op(
        out,
        &[u, a, b, c, d],
        Box::new(move |inp, _, grad| {
            let (u, a, bv, cv, dv) = (
                inp[0].data(),
                inp[1].data(),
                inp[2].data(),
                inp[3].data(),
                inp[4].data(),
            );
            let gz = grad.data();
            let mut gu = vec![F::zero(); u.len()];
            let (mut ga, mut gb, mut gc, mut gd) = (
                vec![F::zero(); dm],
                vec![F::zero(); dm],
                vec![F::zero(); dm],
                vec![F::zero(); dm],
            );
            for bi in 0..bs {
                let mut carry = vec![F::zero(); dm];
                for ti in (0..t).rev() {
                    let off = (bi * t + ti) * dm;
                    for ch in 0..dm {
                        let gzv = gz[off + ch];
                        let gs = cv[ch] * gzv + carry[ch];
                        let x = u[off + ch];
                        gu[off + ch] = bv[ch] * gs + dv[ch] * gzv;
                        if ti > 0 {
                            ga[ch] += gs * states[off - dm + ch];
                        }
                        gb[ch] += gs * x;
                        gc[ch] += gzv * states[off + ch];
                        gd[ch] += gzv * x;
                        carry[ch] = a[ch] * gs;
                    }
                }
            }
            let vec_t = |v: Vec<F>| Some(Tensor::new(&[dm], v).expect("shape"));
            vec![
                Some(Tensor::new(inp[0].shape(), gu).expect("shape")),
                vec_t(ga),
                vec_t(gb),
                vec_t(gc),
                vec_t(gd),
            ]
        }),
    ))
}

pub fn silu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    numerics::silu(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_tensor(&[2, 3, 4], &mut rng);
        let (u, g) = gated_projection(&h, &Tensor::zeros(&[4, 8]), &Tensor::zeros(&[8])).unwrap();
        assert!(u.data().iter().chain(g.data()).all(|&v| v == 0.0));
        let stacked = Tensor::from_fn(&[4, 8], |i| {
            let (r, c) = (i / 8, i % 8);
            if c % 4 == r {
                1.0
            } else {
                0.0
            }
        });
        let (u, g) = gated_projection(&h, &stacked, &Tensor::zeros(&[8])).unwrap();
        assert!(u.bit_eq(&h) && g.bit_eq(&h));
        assert!(gated_projection(&h, &Tensor::zeros(&[4, 6]), &Tensor::zeros(&[6])).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = rand_tensor(&[2, 5, 3], &mut rng);
        let unit = Tensor::from_fn(&[3, 4], |i| if i % 4 == 3 { 1.0 } else { 0.0 });
        assert!(causal_depthwise_conv(&u, &unit).unwrap().bit_eq(&u));

        let ones = Tensor::<f64>::full(&[1, 4, 1], 1.0);
        let k = Tensor::full(&[1, 3], 1.0);
        assert_eq!(
            causal_depthwise_conv(&ones, &k).unwrap().data(),
            &[1.0, 2.0, 3.0, 3.0]
        );
        assert!(causal_depthwise_conv(&ones, &Tensor::zeros(&[1, 0])).is_err());
    }

    #[test]
    fn scan_examples() {
        let u = Tensor::<f64>::from_f64(&[1, 3, 1], &[1.0, 0.0, 0.0]).unwrap();
        let v = |x: f64| Tensor::<f64>::from_f64(&[1], &[x]).unwrap();
        let z = diagonal_scan(&u, &v(0.5), &v(1.0), &v(1.0), &v(0.0)).unwrap();
        assert_eq!(z.data(), &[1.0, 0.5, 0.25]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = rand_tensor(&[2, 6, 4], &mut rng);
        let a = Tensor::full(&[4], 0.7);
        let b = rand_tensor(&[4], &mut rng);
        let z = diagonal_scan(&u, &a, &b, &Tensor::zeros(&[4]), &Tensor::full(&[4], 1.0)).unwrap();
        assert!(z.bit_eq(&u));

        let bad = Tensor::from_f64(&[1, 1, 1], &[f64::NAN]).unwrap();
        assert!(diagonal_scan(&bad, &v(0.5), &v(1.0), &v(1.0), &v(0.0)).is_err());
    }

    #[test]
    fn decay_stays_inside_unit_interval() {
        let x = Tensor::<f64>::from_f64(&[4], &[-100.0, 0.0, 3.0, 100.0]).unwrap();
        let a = effective_decay(&x);
        assert_eq!(a.data()[0], DECAY_CLAMP);
        assert_eq!(a.data()[3], 1.0 - DECAY_CLAMP);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv_and_scan_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, t, d, k) = (2, 5, 3, 3);
        let n_u = b * t * d;
        let point: Vec<f64> = (0..n_u + d * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w = rand_tensor(&[b, t, d], &mut rng);
        let f = |p: &[f64]| {
            let mut g = Graph::new(false);
            let u = g.leaf(Tensor::new(&[b, t, d], p[..n_u].to_vec()).unwrap());
            let kern = g.leaf(Tensor::new(&[d, k], p[n_u..].to_vec()).unwrap());
            let y = causal_conv_op(&mut g, u, kern).unwrap();
            let l = g.weighted_sum(y, &w).unwrap();
            let v = g.value(l).item();
            let gr = g.backward(l, 1.0).unwrap();
            let mut out = gr.wrt(u).unwrap().to_f64_vec();
            out.extend(gr.wrt(kern).unwrap().to_f64_vec());
            (v, out)
        };
        assert!(finite_difference_check(f, &point, 1e-6).unwrap() < 1e-7);

        let point: Vec<f64> = (0..n_u + 4 * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let f = |p: &[f64]| {
            let mut g = Graph::new(false);
            let u = g.leaf(Tensor::new(&[b, t, d], p[..n_u].to_vec()).unwrap());
            let vars: Vec<Var> = (0..4)
                .map(|i| {
                    g.leaf(Tensor::new(&[d], p[n_u + i * d..n_u + (i + 1) * d].to_vec()).unwrap())
                })
                .collect();
            let a = decay_op(&mut g, vars[0]);
            let y = diagonal_scan_op(&mut g, u, a, vars[1], vars[2], vars[3]).unwrap();
            let l = g.weighted_sum(y, &w).unwrap();
            let v = g.value(l).item();
            let gr = g.backward(l, 1.0).unwrap();
            let mut out = gr.wrt(u).unwrap().to_f64_vec();
            for v in &vars {
                out.extend(gr.wrt(*v).unwrap().to_f64_vec());
            }
            (v, out)
        };
        assert!(finite_difference_check(f, &point, 1e-6).unwrap() < 1e-7);
    }

    #[test]
    fn block_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rand_tensor(&[2, 8, 4], &mut rng);
        let mut p = SsmBlockParams::<f64>::init(4, 4, 0.0, &mut rng).unwrap();
        let y_eval = ssm_block_forward(&h, &p, false, None).unwrap();
        let y_train = ssm_block_forward(&h, &p, true, Some(ChaCha8Rng::seed_from_u64(0))).unwrap();
        assert!(y_eval.bit_eq(&y_train));
        assert_eq!(y_eval.shape(), h.shape());

        p.out_proj = Tensor::zeros(&[4, 4]);
        p.out_bias = Tensor::zeros(&[4]);
        let y = ssm_block_forward(&h, &p, false, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = SsmBlockParams::<f64>::init(4, 3, 0.0, &mut rng).unwrap();
        let h = rand_tensor(&[1, 10, 4], &mut rng);
        let base = ssm_block_forward(&h, &p, false, None).unwrap();
        for pos in 0..10 {
            let mut h2 = h.clone();
            h2.data_mut()[pos * 4 + 1] += 0.5;
            let y = ssm_block_forward(&h2, &p, false, None).unwrap();
            for t in 0..pos {
                assert_eq!(&y.data()[t * 4..t * 4 + 4], &base.data()[t * 4..t * 4 + 4]);
            }
            assert_ne!(
                &y.data()[pos * 4..pos * 4 + 4],
                &base.data()[pos * 4..pos * 4 + 4]
            );
        }
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        SsmBlockParams::init(6, 4, 0.0, &mut rng)
            .unwrap()
            .register(&mut store, "b")
            .unwrap();
        assert_eq!(store.total_count(), SsmBlockParams::<f32>::count(6, 4));
    }
}
