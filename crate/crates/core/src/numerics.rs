//! Shared numerical kernels: Sinkhorn projection onto doubly stochastic
//! matrices, softmax simplex weights, RMSNorm, SiLU, a spectral norm
//! estimate, and the central-difference gradient checker.

use crate::error::{shape_err, Error, Result};
use crate::float::{cst, Float};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::Tensor;

/// RMSNorm epsilon used throughout the models.
pub const RMS_EPS: f64 = 1e-6;

/// Unconstrained `n × n` residual mixing logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MixLogits<F> {
    n: usize,
    z: Vec<F>,
}

impl<F: Float> MixLogits<F> {
    pub fn new(n: usize, z: Vec<F>) -> Result<Self> {
        if n == 0 {
            return Err(Error::NumericDomain("mixing matrix needs n >= 1".into()));
        }
        if z.len() != n * n {
            return Err(shape_err!("{} logits for an {n}x{n} matrix", z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite mixing logit".into()));
        }
        Ok(MixLogits { n, z })
    }

    pub fn zeros(n: usize) -> Self {
        MixLogits {
            n,
            z: vec![F::zero(); n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn logits(&self) -> &[F] {
        &self.z
    }
}

/// Output of [`sinkhorn_project`]: a nonnegative matrix with the row and
/// column deviations from one it actually achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct DoublyStochasticMatrix<F> {
    n: usize,
    h: Vec<F>,
    row_residual: f64,
    col_residual: f64,
}

impl<F: Float> DoublyStochasticMatrix<F> {
    /// Wrap an existing matrix, measuring its residuals.
    pub fn from_matrix(n: usize, h: Vec<F>) -> Result<Self> {
        if h.len() != n * n {
            return Err(shape_err!("{} entries for an {n}x{n} matrix", h.len()));
        }
        if h.iter().any(|&v| v.is_nan() || v < F::zero()) {
            return Err(Error::NumericDomain(
                "doubly stochastic entries must be >= 0".into(),
            ));
        }
        let (row_residual, col_residual) = stochastic_residuals(n, &h);
        Ok(DoublyStochasticMatrix {
            n,
            h,
            row_residual,
            col_residual,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut h = vec![F::zero(); n * n];
        for i in 0..n {
            h[i * n + i] = F::one();
        }
        DoublyStochasticMatrix {
            n,
            h,
            row_residual: 0.0,
            col_residual: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[F] {
        &self.h
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.h[i * self.n + j]
    }

    pub fn row_residual(&self) -> f64 {
        self.row_residual
    }

    pub fn col_residual(&self) -> f64 {
        self.col_residual
    }

    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }

    pub fn min_entry(&self) -> F {
        self.h.iter().copied().fold(F::infinity(), F::min)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(shape_err!(
                "{}x{} times {}x{}",
                self.n,
                self.n,
                other.n,
                other.n
            ));
        }
        Self::from_matrix(
            self.n,
            kernels::matmul(&self.h, &other.h, self.n, self.n, self.n),
        )
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(&[self.n, self.n], self.h.clone()).expect("n*n entries")
    }
}

/// Max |row sum − 1| and max |column sum − 1|.
pub fn stochastic_residuals<F: Float>(n: usize, h: &[F]) -> (f64, f64) {
    let mut row = 0.0f64;
    let mut col = 0.0f64;
    for i in 0..n {
        let rs: f64 = (0..n).map(|j| h[i * n + j].as_f64()).sum();
        let cs: f64 = (0..n).map(|j| h[j * n + i].as_f64()).sum();
        row = row.max((rs - 1.0).abs());
        col = col.max((cs - 1.0).abs());
    }
    (row, col)
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

/// Intermediate state of a Sinkhorn run, kept for the backward pass.
struct SinkhornTrace<F> {
    exp: Vec<F>,
    /// Output of every normalization step and the sums it divided by.
    steps: Vec<(Axis, Vec<F>, Vec<F>)>,
}

fn normalize<F: Float>(n: usize, x: &[F], axis: Axis) -> (Vec<F>, Vec<F>) {
    let mut sums = vec![F::zero(); n];
    for i in 0..n {
        for j in 0..n {
            let k = match axis {
                Axis::Rows => i,
                Axis::Cols => j,
            };
            sums[k] += x[i * n + j];
        }
    }
    let mut y = x.to_vec();
    for i in 0..n {
        for j in 0..n {
            let k = match axis {
                Axis::Rows => i,
                Axis::Cols => j,
            };
            y[i * n + j] /= sums[k];
        }
    }
    (y, sums)
}

fn sinkhorn_trace<F: Float>(n: usize, z: &[F], iterations: usize) -> SinkhornTrace<F> {
    // exp(z - max z): the normalizations are scale invariant, so the shift is exact.
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let exp: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let mut steps = Vec::with_capacity(2 * iterations);
    let mut cur = exp.clone();
    for _ in 0..iterations {
        for axis in [Axis::Rows, Axis::Cols] {
            let (y, sums) = normalize(n, &cur, axis);
            cur = y.clone();
            steps.push((axis, y, sums));
        }
    }
    SinkhornTrace { exp, steps }
}

fn sinkhorn_backward<F: Float>(n: usize, trace: &SinkhornTrace<F>, grad: &[F]) -> Vec<F> {
    let mut g = grad.to_vec();
    for (axis, y, sums) in trace.steps.iter().rev() {
        // y = x / s  ⇒  dx = (dy − Σ_k dy_k y_k) / s along the normalized axis.
        let mut dots = vec![F::zero(); n];
        for i in 0..n {
            for j in 0..n {
                let k = match axis {
                    Axis::Rows => i,
                    Axis::Cols => j,
                };
                dots[k] += g[i * n + j] * y[i * n + j];
            }
        }
        for i in 0..n {
            for j in 0..n {
                let k = match axis {
                    Axis::Rows => i,
                    Axis::Cols => j,
                };
                g[i * n + j] = (g[i * n + j] - dots[k]) / sums[k];
            }
        }
    }
    g.iter().zip(&trace.exp).map(|(&g, &e)| g * e).collect()
}

/// Project logits toward the Birkhoff polytope: exponentiate, then apply
/// `iterations` rounds of row normalization followed by column normalization.
pub fn sinkhorn_project<F: Float>(
    z: &MixLogits<F>,
    iterations: usize,
) -> Result<DoublyStochasticMatrix<F>> {
    if iterations == 0 {
        return Err(Error::NumericDomain(
            "sinkhorn needs at least one iteration".into(),
        ));
    }
    let trace = sinkhorn_trace(z.n, &z.z, iterations);
    let h = trace.steps.last().expect("at least one step").1.clone();
    DoublyStochasticMatrix::from_matrix(z.n, h)
}

/// Differentiable Sinkhorn projection of an `[n, n]` logits node.
pub fn sinkhorn_op<F: Float>(g: &mut Graph<F>, z: Var, iterations: usize) -> Result<Var> {
    let zv = g.value(z);
    if zv.ndim() != 2 || zv.shape()[0] != zv.shape()[1] {
        return Err(shape_err!(
            "sinkhorn logits must be square, got {:?}",
            zv.shape()
        ));
    }
    if iterations == 0 {
        return Err(Error::NumericDomain(
            "sinkhorn needs at least one iteration".into(),
        ));
    }
    if !zv.all_finite() {
        return Err(Error::NumericDomain("non-finite mixing logit".into()));
    }
    let n = zv.shape()[0];
    let trace = sinkhorn_trace(n, zv.data(), iterations);
    let h = Tensor::new(&[n, n], trace.steps.last().expect("step").1.clone())?;
    Ok(g.op(
        h,
        &[z],
        Box::new(move |_, _, grad| {
            let gz = sinkhorn_backward(n, &trace, grad.data());
            vec![Some(Tensor::new(&[n, n], gz).expect("shape"))]
        }),
    ))
}

/// Softmax-parameterized point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights<F> {
    logits: Vec<F>,
    w: Vec<F>,
}

impl<F: Float> SimplexWeights<F> {
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn weights(&self) -> &[F] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn one_hot(n: usize, j: usize) -> Self {
        let w: Vec<F> = (0..n)
            .map(|i| if i == j { F::one() } else { F::zero() })
            .collect();
        SimplexWeights {
            logits: w
                .iter()
                .map(|&v| {
                    if v > F::zero() {
                        F::zero()
                    } else {
                        F::neg_infinity()
                    }
                })
                .collect(),
            w,
        }
    }
}

fn softmax<F: Float>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn simplex_weights<F: Float>(logits: &[F]) -> Result<SimplexWeights<F>> {
    if logits.is_empty() {
        return Err(Error::NumericDomain("simplex weights need n >= 1".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite simplex logit".into()));
    }
    Ok(SimplexWeights {
        logits: logits.to_vec(),
        w: softmax(logits),
    })
}

/// Differentiable softmax of a 1-D logits node.
pub fn simplex_op<F: Float>(g: &mut Graph<F>, logits: Var) -> Result<Var> {
    let lv = g.value(logits);
    if lv.ndim() != 1 || lv.numel() == 0 {
        return Err(shape_err!(
            "simplex logits must be a non-empty vector, got {:?}",
            lv.shape()
        ));
    }
    if !lv.all_finite() {
        return Err(Error::NumericDomain("non-finite simplex logit".into()));
    }
    let w = Tensor::new(lv.shape(), softmax(lv.data()))?;
    Ok(g.op(
        w,
        &[logits],
        Box::new(|_, w, grad| {
            let dot = kernels::dot(w.data(), grad.data());
            vec![Some(grad.zip_map(w, |g, w| w * (g - dot)).expect("shape"))]
        }),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsNormParams<F> {
    pub gain: Vec<F>,
    epsilon: f64,
}

impl<F: Float> RmsNormParams<F> {
    pub fn new(gain: Vec<F>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::NumericDomain(format!(
                "rmsnorm epsilon {epsilon} must be > 0"
            )));
        }
        Ok(RmsNormParams { gain, epsilon })
    }

    pub fn ones(d: usize) -> Self {
        RmsNormParams {
            gain: vec![F::one(); d],
            epsilon: RMS_EPS,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

fn rms_norm_rows<F: Float>(x: &[F], gain: &[F], eps: F) -> (Vec<F>, Vec<F>) {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / d);
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|&v| v * v).sum::<F>() / cst::<F>(d as f64);
        let r = F::one() / (ms + eps).sqrt();
        inv.push(r);
        out.extend(row.iter().zip(gain).map(|(&v, &gn)| v * r * gn));
    }
    (out, inv)
}

/// `x / sqrt(mean(x²) + ε) ⊙ gain` over the trailing axis.
pub fn rms_norm<F: Float>(x: &Tensor<F>, p: &RmsNormParams<F>) -> Result<Tensor<F>> {
    if x.last_dim() != p.gain.len() {
        return Err(shape_err!(
            "rmsnorm over {} features with {} gains",
            x.last_dim(),
            p.gain.len()
        ));
    }
    let (out, _) = rms_norm_rows(x.data(), &p.gain, cst(p.epsilon));
    Tensor::new(x.shape(), out)
}

/// Differentiable RMSNorm of `x[..., D]` with gain node `[D]`.
pub fn rms_norm_op<F: Float>(g: &mut Graph<F>, x: Var, gain: Var, epsilon: f64) -> Result<Var> {
    let (xv, gv) = (g.value(x), g.value(gain));
    if gv.ndim() != 1 || xv.last_dim() != gv.numel() {
        return Err(shape_err!(
            "rmsnorm of {:?} with gain {:?}",
            xv.shape(),
            gv.shape()
        ));
    }
    let d = gv.numel();
    let eps: F = cst(epsilon);
    let (out, inv) = rms_norm_rows(xv.data(), gv.data(), eps);
    let out = Tensor::new(xv.shape(), out)?;
    Ok(g.op(
        out,
        &[x, gain],
        Box::new(move |inp, _, grad| {
            let (x, gain) = (inp[0].data(), inp[1].data());
            let mut gx = Vec::with_capacity(x.len());
            let mut ggain = vec![F::zero(); d];
            let inv_d = F::one() / cst::<F>(d as f64);
            for ((row, grow), &r) in x.chunks_exact(d).zip(grad.data().chunks_exact(d)).zip(&inv) {
                let mut dot = F::zero();
                for j in 0..d {
                    dot += grow[j] * gain[j] * row[j];
                    ggain[j] += grow[j] * row[j] * r;
                }
                let c = r * r * r * dot * inv_d;
                gx.extend((0..d).map(|j| grow[j] * gain[j] * r - row[j] * c));
            }
            vec![
                Some(Tensor::new(inp[0].shape(), gx).expect("shape")),
                Some(Tensor::new(&[d], ggain).expect("shape")),
            ]
        }),
    ))
}

pub fn silu<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * kernels::sigmoid(v))
}

/// Power-iteration estimate of the largest singular value of an `n × n`
/// matrix. The returned value is the largest `‖H v‖ / ‖v‖` seen, so it is a
/// lower bound that does not decrease with more iterations.
pub fn spectral_norm_estimate<F: Float>(n: usize, h: &[F], iters: usize) -> Result<f64> {
    if h.len() != n * n {
        return Err(shape_err!("{} entries for an {n}x{n} matrix", h.len()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite matrix entry".into()));
    }
    if n == 0 || h.iter().all(|&v| v == F::zero()) {
        return Ok(0.0);
    }
    let hd: Vec<f64> = h.iter().map(|v| v.as_f64()).collect();
    // Uneven start so no singular direction is exactly orthogonal by symmetry.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 1.618).sin())
        .collect();
    let mut best = 0.0f64;
    for _ in 0..iters.max(1) {
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= vn);
        let hv = kernels::matmul(&hd, &v, n, n, 1);
        let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        best = best.max(norm);
        // v ← Hᵀ H v
        v = (0..n)
            .map(|j| (0..n).map(|i| hd[i * n + j] * hv[i]).sum())
            .collect();
    }
    Ok(best)
}

/// Compare the analytic gradient of `f` against central differences.
///
/// `f` returns the scalar value and its analytic gradient at a point. The
/// result is `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn finite_difference_check(
    f: impl Fn(&[f64]) -> (f64, Vec<f64>),
    point: &[f64],
    step: f64,
) -> Result<f64> {
    let (_, analytic) = f(point);
    if analytic.len() != point.len() {
        return Err(shape_err!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        ));
    }
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_coords(|p| f(p).0, &analytic, point, &coords, step)
}

/// Like [`finite_difference_check`] but only probes `coords`, with the
/// analytic gradient supplied up front. Used where each evaluation is a
/// full model forward pass.
pub fn finite_difference_check_coords(
    f: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<f64> {
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite objective probing coordinate {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent Sinkhorn in plain f64 loops.
    fn sinkhorn_oracle(n: usize, z: &[f64], iters: usize) -> Vec<f64> {
        let mut m: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        for _ in 0..iters {
            for i in 0..n {
                let s: f64 = m[i * n..(i + 1) * n].iter().sum();
                for j in 0..n {
                    m[i * n + j] /= s;
                }
            }
            for j in 0..n {
                let s: f64 = (0..n).map(|i| m[i * n + j]).sum();
                for i in 0..n {
                    m[i * n + j] /= s;
                }
            }
        }
        m
    }

    #[test]
    fn zero_logits_give_uniform() {
        for n in 1..6 {
            let h = sinkhorn_project(&MixLogits::<f64>::zeros(n), 1).unwrap();
            assert!(h
                .entries()
                .iter()
                .all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));
            assert!(h.max_residual() < 1e-15);
        }
    }

    #[test]
    fn symmetric_two_by_two_single_iteration() {
        let l2 = 2f64.ln();
        let z = MixLogits::new(2, vec![0.0, l2, l2, 0.0]).unwrap();
        let h = sinkhorn_project(&z, 1).unwrap();
        let want = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        for (a, b) in h.entries().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(h.row_residual() < 1e-15 && h.col_residual() < 1e-15);
    }

    #[test]
    fn permutation_pattern_converges_to_permutation() {
        let n = 4;
        let perm = [2usize, 0, 3, 1];
        let mut z = vec![0.0; n * n];
        for (i, &j) in perm.iter().enumerate() {
            z[i * n + j] = 20.0;
        }
        let h = sinkhorn_project(&MixLogits::new(n, z.clone()).unwrap(), 20).unwrap();
        let oracle = sinkhorn_oracle(n, &z, 20);
        for i in 0..n {
            for j in 0..n {
                let p = if perm[i] == j { 1.0 } else { 0.0 };
                assert!((h.get(i, j) - p).abs() < 1e-6);
                assert!((h.get(i, j) - oracle[i * n + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        assert!(MixLogits::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(MixLogits::<f64>::new(0, vec![]).is_err());
        assert!(sinkhorn_project(&MixLogits::<f64>::zeros(2), 0).is_err());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let z = MixLogits::new(2, vec![1000.0f32, 0.0, 0.0, 1000.0]).unwrap();
        let h = sinkhorn_project(&z, 5).unwrap();
        assert!(h.entries().iter().all(|v| v.is_finite()));
        assert!((h.get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sinkhorn_matches_oracle_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=8 {
            let z: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let h = sinkhorn_project(&MixLogits::new(n, z.clone()).unwrap(), 7).unwrap();
            let o = sinkhorn_oracle(n, &z, 7);
            for (a, b) in h.entries().iter().zip(&o) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::<f64>::from_fn(&[3, 3], |i| ((i * 7 + 1) as f64).sin());
        let f = |p: &[f64]| {
            let mut g = Graph::new(false);
            let z = g.leaf(Tensor::new(&[3, 3], p.to_vec()).unwrap());
            let h = sinkhorn_op(&mut g, z, 5).unwrap();
            let l = g.weighted_sum(h, &w).unwrap();
            let v = g.value(l).item();
            let grads = g.backward(l, 1.0).unwrap();
            (v, grads.wrt(z).unwrap().to_f64_vec())
        };
        let err = finite_difference_check(f, &z0, 1e-6).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn simplex_examples() {
        let w = simplex_weights(&[0.0f64; 4]).unwrap();
        assert_eq!(w.weights(), &[0.25; 4]);
        let w = simplex_weights(&[0.0, 3f64.ln()]).unwrap();
        assert!((w.weights()[0] - 0.25).abs() < 1e-15 && (w.weights()[1] - 0.75).abs() < 1e-15);
        let w = simplex_weights(&[30.0f64, 0.0]).unwrap();
        assert!((w.weights()[0] - 1.0).abs() < 1e-9 && w.weights()[1].abs() < 1e-9);
        assert!(simplex_weights(&[f64::INFINITY]).is_err());
        assert!(simplex_weights::<f64>(&[]).is_err());
    }

    #[test]
    fn simplex_gradient() {
        let f = |p: &[f64]| {
            let mut g = Graph::new(false);
            let z = g.leaf(Tensor::new(&[4], p.to_vec()).unwrap());
            let w = simplex_op(&mut g, z).unwrap();
            let l = g
                .weighted_sum(w, &Tensor::from_f64(&[4], &[0.3, -1.0, 2.0, 0.5]).unwrap())
                .unwrap();
            let v = g.value(l).item();
            (v, g.backward(l, 1.0).unwrap().wrt(z).unwrap().to_f64_vec())
        };
        assert!(finite_difference_check(f, &[0.1, -0.4, 0.9, 0.0], 1e-6).unwrap() < 1e-8);
    }

    #[test]
    fn rms_norm_examples() {
        let p = RmsNormParams::new(vec![1.0f64; 4], 1e-300).unwrap();
        let x = Tensor::from_f64(&[4], &[2.0; 4]).unwrap();
        assert!(rms_norm(&x, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        let p = RmsNormParams::<f64>::ones(4);
        assert!(rms_norm(&Tensor::zeros(&[2, 4]), &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(rms_norm(&Tensor::zeros(&[2, 3]), &p).is_err());
        assert!(RmsNormParams::new(vec![1.0f64], 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::from_fn(&[5, 16], |_| rng.random_range(-3.0..3.0));
        let y = rms_norm(&x, &RmsNormParams::ones(16)).unwrap();
        for row in y.data().chunks_exact(16) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn rms_norm_gradient_wrt_input_and_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gain0: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
        let w = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos());
        let f = |p: &[f64]| {
            let mut g = Graph::new(false);
            let x = g.leaf(Tensor::new(&[3, 4], p[..12].to_vec()).unwrap());
            let gn = g.leaf(Tensor::new(&[4], p[12..].to_vec()).unwrap());
            let y = rms_norm_op(&mut g, x, gn, RMS_EPS).unwrap();
            let l = g.weighted_sum(y, &w).unwrap();
            let v = g.value(l).item();
            let grads = g.backward(l, 1.0).unwrap();
            let mut out = grads.wrt(x).unwrap().to_f64_vec();
            out.extend(grads.wrt(gn).unwrap().to_f64_vec());
            (v, out)
        };
        let point: Vec<f64> = x0.into_iter().chain(gain0).collect();
        assert!(finite_difference_check(f, &point, 1e-6).unwrap() < 1e-7);
    }

    #[test]
    fn silu_examples() {
        let t = Tensor::<f64>::from_f64(&[3], &[0.0, 1.0, -30.0]).unwrap();
        let y = silu(&t);
        assert_eq!(y.data()[0], 0.0);
        // 1 · σ(1) = 1 / (1 + e^-1)
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_examples() {
        let id: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        assert!((spectral_norm_estimate(3, &id, 10).unwrap() - 1.0).abs() < 1e-9);
        let id2: Vec<f64> = id.iter().map(|v| v * 2.0).collect();
        assert!((spectral_norm_estimate(3, &id2, 10).unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(spectral_norm_estimate(3, &[0.0f64; 9], 10).unwrap(), 0.0);
        // [[1, 2], [3, 4]] has largest singular value ≈ 5.4649857
        let s = spectral_norm_estimate(2, &[1.0f64, 2.0, 3.0, 4.0], 50).unwrap();
        assert!((s - 5.464_985_704_219_043).abs() < 1e-9);
    }

    #[test]
    fn spectral_estimate_is_monotone_in_iterations() {
        let m = [0.2f64, -1.0, 0.4, 0.9, 0.1, -0.3, 0.0, 0.5, 1.2];
        let mut prev = 0.0;
        for it in 1..20 {
            let s = spectral_norm_estimate(3, &m, it).unwrap();
            assert!(s + 1e-15 >= prev);
            prev = s;
        }
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let f = |p: &[f64]| {
            (
                p.iter().map(|v| v * v).sum(),
                p.iter().map(|v| 2.0 * v).collect(),
            )
        };
        assert!(finite_difference_check(f, &[1.0, 2.0], 1e-5).unwrap() <= 1e-7);
        let bad = |p: &[f64]| (p[0] * p[0], vec![p[0]]);
        assert!(finite_difference_check(bad, &[1.0], 1e-5).unwrap() > 0.4);
        let nonfinite = |p: &[f64]| (p[0].ln(), vec![1.0 / p[0]]);
        assert!(finite_difference_check(nonfinite, &[0.0], 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn simplex_is_a_distribution(logits in proptest::collection::vec(-50.0f64..50.0, 1..10)) {
            let w = simplex_weights(&logits).unwrap();
            prop_assert!(w.weights().iter().all(|&v| v >= 0.0));
            prop_assert!((w.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn converged_projection_is_idempotent(n in 2usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h = sinkhorn_project(&MixLogits::new(n, z).unwrap(), 200).unwrap();
            let again = sinkhorn_project(
                &MixLogits::new(n, h.entries().iter().map(|v| v.ln()).collect()).unwrap(),
                20,
            ).unwrap();
            for (a, b) in h.entries().iter().zip(again.entries()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
