//! Fast invariant suite behind the `selftest` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{broadcast_add_op, stream_scale_op};
use crate::bench::{run_fair_bench, BenchConfig};
use crate::corpus::{byte_fallback_tokenizer, pack, synthetic_corpus};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{self, Model, ModelConfig, Variant};
use crate::numerics::{
    finite_difference_check, finite_difference_check_coords, rms_norm_op, simplex_op, sinkhorn_op,
    sinkhorn_project, spectral_norm_estimate, MixLogits,
};
use crate::ssm::{
    causal_conv_op, causal_depthwise_conv, decay_op, diagonal_scan, diagonal_scan_op,
};
use crate::streams::{expand_op, residual_mix_op, scatter_op, stream_sum_op};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Worst relative error between analytic and central-difference gradients
/// of `Σ w ⊙ build(inputs)` with respect to every input.
pub fn op_gradient_error(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    op_gradient_error_in(|| Graph::new(false), inputs, build)
}

/// [`op_gradient_error`] with every evaluation in a graph from `make`.
pub fn op_gradient_error_in(
    make: impl Fn() -> Graph<f64>,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let run = |p: &[f64], w: Option<&Tensor<f64>>| -> Result<(f64, Vec<f64>, Tensor<f64>)> {
        let mut g = make();
        let mut off = 0;
        let mut vars = Vec::new();
        for s in &shapes {
            let len: usize = s.iter().product();
            vars.push(g.leaf(Tensor::new(s, p[off..off + len].to_vec())?));
            off += len;
        }
        let y = build(&mut g, &vars)?;
        let w = match w {
            Some(w) => w.clone(),
            None => uniform(
                &mut ChaCha8Rng::seed_from_u64(0xF00D),
                g.shape(y),
                -1.0,
                1.0,
            ),
        };
        let l = g.weighted_sum(y, &w)?;
        let val = g.value(l).item();
        let grads = g.backward(l, 1.0)?;
        let mut grad = Vec::with_capacity(p.len());
        for (v, s) in vars.iter().zip(&shapes) {
            match grads.wrt(*v) {
                Some(t) => grad.extend_from_slice(t.data()),
                None => grad.extend(std::iter::repeat_n(0.0, s.iter().product())),
            }
        }
        Ok((val, grad, w))
    };
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let (_, _, w) = run(&point, None)?;
    finite_difference_check(
        |p| {
            let (v, g, _) = run(p, Some(&w)).expect("graph rebuild");
            (v, g)
        },
        &point,
        1e-6,
    )
}

/// Gradient errors for every differentiable graph operation.
pub fn op_gradient_catalog() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let r = &mut rng;
    let (b, t, n, d, k) = (2, 4, 3, 5, 3);
    let mut out = Vec::new();
    let x3 = uniform(r, &[b, t, d], -1.0, 1.0);
    let x4 = uniform(r, &[b, t, n, d], -1.0, 1.0);

    out.push((
        "add",
        op_gradient_error(&[x3.clone(), uniform(r, &[b, t, d], -1.0, 1.0)], |g, v| {
            g.add(v[0], v[1])
        })?,
    ));
    out.push((
        "mul",
        op_gradient_error(&[x3.clone(), uniform(r, &[b, t, d], -1.0, 1.0)], |g, v| {
            g.mul(v[0], v[1])
        })?,
    ));
    out.push((
        "sigmoid",
        op_gradient_error(&[x3.clone()], |g, v| Ok(g.sigmoid(v[0])))?,
    ));
    out.push((
        "silu",
        op_gradient_error(&[x3.clone()], |g, v| Ok(g.silu(v[0])))?,
    ));
    out.push((
        "reshape",
        op_gradient_error(&[x3.clone()], |g, v| g.reshape(v[0], &[b * t, d]))?,
    ));
    out.push((
        "slice_last",
        op_gradient_error(&[x3.clone()], |g, v| g.slice_last(v[0], 1, 3))?,
    ));
    out.push((
        "linear",
        op_gradient_error(
            &[
                x3.clone(),
                uniform(r, &[d, 4], -1.0, 1.0),
                uniform(r, &[4], -1.0, 1.0),
            ],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        )?,
    ));
    out.push((
        "linear_transposed",
        op_gradient_error(&[x3.clone(), uniform(r, &[7, d], -1.0, 1.0)], |g, v| {
            g.linear_transposed(v[0], v[1])
        })?,
    ));
    let ids: Vec<usize> = (0..b * t).map(|_| r.random_range(0..7)).collect();
    out.push((
        "embedding",
        op_gradient_error(&[uniform(r, &[7, d], -1.0, 1.0)], |g, v| {
            g.embedding(v[0], &ids, b, t)
        })?,
    ));
    out.push((
        "add_positional",
        op_gradient_error(&[x3.clone(), uniform(r, &[t + 2, d], -1.0, 1.0)], |g, v| {
            g.add_positional(v[0], v[1])
        })?,
    ));
    let targets: Vec<usize> = (0..b * t).map(|_| r.random_range(0..d)).collect();
    out.push((
        "cross_entropy",
        op_gradient_error(&[x3.clone()], |g, v| g.cross_entropy(v[0], &targets))?,
    ));
    out.push((
        "sum_squares",
        op_gradient_error(&[x3.clone()], |g, v| Ok(g.sum_squares(v[0])))?,
    ));
    out.push((
        "dropout",
        op_gradient_error_in(
            || Graph::new(true).with_rng(ChaCha8Rng::seed_from_u64(5)),
            &[x3.clone()],
            |g, v| g.dropout(v[0], 0.3),
        )?,
    ));
    out.push((
        "rms_norm",
        op_gradient_error(&[x3.clone(), uniform(r, &[d], 0.5, 1.5)], |g, v| {
            rms_norm_op(g, v[0], v[1], 1e-6)
        })?,
    ));
    out.push((
        "simplex",
        op_gradient_error(&[uniform(r, &[n], -1.0, 1.0)], |g, v| simplex_op(g, v[0]))?,
    ));
    out.push((
        "sinkhorn",
        op_gradient_error(&[uniform(r, &[n, n], -1.0, 1.0)], |g, v| {
            sinkhorn_op(g, v[0], 5)
        })?,
    ));
    out.push((
        "causal_conv",
        op_gradient_error(&[x3.clone(), uniform(r, &[d, k], -1.0, 1.0)], |g, v| {
            causal_conv_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "decay",
        op_gradient_error(&[uniform(r, &[d], -2.0, 2.0)], |g, v| Ok(decay_op(g, v[0])))?,
    ));
    out.push((
        "diagonal_scan",
        op_gradient_error(
            &[
                x3.clone(),
                uniform(r, &[d], 0.1, 0.9),
                uniform(r, &[d], -1.0, 1.0),
                uniform(r, &[d], -1.0, 1.0),
                uniform(r, &[d], -1.0, 1.0),
            ],
            |g, v| diagonal_scan_op(g, v[0], v[1], v[2], v[3], v[4]),
        )?,
    ));
    out.push((
        "expand",
        op_gradient_error(
            &[
                x3.clone(),
                uniform(r, &[d, n * d], -1.0, 1.0),
                uniform(r, &[n * d], -1.0, 1.0),
            ],
            |g, v| expand_op(g, v[0], v[1], v[2], n),
        )?,
    ));
    out.push((
        "stream_sum",
        op_gradient_error(&[x4.clone(), uniform(r, &[n], 0.0, 1.0)], |g, v| {
            stream_sum_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "scatter",
        op_gradient_error(&[x3.clone(), uniform(r, &[n], 0.0, 1.0)], |g, v| {
            scatter_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "scatter_streams",
        op_gradient_error(&[x4.clone(), uniform(r, &[n], 0.0, 1.0)], |g, v| {
            scatter_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "residual_mix",
        op_gradient_error(&[x4.clone(), uniform(r, &[n, n], 0.0, 1.0)], |g, v| {
            residual_mix_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "stream_scale",
        op_gradient_error(&[x4.clone(), uniform(r, &[n, d], -1.0, 1.0)], |g, v| {
            stream_scale_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "stream_scale_shared",
        op_gradient_error(&[x3.clone(), uniform(r, &[n, d], -1.0, 1.0)], |g, v| {
            stream_scale_op(g, v[0], v[1])
        })?,
    ));
    out.push((
        "broadcast_add",
        op_gradient_error(&[x3, x4], |g, v| broadcast_add_op(g, v[0], v[1]))?,
    ));
    Ok(out)
}

/// Worst values over `count` random logit matrices, `n ∈ 2..=8`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SinkhornStats {
    pub min_entry: f64,
    pub max_residual: f64,
    pub max_spectral: f64,
    pub max_product_residual: f64,
}

pub fn sinkhorn_stats(count: usize, iterations: usize, seed: u64) -> Result<SinkhornStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SinkhornStats {
        min_entry: f64::INFINITY,
        ..SinkhornStats::default()
    };
    for i in 0..count {
        let n = 2 + i % 7;
        let draw = |rng: &mut ChaCha8Rng| {
            let z = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            sinkhorn_project(&MixLogits::<f64>::new(n, z)?, iterations)
        };
        let h = draw(&mut rng)?;
        let h2 = draw(&mut rng)?;
        s.min_entry = s.min_entry.min(h.min_entry());
        s.max_residual = s.max_residual.max(h.max_residual());
        s.max_spectral = s
            .max_spectral
            .max(spectral_norm_estimate(n, h.entries(), 200)?);
        s.max_product_residual = s.max_product_residual.max(h.matmul(&h2)?.max_residual());
    }
    Ok(s)
}

/// Max abs difference of the library scan and conv against plain loops.
pub fn scan_conv_oracle_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = rng.random_range(1..=4);
        let t = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=5);
        let u = uniform(&mut rng, &[b, t, d], -1.0, 1.0);
        let a = uniform(&mut rng, &[d], 0.0, 1.0);
        let bb = uniform(&mut rng, &[d], -1.0, 1.0);
        let c = uniform(&mut rng, &[d], -1.0, 1.0);
        let dd = uniform(&mut rng, &[d], -1.0, 1.0);
        let w = uniform(&mut rng, &[d, k], -1.0, 1.0);
        let z = diagonal_scan(&u, &a, &bb, &c, &dd)?;
        let y = causal_depthwise_conv(&u, &w)?;
        let ud = u.data();
        for bi in 0..b {
            for ch in 0..d {
                let mut s = 0.0;
                for ti in 0..t {
                    let at = |tt: usize| ud[(bi * t + tt) * d + ch];
                    s = a.data()[ch] * s + bb.data()[ch] * at(ti);
                    let want = c.data()[ch] * s + dd.data()[ch] * at(ti);
                    worst = worst.max((z.data()[(bi * t + ti) * d + ch] - want).abs());
                    let mut conv = 0.0;
                    for j in 0..k {
                        if ti + j + 1 >= k {
                            conv += w.data()[ch * k + j] * at(ti + j + 1 - k);
                        }
                    }
                    worst = worst.max((y.data()[(bi * t + ti) * d + ch] - conv).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// The desk-scale configuration used by the gradient and reduction checks.
pub fn desk_config(variant: Variant, n: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size: 11,
        d_model: 8,
        n_layers: layers,
        max_seq_len: 6,
        n_streams: n,
        conv_kernel: 3,
        adapter_rank: 2,
        sinkhorn_iters: 5,
        seed: 7,
        ..ModelConfig::default()
    }
    .without_dropout()
}

/// Finite-difference check of the whole desk-scale adapter model in f64.
/// Probes every coordinate when `max_coords` is `None`; otherwise a few
/// per tensor plus random ones up to the limit. Returns the worst error and
/// the number of coordinates probed.
pub fn model_gradient_error(max_coords: Option<usize>, seed: u64) -> Result<(f64, usize)> {
    let mut model = Model::<f64>::new(desk_config(Variant::MhcAdapters, 3, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    // Move every group off its init so zero up-projections and unit gammas
    // do not hide gradient paths.
    for &id in &ids {
        let up = model.params().param(id).name.ends_with("up.weight");
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = if up {
                rng.random_range(-0.3..0.3)
            } else {
                *v + rng.random_range(-0.05..0.05)
            };
        }
    }
    let (b, t) = (2, 6);
    let inputs: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..11)).collect();
    let targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..11)).collect();

    let shapes: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| model.params().get(id).shape().to_vec())
        .collect();
    let point: Vec<f64> = ids
        .iter()
        .flat_map(|&id| model.params().get(id).to_f64_vec())
        .collect();
    let mut g = Graph::new(false);
    let logits = model.forward(&mut g, &inputs, b, t)?;
    let loss = model::loss(&mut g, logits, &targets)?;
    let grads = g.backward(loss, 1.0)?.into_param_grads(model.params());
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| grads.get(id).expect("grad").to_f64_vec())
        .collect();

    let coords: Vec<usize> = match max_coords {
        None => (0..point.len()).collect(),
        Some(limit) => {
            let mut c = Vec::new();
            let mut off = 0;
            for s in &shapes {
                let len: usize = s.iter().product();
                for _ in 0..len.min(2) {
                    c.push(off + rng.random_range(0..len));
                }
                off += len;
            }
            while c.len() < limit {
                c.push(rng.random_range(0..point.len()));
            }
            c
        }
    };
    let eval = |p: &[f64]| {
        let mut m = model.clone();
        let mut off = 0;
        for (i, &id) in ids.iter().enumerate() {
            let len: usize = shapes[i].iter().product();
            let t = Tensor::new(&shapes[i], p[off..off + len].to_vec()).expect("shape");
            m.params_mut().set(id, t).expect("param");
            off += len;
        }
        m.eval_loss(&inputs, &targets, b, t).expect("forward")
    };
    let err = finite_difference_check_coords(eval, &analytic, &point, &coords, 1e-5)?;
    Ok((err, coords.len()))
}

/// `(max |logit diff| for n = 1 vs baseline, adapters == static bit-exactly)`
pub fn reduction_to_baseline(seed: u64) -> Result<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<usize> = (0..12).map(|_| rng.random_range(0..11)).collect();

    let base = Model::<f32>::new(desk_config(Variant::Baseline, 1, 2))?;
    let mut single = Model::<f32>::new(desk_config(Variant::MhcStatic, 1, 2))?;
    for (_, p) in base.params().iter() {
        if let Some(id) = single.params().id_of(&p.name) {
            single.params_mut().set(id, (*p.value).clone())?;
        }
    }
    let (w, bias, _) = single.stream_io_ids().expect("multi-stream model");
    let ex = crate::streams::ExpanderParams::<f32>::replicate(8, 1);
    single.params_mut().set(w, ex.weight)?;
    single.params_mut().set(bias, ex.bias)?;
    let diff = single
        .logits(&x, 2, 6)?
        .max_abs_diff(&base.logits(&x, 2, 6)?);

    let st = Model::<f32>::new(desk_config(Variant::MhcStatic, 3, 2))?;
    let mut ad = Model::<f32>::new(desk_config(Variant::MhcAdapters, 3, 2))?;
    for (_, p) in st.params().iter() {
        if let Some(id) = ad.params().id_of(&p.name) {
            ad.params_mut().set(id, (*p.value).clone())?;
        }
    }
    let same = ad.logits(&x, 2, 6)?.bit_eq(&st.logits(&x, 2, 6)?);
    Ok((diff, same))
}

/// Run the whole suite, one result per property.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(timed("sinkhorn_properties", || {
        let s = sinkhorn_stats(1000, 20, 1)?;
        let ok = s.min_entry >= 0.0
            && s.max_residual <= 1e-5
            && s.max_spectral <= 1.0 + 1e-4
            && s.max_product_residual <= 1e-4;
        Ok((
            ok,
            format!(
                "min {:.1e} residual {:.1e} spectral {:.6} product {:.1e}",
                s.min_entry, s.max_residual, s.max_spectral, s.max_product_residual
            ),
        ))
    }));
    out.push(timed("scan_conv_oracle", || {
        let e = scan_conv_oracle_error(100, 2)?;
        Ok((e <= 1e-6, format!("max error {e:.1e}")))
    }));
    out.push(timed("op_gradients", || {
        let cat = op_gradient_catalog()?;
        let (name, worst) = cat
            .iter()
            .copied()
            .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
        Ok((
            worst <= 1e-3,
            format!("{} ops, worst {worst:.1e} ({name})", cat.len()),
        ))
    }));
    out.push(timed("model_gradient", || {
        let (e, n) = model_gradient_error(Some(300), 11)?;
        Ok((e <= 1e-3, format!("{n} coords, max error {e:.1e}")))
    }));
    out.push(timed("reduction_to_baseline", || {
        let (diff, same) = reduction_to_baseline(3)?;
        Ok((
            diff <= 1e-5 && same,
            format!("n=1 diff {diff:.1e}, zero-up adapters bit-exact {same}"),
        ))
    }));
    out.push(timed("perplexity_mapping", || {
        let worst = [(6.3507, 572.91), (6.2448, 515.35), (6.1353, 461.88)]
            .iter()
            .map(|&(l, p)| (model::perplexity(l) / p - 1.0).abs())
            .fold(0.0f64, f64::max);
        Ok((worst <= 1e-4, format!("max relative error {worst:.1e}")))
    }));
    out.push(timed("fair_bench_restore", || {
        let ids = byte_fallback_tokenizer().encode(&synthetic_corpus(4000, 9));
        let val = pack(ids, 16)?;
        let cfg = ModelConfig {
            vocab_size: 257,
            d_model: 16,
            n_layers: 1,
            max_seq_len: 16,
            n_streams: 2,
            adapter_rank: 2,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::<f32>::new(Model::new(cfg)?, tc)?;
        let before = tr.to_checkpoint().to_bytes();
        let pre = tr.evaluate(&val)?.loss;
        let bc = BenchConfig {
            warmup_steps: 1,
            timed_steps: 3,
            ..BenchConfig::default()
        };
        let r = run_fair_bench(&mut tr, &val, &bc, "selftest")?;
        let same = tr.to_checkpoint().to_bytes() == before;
        Ok((
            same && r.val_loss.to_bits() == pre.to_bits(),
            format!("state restored {same}, eval {} vs {}", r.val_loss, pre),
        ))
    }));
    out
}
