//! End-to-end language models: embeddings, the baseline residual stack or
//! the multi-stream stack, final norm, and the tied output head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{Adapter, AdapterParams};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::numerics::{rms_norm_op, simplex_op, sinkhorn_op, RMS_EPS};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::ssm::{SsmBlock, SsmBlockParams};
use crate::streams::{
    expand_op, residual_mix_op, scatter_op, stream_sum_op, ExpanderParams, StreamLayer,
    StreamLayerParams,
};
use crate::tensor::Tensor;

/// Standard deviation of the token and position tables at init.
pub const EMBED_INIT_STD: f64 = 0.02;
/// Scale of the noise added to the replicate-identity expander.
pub const EXPANDER_NOISE: f64 = 1e-3;
/// Diagonal residual-mixing logit at init (off-diagonal logits are zero).
pub const RES_LOGIT_DIAG: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    MhcStatic,
    MhcAdapters,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::MhcStatic, Variant::MhcAdapters];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MhcStatic => "mhc_static",
            Variant::MhcAdapters => "mhc_adapters",
        }
    }

    pub fn multi_stream(self) -> bool {
        self != Variant::Baseline
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mhc_static" | "mhc" | "static" => Ok(Variant::MhcStatic),
            "mhc_adapters" | "adapters" => Ok(Variant::MhcAdapters),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected baseline, mhc_static or mhc_adapters)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    /// Requested stream count; the baseline always runs a single stream.
    pub n_streams: usize,
    pub conv_kernel: usize,
    pub adapter_rank: usize,
    pub sinkhorn_iters: usize,
    pub embed_dropout: f64,
    pub block_dropout: f64,
    pub adapter_dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::MhcAdapters,
            vocab_size: 50257,
            d_model: 512,
            n_layers: 8,
            max_seq_len: 256,
            n_streams: 4,
            conv_kernel: 4,
            adapter_rank: 16,
            sinkhorn_iters: 5,
            embed_dropout: 0.1,
            block_dropout: 0.1,
            adapter_dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 13] = [
        "variant",
        "vocab_size",
        "d_model",
        "n_layers",
        "max_seq_len",
        "n_streams",
        "conv_kernel",
        "adapter_rank",
        "sinkhorn_iters",
        "embed_dropout",
        "block_dropout",
        "adapter_dropout",
        "seed",
    ];

    /// Streams actually used by the variant.
    pub fn streams(&self) -> usize {
        if self.variant.multi_stream() {
            self.n_streams
        } else {
            1
        }
    }

    /// All dropout rates set to zero.
    pub fn without_dropout(mut self) -> Self {
        self.embed_dropout = 0.0;
        self.block_dropout = 0.0;
        self.adapter_dropout = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("max_seq_len", self.max_seq_len),
            ("n_streams", self.n_streams),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.variant == Variant::Baseline && self.n_streams != 1 {
            return Err(Error::Config(format!(
                "baseline runs a single stream; n_streams = {} is not allowed",
                self.n_streams
            )));
        }
        if self.variant == Variant::MhcAdapters && self.adapter_rank == 0 {
            return Err(Error::Config("adapter_rank must be >= 1".into()));
        }
        for (name, r) in [
            ("embed_dropout", self.embed_dropout),
            ("block_dropout", self.block_dropout),
            ("adapter_dropout", self.adapter_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "n_streams" => self.n_streams = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "adapter_rank" => self.adapter_rank = parse(key, value)?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse(key, value)?,
            "embed_dropout" => self.embed_dropout = parse(key, value)?,
            "block_dropout" => self.block_dropout = parse(key, value)?,
            "adapter_dropout" => self.adapter_dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("n_streams", self.n_streams.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("adapter_rank", self.adapter_rank.to_string()),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
            ("embed_dropout", self.embed_dropout.to_string()),
            ("block_dropout", self.block_dropout.to_string()),
            ("adapter_dropout", self.adapter_dropout.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Closed-form parameter count.
    pub fn expected_param_count(&self) -> usize {
        let (v, d, l, t, k) = (
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.max_seq_len,
            self.conv_kernel,
        );
        let mut total = v * d + t * d + l * SsmBlockParams::<f32>::count(d, k) + d;
        if self.variant.multi_stream() {
            let n = self.n_streams;
            total += l * StreamLayer::count(n) + d * n * d + n * d + n;
        }
        if self.variant == Variant::MhcAdapters {
            let (n, r) = (self.n_streams, self.adapter_rank);
            total += l * (2 * (d * r + r * d + n * r) + 2 * d);
        }
        total
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub block: SsmBlock,
    pub stream: Option<StreamLayer>,
    pub pre_adapter: Option<Adapter>,
    pub post_adapter: Option<Adapter>,
}

#[derive(Debug, Clone)]
struct StreamIo {
    expander_weight: ParamId,
    expander_bias: ParamId,
    agg_logits: ParamId,
}

/// One row of [`Model::parameter_census`].
#[derive(Debug, Clone, PartialEq)]
pub struct CensusRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

/// A language model and its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    config: ModelConfig,
    store: ParamStore<F>,
    embedding: ParamId,
    positional: ParamId,
    layers: Vec<Layer>,
    streams: Option<StreamIo>,
    final_norm: ParamId,
}

fn normal<F: Float>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
}

impl<F: Float> Model<F> {
    /// Fresh parameters, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, t) = (config.vocab_size, config.d_model, config.max_seq_len);
        let n = config.streams();
        let mut store = ParamStore::new();
        let embedding = store.add(
            "embed.tokens",
            normal(&[v, d], EMBED_INIT_STD, &mut rng),
            true,
        )?;
        let positional = store.add(
            "embed.positions",
            normal(&[t, d], EMBED_INIT_STD, &mut rng),
            false,
        )?;
        let streams = if config.variant.multi_stream() {
            let ex = ExpanderParams::<F>::init(d, n, EXPANDER_NOISE, &mut rng);
            Some(StreamIo {
                expander_weight: store.add("expand.weight", ex.weight, true)?,
                expander_bias: store.add("expand.bias", ex.bias, false)?,
                agg_logits: store.add("aggregate.logits", Tensor::zeros(&[n]), false)?,
            })
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let prefix = format!("layers.{l}");
            let block =
                SsmBlockParams::init(d, config.conv_kernel, config.block_dropout, &mut rng)?
                    .register(&mut store, &format!("{prefix}.block"))?;
            let stream = if config.variant.multi_stream() {
                Some(
                    StreamLayerParams::init(n, RES_LOGIT_DIAG)
                        .register(&mut store, &format!("{prefix}.streams"))?,
                )
            } else {
                None
            };
            let (pre_adapter, post_adapter) = if config.variant == Variant::MhcAdapters {
                let r = config.adapter_rank;
                let pre = AdapterParams::init(d, r, n, config.adapter_dropout, &mut rng)?
                    .register(&mut store, &format!("{prefix}.pre_adapter"))?;
                let post = AdapterParams::init(d, r, n, config.adapter_dropout, &mut rng)?
                    .register(&mut store, &format!("{prefix}.post_adapter"))?;
                (Some(pre), Some(post))
            } else {
                (None, None)
            };
            layers.push(Layer {
                block,
                stream,
                pre_adapter,
                post_adapter,
            });
        }
        let final_norm = store.add("final_norm.gain", Tensor::full(&[d], F::one()), false)?;
        Ok(Model {
            config,
            store,
            embedding,
            positional,
            layers,
            streams,
            final_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Token table, also used as the output head.
    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    pub fn positional_id(&self) -> ParamId {
        self.positional
    }

    pub fn final_norm_id(&self) -> ParamId {
        self.final_norm
    }

    /// Expander weight, expander bias and aggregation logits (multi-stream only).
    pub fn stream_io_ids(&self) -> Option<(ParamId, ParamId, ParamId)> {
        self.streams
            .as_ref()
            .map(|s| (s.expander_weight, s.expander_bias, s.agg_logits))
    }

    /// Replace every tensor from `other`, which must hold the same names and shapes.
    pub fn load_params(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.store.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, model expects {}",
                other.len(),
                self.store.len()
            )));
        }
        for (_, p) in other.iter() {
            let id = self
                .store
                .id_of(&p.name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {}", p.name)))?;
            self.store
                .set(id, (*p.value).clone())
                .map_err(|e| Error::Config(format!("parameter {}: {e}", p.name)))?;
        }
        Ok(())
    }

    /// Logits `[B, T, V]` for `tokens[B·T]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        if seq == 0 || seq > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} outside 1..={}",
                cfg.max_seq_len
            )));
        }
        let store = &self.store;
        let table = g.param(store, self.embedding);
        let pos = g.param(store, self.positional);
        let h = g.embedding(table, tokens, batch, seq)?;
        let h = g.add_positional(h, pos)?;
        let mut h = g.dropout(h, cfg.embed_dropout)?;

        if let Some(io) = &self.streams {
            let n = cfg.streams();
            let w = g.param(store, io.expander_weight);
            let b = g.param(store, io.expander_bias);
            let mut x = expand_op(g, h, w, b, n)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let sl = layer.stream.as_ref().expect("multi-stream layer");
                if let Some(a) = &layer.pre_adapter {
                    x = a.pre(g, store, x)?;
                }
                let pre_logits = g.param(store, sl.pre_logits);
                let pre_w = simplex_op(g, pre_logits)?;
                let u = stream_sum_op(g, x, pre_w)?;
                let y = layer.block.forward(g, store, u)?;
                let y = match &layer.post_adapter {
                    Some(a) => a.post(g, store, y)?,
                    None => y,
                };
                let post_logits = g.param(store, sl.post_logits);
                let post_w = simplex_op(g, post_logits)?;
                let delta = scatter_op(g, y, post_w)?;
                let res_logits = g.param(store, sl.res_logits);
                let mix = sinkhorn_op(g, res_logits, cfg.sinkhorn_iters)?;
                let mixed = residual_mix_op(g, x, mix)?;
                x = g.add(mixed, delta)?;
                check_finite(g, x, l)?;
            }
            let agg_logits = g.param(store, io.agg_logits);
            let agg_w = simplex_op(g, agg_logits)?;
            h = stream_sum_op(g, x, agg_w)?;
        } else {
            for (l, layer) in self.layers.iter().enumerate() {
                let y = layer.block.forward(g, store, h)?;
                h = g.add(h, y)?;
                check_finite(g, h, l)?;
            }
        }

        let gain = g.param(store, self.final_norm);
        let normed = rms_norm_op(g, h, gain, RMS_EPS)?;
        let head = g.param(store, self.embedding);
        let logits = g.linear_transposed(normed, head)?;
        check_finite(g, logits, self.layers.len())?;
        Ok(logits)
    }

    /// Logits from an evaluation-mode pass.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<F>> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, tokens, batch, seq)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy with dropout off.
    pub fn eval_loss(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<f64> {
        let mut g = Graph::new(false);
        let logits = self.forward(&mut g, inputs, batch, seq)?;
        let l = loss(&mut g, logits, targets)?;
        Ok(g.value(l).item().as_f64())
    }

    /// Training-mode loss and parameter gradients. `rng` drives dropout and is
    /// advanced in place; `loss_scale` multiplies the backward seed.
    pub fn loss_and_grads(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
        rng: &mut ChaCha8Rng,
        mixed_precision: bool,
        loss_scale: f64,
    ) -> Result<(f64, ParamGrads<F>)> {
        let mut g = Graph::new(true)
            .with_rng(rng.clone())
            .with_mixed_precision(mixed_precision);
        let logits = self.forward(&mut g, inputs, batch, seq)?;
        let l = loss(&mut g, logits, targets)?;
        let value = g.value(l).item().as_f64();
        *rng = g.take_rng().expect("rng attached");
        let grads = g.backward(l, F::from_f64(loss_scale))?;
        Ok((value, grads.into_param_grads(&self.store)))
    }

    pub fn parameter_census(&self) -> Vec<CensusRow> {
        self.store
            .iter()
            .map(|(_, p)| CensusRow {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.value.numel(),
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }
}

fn check_finite<F: Float>(g: &Graph<F>, v: Var, layer: usize) -> Result<()> {
    let t = g.value(v);
    if t.all_finite() {
        return Ok(());
    }
    let bad = t.data().iter().filter(|x| !x.is_finite()).count();
    Err(Error::NonFiniteActivation {
        layer,
        detail: format!("{bad} of {} values are NaN or infinite", t.numel()),
    })
}

/// Mean token-level cross-entropy of `logits[B, T, V]` against `targets[B·T]`.
pub fn loss<F: Float>(g: &mut Graph<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}
