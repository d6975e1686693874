//! Training: AdamW with decoupled weight decay, global-norm clipping,
//! dynamic loss scaling for the reduced-precision mode, periodic validation,
//! metrics and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint, Progress};
use crate::corpus::{batches, Batch, BatchMode, PackedDataset};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::Graph;
use crate::model::{self, Model, ModelConfig};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Which parameters receive decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayPolicy {
    /// Matrix weights and embeddings only (each parameter's `decay` flag).
    Flagged,
    All,
    Off,
}

impl FromStr for DecayPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flagged" => Ok(DecayPolicy::Flagged),
            "all" => Ok(DecayPolicy::All),
            "off" | "none" => Ok(DecayPolicy::Off),
            _ => Err(Error::Config(format!(
                "unknown decay policy {s:?} (flagged, all, off)"
            ))),
        }
    }
}

impl DecayPolicy {
    pub fn name(self) -> &'static str {
        match self {
            DecayPolicy::Flagged => "flagged",
            DecayPolicy::All => "all",
            DecayPolicy::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub mixed_precision: bool,
    pub seed: u64,
    /// Stop after this many optimizer steps in total (0 = run every epoch).
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_policy: DecayPolicy,
    /// Emit a train-loss row every this many steps.
    pub log_interval: usize,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_nonfinite_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.1,
            clip_norm: 1.0,
            eval_interval: 500,
            mixed_precision: false,
            seed: 0,
            max_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_policy: DecayPolicy::Flagged,
            log_interval: 50,
            max_nonfinite_steps: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("epochs", self.epochs >= 1),
            ("batch_size", self.batch_size >= 1),
            ("lr", self.lr > 0.0 && self.lr.is_finite()),
            ("weight_decay", self.weight_decay >= 0.0),
            ("clip_norm", self.clip_norm > 0.0),
            ("eval_interval", self.eval_interval >= 1),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
            ("log_interval", self.log_interval >= 1),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(Error::Config(format!("invalid training setting {name}"))),
            None => Ok(()),
        }
    }

    pub const KEYS: [&'static str; 15] = [
        "epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "clip_norm",
        "eval_interval",
        "mixed_precision",
        "seed",
        "max_steps",
        "beta1",
        "beta2",
        "eps",
        "decay_policy",
        "log_interval",
        "max_nonfinite_steps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "mixed_precision" => self.mixed_precision = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "decay_policy" => self.decay_policy = value.trim().parse()?,
            "log_interval" => self.log_interval = parse(key, value)?,
            "max_nonfinite_steps" => self.max_nonfinite_steps = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("mixed_precision", self.mixed_precision.to_string()),
            ("seed", self.seed.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("decay_policy", self.decay_policy.name().to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("max_nonfinite_steps", self.max_nonfinite_steps.to_string()),
        ]
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decay_policy: self.decay_policy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_policy: DecayPolicy,
}

impl Default for AdamW {
    fn default() -> Self {
        TrainConfig::default().adamw()
    }
}

/// Dynamic loss scale: doubled after `growth_interval` clean steps, halved
/// (and the step skipped) whenever gradients overflow.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScaler {
    pub scale: f64,
    pub growth_interval: u64,
    pub clean_steps: u64,
    pub skipped_steps: u64,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler {
            scale: 65536.0,
            growth_interval: 2000,
            clean_steps: 0,
            skipped_steps: 0,
        }
    }
}

impl LossScaler {
    /// Record one step; returns whether its update should be applied.
    pub fn update(&mut self, grads_finite: bool) -> bool {
        if grads_finite {
            self.clean_steps += 1;
            if self.clean_steps % self.growth_interval == 0 {
                self.scale *= 2.0;
            }
            true
        } else {
            self.scale = (self.scale * 0.5).max(1.0);
            self.clean_steps = 0;
            self.skipped_steps += 1;
            false
        }
    }
}

/// First/second moments per parameter, the step counter and loss-scale state.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub scaler: LossScaler,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            scaler: LossScaler::default(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.scaler == other.scaler
            && self.m.len() == other.m.len()
            && self.m.iter().zip(&other.m).all(|(a, b)| a.bit_eq(b))
            && self.v.iter().zip(&other.v).all(|(a, b)| a.bit_eq(b))
    }
}

/// One AdamW update. Weight decay shrinks weights directly by
/// `1 − lr·wd`; it never enters the moments.
pub fn adamw_step<F: Float>(
    store: &mut ParamStore<F>,
    grads: &ParamGrads<F>,
    state: &mut OptimizerState<F>,
    hp: &AdamW,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    if !grads.all_finite() {
        return Err(Error::NumericDomain(
            "non-finite gradient passed to AdamW".into(),
        ));
    }
    for (id, g) in grads.iter() {
        store.get(id).expect_shape(g.shape())?;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    let (b1, b2) = (F::from_f64(hp.beta1), F::from_f64(hp.beta2));
    let (one_b1, one_b2) = (F::from_f64(1.0 - hp.beta1), F::from_f64(1.0 - hp.beta2));
    let step_size = F::from_f64(hp.lr / bc1);
    let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
    let eps = F::from_f64(hp.eps);
    for (id, g) in grads.iter() {
        let i = id.index();
        let decays = match hp.decay_policy {
            DecayPolicy::Flagged => store.param(id).decay,
            DecayPolicy::All => true,
            DecayPolicy::Off => false,
        };
        let shrink = F::from_f64(1.0 - hp.lr * if decays { hp.weight_decay } else { 0.0 });
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let w = store.get_mut(id).data_mut();
        for k in 0..w.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + one_b1 * gk;
            v[k] = b2 * v[k] + one_b2 * gk * gk;
            let update = step_size * m[k] / (v[k].sqrt() * inv_sqrt_bc2 + eps);
            w[k] = w[k] * shrink - update;
        }
    }
    Ok(())
}

/// Scale all gradients by `max_norm / norm` when the global 2-norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<F: Float>(grads: &mut ParamGrads<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Token-weighted mean cross-entropy over a whole split, dropout off.
pub fn evaluate<F: Float>(
    model: &Model<F>,
    ds: &PackedDataset,
    batch_size: usize,
    mixed_precision: bool,
) -> Result<EvalResult> {
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for b in batches(ds, batch_size, BatchMode::Eval)? {
        let mut g = Graph::new(false).with_mixed_precision(mixed_precision);
        let logits = model.forward(&mut g, &b.inputs, b.batch, b.seq)?;
        let l = model::loss(&mut g, logits, &b.targets)?;
        let n = b.batch * b.seq;
        total += g.value(l).item().as_f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let loss = total / tokens as f64;
    Ok(EvalResult {
        loss,
        ppl: model::perplexity(loss),
        tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Final,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Final => "final",
        }
    }
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub ppl: f64,
    pub elapsed_s: f64,
}

pub const METRICS_HEADER: &str = "step,split,loss,ppl,elapsed_s";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.4},{:.3}",
            self.step,
            self.split.name(),
            self.loss,
            self.ppl,
            self.elapsed_s
        )
    }
}

/// Receives metrics rows and checkpoint opportunities during training.
pub trait TrainObserver<F: Float> {
    fn on_record(&mut self, _rec: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every evaluation; `last` marks the end of training.
    fn on_checkpoint(&mut self, _trainer: &Trainer<F>, _last: bool) -> Result<()> {
        Ok(())
    }
}

/// Collects records in memory.
#[derive(Debug, Default)]
pub struct MemoryObserver {
    pub records: Vec<MetricsRecord>,
}

impl<F: Float> TrainObserver<F> for MemoryObserver {
    fn on_record(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }
}

/// Appends rows to `metrics.csv`, prints a console line per row and keeps
/// `checkpoint.bin` current inside a run directory.
pub struct RunDirObserver {
    dir: PathBuf,
    csv: fs::File,
    pub records: Vec<MetricsRecord>,
    pub quiet: bool,
}

impl RunDirObserver {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists();
        let mut csv = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunDirObserver {
            dir,
            csv,
            records: Vec::new(),
            quiet: false,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
}

impl<F: Float> TrainObserver<F> for RunDirObserver {
    fn on_record(&mut self, rec: &MetricsRecord) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        writeln!(self.csv, "{}", rec.csv_row()).map_err(|e| Error::io(&path, e))?;
        if !self.quiet {
            println!(
                "[{:>8.1}s] step {:>6} {:<5} loss {:.4} ppl {:.2}",
                rec.elapsed_s,
                rec.step,
                rec.split.name(),
                rec.loss,
                rec.ppl
            );
        }
        self.records.push(rec.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer<F>, _last: bool) -> Result<()> {
        trainer.save_checkpoint(self.checkpoint_path())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_eval: EvalResult,
    pub last_train_loss: f64,
    pub skipped_steps: u64,
}

/// Model, optimizer, dropout RNG and loop position: everything a checkpoint
/// must hold for an exact resume.
#[derive(Debug, Clone)]
pub struct Trainer<F: Float> {
    pub model: Model<F>,
    pub opt: OptimizerState<F>,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    pub config: TrainConfig,
    nonfinite_streak: usize,
}

/// Per-epoch shuffle seed.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch)
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = OptimizerState::new(model.params());
        Ok(Trainer {
            model,
            opt,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_D40F),
            progress: Progress::default(),
            config,
            nonfinite_streak: 0,
        })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let mixed = self.config.mixed_precision;
        let scale = if mixed { self.opt.scaler.scale } else { 1.0 };
        let (loss, mut grads) = self.model.loss_and_grads(
            &batch.inputs,
            &batch.targets,
            batch.batch,
            batch.seq,
            &mut self.rng,
            mixed,
            scale,
        )?;
        if mixed {
            let inv = F::from_f64(1.0 / scale);
            for (_, g) in grads.iter_mut() {
                g.scale(inv);
            }
        }
        let finite = loss.is_finite() && grads.all_finite();
        let apply = if mixed {
            self.opt.scaler.update(finite)
        } else {
            finite
        };
        if !apply {
            self.nonfinite_streak += 1;
            if self.nonfinite_streak > self.config.max_nonfinite_steps {
                return Err(Error::Diverged(format!(
                    "{} consecutive non-finite steps (last loss {loss}, step {})",
                    self.nonfinite_streak, self.progress.step
                )));
            }
            return Ok(StepOutcome {
                loss,
                grad_norm: f64::NAN,
                applied: false,
            });
        }
        self.nonfinite_streak = 0;
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm);
        let hp = self.config.adamw();
        adamw_step(self.model.params_mut(), &grads, &mut self.opt, &hp)?;
        Ok(StepOutcome {
            loss,
            grad_norm,
            applied: true,
        })
    }

    pub fn evaluate(&self, ds: &PackedDataset) -> Result<EvalResult> {
        evaluate(
            &self.model,
            ds,
            self.config.batch_size,
            self.config.mixed_precision,
        )
    }

    /// Total steps the configured run will take over `train`.
    pub fn planned_steps(&self, train: &PackedDataset) -> u64 {
        let per_epoch = (train.len() / self.config.batch_size) as u64;
        let total = per_epoch * self.config.epochs as u64;
        if self.config.max_steps > 0 {
            total.min(self.config.max_steps as u64)
        } else {
            total
        }
    }

    /// Run (or continue) training until the planned step count.
    pub fn train(
        &mut self,
        train: &PackedDataset,
        val: &PackedDataset,
        observer: &mut dyn TrainObserver<F>,
    ) -> Result<TrainSummary> {
        let bs = self.config.batch_size;
        if train.len() < bs {
            return Err(Error::Data(format!(
                "training split has {} samples, fewer than one batch of {bs}",
                train.len()
            )));
        }
        let planned = self.planned_steps(train);
        let start = Instant::now();
        let base_elapsed = self.progress.elapsed_s;
        let elapsed = || base_elapsed + start.elapsed().as_secs_f64();
        let mut last_train_loss = f64::NAN;

        'epochs: while self.progress.step < planned {
            let epoch = self.progress.epoch;
            let iter = batches(
                train,
                bs,
                BatchMode::Train {
                    seed: epoch_seed(self.config.seed, epoch),
                },
            )?
            .skip_batches(self.progress.batch_in_epoch as usize);
            for batch in iter {
                let out = self.step(&batch)?;
                self.progress.step += 1;
                self.progress.batch_in_epoch += 1;
                last_train_loss = out.loss;
                let step = self.progress.step;
                if step % self.config.log_interval as u64 == 0 {
                    observer.on_record(&MetricsRecord {
                        step,
                        split: Split::Train,
                        loss: out.loss,
                        ppl: model::perplexity(out.loss),
                        elapsed_s: elapsed(),
                    })?;
                }
                if step % self.config.eval_interval as u64 == 0 && step < planned {
                    let ev = self.evaluate(val)?;
                    self.progress.elapsed_s = elapsed();
                    observer.on_record(&MetricsRecord {
                        step,
                        split: Split::Val,
                        loss: ev.loss,
                        ppl: ev.ppl,
                        elapsed_s: self.progress.elapsed_s,
                    })?;
                    observer.on_checkpoint(self, false)?;
                }
                if step >= planned {
                    break 'epochs;
                }
            }
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
        }

        let final_eval = self.evaluate(val)?;
        self.progress.elapsed_s = elapsed();
        let step = self.progress.step;
        if step % self.config.eval_interval as u64 == 0 {
            observer.on_record(&MetricsRecord {
                step,
                split: Split::Val,
                loss: final_eval.loss,
                ppl: final_eval.ppl,
                elapsed_s: self.progress.elapsed_s,
            })?;
        }
        observer.on_record(&MetricsRecord {
            step,
            split: Split::Final,
            loss: final_eval.loss,
            ppl: final_eval.ppl,
            elapsed_s: self.progress.elapsed_s,
        })?;
        observer.on_checkpoint(self, true)?;
        Ok(TrainSummary {
            steps: step,
            final_eval,
            last_train_loss,
            skipped_steps: self.opt.scaler.skipped_steps,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        let mut config = checkpoint::prefixed("model", self.model.config().pairs());
        config.extend(checkpoint::prefixed("train", self.config.pairs()));
        Checkpoint {
            config,
            params: self
                .model
                .params()
                .iter()
                .map(|(_, p)| (p.name.clone(), (*p.value).clone()))
                .collect(),
            optimizer: Some(self.opt.clone()),
            rng: Some(checkpoint::RngState::capture(&self.rng)),
            progress: self.progress.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Rebuild a trainer from a checkpoint. `overrides` adjusts training
    /// settings (e.g. a larger `max_steps`) before resuming.
    pub fn from_checkpoint(ck: Checkpoint<F>, overrides: &[(String, String)]) -> Result<Self> {
        let model_cfg: ModelConfig = ck.model_config()?;
        let mut train_cfg = ck.train_config()?;
        for (k, v) in overrides {
            train_cfg.set(k, v)?;
        }
        let mut model = Model::new(model_cfg)?;
        let mut store = ParamStore::new();
        for (name, t) in ck.params {
            store.add(name, t, false)?;
        }
        model.load_params(&store)?;
        let mut trainer = Trainer::new(model, train_cfg)?;
        if let Some(opt) = ck.optimizer {
            if opt.m.len() != trainer.opt.m.len()
                || opt
                    .m
                    .iter()
                    .zip(&trainer.opt.m)
                    .any(|(a, b)| a.shape() != b.shape())
            {
                return Err(Error::Config(
                    "optimizer moments do not match the model".into(),
                ));
            }
            trainer.opt = opt;
        }
        if let Some(rng) = ck.rng {
            trainer.rng = rng.restore();
        }
        trainer.progress = ck.progress;
        Ok(trainer)
    }

    pub fn resume(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, overrides)
    }
}
