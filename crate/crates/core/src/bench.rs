//! Checkpoint-fair throughput benchmark.
//!
//! The full training state is serialized before timing, a fixed number of
//! optimizer steps run on uniform random tokens, and the state is restored
//! from the serialized copy and checked byte for byte before the validation
//! split is scored. Quality numbers therefore always come from the untouched
//! weights.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Batch, PackedDataset};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::memory;
use crate::trainer::Trainer;

/// Shortest timed region accepted as a measurement.
pub const MIN_TIMED_SECONDS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup_steps: usize,
    pub timed_steps: usize,
    /// 0 means the trainer's batch size.
    pub batch_size: usize,
    /// 0 means the model's maximum sequence length.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_steps: 5,
            timed_steps: 20,
            batch_size: 0,
            seq_len: 0,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub const KEYS: &'static [&'static str] = &[
        "warmup_steps",
        "timed_steps",
        "batch_size",
        "seq_len",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.timed_steps == 0 {
            return Err(Error::Config("bench.timed_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bench.{key}: expected an integer, got {v:?}")))
        };
        match key {
            "warmup_steps" => self.warmup_steps = parse(value)? as usize,
            "timed_steps" => self.timed_steps = parse(value)? as usize,
            "batch_size" => self.batch_size = parse(value)? as usize,
            "seq_len" => self.seq_len = parse(value)? as usize,
            "seed" => self.seed = parse(value)?,
            _ => return Err(Error::Config(format!("unknown bench key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("warmup_steps", self.warmup_steps.to_string()),
            ("timed_steps", self.timed_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub val_loss: f64,
    pub ppl: f64,
    pub tokens_per_sec: f64,
    pub peak_mem_bytes: u64,
    pub timed_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub wall_seconds: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Data(format!("bad bench report line: {e}")))
    }

    pub fn peak_mem_mb(&self) -> f64 {
        self.peak_mem_bytes as f64 / (1024.0 * 1024.0)
    }
}

/// Uniform random `[B, T]` batch over `[0, vocab)`.
fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, b: usize, t: usize) -> Batch {
    let mut draw = || (0..b * t).map(|_| rng.random_range(0..vocab)).collect();
    Batch {
        inputs: draw(),
        targets: draw(),
        batch: b,
        seq: t,
    }
}

/// Time optimizer steps on synthetic data, restore the trainer exactly,
/// then evaluate `val` from the restored weights.
pub fn run_fair_bench<F: Float>(
    trainer: &mut Trainer<F>,
    val: &PackedDataset,
    bc: &BenchConfig,
    name: &str,
) -> Result<BenchReport> {
    bc.validate()?;
    let cfg = trainer.model.config().clone();
    let b = if bc.batch_size == 0 {
        trainer.config.batch_size
    } else {
        bc.batch_size
    };
    let t = if bc.seq_len == 0 {
        cfg.max_seq_len
    } else {
        bc.seq_len
    };
    if t > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "bench.seq_len {t} exceeds the model's {}",
            cfg.max_seq_len
        )));
    }

    let snapshot = trainer.to_checkpoint().to_bytes();

    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let warmup: Vec<Batch> = (0..bc.warmup_steps)
        .map(|_| random_batch(&mut rng, cfg.vocab_size, b, t))
        .collect();
    let timed: Vec<Batch> = (0..bc.timed_steps)
        .map(|_| random_batch(&mut rng, cfg.vocab_size, b, t))
        .collect();
    for batch in &warmup {
        trainer.step(batch)?;
    }

    memory::start_tracking();
    let start = Instant::now();
    let run: Result<()> = timed
        .iter()
        .try_for_each(|batch| trainer.step(batch).map(drop));
    let wall = start.elapsed().as_secs_f64();
    let peak = memory::peak_memory_probe();
    memory::stop_tracking();
    run?;
    let peak = peak?;

    let restored = Checkpoint::<F>::from_bytes(&snapshot, Path::new("<bench snapshot>"))?;
    *trainer = Trainer::from_checkpoint(restored, &[])?;
    if trainer.to_checkpoint().to_bytes() != snapshot {
        return Err(Error::RestoreMismatch(
            "restored training state differs from the pre-bench snapshot".into(),
        ));
    }
    if wall < MIN_TIMED_SECONDS {
        return Err(Error::Measurement(format!(
            "timed region took {wall:.2e} s, below the {MIN_TIMED_SECONDS} s floor"
        )));
    }

    let ev = trainer.evaluate(val)?;
    Ok(BenchReport {
        model: name.to_string(),
        val_loss: ev.loss,
        ppl: ev.ppl,
        tokens_per_sec: (bc.timed_steps * b * t) as f64 / wall,
        peak_mem_bytes: peak as u64,
        timed_steps: bc.timed_steps,
        batch_size: b,
        seq_len: t,
        wall_seconds: wall,
    })
}

/// Absolute and percent difference of one metric against a reference row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    pub abs: f64,
    pub pct: f64,
}

impl Delta {
    fn new(value: f64, reference: f64) -> Self {
        let abs = value - reference;
        let pct = if reference == 0.0 {
            0.0
        } else {
            100.0 * abs / reference
        };
        Delta { abs, pct }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub report: BenchReport,
    pub val_loss: Delta,
    pub ppl: Delta,
    pub tokens_per_sec: Delta,
    pub peak_mem: Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

/// Keep the first report as the reference row, order the rest from highest
/// to lowest validation loss, and attach deltas against the reference.
pub fn compare_variants(reports: &[BenchReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Input(format!(
            "comparison needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let base = &reports[0];
    let mut rest: Vec<&BenchReport> = reports[1..].iter().collect();
    rest.sort_by(|a, b| b.val_loss.total_cmp(&a.val_loss));
    let rows = std::iter::once(base)
        .chain(rest)
        .map(|r| ComparisonRow {
            report: r.clone(),
            val_loss: Delta::new(r.val_loss, base.val_loss),
            ppl: Delta::new(r.ppl, base.ppl),
            tokens_per_sec: Delta::new(r.tokens_per_sec, base.tokens_per_sec),
            peak_mem: Delta::new(r.peak_mem_bytes as f64, base.peak_mem_bytes as f64),
        })
        .collect();
    Ok(Comparison { rows })
}

impl Comparison {
    /// Aligned table in the layout `Model  Val Loss  PPL  Tokens/sec  Peak Mem`.
    pub fn table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.report.model.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        writeln!(
            out,
            "{:<width$}  {:>9}  {:>10}  {:>11}  {:>12}",
            "Model", "Val Loss", "PPL", "Tokens/sec", "Peak Mem"
        )
        .unwrap();
        for r in &self.rows {
            let p = &r.report;
            writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>10.2}  {:>11.2}  {:>9.1} MB",
                p.model,
                p.val_loss,
                p.ppl,
                p.tokens_per_sec,
                p.peak_mem_mb()
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "Deltas vs {}:", self.rows[0].report.model).unwrap();
        for r in &self.rows[1..] {
            writeln!(
                out,
                "{:<width$}  loss {:+.4} ({:+.2}%)  ppl {:+.2} ({:+.2}%)  tok/s {:+.2} ({:+.2}%)  mem {:+.1} MB ({:+.2}%)",
                r.report.model,
                r.val_loss.abs,
                r.val_loss.pct,
                r.ppl.abs,
                r.ppl.pct,
                r.tokens_per_sec.abs,
                r.tokens_per_sec.pct,
                r.peak_mem.abs / (1024.0 * 1024.0),
                r.peak_mem.pct
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: &str, loss: f64, ppl: f64, tps: f64, mb: u64) -> BenchReport {
        BenchReport {
            model: model.into(),
            val_loss: loss,
            ppl,
            tokens_per_sec: tps,
            peak_mem_bytes: mb * 1024 * 1024,
            timed_steps: 20,
            batch_size: 16,
            seq_len: 256,
            wall_seconds: 1.0,
        }
    }

    fn table4() -> Vec<BenchReport> {
        vec![
            report("baseline", 6.3507, 572.91, 1025.52, 2365),
            report("mhc_adapters", 6.1353, 461.88, 938.90, 3092),
            report("mhc_static", 6.2448, 515.35, 964.81, 2568),
        ]
    }

    #[test]
    fn self_comparison_is_zero() {
        let r = report("a", 6.0, 403.4, 100.0, 10);
        let c = compare_variants(&[r.clone(), r]).unwrap();
        let d = &c.rows[1];
        for x in [d.val_loss, d.ppl, d.tokens_per_sec, d.peak_mem] {
            assert_eq!(x, Delta { abs: 0.0, pct: 0.0 });
        }
    }

    #[test]
    fn reference_deltas() {
        let c = compare_variants(&table4()).unwrap();
        let names: Vec<_> = c.rows.iter().map(|r| r.report.model.as_str()).collect();
        assert_eq!(names, ["baseline", "mhc_static", "mhc_adapters"]);
        // Stated improvements: 0.1059 and a further 0.1095.
        assert!((-c.rows[1].val_loss.abs - 0.1059).abs() < 1e-9);
        assert!((c.rows[1].val_loss.abs - c.rows[2].val_loss.abs - 0.1095).abs() < 1e-9);
        // Throughput drop of adapters against baseline.
        let want = (1025.52 - 938.90) / 1025.52 * 100.0;
        assert!((-c.rows[2].tokens_per_sec.pct - want).abs() < 1e-9);
        assert!((want - 8.4).abs() < 0.05);
    }

    #[test]
    fn needs_two_reports() {
        assert!(compare_variants(&table4()[..1]).is_err());
    }

    #[test]
    fn json_round_trip_and_table_header() {
        let r = report("mhc_static", 6.2448, 515.35, 964.81, 2568);
        assert_eq!(BenchReport::from_json(&r.to_json()).unwrap(), r);
        let t = compare_variants(&table4()).unwrap().table();
        let header: Vec<&str> = t
            .lines()
            .next()
            .unwrap()
            .split("  ")
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        assert_eq!(
            header,
            ["Model", "Val Loss", "PPL", "Tokens/sec", "Peak Mem"]
        );
        assert!(t.contains("2568.0 MB"));
    }

    #[test]
    fn config_keys_round_trip() {
        let mut bc = BenchConfig::default();
        for (k, v) in [("warmup_steps", "2"), ("timed_steps", "7"), ("seed", "9")] {
            bc.set(k, v).unwrap();
        }
        let mut back = BenchConfig::default();
        for (k, v) in bc.pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, bc);
        assert!(bc.set("timed_steps", "x").is_err());
        bc.timed_steps = 0;
        assert!(matches!(bc.validate(), Err(Error::Config(_))));
    }
}
