//! `mhc-ssm` command-line driver.
//!
//! Every command writes into a fresh timestamped directory under `--out`
//! and prints its path as the last line (`run directory: ...`).

mod curves;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use mhc_ssm::bench::{compare_variants, run_fair_bench, BenchReport};
use mhc_ssm::config::{section_keys, RunConfig, SECTIONS};
use mhc_ssm::corpus::{pack, PackedDataset, Tokenizer};
use mhc_ssm::model::Model;
use mhc_ssm::selftest;
use mhc_ssm::trainer::{RunDirObserver, Trainer};
use mhc_ssm::{Error, Result};
use serde_json::json;

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("Config file of `key = value` lines; flags take precedence"),
        Arg::new("seed")
            .long("seed")
            .value_name("N")
            .help("Sets model.seed, train.seed and bench.seed together"),
    ];
    for section in SECTIONS {
        for &key in section_keys(section) {
            let full = format!("{section}.{key}");
            let mut arg = Arg::new(full.clone())
                .long(full.clone())
                .value_name("VALUE")
                .help_heading(format!("{section} settings"));
            // Bare spellings only where a single section owns the key.
            if RunConfig::resolve_key(key).is_ok() {
                arg = arg.visible_alias(key.to_string());
                if key.contains('_') {
                    arg = arg.alias(key.replace('_', "-"));
                }
            }
            if full == "model.n_streams" {
                arg = arg.visible_alias("streams");
            }
            args.push(arg);
        }
    }
    args
}

fn out_arg() -> Arg {
    Arg::new("out")
        .long("out")
        .short('o')
        .value_name("DIR")
        .default_value("runs")
        .help("Parent directory for the timestamped run directory")
}

fn cli() -> Command {
    Command::new("mhc-ssm")
        .about("Train, evaluate and benchmark diagonal SSM language models with multi-stream residuals")
        .subcommand_required(true)
        .arg_required_else_help(true)
        // A later `--key value` replaces an earlier one.
        .args_override_self(true)
        .subcommand(
            Command::new("prepare")
                .about("Tokenize both splits into a token cache")
                .args(config_args())
                .arg(out_arg()),
        )
        .subcommand(
            Command::new("train")
                .about("Train a model, then run the fair benchmark on it")
                .args(config_args())
                .arg(out_arg())
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("CHECKPOINT")
                        .help("Continue from a checkpoint; model settings come from it"),
                )
                .arg(
                    Arg::new("no-bench")
                        .long("no-bench")
                        .action(ArgAction::SetTrue)
                        .help("Skip the benchmark after training"),
                ),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint on a data split")
                .args(config_args())
                .arg(out_arg())
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .required(true),
                )
                .arg(
                    Arg::new("split")
                        .long("split")
                        .value_parser(["val", "train"])
                        .default_value("val"),
                ),
        )
        .subcommand(
            Command::new("bench")
                .about("Measure throughput and peak memory, then evaluate")
                .args(config_args())
                .arg(out_arg())
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .help("Benchmark this checkpoint instead of a fresh model"),
                ),
        )
        .subcommand(
            Command::new("compare")
                .about("Tabulate benchmark reports from several run directories")
                .arg(out_arg())
                .arg(
                    Arg::new("runs")
                        .value_name("RUN_DIR")
                        .num_args(2..)
                        .required(true),
                ),
        )
        .subcommand(
            Command::new("selftest")
                .about("Run the numerical self-checks")
                .arg(out_arg()),
        )
}

/// File values first, then flags.
fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = m.get_one::<String>("seed") {
        for k in ["model.seed", "train.seed", "bench.seed"] {
            cfg.set(k, s)?;
        }
    }
    for section in SECTIONS {
        for key in section_keys(section) {
            let full = format!("{section}.{key}");
            if let Some(v) = m.get_one::<String>(&full) {
                cfg.set(&full, v)?;
            }
        }
    }
    cfg.fit_streams();
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

fn create_run_dir(m: &ArgMatches, label: &str) -> Result<PathBuf> {
    let out = PathBuf::from(m.get_one::<String>("out").expect("has default"));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = out.join(format!("{stamp}-{label}"));
    let mut dir = base.clone();
    let mut i = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{i}", base.display()));
        i += 1;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join("config.txt"), &cfg.to_string())
}

fn packed(cfg: &RunConfig, tok: &Tokenizer) -> Result<(PackedDataset, PackedDataset)> {
    let (train, valid) = cfg.data.token_splits(tok)?;
    let t = cfg.model.max_seq_len;
    Ok((pack(train, t)?, pack(valid, t)?))
}

/// A checkpoint fixes the model; explicit model settings must agree with it.
fn from_checkpoint(cfg: &mut RunConfig, path: &str) -> Result<Trainer<f32>> {
    let overrides: Vec<(String, String)> = cfg
        .train
        .pairs()
        .into_iter()
        .filter(|(k, _)| cfg.is_explicit(&format!("train.{k}")))
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let trainer = Trainer::<f32>::resume(path, &overrides)?;
    let stored = trainer.model.config().pairs();
    for (k, v) in cfg.model.pairs() {
        if cfg.is_explicit(&format!("model.{k}")) {
            let theirs = stored.iter().find(|(sk, _)| *sk == k).map(|(_, v)| v);
            if theirs != Some(&v) {
                return Err(Error::Config(format!(
                    "model.{k} = {v} conflicts with the checkpoint ({})",
                    theirs.map(String::as_str).unwrap_or("unset")
                )));
            }
        }
    }
    cfg.model = trainer.model.config().clone();
    cfg.train = trainer.config.clone();
    Ok(trainer)
}

/// Trainer plus data, either fresh from the config or from a checkpoint.
fn setup(
    cfg: &mut RunConfig,
    checkpoint: Option<&String>,
) -> Result<(Trainer<f32>, PackedDataset, PackedDataset)> {
    let tok = cfg.data.tokenizer()?;
    let trainer = match checkpoint {
        Some(path) => {
            let tr = from_checkpoint(cfg, path)?;
            if tok.vocab_size() != cfg.model.vocab_size {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary is {} but the {} tokenizer has {} ids",
                    cfg.model.vocab_size,
                    cfg.data.tokenizer.name(),
                    tok.vocab_size()
                )));
            }
            tr
        }
        None => {
            cfg.fit_vocab(&tok)?;
            cfg.validate()?;
            Trainer::new(Model::new(cfg.model.clone())?, cfg.train.clone())?
        }
    };
    let (train, val) = packed(cfg, &tok)?;
    Ok((trainer, train, val))
}

fn bench_into(
    dir: &Path,
    trainer: &mut Trainer<f32>,
    val: &PackedDataset,
    cfg: &RunConfig,
) -> Result<BenchReport> {
    let name = cfg.model.variant.name();
    let report = run_fair_bench(trainer, val, &cfg.bench, name)?;
    append_line(&dir.join("bench.jsonl"), &report.to_json())?;
    println!(
        "bench {name}: val loss {:.4} ppl {:.2} tokens/sec {:.1} peak mem {:.2} MB",
        report.val_loss,
        report.ppl,
        report.tokens_per_sec,
        report.peak_mem_mb()
    );
    Ok(report)
}

fn cmd_prepare(m: &ArgMatches) -> Result<PathBuf> {
    let mut cfg = resolve_config(m)?;
    let tok = cfg.data.tokenizer()?;
    cfg.fit_vocab(&tok)?;
    cfg.validate()?;
    let dir = create_run_dir(m, "prepare")?;
    if cfg.data.cache_dir.is_none() {
        cfg.data.cache_dir = Some(dir.join("cache"));
    }
    let (n_train, n_valid) = cfg.data.prepare(&tok)?;
    echo_config(&dir, &cfg)?;
    let cache = cfg.data.cache_dir.as_ref().expect("set above");
    let report = json!({
        "vocab_size": tok.vocab_size(),
        "train_tokens": n_train,
        "valid_tokens": n_valid,
        "cache_dir": cache.display().to_string(),
    });
    write_file(&dir.join("prepare.json"), &report.to_string())?;
    println!(
        "prepared {n_train} train and {n_valid} valid tokens (vocab {}) in {}",
        tok.vocab_size(),
        cache.display()
    );
    Ok(dir)
}

fn cmd_train(m: &ArgMatches) -> Result<PathBuf> {
    let mut cfg = resolve_config(m)?;
    let (mut trainer, train, val) = setup(&mut cfg, m.get_one::<String>("resume"))?;
    let dir = create_run_dir(m, &format!("train-{}", cfg.model.variant.name()))?;
    echo_config(&dir, &cfg)?;
    let mut obs = RunDirObserver::new(&dir)?;
    let summary = trainer.train(&train, &val, &mut obs)?;
    write_file(
        &dir.join("summary.json"),
        &json!({
            "variant": cfg.model.variant.name(),
            "steps": summary.steps,
            "final_val_loss": summary.final_eval.loss,
            "final_ppl": summary.final_eval.ppl,
            "last_train_loss": summary.last_train_loss,
            "skipped_steps": summary.skipped_steps,
            "params": trainer.model.params().total_count(),
        })
        .to_string(),
    )?;
    curves::emit_training_curves(&dir)?;
    if !m.get_flag("no-bench") {
        bench_into(&dir, &mut trainer, &val, &cfg)?;
    }
    Ok(dir)
}

fn cmd_eval(m: &ArgMatches) -> Result<PathBuf> {
    let mut cfg = resolve_config(m)?;
    let ck = m.get_one::<String>("checkpoint");
    let (trainer, train, val) = setup(&mut cfg, ck)?;
    let split = m.get_one::<String>("split").expect("has default");
    let ds = if split == "train" { &train } else { &val };
    let r = trainer.evaluate(ds)?;
    let dir = create_run_dir(m, &format!("eval-{}", cfg.model.variant.name()))?;
    echo_config(&dir, &cfg)?;
    write_file(
        &dir.join("eval.json"),
        &json!({
            "checkpoint": ck,
            "split": split,
            "loss": r.loss,
            "ppl": r.ppl,
            "tokens": r.tokens,
        })
        .to_string(),
    )?;
    println!(
        "{split}: loss {:.6} ppl {:.4} over {} tokens",
        r.loss, r.ppl, r.tokens
    );
    Ok(dir)
}

fn cmd_bench(m: &ArgMatches) -> Result<PathBuf> {
    let mut cfg = resolve_config(m)?;
    let (mut trainer, _, val) = setup(&mut cfg, m.get_one::<String>("checkpoint"))?;
    let dir = create_run_dir(m, &format!("bench-{}", cfg.model.variant.name()))?;
    echo_config(&dir, &cfg)?;
    bench_into(&dir, &mut trainer, &val, &cfg)?;
    Ok(dir)
}

fn last_report(run: &Path) -> Result<BenchReport> {
    let path = run.join("bench.jsonl");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("no benchmark report in {}: {e}", run.display())))?;
    let line = text
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    BenchReport::from_json(line)
}

fn cmd_compare(m: &ArgMatches) -> Result<PathBuf> {
    let runs: Vec<PathBuf> = m
        .get_many::<String>("runs")
        .expect("required")
        .map(PathBuf::from)
        .collect();
    let reports = runs
        .iter()
        .map(|r| last_report(r))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_variants(&reports)?.table();
    print!("{table}");
    let dir = create_run_dir(m, "compare")?;
    write_file(&dir.join("report.txt"), &table)?;
    let inputs: String = runs.iter().map(|r| format!("{}\n", r.display())).collect();
    write_file(&dir.join("inputs.txt"), &inputs)?;
    let mut curves = format!("{}\n", curves::CURVES_HEADER);
    for r in &runs {
        if let Ok(text) = fs::read_to_string(r.join("curves.csv")) {
            for line in text.lines().skip(1) {
                curves.push_str(line);
                curves.push('\n');
            }
        }
    }
    write_file(&dir.join("curves.csv"), &curves)?;
    Ok(dir)
}

fn cmd_selftest(m: &ArgMatches) -> Result<PathBuf> {
    let results = selftest::run_all();
    let mut text = String::new();
    for r in &results {
        println!("{}", r.line());
        text.push_str(&r.line());
        text.push('\n');
    }
    let dir = create_run_dir(m, "selftest")?;
    write_file(&dir.join("selftest.txt"), &text)?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        println!("run directory: {}", dir.display());
        return Err(Error::NumericDomain(format!(
            "{failed} of {} self-checks failed",
            results.len()
        )));
    }
    Ok(dir)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        match matches.subcommand() {
            Some(("prepare", m)) => cmd_prepare(m),
            Some(("train", m)) => cmd_train(m),
            Some(("eval", m)) => cmd_eval(m),
            Some(("bench", m)) => cmd_bench(m),
            Some(("compare", m)) => cmd_compare(m),
            Some(("selftest", m)) => cmd_selftest(m),
            _ => unreachable!("subcommand is required"),
        }
    }));
    match run {
        Ok(Ok(dir)) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
        // The panic message is already on stderr.
        Err(_) => ExitCode::from(5),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> RunConfig {
        let m = cli().try_get_matches_from(args).unwrap();
        resolve_config(m.subcommand().unwrap().1).unwrap()
    }

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn aliases_reach_the_right_keys() {
        let cfg = parse(&[
            "mhc-ssm",
            "train",
            "--variant",
            "mhc_static",
            "--streams",
            "3",
            "--d-model",
            "48",
            "--bench.batch_size",
            "2",
            "--seed",
            "11",
        ]);
        assert_eq!(cfg.model.variant.name(), "mhc_static");
        assert_eq!(cfg.model.n_streams, 3);
        assert_eq!(cfg.model.d_model, 48);
        assert_eq!(cfg.bench.batch_size, 2);
        assert_eq!(
            (cfg.model.seed, cfg.train.seed, cfg.bench.seed),
            (11, 11, 11)
        );
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "d_model = 32\nlr = 0.01\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = parse(&["mhc-ssm", "bench", "--config", p, "--lr", "0.5"]);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn ambiguous_bare_keys_are_not_flags() {
        assert!(cli()
            .try_get_matches_from(["mhc-ssm", "train", "--batch_size", "4"])
            .is_err());
    }
}
