use mhc_ssm::bench::{run_fair_bench, BenchConfig};
use mhc_ssm::corpus::{byte_fallback_tokenizer, pack, synthetic_corpus, PackedDataset};
use mhc_ssm::model::{Model, ModelConfig, Variant};
use mhc_ssm::trainer::{MemoryObserver, TrainConfig, Trainer};

fn splits() -> (PackedDataset, PackedDataset) {
    let ids = byte_fallback_tokenizer().encode(&synthetic_corpus(20_000, 4));
    let cut = ids.len() * 9 / 10;
    (
        pack(ids[..cut].to_vec(), 32).unwrap(),
        pack(ids[cut..].to_vec(), 32).unwrap(),
    )
}

fn trainer(variant: Variant) -> Trainer<f32> {
    let cfg = ModelConfig {
        variant,
        vocab_size: 257,
        d_model: 32,
        n_layers: 2,
        max_seq_len: 32,
        n_streams: if variant == Variant::Baseline { 1 } else { 4 },
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        batch_size: 4,
        max_steps: 10,
        eval_interval: 10,
        ..TrainConfig::default()
    };
    Trainer::new(Model::new(cfg).unwrap(), tc).unwrap()
}

fn bench_cfg() -> BenchConfig {
    BenchConfig {
        warmup_steps: 2,
        timed_steps: 4,
        ..BenchConfig::default()
    }
}

#[test]
fn bench_leaves_state_and_eval_untouched() {
    let (train, val) = splits();
    let mut tr = trainer(Variant::MhcAdapters);
    // Start from a trained state so optimizer moments are non-trivial.
    tr.train(&train, &val, &mut MemoryObserver::default())
        .unwrap();
    let before = tr.to_checkpoint().to_bytes();
    let pre = tr.evaluate(&val).unwrap();
    let report = run_fair_bench(&mut tr, &val, &bench_cfg(), "mhc_adapters").unwrap();
    assert_eq!(tr.to_checkpoint().to_bytes(), before);
    assert_eq!(report.val_loss.to_bits(), pre.loss.to_bits());
    assert!((report.ppl / report.val_loss.exp() - 1.0).abs() < 1e-4);
    let want_tps = (4 * 4 * 32) as f64 / report.wall_seconds;
    assert!((report.tokens_per_sec / want_tps - 1.0).abs() < 1e-12);

    // Training after the bench continues exactly as if it never ran.
    let mut a = tr;
    let mut b = Trainer::from_checkpoint(
        mhc_ssm::checkpoint::Checkpoint::from_bytes(&before, std::path::Path::new("m")).unwrap(),
        &[("max_steps".into(), "15".into())],
    )
    .unwrap();
    a.config.max_steps = 15;
    a.train(&train, &val, &mut MemoryObserver::default())
        .unwrap();
    b.train(&train, &val, &mut MemoryObserver::default())
        .unwrap();
    assert!(a.model.params().bit_eq(b.model.params()));
}

#[test]
fn peak_memory_orders_variants() {
    let (_, val) = splits();
    let mut peaks = Vec::new();
    for variant in Variant::ALL {
        let mut tr = trainer(variant);
        let params = tr.model.params().total_bytes() as u64;
        let r = run_fair_bench(&mut tr, &val, &bench_cfg(), variant.name()).unwrap();
        assert!(r.peak_mem_bytes >= params);
        peaks.push(r.peak_mem_bytes);
    }
    assert!(
        peaks[0] <= peaks[1] && peaks[1] <= peaks[2],
        "peaks {peaks:?}"
    );
}

#[test]
fn zero_timed_steps_is_rejected() {
    let (_, val) = splits();
    let mut tr = trainer(Variant::Baseline);
    let bc = BenchConfig {
        timed_steps: 0,
        ..BenchConfig::default()
    };
    assert!(matches!(
        run_fair_bench(&mut tr, &val, &bc, "baseline"),
        Err(mhc_ssm::Error::Config(_))
    ));
}
