use super::*;
use crate::client::ModelConfig;
use crate::eval::SynthSpec;
use crate::extract::{Activation, ExtractorSpec};
use crate::numerics::fingerprint;
use crate::numerics::io::encoded_len;
use crate::server::AggregationConfig;

fn small(clients: usize) -> FederationConfig {
    FederationConfig {
        seed: 11,
        clients,
        rounds: 3,
        checkpoint_every: 2,
        model: ModelConfig {
            memory_channels: 4,
            phi_hidden: 5,
            grid: [4, 4],
            activation: Activation::Relu,
        },
        extractor: ExtractorSpec::Synthetic {
            seed: 2,
            levels: 2,
            base: [8, 8],
            channels: vec![4, 6],
            image_channels: 3,
        },
        aggregation: AggregationConfig {
            n_init: 2,
            ..AggregationConfig::default()
        },
        data: DataSource::Synthetic(SynthSpec {
            types: 2,
            train_per_type: 6,
            test_normal_per_type: 3,
            test_anomalous_per_type: 3,
            image: [8, 8],
            anomaly_extent: [3, 3],
            alpha: 1.0,
            clients,
            ..SynthSpec::default()
        }),
        ..FederationConfig::default()
    }
}

fn sorted_rows(t: &crate::numerics::Tensor<f32>) -> Vec<Vec<u32>> {
    let c = *t.dims().last().unwrap();
    let mut rows: Vec<Vec<u32>> = t.data().chunks(c).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    rows
}

fn assert_consistent(fed: &Federation) {
    let g = fed.global.as_ref().unwrap();
    for s in &fed.clients {
        assert_eq!(s.bank.patches, g.patches, "client {} holds a different bank", s.id);
    }
}

#[test]
fn initialize_distributes_one_bank() {
    let fed = Federation::initialize(small(3)).unwrap();
    assert_consistent(&fed);
    assert_eq!(fed.round, 0);
    assert_eq!(fed.ledger.message_count(0), 6);
    let m = &fed.history[0];
    assert_eq!(m.messages, 6);
    assert_eq!(m.bytes_up, 3 * encoded_len(&[8, 8, 4]) as u64);
    assert!(m.client_loss.is_empty());
}

#[test]
fn global_bank_regression() {
    let fed = Federation::initialize(small(3)).unwrap();
    let g = fed.global.as_ref().unwrap();
    assert_eq!(fingerprint(&g.patches), FROZEN_INIT_BANK);
}

const FROZEN_INIT_BANK: &str = "a69e93d7ad69ba3138150761a113c53b36e87f7d6968c1a1551fa46af262036f";

#[test]
fn single_client_keeps_its_patches() {
    let mut cfg = small(1);
    cfg.aggregation.n_init = 1;
    let fed = Federation::initialize(cfg.clone()).unwrap();
    let model = new_client_model(&cfg, fed.data.fused_dims().unwrap().2, 0).unwrap();
    let mems = extract_all_memories(&model, &fed.data.clients[0]).unwrap();
    let reduced = memory_reduce(&mems, None, 0).unwrap();
    assert_eq!(sorted_rows(&fed.global.unwrap().patches), sorted_rows(&reduced.patches));
}

#[test]
fn rounds_keep_protocol_invariants() {
    let mut fed = Federation::initialize(small(3)).unwrap();
    let per_client = encoded_len(&[8, 8, 4]) as u64;
    for t in 1..=3 {
        let m = fed.run_round().unwrap().clone();
        assert_eq!(m.round, t);
        assert_eq!(m.messages, 6);
        assert_eq!(m.bytes_up, 3 * per_client);
        assert_eq!(m.bytes_down, 3 * per_client);
        assert!(m.client_loss.iter().all(|&l| l >= 0.0 && l <= 2.0 * m.r_hat));
        assert_consistent(&fed);
    }
    for e in &fed.ledger.entries {
        assert_eq!(e.bytes, per_client);
    }
    assert_eq!(fed.monitor.violations, 0);
}

#[test]
fn plain_average_is_elementwise_mean() {
    let mut cfg = small(3);
    cfg.baseline = Baseline::PlainAverage;
    let mut fed = Federation::initialize(cfg).unwrap();
    fed.run_round().unwrap();
    // Put distinct banks back and redo the exchange by hand.
    let banks: Vec<MemoryBank> = (0..3)
        .map(|n| {
            let t = crate::numerics::Tensor::from_fn(&[8, 8, 4], |i| (i * (n + 1)) as f32 * 0.01);
            MemoryBank::new(t, 1).unwrap()
        })
        .collect();
    for (s, b) in fed.clients.iter_mut().zip(&banks) {
        s.bank = b.clone();
    }
    fed.exchange(2).unwrap();
    let g = fed.global.as_ref().unwrap();
    for i in 0..g.patches.len() {
        let want = banks.iter().map(|b| b.patches.data()[i] as f64).sum::<f64>() / 3.0;
        assert!((g.patches.data()[i] as f64 - want).abs() < 1e-6);
    }
    assert_consistent(&fed);
}

#[test]
fn local_only_never_communicates() {
    let mut cfg = small(2);
    cfg.baseline = Baseline::LocalOnly;
    let mut fed = Federation::initialize(cfg).unwrap();
    fed.run_round().unwrap();
    fed.run_round().unwrap();
    assert!(fed.global.is_none());
    assert!(fed.ledger.entries.is_empty());
    assert!(fed.history.iter().all(|m| m.messages == 0));
    assert_ne!(fed.clients[0].bank.patches, fed.clients[1].bank.patches);
}

#[test]
fn independent_of_thread_count() {
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut fed = Federation::initialize(small(3)).unwrap();
            for _ in 0..2 {
                fed.run_round().unwrap();
            }
            fed
        })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.history, b.history);
    assert_eq!(a.global, b.global);
    for (x, y) in a.clients.iter().zip(&b.clients) {
        assert_eq!(x.model, y.model);
    }
}

#[test]
fn loss_drops_over_twenty_rounds() {
    let mut fed = Federation::initialize(small(3)).unwrap();
    for _ in 0..20 {
        fed.run_round().unwrap();
    }
    let first = fed.history[1].mean_loss();
    let last = fed.history[20].mean_loss();
    assert!(last < first, "loss went from {first} to {last}");
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn artifact_files(dir: &Path, clients: usize) -> Vec<PathBuf> {
    let mut v = vec![dir.join("global_bank.fdm")];
    v.extend((0..clients).map(|n| client_file(dir, n)));
    v
}

#[test]
fn zero_rounds_leaves_init_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(2);
    cfg.rounds = 0;
    run_training(cfg, tmp.path(), false).unwrap();
    for (a, b) in artifact_files(tmp.path(), 2).iter().zip(artifact_files(&tmp.path().join("init"), 2)) {
        assert_eq!(read(a), read(&b));
    }
    assert_eq!(read_metrics(&tmp.path().join("metrics.jsonl")).unwrap().len(), 1);
    assert!(!tmp.path().join("checkpoints").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let cfg = FederationConfig {
        rounds: 4,
        ..small(2)
    };
    run_training(cfg.clone(), full.path(), false).unwrap();

    let part = tempfile::tempdir().unwrap();
    run_training(FederationConfig { rounds: 3, ..cfg.clone() }, part.path(), false).unwrap();
    // Newest checkpoint is round 3; add a stale line to make sure it is dropped.
    let ckpt = latest_checkpoint(part.path()).unwrap().unwrap();
    assert!(ckpt.ends_with("round_0003"));
    fs::remove_dir_all(&ckpt).unwrap();
    let mut f = fs::OpenOptions::new().append(true).open(part.path().join("metrics.jsonl")).unwrap();
    writeln!(f, "{{\"garbage\": true}}").unwrap();
    drop(f);
    let fed = run_training(cfg, part.path(), true).unwrap();
    assert_eq!(fed.round, 4);

    assert_eq!(read(&full.path().join("metrics.jsonl")), read(&part.path().join("metrics.jsonl")));
    assert_eq!(read(&full.path().join("ledger.csv")), read(&part.path().join("ledger.csv")));
    for (a, b) in artifact_files(full.path(), 2).iter().zip(artifact_files(part.path(), 2)) {
        assert_eq!(read(a), read(&b), "{} differs", a.display());
    }
}

#[test]
fn checkpoint_version_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = FederationConfig {
        rounds: 2,
        ..small(2)
    };
    run_training(cfg.clone(), tmp.path(), false).unwrap();
    let dir = latest_checkpoint(tmp.path()).unwrap().unwrap();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).unwrap().replacen("\"version\": 1", "\"version\": 9", 1);
    fs::write(&path, text).unwrap();
    let err = load_checkpoint(&dir, cfg.clone()).unwrap_err();
    assert!(matches!(err, Error::CheckpointVersion { found: 9, expected: 1 }));

    let other = FederationConfig { seed: 99, ..cfg };
    fs::write(&path, fs::read_to_string(&path).unwrap().replacen("\"version\": 9", "\"version\": 1", 1)).unwrap();
    assert_eq!(load_checkpoint(&dir, other).unwrap_err().exit_code(), 2);
}

#[test]
fn saved_models_reload() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = FederationConfig {
        rounds: 1,
        ..small(2)
    };
    let fed = run_training(cfg.clone(), tmp.path(), false).unwrap();
    let cin = fed.data.fused_dims().unwrap().2;
    let loaded = read_models(tmp.path(), &cfg, cin).unwrap();
    for (s, (m, b)) in fed.clients.iter().zip(&loaded) {
        assert_eq!(m.tensors(), s.model.tensors());
        assert_eq!(b.patches, s.bank.patches);
    }
    let direct = fed.evaluate().unwrap();
    let again = evaluate_clients(loaded.iter().map(|(m, b)| (m, b)), &fed.data.test, &cfg.eval).unwrap();
    assert_eq!(direct, again);
}
