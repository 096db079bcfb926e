use std::path::Path;

use luna_core::autograd::Graph;
use luna_core::checkpoint::{self, Checkpoint, FORMAT_VERSION, MAGIC};
use luna_core::corpus::{generate_synthetic_corpus, Dialogue, Ontology, OntologySpec};
use luna_core::model::{AlignSource, Luna};
use luna_core::model_check::small_config;
use luna_core::optim::AdamState;
use luna_core::trainer::*;
use luna_core::Error;

fn corpus() -> (Vec<Dialogue>, Vec<Dialogue>, Ontology) {
    let (ds, onto) = generate_synthetic_corpus(3, 10, &OntologySpec::default()).unwrap();
    (ds[..8].to_vec(), ds[8..].to_vec(), onto)
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        max_turns: 10,
        max_seq_len: 96,
        seed: 9,
        ..small_config()
    }
}

fn run(cfg: &TrainConfig, dir: Option<&Path>, resume: bool, budget: Option<usize>) -> TrainSummary {
    let (train_set, dev, onto) = corpus();
    train(TrainRun {
        config: cfg,
        train: &train_set,
        dev: &dev,
        ontology: &onto,
        out_dir: dir,
        resume,
        epoch_budget: budget,
    })
    .unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn identical_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config();
    run(&cfg, Some(a.path()), false, None);
    run(&cfg, Some(b.path()), false, None);
    for f in [LOSS_CSV, EPOCHS_CSV, LAST_CKPT, BEST_CKPT] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config();
    let full = run(&cfg, Some(a.path()), false, None);
    let first = run(&cfg, Some(b.path()), false, Some(1));
    assert_eq!(first.state.epoch, 1);
    let per_epoch = first.state.step;
    assert_eq!(first.state.history[0].steps, per_epoch);
    let rest = run(&cfg, Some(b.path()), true, None);
    assert_eq!(rest.state.step, full.state.step);
    assert_eq!(rest.state.step, per_epoch * 3);
    assert_eq!(rest.state, full.state);
    for f in [LOSS_CSV, EPOCHS_CSV, LAST_CKPT, BEST_CKPT] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
    let steps: Vec<u64> = String::from_utf8(read(b.path(), LOSS_CSV))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=per_epoch * 3).collect::<Vec<_>>());
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    run(&cfg, Some(dir.path()), false, Some(1));
    let (train_set, dev, onto) = corpus();
    let other = TrainConfig {
        peak_lr_rest: 5e-4,
        ..cfg
    };
    let err = train(TrainRun {
        config: &other,
        train: &train_set,
        dev: &dev,
        ontology: &onto,
        out_dir: Some(dir.path()),
        resume: true,
        epoch_budget: None,
    });
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn training_reduces_loss() {
    let cfg = TrainConfig {
        epochs: 4,
        ..tiny_config()
    };
    let s = run(&cfg, None, false, None);
    let h = &s.state.history;
    assert_eq!(h.len(), 4);
    assert!(h[3].train_joint_loss < h[0].train_joint_loss, "{h:?}");
    assert!(h.iter().all(|r| r.train_joint_loss.is_finite()));
}

#[test]
fn frozen_schema_encoder_is_untouched() {
    let cfg = TrainConfig {
        epochs: 1,
        freeze_schema_encoders: true,
        ..tiny_config()
    };
    let (train_set, _, onto) = corpus();
    let vocab = build_vocab(&train_set, &onto);
    let init = Luna::new(cfg.model_config(), vocab, onto, cfg.seed).unwrap();
    let trained = run(&cfg, None, false, None).model;
    let mut frozen = 0;
    for ((_, a), (_, b)) in init.store.iter().zip(trained.store.iter()) {
        assert_eq!(a.name, b.name);
        if a.frozen {
            frozen += 1;
            assert!(a.name.starts_with("schema."));
            assert_eq!(a.tensor.data(), b.tensor.data(), "{} moved", a.name);
        } else if a.name.starts_with("value.") || a.name.starts_with("align.") {
            assert_ne!(a.tensor.data(), b.tensor.data(), "{} did not move", a.name);
        }
    }
    assert!(frozen > 0);
}

#[test]
fn epoch_order_is_a_function_of_seed_and_epoch() {
    let a = epoch_order(5, 2, 50);
    assert_eq!(a, epoch_order(5, 2, 50));
    assert_ne!(a, epoch_order(5, 3, 50));
    assert_ne!(a, epoch_order(6, 2, 50));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

#[test]
fn config_errors_name_the_field() {
    let msg = |json: &str| match TrainConfig::from_json(json, "cfg") {
        Err(e) => e.to_string(),
        Ok(_) => panic!("{json} accepted"),
    };
    assert!(msg(r#"{"heads": 3}"#).contains("heads"));
    assert!(msg(r#"{"d": 0}"#).contains("`d`"));
    assert!(msg(r#"{"warmup_proportion": 1.5}"#).contains("warmup_proportion"));
    assert!(msg(r#"{"peak_lr_rest": -1}"#).contains("peak_lr_rest"));
    assert!(msg(r#"{"learning_rate": 0.1}"#).contains("learning_rate"));
    assert_eq!(
        TrainConfig::from_json("{}", "cfg").unwrap(),
        TrainConfig::default()
    );
}

#[test]
fn pretrained_profile_values() {
    let c = TrainConfig::pretrained_hparams();
    assert_eq!(c.peak_lr_encoder, 3e-5);
    assert_eq!(c.peak_lr_rest, 1e-4);
    assert_eq!(c.warmup_proportion, 0.1);
    assert!(c.freeze_schema_encoders);
    assert_eq!(TrainConfig::default().warmup_proportion, 0.1);
}

fn tiny_model() -> (Luna, TrainConfig) {
    let cfg = tiny_config();
    let (train_set, _, onto) = corpus();
    let vocab = build_vocab(&train_set, &onto);
    (Luna::new(cfg.model_config(), vocab, onto, 4).unwrap(), cfg)
}

fn forward_bits(model: &Luna) -> Vec<u64> {
    let (train_set, _, _) = corpus();
    let ex = build_examples(
        &train_set[..2],
        &model.ontology,
        &model.vocab,
        96,
        Default::default(),
    )
    .unwrap();
    let mut bits = Vec::new();
    for e in &ex {
        let mut g = Graph::new();
        let schema = model.schema_encoding(&mut g, None).unwrap();
        let fwd = model
            .forward(&mut g, &schema, &e.seq, &e.previous, AlignSource::Predicted)
            .unwrap();
        bits.extend(fwd.align_probs.iter().map(|x| x.to_bits()));
        for p in model.predict(&g, &fwd) {
            bits.extend(p.p_value.iter().map(|x| x.to_bits()));
        }
    }
    bits
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (model, cfg) = tiny_model();
    let adam = AdamState::new(&model.store);
    let ck = Checkpoint::capture(&cfg, &model, &adam, &Default::default()).unwrap();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let (restored, _, state) = back.into_parts().unwrap();
    assert_eq!(state, Default::default());
    assert_eq!(forward_bits(&restored), forward_bits(&model));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &cfg, &model, &adam, &Default::default()).unwrap();
    let (loaded, cfg2) = checkpoint::load_model(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(forward_bits(&loaded), forward_bits(&model));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (model, cfg) = tiny_model();
    let adam = AdamState::new(&model.store);
    let bytes = Checkpoint::capture(&cfg, &model, &adam, &Default::default())
        .unwrap()
        .to_bytes()
        .unwrap();
    let integrity = |b: &[u8]| matches!(Checkpoint::from_bytes(b), Err(Error::Integrity(_)));
    assert!(integrity(&bytes[..bytes.len() - 3]));
    assert!(integrity(&bytes[..30]));
    assert!(integrity(&bytes[..5]));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(integrity(&flipped));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(integrity(&magic));
    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&version) {
        Err(Error::Integrity(m)) => assert!(m.contains("version")),
        other => panic!("{other:?}"),
    }
    let mut extended = bytes;
    extended.extend_from_slice(&[0; 8]);
    assert!(integrity(&extended));
}

#[test]
fn non_finite_parameters_are_reported() {
    let (mut model, cfg) = tiny_model();
    let id = model.store.id("value.proj.weight").unwrap();
    model.store.get_mut(id).tensor.data_mut()[0] = f64::NAN;
    let (train_set, _, _) = corpus();
    let ex = build_examples(
        &train_set[..1],
        &model.ontology,
        &model.vocab,
        96,
        Default::default(),
    )
    .unwrap();
    let batch: Vec<&Example> = ex.iter().collect();
    let mut g = Graph::new();
    assert!(matches!(
        joint_loss(&model, &mut g, None, &batch, &cfg),
        Err(Error::NonFinite(_))
    ));
}
