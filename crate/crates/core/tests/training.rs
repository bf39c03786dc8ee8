//! End-to-end training on tiny splits: determinism, numeric aborts, ramp
//! bookkeeping, model selection and checkpoints.

mod common;

use common::small_split;
use leci_core::checkpoint;
use leci_core::exec::{with_threads, Exec};
use leci_core::graph::Batch;
use leci_core::model::AnyModel;
use leci_core::train::{train_erm_with, train_leci_with, EpochLog, RampShape, TrainConfig};
use leci_core::Error;

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        warmup_epochs: 2,
        batch_size: 16,
        hidden_dim: 8,
        num_layers: 2,
        shards: 3,
        seed,
        info_weight: 0.1,
        ..TrainConfig::default()
    }
}

fn selected_epoch(logs: &[EpochLog], key: impl Fn(&EpochLog) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for l in logs {
        if let Some(v) = key(l) {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((l.epoch, v));
            }
        }
    }
    best.map(|(e, _)| e)
}

#[test]
fn identical_seeds_reproduce_logs_and_parameters_bitwise() {
    let split = small_split(11);
    let cfg = tiny(3);
    let a = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap();
    let b = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap();
    let c = with_threads(3, || train_leci_with(&split, &cfg, cfg.objective(), Exec::Parallel).unwrap());
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.logs, c.logs);
    assert_eq!(a.final_model, c.final_model);
    assert_eq!(serde_json::to_string(&a.logs).unwrap(), serde_json::to_string(&c.logs).unwrap());
    let other = train_leci_with(&split, &tiny(4), cfg.objective(), Exec::Sequential).unwrap();
    assert_ne!(a.logs, other.logs);
}

#[test]
fn ramp_is_recorded_per_epoch() {
    let split = small_split(12);
    for shape in [RampShape::Linear, RampShape::DannSigmoid] {
        let cfg = TrainConfig {
            ramp_shape: shape,
            ..tiny(1)
        };
        let out = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap();
        for l in &out.logs[..cfg.warmup_epochs] {
            assert_eq!((l.lambda_e, l.lambda_l, l.lambda_pfsc), (0.0, 0.0, 0.0));
        }
        let last = out.logs.last().unwrap();
        assert_eq!(last.lambda_e, cfg.lambda_e_max);
        assert_eq!(last.lambda_l, cfg.lambda_l_max);
        assert!(out.logs.windows(2).all(|w| w[0].lambda_e <= w[1].lambda_e));
        assert!(out.logs.iter().all(|l| l.l_e.is_some() && l.l_l.is_some() && l.l_pfsc.is_some() && l.l_info.is_some()));
    }
}

#[test]
fn selection_follows_the_first_best_validation_epoch() {
    let split = small_split(13);
    let cfg = tiny(2);
    let out = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap();
    assert_eq!(out.by_ood_val.epoch, selected_epoch(&out.logs, |l| l.ood_val_acc));
    assert_eq!(out.by_id_val.epoch, selected_epoch(&out.logs, |l| l.id_val_acc));
    let e = out.by_ood_val.epoch.unwrap();
    assert_eq!(out.by_ood_val.ood_test_acc, out.logs[e].ood_test_acc);
    let erm = train_erm_with(&split, &cfg, Exec::Sequential).unwrap();
    assert_eq!(erm.by_ood_val.epoch, selected_epoch(&erm.logs, |l| l.ood_val_acc));
    assert!(erm.logs.iter().all(|l| l.l_e.is_none()));
}

#[test]
fn strict_alternation_trains_and_stays_deterministic() {
    let split = small_split(14);
    let cfg = TrainConfig {
        strict_alternation: true,
        epochs: 3,
        warmup_epochs: 1,
        ..tiny(5)
    };
    let a = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap();
    let b = train_leci_with(&split, &cfg, cfg.objective(), Exec::Parallel).unwrap();
    assert_eq!(a.logs, b.logs);
    let joint = train_leci_with(&split, &TrainConfig { strict_alternation: false, ..cfg.clone() }, cfg.objective(), Exec::Sequential).unwrap();
    assert_ne!(a.logs, joint.logs);
}

#[test]
fn divergence_aborts_naming_the_term_and_epoch() {
    let split = small_split(15);
    let cfg = TrainConfig {
        lr: 1e200,
        ..tiny(0)
    };
    match train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential) {
        Err(Error::Numeric(msg)) => {
            assert!(msg.contains("at epoch"), "{msg}");
            assert!(["L_", "gradient of", "selector"].iter().any(|k| msg.contains(k)), "{msg}");
        }
        other => panic!("expected a numeric failure, got {:?}", other.map(|o| o.logs.len())),
    }
    assert_eq!(Error::Numeric(String::new()).exit_code(), 3);
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let split = small_split(16);
    let cfg = TrainConfig {
        warmup_epochs: 9,
        ..tiny(0)
    };
    let err = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.starts_with("warmup_epochs")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn checkpoint_reloads_to_identical_predictions() {
    let split = small_split(17);
    let cfg = tiny(6);
    let out = train_leci_with(&split, &cfg, cfg.objective(), Exec::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = AnyModel::Leci(out.best_model);
    checkpoint::save(&model, serde_json::json!({"seed": 6}), &path).unwrap();
    let (back, extra) = checkpoint::load(&path).unwrap();
    assert_eq!(extra["seed"], 6);
    let batch = Batch::from_graphs(&split.ood_test).unwrap();
    assert_eq!(back.predict(&batch).unwrap(), model.predict(&batch).unwrap());
    let (AnyModel::Leci(a), AnyModel::Leci(b)) = (&back, &model) else {
        panic!("kind changed on reload");
    };
    assert_eq!(a.infer(&batch).unwrap(), b.infer(&batch).unwrap());
    assert!(checkpoint::load(dir.path().join("missing.ckpt")).is_err());
}
