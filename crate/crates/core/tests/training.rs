use afrcnn::audio::{synth_dataset, Utterance};
use afrcnn::checkpoint::Checkpoint;
use afrcnn::gradcheck::tiny_config;
use afrcnn::model::ModelConfig;
use afrcnn::objectives::{Aggregate, MetricReport};
use afrcnn::params::ParamStore;
use afrcnn::trainer::{batch_loss_and_grads, evaluate, train, Adam, Grads, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use afrcnn::{Error, Tensor};

fn data(n: usize) -> Vec<Utterance> {
    synth_dataset(n, 11, 0.5, 8000, (-5.0, 5.0)).unwrap()
}

fn tcfg(batch: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        crop_s: Some(0.25),
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_solves_a_quadratic() {
    let mut p = ParamStore::<f64>::default();
    p.insert("x", Tensor::from_vec(&[1], vec![0.5]).unwrap());
    let mut adam = Adam::new(&p);
    for _ in 0..200 {
        let x = p.get("x").unwrap().data()[0];
        let mut g = Grads::new();
        g.insert("x".into(), Tensor::from_vec(&[1], vec![2.0 * x]).unwrap());
        adam.update(&mut p, &g, 1e-2).unwrap();
    }
    let x = p.get("x").unwrap().data()[0];
    assert!(x.abs() < 0.05, "{x}");
}

#[test]
fn small_step_decreases_loss() {
    let set = data(2);
    let mut t = Trainer::new(tiny_config(), TrainConfig { lr0: 1e-5, ..tcfg(2) }).unwrap();
    let batch = t.batch(&set, 0);
    let (before, _) = batch_loss_and_grads(&t.model, &batch).unwrap();
    t.train_step(&set).unwrap();
    let (after, _) = batch_loss_and_grads(&t.model, &batch).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn resume_reproduces_losses() {
    let set = data(5);
    let mut straight = Trainer::new(tiny_config(), tcfg(2)).unwrap();
    for _ in 0..3 {
        straight.train_step(&set).unwrap();
    }
    let bytes = straight.checkpoint(1, None).to_bytes().unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), tcfg(2)).unwrap();
    for _ in 0..5 {
        let a = straight.train_step(&set).unwrap();
        let b = resumed.train_step(&set).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.step, b.step);
    }
    assert_eq!(straight.model.store, resumed.model.store);
}

#[test]
fn one_epoch_takes_ceil_steps() {
    let dir = tempfile::tempdir().unwrap();
    let set = data(5);
    let cfg = TrainConfig {
        epochs: 1,
        out_dir: dir.path().to_path_buf(),
        ..tcfg(2)
    };
    let mut log = Vec::new();
    let out = train(tiny_config(), cfg, &set, &[], &mut log).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].step, 3);
    assert_eq!(out.best.step, 3);
    assert!(out.best.score.is_some());
    assert!(dir.path().join(BEST_CHECKPOINT).exists());
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn batches_depend_only_on_step() {
    let set = data(6);
    let t = Trainer::new(tiny_config(), tcfg(4)).unwrap();
    assert_eq!(t.batch(&set, 7), t.batch(&set, 7));
    assert_eq!(t.batch(&set, 1).len(), 2);
    assert_ne!(t.batch(&set, 0), t.batch(&set, 2));
    for ex in t.batch(&set, 3) {
        assert_eq!(ex.mix.len(), 2000);
        assert_eq!(ex.refs.len(), 2);
    }
}

#[test]
fn nan_loss_aborts_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let set = data(2);
    let cfg = TrainConfig {
        epochs: 3,
        out_dir: dir.path().to_path_buf(),
        ..tcfg(2)
    };
    let first = train(tiny_config(), cfg.clone(), &set, &[], &mut Vec::new()).unwrap();
    assert_eq!(first.log.len(), 3);
    let kept = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();

    let mut poisoned = set.clone();
    poisoned[1].mix.fill(f32::NAN);
    let err = match train(tiny_config(), cfg, &poisoned, &[], &mut Vec::new()) {
        Err(e) => e,
        Ok(_) => panic!("expected abort"),
    };
    assert!(matches!(&err, Error::NonFinite { .. }), "{err}");
    assert!(err.to_string().contains(&dir.path().display().to_string()));
    assert!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap() == kept);
    assert!(Checkpoint::load(dir.path().join(BEST_CHECKPOINT)).unwrap().to_model().is_ok());
}

#[test]
fn evaluation_identities() {
    let set = data(3);
    let cfg = ModelConfig {
        speakers: 2,
        ..tiny_config()
    };
    let model = afrcnn::model::SeparationModel::<f32>::new(cfg, 1).unwrap();
    let (rows, agg) = evaluate(&model, &set).unwrap();
    assert_eq!(rows.len(), 3);
    let mean = rows.iter().map(|r| r.si_snri).sum::<f64>() / 3.0;
    assert!((agg.si_snri.mean - mean).abs() < 1e-12);

    let as_mix: Vec<MetricReport> = set
        .iter()
        .map(|u| MetricReport::compute(u.id.clone(), &[u.mix.clone(), u.mix.clone()], &u.sources, &u.mix).unwrap())
        .collect();
    assert_eq!(Aggregate::of(&as_mix).si_snri.mean, 0.0);
}

#[test]
fn rejects_bad_train_config() {
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr0: -1.0, ..TrainConfig::default() },
        TrainConfig { decay_period: 0, ..TrainConfig::default() },
        TrainConfig { device: "gpu".into(), ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
