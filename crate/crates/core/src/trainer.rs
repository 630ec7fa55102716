//! Adam, gradient clipping, the step-decay schedule and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Utterance;
use crate::checkpoint::{AdamState, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeparationModel};
use crate::nnops::tape::{Graph, Var};
use crate::objectives::{pit_loss_grad, Aggregate, MetricReport};
use crate::par;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier applied every `decay_period` epochs.
    pub lr_decay: f64,
    pub decay_period: usize,
    pub clip_norm: f64,
    pub utterance_s: f64,
    /// Training crop length in seconds; full utterances when absent.
    pub crop_s: Option<f64>,
    pub seed: u64,
    pub device: String,
    pub train_dir: Option<PathBuf>,
    pub valid_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Validate every this many epochs.
    pub eval_every: usize,
    pub max_steps: Option<u64>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr0: 1e-3,
            lr_decay: 1.0 / 3.0,
            decay_period: 40,
            clip_norm: 5.0,
            utterance_s: 3.0,
            crop_s: None,
            seed: 0,
            device: "cpu".into(),
            train_dir: None,
            valid_dir: None,
            out_dir: PathBuf::from("runs"),
            eval_every: 1,
            max_steps: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("decay_period", self.decay_period),
            ("eval_every", self.eval_every),
            ("threads", self.threads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        let reals = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("clip_norm", self.clip_norm),
            ("utterance_s", self.utterance_s),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.crop_s.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("crop_s must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("device '{}' is not supported (cpu only)", self.device)));
        }
        Ok(())
    }

    /// `lr0 * lr_decay^floor(epoch / decay_period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_period) as i32)
    }
}

pub type Grads<T> = BTreeMap<String, Tensor<T>>;

/// Scales every gradient so the global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| Scalar::to_f64(g.sum_sq())).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        grads.values_mut().for_each(|g| g.scale(s));
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::default();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update. Parameters without a gradient entry are
    /// treated as having a zero gradient. Non-finite gradients abort before
    /// anything is modified.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.clone(),
                    detail: format!("gradient element {i} is {}", g.data()[i]),
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed");
            let m = self.m.get_mut(&name).ok_or_else(|| Error::Usage(format!("no moment for {name}")))?;
            let v = self.v.get_mut(&name).expect("moments share names");
            let g = grads.get(&name);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| Scalar::to_f64(g.data()[i]));
                let mi = self.beta1 * Scalar::to_f64(m.data()[i]) + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * Scalar::to_f64(v.data()[i]) + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = T::from_f64(mi);
                v.data_mut()[i] = T::from_f64(vi);
                let delta = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let pi = Scalar::to_f64(p.data()[i]) - delta;
                p.data_mut()[i] = T::from_f64(pi);
            }
        }
        Ok(())
    }
}

/// One training example after cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub mix: Vec<f32>,
    pub refs: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean PIT loss over a batch and the gradient of that mean.
pub fn batch_loss_and_grads(model: &SeparationModel<f32>, batch: &[Example]) -> Result<(f64, Grads<f32>)> {
    let scale = 1.0 / batch.len() as f64;
    let per_item = par::map_collect(batch, |ex| -> Result<(f64, Grads<f32>)> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, ex.mix.len()], ex.mix.clone())?);
        let out = model.forward_graph(&mut g, x)?;
        let ests: Vec<Vec<f32>> = out.estimates.iter().map(|&v| g.value(v).data().to_vec()).collect();
        let (pit, dl) = pit_loss_grad(&ests, &ex.refs)?;
        let seeds: Vec<(Var, Tensor<f32>)> = out
            .estimates
            .iter()
            .zip(dl)
            .map(|(&v, d)| {
                let d: Vec<f32> = d.iter().map(|x| (x * scale) as f32).collect();
                Ok((v, Tensor::from_vec(&[1, d.len()], d)?))
            })
            .collect::<Result<_>>()?;
        Ok((pit.loss, g.backward(&seeds)?.params()))
    });
    let mut loss = 0.0;
    let mut total: Grads<f32> = BTreeMap::new();
    for item in per_item {
        let (l, grads) = item?;
        loss += l * scale;
        for (name, gr) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&gr),
                None => {
                    total.insert(name, gr);
                }
            }
        }
    }
    Ok((loss, total))
}

pub struct Trainer {
    pub model: SeparationModel<f32>,
    pub adam: Adam<f32>,
    pub cfg: TrainConfig,
    /// Optimizer steps taken.
    pub step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SeparationModel::new(model_cfg, cfg.seed)?;
        let adam = Adam::new(&model.store);
        Ok(Trainer {
            model,
            adam,
            cfg,
            step: 0,
        })
    }

    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.to_model()?;
        let mut adam = Adam::new(&model.store);
        if let Some(a) = &ckpt.adam {
            adam.step = a.step;
            adam.m = a.m.clone();
            adam.v = a.v.clone();
        }
        Ok(Trainer {
            model,
            adam,
            cfg,
            step: ckpt.step,
        })
    }

    pub fn steps_per_epoch(&self, items: usize) -> u64 {
        items.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn epoch_of(&self, step: u64, items: usize) -> usize {
        (step / self.steps_per_epoch(items).max(1)) as usize
    }

    /// Examples for global step `step`. Depends only on the seed, the epoch
    /// and the position within the epoch, so a resumed run sees the same data.
    pub fn batch(&self, data: &[Utterance], step: u64) -> Vec<Example> {
        let spe = self.steps_per_epoch(data.len());
        let epoch = step / spe;
        let pos = (step % spe) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let starts: Vec<f64> = (0..data.len()).map(|_| rng.random::<f64>()).collect();
        let picked = &order[pos * self.cfg.batch_size..((pos + 1) * self.cfg.batch_size).min(data.len())];
        let shortest = picked.iter().map(|&i| data[i].mix.len()).min().unwrap_or(0);
        let crop = self
            .cfg
            .crop_s
            .map(|c| (c * data[picked[0]].sample_rate as f64).round() as usize)
            .unwrap_or(shortest)
            .min(shortest);
        picked
            .iter()
            .map(|&i| {
                let u = &data[i];
                let at = ((u.mix.len() - crop) as f64 * starts[i]).floor() as usize;
                Example {
                    mix: u.mix[at..at + crop].to_vec(),
                    refs: u.sources.iter().map(|s| s[at..at + crop].to_vec()).collect(),
                }
            })
            .collect()
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let epoch = self.epoch_of(self.step, data.len());
        let lr = self.cfg.lr_at(epoch);
        let batch = self.batch(data, self.step);
        let (loss, mut grads) = batch_loss_and_grads(&self.model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                tensor: "loss".into(),
                detail: format!("loss is {loss} at step {}", self.step),
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        self.adam.update(&mut self.model.store, &grads, lr)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            epoch,
            lr,
            loss,
            grad_norm,
        })
    }

    pub fn checkpoint(&self, epoch: usize, score: Option<f64>) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            params: self.model.store.clone(),
            adam: Some(AdamState {
                step: self.adam.step,
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
            epoch,
            step: self.step,
            score,
        }
    }
}

/// Per-utterance metrics on full-length mixtures plus their aggregate.
pub fn evaluate(model: &SeparationModel<f32>, data: &[Utterance]) -> Result<(Vec<MetricReport>, Aggregate)> {
    let rows = par::map_collect(data, |u| -> Result<MetricReport> {
        let ests = model.forward(&u.mix)?;
        MetricReport::compute(u.id.clone(), &ests, &u.sources, &u.mix)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::of(&rows);
    Ok((rows, agg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_si_snri: Option<f64>,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tstep\tlr\ttrain_loss\tvalid_si_snri";

    pub fn row(&self) -> String {
        let v = self.valid_si_snri.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!("{}\t{}\t{:.3e}\t{:.4}\t{v}", self.epoch, self.step, self.lr, self.train_loss)
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Full loop: epochs of shuffled batches, validation every `eval_every`
/// epochs, best-by-SI-SNRi retention. `out_dir` receives `best.ckpt` and
/// `last.ckpt`; a non-finite loss stops the run with both files intact.
pub fn train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let rate = train_set[0].sample_rate;
    if rate != model_cfg.sample_rate {
        return Err(Error::Usage(format!(
            "data sample rate {rate} Hz differs from model sample rate {} Hz",
            model_cfg.sample_rate
        )));
    }
    let valid = if valid_set.is_empty() { train_set } else { valid_set };
    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut t = Trainer::new(model_cfg, cfg)?;
    let spe = t.steps_per_epoch(train_set.len());
    let mut best: Option<Checkpoint> = None;
    let mut logs = Vec::new();
    let io = |e: std::io::Error| Error::io("<log>", e);
    writeln!(log, "{}", EpochLog::HEADER).map_err(io)?;
    for epoch in 0..t.cfg.epochs {
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for _ in 0..spe {
            if t.cfg.max_steps.is_some_and(|m| t.step >= m) {
                break;
            }
            let s = t.train_step(train_set).map_err(|e| match e {
                Error::NonFinite { tensor, detail } => Error::NonFinite {
                    tensor,
                    detail: format!("{detail}; last good checkpoint kept in {}", out_dir.display()),
                },
                other => other,
            })?;
            loss_sum += s.loss;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        let last_epoch = epoch + 1 == t.cfg.epochs || t.cfg.max_steps.is_some_and(|m| t.step >= m);
        let score = if (epoch + 1) % t.cfg.eval_every == 0 || last_epoch {
            Some(evaluate(&t.model, valid)?.1.si_snri.mean)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            step: t.step,
            lr: t.cfg.lr_at(epoch),
            train_loss: loss_sum / steps as f64,
            valid_si_snri: score,
        };
        writeln!(log, "{}", entry.row()).map_err(io)?;
        logs.push(entry);
        let ck = t.checkpoint(epoch + 1, score);
        ck.save(out_dir.join(LAST_CHECKPOINT))?;
        if let Some(s) = score {
            if best.as_ref().is_none_or(|b| b.score.is_none_or(|bs| s > bs)) {
                ck.save(out_dir.join(BEST_CHECKPOINT))?;
                best = Some(ck);
            }
        }
        if last_epoch {
            break;
        }
    }
    let best = best.unwrap_or_else(|| t.checkpoint(t.epoch_of(t.step, train_set.len()), None));
    Ok(TrainOutcome { best, log: logs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.insert("x", Tensor::from_vec(&[1], vec![v]).unwrap());
        s
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut p = scalar_store(0.5);
        let mut a = Adam::new(&p);
        let mut g = Grads::new();
        g.insert("x".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap());
        a.update(&mut p, &g, 1e-3).unwrap();
        let dx = p.get("x").unwrap().data()[0] - 0.5;
        assert!((dx + 1e-3).abs() < 1e-9, "{dx}");
        let before = p.clone();
        let m0 = a.m.get("x").unwrap().data()[0];
        g.insert("x".to_string(), Tensor::from_vec(&[1], vec![0.0]).unwrap());
        a.update(&mut p, &g, 1e-3).unwrap();
        assert!((a.m.get("x").unwrap().data()[0] - 0.9 * m0).abs() < 1e-15);
        // bias-corrected first moment is nonzero here, so the parameter keeps moving
        assert_ne!(p, before);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = scalar_store(0.0);
        let mut a = Adam::new(&p);
        let mut g = Grads::new();
        g.insert("x".to_string(), Tensor::from_vec(&[1], vec![f64::NAN]).unwrap());
        match a.update(&mut p, &g, 1e-3) {
            Err(Error::NonFinite { tensor, .. }) => assert_eq!(tensor, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping() {
        let mut g = Grads::new();
        g.insert("a".to_string(), Tensor::from_vec(&[2], vec![6.0f64, 8.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        let mut h = Grads::new();
        h.insert("a".to_string(), Tensor::from_vec(&[2], vec![0.0f64, 4.0]).unwrap());
        clip_global_norm(&mut h, 5.0);
        assert_eq!(h["a"].data(), &[0.0, 4.0]);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(39), 1e-3);
        assert!((c.lr_at(40) - 1e-3 / 3.0).abs() < 1e-18);
        assert!((c.lr_at(80) - 1e-3 / 9.0).abs() < 1e-18);
    }
}
