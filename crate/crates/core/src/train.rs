//! Adam training over pair batches, checkpointing, and fold evaluation.
//!
//! Determinism contract: one (dataset, fold, config) triple produces
//! bit-identical parameters, logs and checkpoints on every run, regardless
//! of thread count. Per-sample gradients may be computed on worker threads,
//! but they are always reduced in sample order, and the only consumed
//! randomness (batch shuffling) comes from a checkpointed SplitMix64 state.
//! The learning rate follows the fixed schedule: `lr_initial` for the first
//! two epochs, `lr_after` from epoch three on.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::cft::NamedTensors;
use crate::data::{Dataset, PairSample, Relation};
use crate::error::{CfilError, Result};
use crate::metrics::{self, EvalReport};
use crate::network::{
    batch_from_images, loss_on_tape, CfilModel, ModelConfig, ModelParams, BackboneConfig,
    WidthScale, POSITIVE_CLASS,
};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::weighted::SignMode;

/// Adam moments, one (m, v) pair per trainable tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        AdamState {
            m: params
                .trainable()
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect(),
            v: params
                .trainable()
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.m[index], &self.v[index])
    }
}

/// One bias-corrected Adam update. Frozen tensors are not in the trainable
/// set and therefore never move.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let count = params.trainable().len();
    if grads.len() != count {
        return Err(CfilError::Contract(format!(
            "adam_step: {} gradient buffers for {count} trainable tensors",
            grads.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.trainable()[i].1.len() {
            return Err(CfilError::Contract(format!(
                "adam_step: gradient {i} has {} elements, parameter '{}' has {}",
                g.len(),
                params.trainable()[i].0,
                params.trainable()[i].1.len()
            )));
        }
    }
    state.t += 1;
    let b1 = T::of_f64(state.beta1);
    let b2 = T::of_f64(state.beta2);
    let one = T::one();
    let lr_t = T::of_f64(lr);
    let eps = T::of_f64(state.epsilon);
    let bc1 = T::of_f64(1.0 - state.beta1.powi(state.t as i32));
    let bc2 = T::of_f64(1.0 - state.beta2.powi(state.t as i32));
    for i in 0..count {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = params.trainable_values_mut(i);
        for ((pv, g), (mv, vv)) in p
            .iter_mut()
            .zip(&grads[i])
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = b1 * *mv + (one - b1) * *g;
            *vv = b2 * *vv + (one - b2) * *g * *g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Training hyperparameters around a [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    /// The learning rate drops after this epoch (the paper's schedule:
    /// after the second epoch).
    pub lr_switch_after_epoch: usize,
    /// Worker threads for per-sample passes; 0 means auto. Results do not
    /// depend on this value.
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            batch_size: 64,
            epochs: 20,
            lr_initial: 1e-3,
            lr_after: 5e-4,
            lr_switch_after_epoch: 2,
            threads: 0,
        }
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_switch_after_epoch {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_acc: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,mean_loss,train_acc";

pub fn render_train_log(log: &[EpochLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.lr, row.mean_loss, row.train_acc
        ));
    }
    out
}

pub fn write_train_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_train_log(log)).map_err(|e| CfilError::io(path, e))
}

fn resolve_threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(8)
    }
}

/// Run `f` over 0..len on up to `threads` workers, returning results in
/// index order. Work is claimed atomically; output order is fixed by index,
/// so the result does not depend on scheduling.
fn parallel_map_indexed<R, F>(len: usize, threads: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(len.max(1));
    if threads == 1 {
        return (0..len).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = (0..len).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= len {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Vec<f32>>,
}

fn sample_pass(model: &CfilModel<f32>, pair: &PairSample) -> Result<SampleResult> {
    let parent = batch_from_images::<f32>(&[&pair.parent_image])?;
    let child = batch_from_images::<f32>(&[&pair.child_image])?;
    let label = usize::from(pair.label.is_positive());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let pv = tape.leaf(parent);
    let cv = tape.leaf(child);
    let probs = model.forward_probs(&mut tape, &bound, pv, cv)?;
    let loss = loss_on_tape(&mut tape, probs, &[label])?;
    tape.backward(loss)?;
    let score = tape.value(probs).values()[POSITIVE_CLASS] as f64;
    Ok(SampleResult {
        loss: tape.value(loss).values()[0] as f64,
        correct: (score >= 0.5) == pair.label.is_positive(),
        grads: bound
            .trainable
            .iter()
            .map(|&v| tape.grad(v).expect("grads populated").to_vec())
            .collect(),
    })
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CfilModel<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub log: Vec<EpochLog>,
    shuffle_rng: SeededRng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(CfilError::Config("batch size must be >= 1".into()));
        }
        let model = CfilModel::new(config.model.clone())?;
        let adam = AdamState::new(&model.params);
        let shuffle_rng = SeededRng::new(config.model.seed).derive("shuffle", 0);
        Ok(Trainer {
            model,
            adam,
            config,
            epochs_done: 0,
            log: Vec::new(),
            shuffle_rng,
        })
    }

    /// Train for `epochs` more epochs on every fold except `fold`.
    pub fn run_epochs(&mut self, dataset: &Dataset, fold: u8, epochs: usize) -> Result<()> {
        let (train_pairs, _) = dataset.select_split(fold)?;
        let threads = resolve_threads(self.config.threads);
        for _ in 0..epochs {
            let epoch = self.epochs_done + 1;
            let lr = self.config.lr_for_epoch(epoch);
            let mut order: Vec<usize> = (0..train_pairs.len()).collect();
            self.shuffle_rng.shuffle(&mut order);

            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;
            for batch in order.chunks(self.config.batch_size) {
                let results = parallel_map_indexed(batch.len(), threads, |i| {
                    sample_pass(&self.model, train_pairs[batch[i]])
                })?;
                let scale = 1.0f32 / batch.len() as f32;
                let mut grads: Vec<Vec<f32>> = self
                    .model
                    .params
                    .trainable()
                    .iter()
                    .map(|(_, t)| vec![0.0f32; t.len()])
                    .collect();
                for r in &results {
                    loss_sum += r.loss;
                    correct += usize::from(r.correct);
                    for (acc, g) in grads.iter_mut().zip(&r.grads) {
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a += gv;
                        }
                    }
                }
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                adam_step(&mut self.model.params, &grads, &mut self.adam, lr)?;
            }
            self.log.push(EpochLog {
                epoch,
                lr,
                mean_loss: loss_sum / train_pairs.len() as f64,
                train_acc: correct as f64 / train_pairs.len() as f64,
            });
            self.epochs_done = epoch;
        }
        Ok(())
    }

    /// Serialize parameters, Adam moments, frozen backbone, and the resume
    /// header (seed, schedule, shuffle stream position).
    pub fn to_checkpoint(&self) -> Result<NamedTensors> {
        let mut c = NamedTensors::new();
        c.set_header("format", "cfil-checkpoint");
        c.set_header("seed", self.config.model.seed);
        c.set_header("width_scale", self.config.model.width_scale);
        c.set_header("sign_mode", self.config.model.sign_mode);
        c.set_header("backbone", self.config.model.backbone.to_header_value());
        c.set_header("input_side", self.config.model.input_side);
        c.set_header("batch_size", self.config.batch_size);
        c.set_header("lr_initial", self.config.lr_initial);
        c.set_header("lr_after", self.config.lr_after);
        c.set_header("lr_switch_after_epoch", self.config.lr_switch_after_epoch);
        c.set_header("epochs_done", self.epochs_done);
        c.set_header("adam_t", self.adam.t);
        c.set_header("shuffle_rng_state", self.shuffle_rng.state());
        for (i, (name, tensor)) in self.model.params.trainable().iter().enumerate() {
            c.push(name, tensor.clone());
            c.push(
                &format!("{name}.adam_m"),
                Tensor::new(tensor.shape().clone(), self.adam.m[i].clone())?,
            );
            c.push(
                &format!("{name}.adam_v"),
                Tensor::new(tensor.shape().clone(), self.adam.v[i].clone())?,
            );
        }
        for (name, tensor) in self.model.params.frozen() {
            c.push(name, tensor.clone());
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &NamedTensors) -> Result<Self> {
        if c.header("format") != Some("cfil-checkpoint") {
            return Err(CfilError::Incompatible(
                "container is not a cfil checkpoint".into(),
            ));
        }
        let parse_u64 = |key: &str| -> Result<u64> {
            c.require_header(key)?.parse().map_err(|_| {
                CfilError::Malformed(format!("checkpoint header '{key}' is not an integer"))
            })
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            c.require_header(key)?.parse().map_err(|_| {
                CfilError::Malformed(format!("checkpoint header '{key}' is not a number"))
            })
        };
        let model_config = ModelConfig {
            width_scale: WidthScale::parse(c.require_header("width_scale")?)?,
            sign_mode: SignMode::parse(c.require_header("sign_mode")?)?,
            backbone: BackboneConfig::from_header_value(c.require_header("backbone")?)?,
            input_side: parse_u64("input_side")? as usize,
            seed: parse_u64("seed")?,
        };
        let frozen: Vec<(String, Tensor<f32>)> = c
            .entries()
            .iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let mut model = CfilModel::from_frozen_tensors(model_config.clone(), frozen)?;

        let expect: Vec<(String, crate::shape::Shape)> = model
            .params
            .trainable()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().clone()))
            .collect();
        let mut m = Vec::with_capacity(expect.len());
        let mut v = Vec::with_capacity(expect.len());
        for (i, (name, shape)) in expect.iter().enumerate() {
            let stored = c.require(name)?;
            if stored.shape() != shape {
                return Err(CfilError::Incompatible(format!(
                    "checkpoint tensor '{name}' has shape {}, this configuration expects {}",
                    stored.shape(),
                    shape
                )));
            }
            model.params.set_trainable(i, stored.clone());
            m.push(c.require(&format!("{name}.adam_m"))?.values().to_vec());
            v.push(c.require(&format!("{name}.adam_v"))?.values().to_vec());
        }

        let mut config = TrainConfig::new(model_config);
        config.batch_size = parse_u64("batch_size")? as usize;
        config.lr_initial = parse_f64("lr_initial")?;
        config.lr_after = parse_f64("lr_after")?;
        config.lr_switch_after_epoch = parse_u64("lr_switch_after_epoch")? as usize;

        let mut adam = AdamState::new(&model.params);
        adam.m = m;
        adam.v = v;
        adam.t = parse_u64("adam_t")?;

        Ok(Trainer {
            model,
            adam,
            config,
            epochs_done: parse_u64("epochs_done")? as usize,
            log: Vec::new(),
            shuffle_rng: SeededRng::restore(parse_u64("shuffle_rng_state")?),
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Trainer::from_checkpoint(&NamedTensors::load(path)?)
    }
}

/// Train from scratch: fresh model, `config.epochs` epochs on folds != fold.
pub fn train(dataset: &Dataset, fold: u8, config: &TrainConfig) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run_epochs(dataset, fold, config.epochs)?;
    Ok(trainer)
}

/// Score one side of a split and build the fold's evaluation report
/// (overall and per-relation confusion at 0.5, ROC, AUC).
pub fn evaluate(
    model: &CfilModel<f32>,
    dataset: &Dataset,
    fold: u8,
    on_train: bool,
    threads: usize,
) -> Result<EvalReport> {
    let (train_pairs, test_pairs) = dataset.select_split(fold)?;
    let pairs = if on_train { train_pairs } else { test_pairs };
    if pairs.is_empty() {
        return Err(CfilError::Config(format!(
            "fold {fold} has no {} samples",
            if on_train { "training" } else { "test" }
        )));
    }
    let threads = resolve_threads(threads);
    let scores = parallel_map_indexed(pairs.len(), threads, |i| {
        let p = pairs[i];
        let parent = batch_from_images::<f32>(&[&p.parent_image])?;
        let child = batch_from_images::<f32>(&[&p.child_image])?;
        Ok(model.score_batch(&parent, &child)?[0])
    })?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label.is_positive()).collect();

    let counts = metrics::confusion(&scores, &labels, 0.5)?;
    let mut per_relation = Vec::new();
    for relation in Relation::ALL {
        let idx: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs[i].relation == relation)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        per_relation.push((relation, metrics::confusion(&s, &l, 0.5)?));
    }
    let roc = metrics::roc_curve(&scores, &labels)?;
    let auc = metrics::auc(&roc);
    Ok(EvalReport {
        fold,
        counts,
        per_relation,
        roc,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cft;
    use crate::data::{generate_dataset, SyntheticFamilyModel};

    fn tiny_train_config(seed: u64) -> TrainConfig {
        let mut model = ModelConfig {
            width_scale: WidthScale::new(1, 8).unwrap(),
            backbone: BackboneConfig::TinyConv { out_channels: 8 },
            ..ModelConfig::default()
        };
        model.seed = seed;
        let mut cfg = TrainConfig::new(model);
        cfg.batch_size = 4;
        cfg.epochs = 1;
        cfg
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        generate_dataset(
            &SyntheticFamilyModel {
                family_count: 10,
                latent_dim: 4,
                kin_strength: 0.9,
                noise_sigma: 0.05,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn adam_first_step_magnitude() {
        // First step with constant gradient g: |delta| = lr * |g| / (|g| + eps),
        // inside [0.999 lr, lr] for any |g| >= 1e-5.
        let cfg = tiny_train_config(3);
        let mut trainer = Trainer::new(cfg).unwrap();
        let before: Vec<f32> = trainer.model.params.trainable()[0].1.values().to_vec();
        let grads: Vec<Vec<f32>> = trainer
            .model
            .params
            .trainable()
            .iter()
            .map(|(_, t)| vec![0.5f32; t.len()])
            .collect();
        adam_step(&mut trainer.model.params, &grads, &mut trainer.adam, 1e-3).unwrap();
        let after = trainer.model.params.trainable()[0].1.values();
        for (b, a) in before.iter().zip(after) {
            let delta = (b - a).abs();
            assert!(
                (0.999e-3..=1.0001e-3).contains(&delta),
                "first-step delta {delta}"
            );
            assert!(a < b, "positive gradient must decrease the parameter");
        }
        assert_eq!(trainer.adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = tiny_train_config(4);
        let mut trainer = Trainer::new(cfg).unwrap();
        let before: Vec<Vec<f32>> = trainer
            .model
            .params
            .trainable()
            .iter()
            .map(|(_, t)| t.values().to_vec())
            .collect();
        let grads: Vec<Vec<f32>> = before.iter().map(|v| vec![0.0f32; v.len()]).collect();
        for _ in 0..5 {
            adam_step(&mut trainer.model.params, &grads, &mut trainer.adam, 1e-3).unwrap();
        }
        for (b, (_, a)) in before.iter().zip(trainer.model.params.trainable()) {
            assert_eq!(b, a.values());
        }
    }

    #[test]
    fn adam_rejects_misaligned_grads() {
        let cfg = tiny_train_config(5);
        let mut trainer = Trainer::new(cfg).unwrap();
        let err = adam_step(&mut trainer.model.params, &[], &mut trainer.adam, 1e-3).unwrap_err();
        assert!(matches!(err, CfilError::Contract(_)));
    }

    #[test]
    fn lr_schedule_is_exact() {
        let cfg = TrainConfig::new(ModelConfig::default());
        assert_eq!(cfg.lr_for_epoch(1), 0.001);
        assert_eq!(cfg.lr_for_epoch(2), 0.001);
        assert_eq!(cfg.lr_for_epoch(3), 0.0005);
        assert_eq!(cfg.lr_for_epoch(20), 0.0005);
    }

    #[test]
    fn two_runs_same_seed_bitwise_identical() {
        let ds = tiny_dataset(19);
        let a = train(&ds, 1, &tiny_train_config(7)).unwrap();
        let b = train(&ds, 1, &tiny_train_config(7)).unwrap();
        for ((na, ta), (nb, tb)) in a
            .model
            .params
            .trainable()
            .iter()
            .zip(b.model.params.trainable())
        {
            assert_eq!(na, nb);
            assert!(cft::bits_equal(ta, tb), "tensor {na} differs between runs");
        }
        assert_eq!(a.log, b.log);
        // And thread count does not change the result.
        let mut cfg = tiny_train_config(7);
        cfg.threads = 1;
        let c = train(&ds, 1, &cfg).unwrap();
        for ((_, ta), (_, tc)) in a
            .model
            .params
            .trainable()
            .iter()
            .zip(c.model.params.trainable())
        {
            assert!(cft::bits_equal(ta, tc), "thread count changed results");
        }
    }

    #[test]
    fn frozen_backbone_never_moves() {
        let ds = tiny_dataset(23);
        let cfg = tiny_train_config(11);
        let fresh = CfilModel::<f32>::new(cfg.model.clone()).unwrap();
        let trained = train(&ds, 2, &cfg).unwrap();
        for ((na, ta), (nb, tb)) in fresh
            .params
            .frozen()
            .iter()
            .zip(trained.model.params.frozen())
        {
            assert_eq!(na, nb);
            assert!(cft::bits_equal(ta, tb), "frozen tensor {na} changed");
        }
    }

    #[test]
    fn initial_loss_with_zero_head_is_ln2() {
        let ds = tiny_dataset(29);
        let cfg = tiny_train_config(13);
        let mut trainer = Trainer::new(cfg).unwrap();
        trainer.model.zero_head();
        let (train_pairs, _) = ds.select_split(1).unwrap();
        let mut loss_sum = 0.0;
        for p in &train_pairs {
            loss_sum += sample_pass(&trainer.model, p).unwrap().loss;
        }
        let mean = loss_sum / train_pairs.len() as f64;
        assert!(
            (mean - (2.0f64).ln()).abs() < 1e-6,
            "zero-head initial loss {mean}"
        );
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let ds = tiny_dataset(31);
        let trainer = train(&ds, 1, &tiny_train_config(17)).unwrap();
        let c = trainer.to_checkpoint().unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let restored = Trainer::from_checkpoint(&NamedTensors::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        let c2 = restored.to_checkpoint().unwrap();
        let mut buf2 = Vec::new();
        c2.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2, "checkpoint must round-trip byte-identically");
    }

    #[test]
    fn resume_equals_uninterrupted() {
        let ds = tiny_dataset(37);
        let mut cfg = tiny_train_config(19);
        cfg.epochs = 3;

        let mut full = Trainer::new(cfg.clone()).unwrap();
        full.run_epochs(&ds, 1, 3).unwrap();

        let mut part = Trainer::new(cfg).unwrap();
        part.run_epochs(&ds, 1, 2).unwrap();
        let ckpt = part.to_checkpoint().unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        resumed.run_epochs(&ds, 1, 1).unwrap();

        let mut a = Vec::new();
        full.to_checkpoint().unwrap().write_to(&mut a).unwrap();
        let mut b = Vec::new();
        resumed.to_checkpoint().unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b, "resumed training must equal uninterrupted training bitwise");
    }

    #[test]
    fn checkpoint_rejects_other_configuration() {
        let ds = tiny_dataset(41);
        let trainer = train(&ds, 1, &tiny_train_config(23)).unwrap();
        let mut c = trainer.to_checkpoint().unwrap();
        // Claim a different width scale: tensor shapes no longer match.
        let mut forged = NamedTensors::new();
        for (k, v) in c.header_entries() {
            forged.set_header(k, if k == "width_scale" { "1/4" } else { v });
        }
        for (n, t) in c.entries() {
            forged.push(n, t.clone());
        }
        c = forged;
        let err = Trainer::from_checkpoint(&c).unwrap_err();
        assert!(matches!(err, CfilError::Incompatible(_)), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("shape"), "error should name the dimension diff: {msg}");
    }

    #[test]
    fn evaluate_produces_consistent_report() {
        let ds = tiny_dataset(43);
        let trainer = train(&ds, 1, &tiny_train_config(29)).unwrap();
        let rep = evaluate(&trainer.model, &ds, 1, false, 0).unwrap();
        assert_eq!(rep.fold, 1);
        assert_eq!(rep.counts.total(), 4); // 10 families -> 2 per fold -> 2 pos + 2 neg
        let rep2 = evaluate(&trainer.model, &ds, 1, false, 1).unwrap();
        assert_eq!(rep, rep2, "evaluation must be deterministic");
        assert!((0.0..=1.0).contains(&rep.auc));
    }
}
