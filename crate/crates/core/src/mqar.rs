//! Multi-query associative recall: data generation and the training driver.
//!
//! Token layout: `0` is padding, keys are `1..=key_vocab`, values follow.
//! A sequence holds `N` (key, value) pairs at the front, padding, then the
//! `N` keys again in random order at the very end. The target sits on each
//! query key and is its paired value.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::model::{Adam, Batch, FusionMode, LrSchedule, Model, ModelConfig, TrainStep};
use crate::real::Real;

pub const PAD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarConfig {
    pub seq_len: usize,
    pub num_pairs: usize,
    pub key_vocab: usize,
    pub value_vocab: usize,
    pub num_sequences: usize,
    pub seed: u64,
}

impl MqarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return config("need at least one pair");
        }
        if 3 * self.num_pairs > self.seq_len {
            return config(format!(
                "{} pairs and their queries do not fit in {} positions",
                self.num_pairs, self.seq_len
            ));
        }
        if self.key_vocab < self.num_pairs {
            return config(format!(
                "key vocab {} is too small for {} distinct keys",
                self.key_vocab, self.num_pairs
            ));
        }
        if self.value_vocab == 0 {
            return config("value vocab must be positive");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.key_vocab + self.value_vocab
    }

    pub fn first_value(&self) -> u32 {
        1 + self.key_vocab as u32
    }

    pub fn first_query(&self) -> usize {
        self.seq_len - self.num_pairs
    }
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A pure function of the config.
pub fn generate(cfg: &MqarConfig) -> Result<Batch> {
    cfg.validate()?;
    let (t, n) = (cfg.seq_len, cfg.num_pairs);
    let mut tokens = Array2::from_elem((cfg.num_sequences, t), PAD);
    let mut targets = Array2::from_elem((cfg.num_sequences, t), -1i32);
    let first_value = cfg.first_value();
    for s in 0..cfg.num_sequences {
        let mut rng = sequence_rng(cfg.seed, s);
        let keys: Vec<u32> = index::sample(&mut rng, cfg.key_vocab, n)
            .into_iter()
            .map(|k| k as u32 + 1)
            .collect();
        let values: Vec<u32> = (0..n)
            .map(|_| first_value + rng.random_range(0..cfg.value_vocab as u32))
            .collect();
        for i in 0..n {
            tokens[[s, 2 * i]] = keys[i];
            tokens[[s, 2 * i + 1]] = values[i];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (j, &i) in order.iter().enumerate() {
            let pos = cfg.first_query() + j;
            tokens[[s, pos]] = keys[i];
            targets[[s, pos]] = values[i] as i32;
        }
    }
    Ok(Batch { tokens, targets })
}

/// Smallest distance from a query to the value it must recall.
pub fn min_answer_distance(data: &Batch) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (row_tok, row_tgt) in data.tokens.outer_iter().zip(data.targets.outer_iter()) {
        for (t, &y) in row_tgt.iter().enumerate() {
            if y < 0 {
                continue;
            }
            let key = row_tok[t];
            let pair = (0..t).find(|&p| row_tok[p] == key)?;
            let d = t - (pair + 1);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

/// True when every answer lies strictly before the attention window of its query.
pub fn answers_outside_window(data: &Batch, window: usize) -> bool {
    min_answer_distance(data).is_some_and(|d| d >= window)
}

/// `(accuracy %, σ)` of a uniform random guesser over the value vocabulary.
pub fn chance_accuracy(data: &Batch, cfg: &MqarConfig, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = data.target_positions();
    let hits = targets
        .iter()
        .filter(|&&(_, _, y)| {
            cfg.first_value() + rng.random_range(0..cfg.value_vocab as u32) == y as u32
        })
        .count();
    let p = 1.0 / cfg.value_vocab as f64;
    let n = targets.len() as f64;
    (100.0 * hits as f64 / n, 100.0 * (p * (1.0 - p) / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    pub precision: Precision,
    /// When false the adapters receive no gradient.
    pub surrogate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: MqarConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// C=128, T=512, W=32, M=4, 32 pairs over 64 keys and 64 values.
    pub fn full(mode: FusionMode, seed: u64) -> Self {
        Self::scaled(mode, seed, 128, 512, 32, 32, 10, 1000)
    }

    /// C=64, T=128, W=16, 8 pairs.
    pub fn smoke(mode: FusionMode, seed: u64) -> Self {
        Self::scaled(mode, seed, 64, 128, 16, 8, 10, 2000)
    }

    #[allow(clippy::too_many_arguments)]
    fn scaled(
        mode: FusionMode,
        seed: u64,
        dim: usize,
        seq_len: usize,
        window: usize,
        pairs: usize,
        epochs: usize,
        train_sequences: usize,
    ) -> Self {
        let data = MqarConfig {
            seq_len,
            num_pairs: pairs,
            key_vocab: 64,
            value_vocab: 64,
            num_sequences: train_sequences,
            seed,
        };
        let mut model = ModelConfig::new(data.vocab_size(), dim, mode);
        model.window = window;
        model.seed = seed;
        let train = TrainConfig {
            epochs,
            train_sequences,
            val_sequences: 200,
            batch_size: 4,
            micro_batch: 4,
            lr_peak: 3e-4,
            lr_floor: 3e-5,
            warmup_steps: 0,
            clip_norm: Some(1.0),
            precision: Precision::F32,
            surrogate: true,
        };
        Self { model, data, train }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.vocab < self.data.vocab_size() {
            return config("model vocabulary is smaller than the data vocabulary");
        }
        let t = &self.train;
        if t.batch_size == 0 || t.micro_batch == 0 || t.train_sequences == 0 || t.val_sequences == 0
        {
            return config("batch sizes and split sizes must be positive");
        }
        if !(t.lr_peak >= 0.0 && t.lr_floor >= 0.0) {
            return config("learning rates must be non-negative");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.train_sequences.div_ceil(self.train.batch_size)
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.train.lr_peak,
            floor: self.train.lr_floor,
            warmup_steps: self.train.warmup_steps,
            total_steps: self.steps_per_epoch() * self.train.epochs,
        }
    }

    /// Train and held-out splits; the validation seed is derived so the
    /// splits never share a generator stream.
    pub fn datasets(&self) -> Result<(Batch, Batch)> {
        let mut train = self.data;
        train.num_sequences = self.train.train_sequences;
        let mut val = train;
        val.num_sequences = self.train.val_sequences;
        val.seed = self.data.seed ^ 0x9e37_79b9_7f4a_7c15;
        Ok((generate(&train)?, generate(&val)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub mode: FusionMode,
    pub seed: u64,
    pub seconds: f64,
}

/// Accuracy in percent over all query positions.
pub fn validation_accuracy<F: Real>(
    model: &Model<F>,
    val: &Batch,
    batch_size: usize,
) -> Result<f64> {
    let rows = val.dim().0;
    let (mut n, mut correct) = (0usize, 0usize);
    for lo in (0..rows).step_by(batch_size.max(1)) {
        let (_, k, c) = model.evaluate(&val.slice(lo, (lo + batch_size).min(rows)))?;
        n += k;
        correct += c;
    }
    Ok(if n == 0 {
        0.0
    } else {
        100.0 * correct as f64 / n as f64
    })
}

/// Trains the configured variant, reporting each epoch to `on_epoch`.
/// A divergence aborts with the error after the completed epochs were reported.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    run_and_save(cfg, on_epoch, None)
}

/// [`run_experiment`], then writes the trained parameters to `checkpoint`.
pub fn run_and_save(
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
    checkpoint: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg, on_epoch, checkpoint),
        Precision::F64 => run_typed::<f64>(cfg, on_epoch, checkpoint),
    }
}

fn run_typed<F: Real>(
    cfg: &ExperimentConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
    checkpoint: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    let (train, val) = cfg.datasets()?;
    let mut model = Model::<F>::new(cfg.model.clone())?;
    let mut opt = Adam::new(&model.params);
    let schedule = cfg.schedule();
    let mut order: Vec<usize> = (0..train.dim().0).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.model.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch = gather_rows(&train, chunk);
            let step = TrainStep {
                lr: schedule.at(opt.steps()),
                clip_norm: cfg.train.clip_norm,
                micro_batch: cfg.train.micro_batch,
                surrogate: cfg.train.surrogate,
            };
            loss_sum += model.train_step(&batch, &mut opt, &step)?;
            steps += 1;
        }
        let val_acc = validation_accuracy(&model, &val, cfg.train.batch_size)?;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / steps.max(1) as f64,
            val_acc,
            mode: cfg.model.mode,
            seed: cfg.model.seed,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
    }
    if let Some(path) = checkpoint {
        crate::checkpoint::save(&model, path)?;
    }
    Ok(history)
}

pub fn gather_rows(data: &Batch, rows: &[usize]) -> Batch {
    Batch {
        tokens: data.tokens.select(ndarray::Axis(0), rows),
        targets: data.targets.select(ndarray::Axis(0), rows),
    }
}

/// `mode,seed,epochs,final_loss,final_val_acc,best_val_acc,seconds`
pub fn csv_summary(runs: &[Vec<EpochMetrics>]) -> String {
    let mut s = String::from("mode,seed,epochs,final_loss,final_val_acc,best_val_acc,seconds\n");
    for run in runs {
        let Some(last) = run.last() else { continue };
        let best = run.iter().map(|m| m.val_acc).fold(0.0, f64::max);
        let secs: f64 = run.iter().map(|m| m.seconds).sum();
        s.push_str(&format!(
            "{},{},{},{:.6},{:.2},{:.2},{:.1}\n",
            last.mode, last.seed, last.epoch, last.loss, last.val_acc, best, secs
        ));
    }
    s
}
