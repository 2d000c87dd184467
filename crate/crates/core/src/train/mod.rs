//! Minibatch SGD training with plateau learning-rate drops, validation
//! monitoring and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, TrainState, CHECKPOINT_VERSION};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{augment, compute_mean_image, gen_pairs, BalanceConfig, Corpus, OutputNormalizer, PairSet, Raster, Split};
use crate::error::{Error, Result};
use crate::knn::{Extractor, KnnIndex};
use crate::model::{batch_gradients, batch_loss, forward, McnnConfig, McnnParams, MatchOutput, Sample};
use crate::tensor::{sgd_step, ParamSet, SgdState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub initial_lr: f64,
    pub lr_drop_factor: f64,
    /// Epochs without validation improvement before the rate drops.
    pub plateau_patience: u32,
    /// Smallest decrease of the validation loss that counts as improvement.
    pub min_improvement: f64,
    pub max_epochs: u32,
    pub seed: u64,
    /// Neighbors retrieved per training query.
    pub k_train: usize,
    pub balance: BalanceConfig,
    /// Train on the four crop/mirror variants of each image.
    pub augment: bool,
    /// Optional cap on pairs visited per epoch (a fresh random subset each
    /// epoch); `None` visits all.
    pub pairs_per_epoch: Option<usize>,
    pub extractor: Extractor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0005,
            initial_lr: 0.01,
            lr_drop_factor: 10.0,
            plateau_patience: 3,
            min_improvement: 1e-4,
            max_epochs: 30,
            seed: 0,
            k_train: 8,
            balance: BalanceConfig::default(),
            augment: true,
            pairs_per_epoch: None,
            extractor: Extractor::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for the desk network on 64×64 synthetic corpora:
    /// a lower rate, longer patience and no augmentation.
    pub fn desk() -> Self {
        Self { initial_lr: 0.003, plateau_patience: 5, augment: false, ..Self::default() }
    }

    /// Hyper-parameters of the original large-scale protocol.
    pub fn full_scale() -> Self {
        Self { batch_size: 128, initial_lr: 0.0005, max_epochs: 50, k_train: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.initial_lr >= 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be finite and non-negative");
        }
        if !(self.lr_drop_factor > 1.0) {
            return bad("lr_drop_factor must exceed 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative");
        }
        if self.k_train == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return bad("k_train, max_epochs and plateau_patience must be positive");
        }
        if self.pairs_per_epoch == Some(0) {
            return bad("pairs_per_epoch must be positive when set");
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for r in log {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr).expect("writing to a String");
    }
    s
}

/// Retrieval structures and pairs derived from a corpus.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub mean: Raster,
    pub index: KnnIndex,
    pub train_pairs: PairSet,
    pub val_pairs: Option<PairSet>,
    pub normalizer: OutputNormalizer,
}

/// Builds the mean image and retrieval index over the training split, then
/// the training pairs (augmented queries, balanced) and validation pairs
/// (plain queries, unbalanced).
pub fn prepare(corpus: &Corpus, tc: &TrainConfig) -> Result<TrainingData> {
    tc.validate()?;
    let train = corpus.split(Split::Train);
    if train.len() < 2 {
        return Err(Error::Corpus(format!("need at least two training entries, found {}", train.len())));
    }
    let mean = compute_mean_image(train.iter().map(|e| &e.image))?;
    let index = KnnIndex::build(train.clone(), tc.extractor, None)?;
    let k = tc.k_train.min(train.len() - 1);
    let queries = if tc.augment {
        train.iter().flat_map(|e| augment(e)).collect()
    } else {
        train.iter().map(|&e| e.clone()).collect()
    };
    let train_pairs = gen_pairs(queries, &train, &index, tc.extractor, k, &mean, tc.balance, tc.seed)?;
    let val: Vec<_> = corpus.split(Split::Val).into_iter().cloned().collect();
    let val_pairs = if val.is_empty() {
        None
    } else {
        let no_balance = BalanceConfig { enabled: false, ..tc.balance };
        Some(gen_pairs(val, &train, &index, tc.extractor, k, &mean, no_balance, tc.seed)?)
    };
    let normalizer =
        OutputNormalizer::fit(train_pairs.pairs.iter().map(|p| (&p.target, p.displacement_valid)))?;
    Ok(TrainingData { mean, index, train_pairs, val_pairs, normalizer })
}

/// Network-ready tensors for a pair set with normalized targets.
pub struct PairTensors<S> {
    pub queries: Vec<Tensor<S>>,
    pub regions: Vec<Tensor<S>>,
    pub targets: Vec<MatchOutput<S>>,
}

impl<S: crate::Scalar> PairTensors<S> {
    pub fn new(set: &PairSet, normalizer: &OutputNormalizer, height: usize, width: usize) -> Self {
        Self {
            queries: set.queries.par_iter().map(|q| q.image.to_tensor(height, width)).collect(),
            regions: set.regions.par_iter().map(|r| r.image.to_tensor(height, width)).collect(),
            targets: set.pairs.iter().map(|p| normalizer.normalize(&p.target).cast()).collect(),
        }
    }

    pub fn sample<'a>(&'a self, set: &PairSet, i: usize) -> Sample<'a, S> {
        let p = &set.pairs[i];
        Sample {
            image: &self.queries[p.query],
            region: &self.regions[p.region],
            target: self.targets[i],
            displacement_valid: p.displacement_valid,
        }
    }
}

/// Confidence classification accuracy and displacement error on a pair set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub loss: f64,
    /// Fraction of pairs whose denormalized confidence falls on the target's
    /// side of 0.5.
    pub confidence_accuracy: f64,
    /// Mean absolute displacement error over valid pairs, normalized units.
    pub displacement_mae: f64,
}

pub fn evaluate_pairs(
    params: &McnnParams<f32>,
    normalizer: &OutputNormalizer,
    set: &PairSet,
    tensors: &PairTensors<f32>,
) -> Result<PairMetrics> {
    let outs: Result<Vec<MatchOutput<f64>>> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let s = tensors.sample(set, i);
            Ok(normalizer.denormalize(&forward(params, s.image, s.region)?.0.cast()))
        })
        .collect();
    let outs = outs?;
    let mut correct = 0usize;
    let (mut abs_err, mut n_valid) = (0.0, 0usize);
    for (p, o) in set.pairs.iter().zip(&outs) {
        if (o.confidence > 0.5) == (p.target.confidence > 0.5) {
            correct += 1;
        }
        if p.displacement_valid {
            abs_err += o.displacement_error(&p.target);
            n_valid += 1;
        }
    }
    let samples: Vec<Sample<f32>> = (0..set.len()).map(|i| tensors.sample(set, i)).collect();
    Ok(PairMetrics {
        loss: batch_loss(params, &samples)? as f64,
        confidence_accuracy: correct as f64 / set.len().max(1) as f64,
        displacement_mae: if n_valid == 0 { 0.0 } else { abs_err / n_valid as f64 },
    })
}

/// Runtime options that are not hyper-parameters.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the parameters if training diverges.
    pub diagnostic_path: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch, or continues `resume` up to `tc.max_epochs` total
/// epochs. `on_epoch` sees every log row as it is produced.
pub fn train(
    data: &TrainingData,
    tc: &TrainConfig,
    mc: &McnnConfig,
    resume: Option<Checkpoint>,
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    tc.validate()?;
    mc.validate()?;
    let (mut params, normalizer, mut state) = match resume {
        Some(ck) => {
            if ck.config() != mc {
                return Err(Error::Checkpoint("resume checkpoint was trained with a different model config".into()));
            }
            (ck.params, ck.normalizer, ck.state)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let params = McnnParams::<f32>::init(mc, &mut rng)?;
            let state =
                TrainState { epoch: 0, seed: tc.seed, learning_rate: tc.initial_lr, best_val_loss: f64::INFINITY, stale_epochs: 0 };
            (params, data.normalizer, state)
        }
    };
    let (h, w) = (mc.input_height, mc.input_width);
    let train_t = PairTensors::<f32>::new(&data.train_pairs, &normalizer, h, w);
    let val_t = data.val_pairs.as_ref().map(|v| PairTensors::<f32>::new(v, &normalizer, h, w));
    let mut sgd = SgdState::new(&params.tensors(), tc.momentum as f32, tc.weight_decay as f32, state.learning_rate as f32);
    let mut log = Vec::new();

    let diverged = |params: &McnnParams<f32>, state: &TrainState, what: String| -> Error {
        if let Some(path) = &options.diagnostic_path {
            let ck = Checkpoint { params: params.clone(), extractor: tc.extractor, normalizer, state: *state };
            if let Err(e) = ck.save(path) {
                return Error::Training(format!("{what}; diagnostic checkpoint failed: {e}"));
            }
            return Error::Training(format!("{what}; diagnostic checkpoint at {}", path.display()));
        }
        Error::Training(what)
    };

    while state.epoch < tc.max_epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..data.train_pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        if let Some(cap) = tc.pairs_per_epoch {
            order.truncate(cap);
        }
        sgd.learning_rate = state.learning_rate as f32;
        let (mut loss_sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample<f32>> = chunk.iter().map(|&i| train_t.sample(&data.train_pairs, i)).collect();
            let (loss, grads) = match batch_gradients(&params, &batch) {
                Ok(r) => r,
                Err(e) if e.is_numeric() => return Err(diverged(&params, &state, format!("epoch {epoch}: {e}"))),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(&params, &state, format!("epoch {epoch}: loss became {loss}")));
            }
            let grad_refs = grads.tensors();
            sgd_step(&mut params.tensors_mut(), &grad_refs, &mut sgd)?;
            loss_sum += loss as f64;
            batches += 1;
        }
        if !params.is_finite() {
            return Err(diverged(&params, &state, format!("epoch {epoch}: parameters became non-finite")));
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = match (&data.val_pairs, &val_t) {
            (Some(set), Some(t)) => {
                let samples: Vec<Sample<f32>> = (0..set.len()).map(|i| t.sample(set, i)).collect();
                batch_loss(&params, &samples)? as f64
            }
            _ => train_loss,
        };
        if !val_loss.is_finite() {
            return Err(diverged(&params, &state, format!("epoch {epoch}: validation loss became {val_loss}")));
        }
        let row = EpochLog { epoch, train_loss, val_loss, lr: state.learning_rate };
        if val_loss < state.best_val_loss - tc.min_improvement {
            state.best_val_loss = val_loss;
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
            if state.stale_epochs >= tc.plateau_patience {
                state.learning_rate /= tc.lr_drop_factor;
                state.stale_epochs = 0;
            }
        }
        state.epoch = epoch;
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint { params, extractor: tc.extractor, normalizer, state }, log })
}
