//! Minibatch Adam training over labeled instruction blocks.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, OptLevel, Split};
use crate::elf::{load_code_image, split_blocks, InstructionBlock, BLOCK_BYTES, DEFAULT_MIN_FILL};
use crate::model::{init_params, HyperParams, ModelError, ModelParams, Trainable};
use crate::nn::{AdamConfig, AdamState, NnError, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no {0} blocks in the training split")]
    EmptyClass(OptLevel),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Which blocks of each file become samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPolicy {
    #[default]
    FirstBlock,
    AllBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub blocks: BlockPolicy,
    pub min_fill: usize,
    pub all_exec: bool,
    /// Stop once post-epoch train accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            blocks: BlockPolicy::FirstBlock,
            min_fill: DEFAULT_MIN_FILL,
            all_exec: false,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBlock {
    pub path: String,
    pub label: OptLevel,
    pub block: InstructionBlock,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedBlocks {
    pub blocks: Vec<LabeledBlock>,
    pub files: usize,
    /// Files that failed extraction or yielded no block, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Extracts the blocks of every record in `split`, in manifest order.
pub fn load_blocks(
    manifest: &CorpusManifest,
    split: Split,
    policy: BlockPolicy,
    min_fill: usize,
    all_exec: bool,
) -> LoadedBlocks {
    let records: Vec<_> = manifest.records_in(split).collect();
    let per_file: Vec<Result<Vec<LabeledBlock>, String>> = records
        .par_iter()
        .map(|r| {
            let (_, image) = load_code_image(Path::new(&r.path), all_exec).map_err(|e| e.to_string())?;
            let mut blocks = split_blocks(&image, min_fill);
            if blocks.is_empty() {
                return Err(format!("no block with at least {min_fill} code bytes"));
            }
            if policy == BlockPolicy::FirstBlock {
                blocks.truncate(1);
            }
            Ok(blocks
                .into_iter()
                .map(|block| LabeledBlock {
                    path: r.path.clone(),
                    label: r.label,
                    block,
                })
                .collect())
        })
        .collect();
    let mut out = LoadedBlocks::default();
    for (r, res) in records.iter().zip(per_file) {
        match res {
            Ok(b) => {
                out.files += 1;
                out.blocks.extend(b);
            }
            Err(e) => out.skipped.push((r.path.clone(), e)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss during the epoch; at epoch 0, the loss of the fresh model.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best held-out (or, lacking held-out data, train)
    /// accuracy; earliest epoch wins ties.
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub last: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub skipped: Vec<(String, String)>,
}

/// Mean loss and accuracy of `params` over labeled blocks.
pub fn loss_and_accuracy<T: Scalar>(params: &ModelParams<T>, data: &[LabeledBlock]) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let results: Vec<Result<(f64, bool), ModelError>> = data
        .par_iter()
        .map(|s| {
            let trace = params.forward_trace(s.block.bytes())?;
            let loss = params.loss(&trace, s.label.index())?.as_f64();
            Ok((loss, argmax(&trace.probs) == s.label.index()))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (l, ok) = r?;
        loss += l;
        correct += ok as usize;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Index of the largest value, first on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh model on `train`, reporting held-out accuracy on `heldout` each epoch.
pub fn train_on_blocks(
    train: &[LabeledBlock],
    heldout: &[LabeledBlock],
    hyper: &HyperParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    hyper.validate()?;
    if hyper.input_bytes() != BLOCK_BYTES {
        return Err(TrainError::InvalidConfig(format!(
            "model input is {} bytes, blocks are {BLOCK_BYTES}",
            hyper.input_bytes()
        )));
    }
    for level in OptLevel::ALL {
        if !train.iter().any(|s| s.label == level) {
            return Err(TrainError::EmptyClass(level));
        }
    }

    let mut params = init_params::<f32>(hyper, cfg.seed)?;
    let mut adam = AdamState::<f32>::new(&params.weights.tensor_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0FB1);
    let heldout_acc = |p: &ModelParams<f32>| -> Result<Option<f64>, TrainError> {
        if heldout.is_empty() {
            Ok(None)
        } else {
            Ok(Some(loss_and_accuracy(p, heldout)?.1))
        }
    };

    let (loss0, acc0) = loss_and_accuracy(&params, train)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: loss0,
        train_accuracy: acc0,
        heldout_accuracy: heldout_acc(&params)?,
    }];
    let score = |r: &EpochRecord| r.heldout_accuracy.unwrap_or(r.train_accuracy);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_score = score(&history[0]);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // Per-sample gradients in parallel, reduced in batch order for determinism.
            let per_sample: Vec<Result<(f32, Trainable<f32>), ModelError>> = batch
                .par_iter()
                .map(|&i| {
                    let (l, g, _) = params.loss_and_gradients(train[i].block.bytes(), train[i].label.index())?;
                    Ok((l, g))
                })
                .collect();
            let mut total = Trainable::<f32>::zeros(hyper);
            let mut batch_loss = 0.0f64;
            for r in per_sample {
                let (l, g) = r?;
                batch_loss += l as f64;
                total.accumulate(&g);
            }
            total.scale(1.0 / batch.len() as f32);
            let grads = total.tensors();
            adam.update(&cfg.adam, &mut params.weights.tensors_mut(), &grads)?;
            loss_sum += batch_loss / batch.len() as f64;
            batches += 1;
        }
        let (_, train_acc) = loss_and_accuracy(&params, train)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy: train_acc,
            heldout_accuracy: heldout_acc(&params)?,
        };
        if score(&rec) > best_score {
            best_score = score(&rec);
            best = params.clone();
            best_epoch = epoch;
        }
        history.push(rec);
        if cfg.target_train_accuracy.is_some_and(|t| train_acc >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
        skipped: Vec::new(),
    })
}

/// Loads the manifest's train and test splits and trains on them.
pub fn train(manifest: &CorpusManifest, hyper: &HyperParams, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let tr = load_blocks(manifest, Split::Train, cfg.blocks, cfg.min_fill, cfg.all_exec);
    let te = load_blocks(manifest, Split::Test, cfg.blocks, cfg.min_fill, cfg.all_exec);
    let mut out = train_on_blocks(&tr.blocks, &te.blocks, hyper, cfg)?;
    out.skipped = tr.skipped.into_iter().chain(te.skipped).collect();
    Ok(out)
}

/// CSV with header `epoch,train_loss,train_accuracy,heldout_accuracy`; a missing held-out value
/// is an empty field.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "train_accuracy", "heldout_accuracy"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            r.heldout_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: "<history>".into(),
        source,
    })?;
    Ok(())
}
