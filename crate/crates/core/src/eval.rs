//! Block-level metrics, file-level mode voting and one-vs-rest ROC curves.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, OptLevel, Split};
use crate::elf::{load_code_image, split_blocks, ElfError};
use crate::model::{ModelError, ModelParams};
use crate::nn::Scalar;
use crate::train::{argmax, load_blocks, BlockPolicy};

pub const CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split {0:?} has no usable samples")]
    EmptySplit(Split),
    #[error("{path}: {source}")]
    Elf {
        path: String,
        #[source]
        source: ElfError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: OptLevel,
    /// Sorted by ascending threshold; the first point accepts everything, the last nothing.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: f64,
    /// `TP / (TP + FP)`; `None` when the class was never predicted.
    pub precision: [Option<f64>; CLASSES],
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; CLASSES]; CLASSES],
    pub roc: Vec<RocCurve>,
}

impl Metrics {
    /// Metrics from `(true label, probability vector)` pairs; the prediction is the argmax and
    /// ROC scores are the per-class probabilities.
    pub fn from_predictions(preds: &[(usize, Vec<f64>)]) -> Metrics {
        let mut confusion = [[0u64; CLASSES]; CLASSES];
        for (label, probs) in preds {
            confusion[*label][argmax(probs)] += 1;
        }
        let roc = (0..CLASSES)
            .map(|c| {
                let scored: Vec<(f64, bool)> = preds.iter().map(|(l, p)| (p[c], *l == c)).collect();
                roc_curve(OptLevel::ALL[c], &scored)
            })
            .collect();
        Metrics::from_confusion(confusion, roc)
    }

    pub fn from_confusion(confusion: [[u64; CLASSES]; CLASSES], roc: Vec<RocCurve>) -> Metrics {
        let samples: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..CLASSES).map(|i| confusion[i][i]).sum();
        let precision = std::array::from_fn(|c| {
            let predicted: u64 = (0..CLASSES).map(|t| confusion[t][c]).sum();
            (predicted > 0).then(|| confusion[c][c] as f64 / predicted as f64)
        });
        Metrics {
            samples: samples as usize,
            accuracy: if samples == 0 { 0.0 } else { trace as f64 / samples as f64 },
            precision,
            confusion,
            roc,
        }
    }
}

/// One-vs-rest ROC: one point per distinct score `t` (accept when `score >= t`) plus a final
/// reject-all point at `f64::MAX`. A rate with an empty denominator is 1 when everything is
/// accepted and 0 otherwise, which keeps both corners and monotonicity.
pub fn roc_curve(class: OptLevel, scored: &[(f64, bool)]) -> RocCurve {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let rate = |hits: usize, total: usize, all: bool| {
        if total == 0 {
            if all { 1.0 } else { 0.0 }
        } else {
            hits as f64 / total as f64
        }
    };
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for (i, &t) in thresholds.iter().enumerate() {
        let tp = scored.iter().filter(|s| s.1 && s.0 >= t).count();
        let fp = scored.iter().filter(|s| !s.1 && s.0 >= t).count();
        points.push(RocPoint {
            threshold: t,
            tpr: rate(tp, pos, i == 0),
            fpr: rate(fp, neg, i == 0),
        });
    }
    if points.is_empty() {
        points.push(RocPoint {
            threshold: f64::MIN,
            tpr: 1.0,
            fpr: 1.0,
        });
    }
    points.push(RocPoint {
        threshold: f64::MAX,
        tpr: 0.0,
        fpr: 0.0,
    });
    let auc = auc(&points);
    RocCurve { class, points, auc }
}

/// Trapezoidal area under the (fpr, tpr) polyline.
pub fn auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// CSV with header `class,threshold,tpr,fpr`.
pub fn write_roc_csv<W: Write>(curves: &[RocCurve], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "threshold", "tpr", "fpr"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.class.to_string(),
                p.threshold.to_string(),
                p.tpr.to_string(),
                p.fpr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPrediction {
    pub base_offset: u64,
    pub class: OptLevel,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileVerdict {
    pub path: String,
    pub blocks: Vec<BlockPrediction>,
    pub votes: [usize; CLASSES],
    pub final_class: OptLevel,
    /// Mean probability of the final class over the blocks that predicted it.
    pub confidence: f64,
}

impl FileVerdict {
    /// One-vs-rest score for `class`: mean probability of `class` over blocks predicting it,
    /// 0 when no block does.
    pub fn class_score(&self, class: OptLevel) -> f64 {
        support_mean(&self.blocks, class).unwrap_or(0.0)
    }
}

/// Mean of `probs[class]` over blocks predicting `class`. Values are summed in sorted order so
/// the result does not depend on block order.
fn support_mean(blocks: &[BlockPrediction], class: OptLevel) -> Option<f64> {
    let mut v: Vec<f64> = blocks
        .iter()
        .filter(|b| b.class == class)
        .map(|b| b.probs[class.index()])
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mode of the block predictions. Ties go to the higher mean supporting probability, then to
/// the earlier class in `O0 < O1 < O2O3 < Os`.
pub fn vote(blocks: &[BlockPrediction]) -> Option<(OptLevel, f64, [usize; CLASSES])> {
    if blocks.is_empty() {
        return None;
    }
    let mut votes = [0usize; CLASSES];
    for b in blocks {
        votes[b.class.index()] += 1;
    }
    let top = *votes.iter().max().expect("four classes");
    let mut best: Option<(OptLevel, f64)> = None;
    for level in OptLevel::ALL {
        if votes[level.index()] != top {
            continue;
        }
        let mean = support_mean(blocks, level).expect("class has votes");
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((level, mean));
        }
    }
    best.map(|(c, m)| (c, m, votes))
}

pub fn predict_block<T: Scalar>(
    params: &ModelParams<T>,
    block: &crate::elf::InstructionBlock,
) -> Result<BlockPrediction, ModelError> {
    let (probs, _) = params.forward(block, false)?;
    let probs: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
    Ok(BlockPrediction {
        base_offset: block.base_offset,
        class: OptLevel::ALL[argmax(&probs)],
        probs,
    })
}

/// Classifies every block of a file and votes.
pub fn classify_file<T: Scalar>(
    params: &ModelParams<T>,
    path: &Path,
    min_fill: usize,
    all_exec: bool,
) -> Result<FileVerdict, EvalError> {
    let elf_err = |source| EvalError::Elf {
        path: path.display().to_string(),
        source,
    };
    let (_, image) = load_code_image(path, all_exec).map_err(elf_err)?;
    let blocks = split_blocks(&image, min_fill);
    if blocks.is_empty() {
        return Err(elf_err(ElfError::NoCode));
    }
    let preds = blocks
        .par_iter()
        .map(|b| predict_block(params, b))
        .collect::<Result<Vec<_>, _>>()?;
    let (final_class, confidence, votes) = vote(&preds).expect("non-empty");
    Ok(FileVerdict {
        path: path.display().to_string(),
        blocks: preds,
        votes,
        final_class,
        confidence,
    })
}

/// Block-level metrics on one split.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    manifest: &CorpusManifest,
    split: Split,
    policy: BlockPolicy,
    min_fill: usize,
    all_exec: bool,
) -> Result<Metrics, EvalError> {
    let loaded = load_blocks(manifest, split, policy, min_fill, all_exec);
    if loaded.blocks.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let preds = loaded
        .blocks
        .par_iter()
        .map(|s| Ok((s.label.index(), predict_block(params, &s.block)?.probs)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(Metrics::from_predictions(&preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileLevelReport {
    pub files: usize,
    pub accuracy: f64,
    pub confusion: [[u64; CLASSES]; CLASSES],
    pub precision: [Option<f64>; CLASSES],
    /// Per-class ROC over file scores (see [`FileVerdict::class_score`]).
    pub roc: Vec<RocCurve>,
    pub verdicts: Vec<(OptLevel, FileVerdict)>,
    pub skipped: Vec<(String, String)>,
}

/// Votes every file of a split; files that cannot be classified are skipped and listed.
pub fn evaluate_files<T: Scalar>(
    params: &ModelParams<T>,
    manifest: &CorpusManifest,
    split: Split,
    min_fill: usize,
    all_exec: bool,
) -> Result<FileLevelReport, EvalError> {
    let records: Vec<_> = manifest.records_in(split).collect();
    let results: Vec<Result<FileVerdict, EvalError>> = records
        .par_iter()
        .map(|r| classify_file(params, Path::new(&r.path), min_fill, all_exec))
        .collect();
    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(v) => verdicts.push((r.label, v)),
            Err(EvalError::Model(e)) => return Err(e.into()),
            Err(e) => skipped.push((r.path.clone(), e.to_string())),
        }
    }
    if verdicts.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let mut confusion = [[0u64; CLASSES]; CLASSES];
    for (label, v) in &verdicts {
        confusion[label.index()][v.final_class.index()] += 1;
    }
    let roc = OptLevel::ALL
        .iter()
        .map(|&c| {
            let scored: Vec<(f64, bool)> = verdicts.iter().map(|(l, v)| (v.class_score(c), *l == c)).collect();
            roc_curve(c, &scored)
        })
        .collect();
    let m = Metrics::from_confusion(confusion, roc);
    Ok(FileLevelReport {
        files: verdicts.len(),
        accuracy: m.accuracy,
        confusion,
        precision: m.precision,
        roc: m.roc,
        verdicts,
        skipped,
    })
}

/// File-level one-vs-rest ROC curves for a split.
pub fn roc<T: Scalar>(
    params: &ModelParams<T>,
    manifest: &CorpusManifest,
    split: Split,
    min_fill: usize,
    all_exec: bool,
) -> Result<Vec<RocCurve>, EvalError> {
    Ok(evaluate_files(params, manifest, split, min_fill, all_exec)?.roc)
}
