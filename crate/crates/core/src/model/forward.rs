use serde::{Deserialize, Serialize};

use super::{GradientSet, ModelError, ModelParams, Trainable};
use crate::elf::InstructionBlock;
use crate::nn::{
    conv_valid_into, cross_entropy, dense, global_max_pool, relu, shape_err, softmax, Matrix,
    Scalar,
};

/// Intermediates of one forward pass, enough to run the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub bytes: Vec<u8>,
    /// `S x g` embedded sequence (byte embeddings concatenated per instruction, plus position).
    pub embedded: Matrix<T>,
    /// Pooled ReLU activations, bank-major then filter index.
    pub pooled: Vec<T>,
    /// Sequence position of each pooled value (smallest index on ties).
    pub argmax: Vec<usize>,
    pub hidden_pre: Option<Vec<T>>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterActivation {
    pub kernel_length: usize,
    pub filter_index: usize,
    pub score: f64,
    pub position: usize,
}

/// Pooled score and winning position of every filter for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub base_offset: u64,
    pub entries: Vec<FilterActivation>,
}

impl<T: Scalar> ModelParams<T> {
    /// `S x g` matrix: row `i` concatenates the embeddings of instruction `i`'s bytes and adds
    /// position vector `p_{i+1}`.
    pub fn embed(&self, bytes: &[u8]) -> Result<Matrix<T>, ModelError> {
        let h = self.hyper();
        if bytes.len() != h.input_bytes() {
            return Err(shape_err(format!(
                "input of {} bytes, model expects {}",
                bytes.len(),
                h.input_bytes()
            ))
            .into());
        }
        if let Some(&b) = bytes.iter().find(|&&b| b as usize >= h.vocab) {
            return Err(shape_err(format!("byte {b} outside vocabulary of {}", h.vocab)).into());
        }
        let (n, f, g) = (h.bytes_per_insn, h.byte_dim, h.pos_dim);
        let table = &self.weights.byte_embedding;
        let pos = self.position();
        let mut out = Matrix::zeros(h.seq_len, g);
        for i in 0..h.seq_len {
            let row = out.row_mut(i);
            for s in 0..n {
                let b = bytes[i * n + s] as usize;
                row[s * f..(s + 1) * f].copy_from_slice(table.row(b));
            }
            for (k, v) in row.iter_mut().enumerate() {
                *v += pos.get(k, i);
            }
        }
        Ok(out)
    }

    /// Full forward pass over raw input bytes, keeping every intermediate.
    pub fn forward_trace(&self, bytes: &[u8]) -> Result<ForwardTrace<T>, ModelError> {
        let h = self.hyper();
        let embedded = self.embed(bytes)?;
        let g = h.pos_dim;
        let mut pooled = Vec::with_capacity(h.feature_len());
        let mut argmax = Vec::with_capacity(h.feature_len());
        let mut buf = vec![T::zero(); h.seq_len];
        for bank in &self.weights.conv {
            let out = &mut buf[..h.seq_len - bank.length + 1];
            for j in 0..bank.weights.rows() {
                conv_valid_into(embedded.as_slice(), g, bank.weights.row(j), bank.biases[j], out);
                // max(relu(v)) == relu(max(v)); when nothing is positive the rectified vector is
                // all zeros and its first index wins.
                let (m, at) = global_max_pool(out)?;
                if m > T::zero() {
                    pooled.push(m);
                    argmax.push(at);
                } else {
                    pooled.push(T::zero());
                    argmax.push(0);
                }
            }
        }
        let (hidden_pre, features) = match &self.weights.hidden {
            Some(layer) => {
                let pre = dense(&pooled, &layer.weights, &layer.biases)?;
                let act = relu(&pre);
                (Some(pre), act)
            }
            None => (None, pooled.clone()),
        };
        let logits = dense(&features, &self.weights.output.weights, &self.weights.output.biases)?;
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            bytes: bytes.to_vec(),
            embedded,
            pooled,
            argmax,
            hidden_pre,
            logits,
            probs,
        })
    }

    /// Class probabilities for raw input bytes.
    pub fn predict_bytes(&self, bytes: &[u8]) -> Result<Vec<T>, ModelError> {
        Ok(self.forward_trace(bytes)?.probs)
    }

    /// Forward pass on an instruction block; with `capture` the per-filter activation trace is
    /// returned too.
    pub fn forward(
        &self,
        block: &InstructionBlock,
        capture: bool,
    ) -> Result<(Vec<T>, Option<ActivationTrace>), ModelError> {
        let trace = self.forward_trace(block.bytes())?;
        let activations = capture.then(|| self.activation_trace(&trace, block.base_offset));
        Ok((trace.probs, activations))
    }

    pub fn activation_trace(&self, trace: &ForwardTrace<T>, base_offset: u64) -> ActivationTrace {
        let nf = self.hyper().num_filters;
        let entries = self
            .weights
            .conv
            .iter()
            .enumerate()
            .flat_map(|(b, bank)| {
                (0..nf).map(move |j| (b * nf + j, bank.length, j))
            })
            .map(|(idx, kernel_length, filter_index)| FilterActivation {
                kernel_length,
                filter_index,
                score: trace.pooled[idx].as_f64(),
                position: trace.argmax[idx],
            })
            .collect();
        ActivationTrace {
            base_offset,
            entries,
        }
    }

    /// Cross-entropy loss of a traced pass.
    pub fn loss(&self, trace: &ForwardTrace<T>, label: usize) -> Result<T, ModelError> {
        Ok(cross_entropy(&trace.probs, label)?)
    }

    /// Exact gradients of the cross-entropy loss for a traced pass. The position matrix is
    /// constant and has no gradient slot.
    pub fn backward(&self, trace: &ForwardTrace<T>, label: usize) -> Result<GradientSet<T>, ModelError> {
        let h = self.hyper();
        let classes = trace.probs.len();
        if label >= classes {
            return Err(crate::nn::NnError::BadLabel { label, classes }.into());
        }
        let mut grad = Trainable::<T>::zeros(h);

        // softmax + cross-entropy: dL/dlogits = p - onehot
        let mut dlogits = trace.probs.clone();
        dlogits[label] -= T::one();

        let features: Vec<T> = match &trace.hidden_pre {
            Some(pre) => relu(pre),
            None => trace.pooled.clone(),
        };
        let out_w = &self.weights.output.weights;
        for (c, &d) in dlogits.iter().enumerate() {
            grad.output.biases[c] = d;
            let row = grad.output.weights.row_mut(c);
            for (gw, &x) in row.iter_mut().zip(&features) {
                *gw = d * x;
            }
        }
        let mut dfeatures = vec![T::zero(); features.len()];
        for (c, &d) in dlogits.iter().enumerate() {
            for (df, &w) in dfeatures.iter_mut().zip(out_w.row(c)) {
                *df += d * w;
            }
        }

        let dpooled = match (&self.weights.hidden, &trace.hidden_pre, &mut grad.hidden) {
            (Some(layer), Some(pre), Some(glayer)) => {
                let dpre: Vec<T> = dfeatures
                    .iter()
                    .zip(pre)
                    .map(|(&d, &z)| if z > T::zero() { d } else { T::zero() })
                    .collect();
                let mut dp = vec![T::zero(); trace.pooled.len()];
                for (u, &d) in dpre.iter().enumerate() {
                    glayer.biases[u] = d;
                    if d == T::zero() {
                        continue;
                    }
                    let grow = glayer.weights.row_mut(u);
                    for (gw, &x) in grow.iter_mut().zip(&trace.pooled) {
                        *gw = d * x;
                    }
                    for (dpj, &w) in dp.iter_mut().zip(layer.weights.row(u)) {
                        *dpj += d * w;
                    }
                }
                dp
            }
            _ => dfeatures,
        };

        // Max pooling routes the gradient to the winning window only; ReLU passes it when the
        // pooled value is positive.
        let (n, f, g) = (h.bytes_per_insn, h.byte_dim, h.pos_dim);
        let nf = h.num_filters;
        let emb = trace.embedded.as_slice();
        for (b, bank) in self.weights.conv.iter().enumerate() {
            let k = bank.length;
            let gbank = &mut grad.conv[b];
            for j in 0..nf {
                let idx = b * nf + j;
                let delta = dpooled[idx];
                if trace.pooled[idx] <= T::zero() || delta == T::zero() {
                    continue;
                }
                let pos = trace.argmax[idx];
                let window = &emb[pos * g..(pos + k) * g];
                gbank.biases[j] += delta;
                for (gw, &x) in gbank.weights.row_mut(j).iter_mut().zip(window) {
                    *gw += delta * x;
                }
                let wrow = bank.weights.row(j);
                for r in 0..k {
                    let insn = pos + r;
                    for s in 0..n {
                        let byte = trace.bytes[insn * n + s] as usize;
                        let src = &wrow[r * g + s * f..r * g + (s + 1) * f];
                        for (d, &w) in grad.byte_embedding.row_mut(byte).iter_mut().zip(src) {
                            *d += delta * w;
                        }
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Loss and gradients for one labeled input.
    pub fn loss_and_gradients(
        &self,
        bytes: &[u8],
        label: usize,
    ) -> Result<(T, GradientSet<T>, Vec<T>), ModelError> {
        let trace = self.forward_trace(bytes)?;
        let loss = self.loss(&trace, label)?;
        let grad = self.backward(&trace, label)?;
        Ok((loss, grad, trace.probs))
    }
}
