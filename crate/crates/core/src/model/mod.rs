//! The byte-level CNN: byte embedding plus constant position embedding, full-width convolutions
//! of several lengths with ReLU and global max pooling, then a dense softmax head.

mod checkpoint;
mod forward;
mod gradcheck;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{ActivationTrace, FilterActivation, ForwardTrace};
pub use gradcheck::{grad_check, grad_check_at, GradCheckConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elf::BLOCK_WORDS;
use crate::nn::{Matrix, NnError, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Instructions per input sequence (S).
    pub seq_len: usize,
    /// Bytes per instruction (n).
    pub bytes_per_insn: usize,
    /// Byte vocabulary size (V).
    pub vocab: usize,
    /// Byte embedding width (f).
    pub byte_dim: usize,
    /// Position embedding width (g); must equal `bytes_per_insn * byte_dim`.
    pub pos_dim: usize,
    /// Convolution kernel lengths, strictly ascending.
    pub kernel_lengths: Vec<usize>,
    /// Filters per kernel length.
    pub num_filters: usize,
    pub classes: usize,
    /// Optional ReLU hidden layer between pooling and the output layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_units: Option<usize>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            seq_len: BLOCK_WORDS,
            bytes_per_insn: 4,
            vocab: 256,
            byte_dim: 4,
            pos_dim: 16,
            kernel_lengths: vec![2, 3, 4, 5],
            num_filters: 128,
            classes: 4,
            hidden_units: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidHyper(m));
        if self.seq_len == 0 || self.bytes_per_insn == 0 || self.byte_dim == 0 {
            return bad("seq_len, bytes_per_insn and byte_dim must be positive".into());
        }
        if self.vocab == 0 || self.vocab > 256 {
            return bad(format!("vocab {} not in 1..=256", self.vocab));
        }
        if self.pos_dim != self.bytes_per_insn * self.byte_dim {
            return bad(format!(
                "pos_dim {} != bytes_per_insn {} * byte_dim {}",
                self.pos_dim, self.bytes_per_insn, self.byte_dim
            ));
        }
        if self.kernel_lengths.is_empty() {
            return bad("no kernel lengths".into());
        }
        if self.kernel_lengths.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "kernel lengths {:?} must be strictly ascending",
                self.kernel_lengths
            ));
        }
        if let Some(&k) = self
            .kernel_lengths
            .iter()
            .find(|&&k| k == 0 || k > self.seq_len)
        {
            return bad(format!("kernel length {k} not in 1..={}", self.seq_len));
        }
        if self.classes != 4 {
            return bad(format!("classes must be 4, got {}", self.classes));
        }
        if self.hidden_units == Some(0) {
            return bad("hidden_units must be positive when set".into());
        }
        Ok(())
    }

    /// Width of the concatenated pooled feature vector.
    pub fn feature_len(&self) -> usize {
        self.num_filters * self.kernel_lengths.len()
    }

    /// Bytes consumed per input sequence.
    pub fn input_bytes(&self) -> usize {
        self.seq_len * self.bytes_per_insn
    }

    pub fn max_kernel_length(&self) -> usize {
        self.kernel_lengths.iter().copied().max().unwrap_or(1)
    }
}

/// Number of trainable scalars for `hyper`.
pub fn param_count(hyper: &HyperParams) -> usize {
    let embedding = hyper.vocab * hyper.byte_dim;
    let conv: usize = hyper
        .kernel_lengths
        .iter()
        .map(|&k| k * hyper.pos_dim * hyper.num_filters + hyper.num_filters)
        .sum();
    let head = match hyper.hidden_units {
        None => hyper.classes * hyper.feature_len() + hyper.classes,
        Some(h) => h * hyper.feature_len() + h + hyper.classes * h + hyper.classes,
    };
    embedding + conv + head
}

/// Constant position embedding, `g x S`. Column `n-1` holds `p_n` for positions `1..=S`:
/// `p_n[k] = (1 - n/(S+1)) - k/(g+1) * (1 - 2n/(S+1))`.
pub fn position_embedding_matrix(seq_len: usize, dim: usize) -> Matrix<f64> {
    let s1 = (seq_len + 1) as f64;
    let g1 = (dim + 1) as f64;
    Matrix::from_fn(dim, seq_len, |k, col| {
        let n = (col + 1) as f64;
        (1.0 - n / s1) - (k as f64 / g1) * (1.0 - 2.0 * n / s1)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank<T> {
    pub length: usize,
    /// `num_filters x (length * pos_dim)`; row `j` is filter `j` flattened row-major.
    pub weights: Matrix<T>,
    pub biases: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Matrix<T>,
    pub biases: Vec<T>,
}

/// Every trainable array. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable<T> {
    /// `vocab x byte_dim`; row `b` embeds byte value `b`.
    pub byte_embedding: Matrix<T>,
    /// One bank per kernel length, ascending.
    pub conv: Vec<ConvBank<T>>,
    pub hidden: Option<DenseLayer<T>>,
    pub output: DenseLayer<T>,
}

pub type GradientSet<T> = Trainable<T>;

impl<T: Scalar> Trainable<T> {
    pub fn zeros(hyper: &HyperParams) -> Self {
        let features = hyper.feature_len();
        let (hidden, head_in) = match hyper.hidden_units {
            Some(h) => (
                Some(DenseLayer {
                    weights: Matrix::zeros(h, features),
                    biases: vec![T::zero(); h],
                }),
                h,
            ),
            None => (None, features),
        };
        Trainable {
            byte_embedding: Matrix::zeros(hyper.vocab, hyper.byte_dim),
            conv: hyper
                .kernel_lengths
                .iter()
                .map(|&k| ConvBank {
                    length: k,
                    weights: Matrix::zeros(hyper.num_filters, k * hyper.pos_dim),
                    biases: vec![T::zero(); hyper.num_filters],
                })
                .collect(),
            hidden,
            output: DenseLayer {
                weights: Matrix::zeros(hyper.classes, head_in),
                biases: vec![T::zero(); hyper.classes],
            },
        }
    }

    /// Tensors in checkpoint order: embedding, conv weights by ascending length, conv biases,
    /// hidden weights and biases (if any), output weights, output biases.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut v = vec![self.byte_embedding.as_slice()];
        v.extend(self.conv.iter().map(|b| b.weights.as_slice()));
        v.extend(self.conv.iter().map(|b| &b.biases[..]));
        if let Some(h) = &self.hidden {
            v.push(h.weights.as_slice());
            v.push(&h.biases);
        }
        v.push(self.output.weights.as_slice());
        v.push(&self.output.biases);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let Trainable {
            byte_embedding,
            conv,
            hidden,
            output,
        } = self;
        let mut v = vec![byte_embedding.as_mut_slice()];
        let (weights, biases): (Vec<&mut [T]>, Vec<&mut [T]>) = conv
            .iter_mut()
            .map(|b| (b.weights.as_mut_slice(), &mut b.biases[..]))
            .unzip();
        v.extend(weights);
        v.extend(biases);
        if let Some(h) = hidden {
            v.push(h.weights.as_mut_slice());
            v.push(&mut h.biases[..]);
        }
        v.push(output.weights.as_mut_slice());
        v.push(&mut output.biases[..]);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["byte_embedding".to_string()];
        v.extend(self.conv.iter().map(|b| format!("conv{}.weights", b.length)));
        v.extend(self.conv.iter().map(|b| format!("conv{}.biases", b.length)));
        if self.hidden.is_some() {
            v.push("hidden.weights".into());
            v.push("hidden.biases".into());
        }
        v.push("output.weights".into());
        v.push("output.biases".into());
        v
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, element by element.
    pub fn accumulate(&mut self, other: &Trainable<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Trainable<U> {
        Trainable {
            byte_embedding: self.byte_embedding.cast(),
            conv: self
                .conv
                .iter()
                .map(|b| ConvBank {
                    length: b.length,
                    weights: b.weights.cast(),
                    biases: cast_vec(&b.biases),
                })
                .collect(),
            hidden: self.hidden.as_ref().map(|h| DenseLayer {
                weights: h.weights.cast(),
                biases: cast_vec(&h.biases),
            }),
            output: DenseLayer {
                weights: self.output.weights.cast(),
                biases: cast_vec(&self.output.biases),
            },
        }
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect()
}

/// Trainable weights plus the derived, constant position matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    hyper: HyperParams,
    pub weights: Trainable<T>,
    position: Matrix<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Wraps trainable arrays, checking their shapes against `hyper` and deriving the position
    /// matrix.
    pub fn from_trainable(hyper: HyperParams, weights: Trainable<T>) -> Result<Self, ModelError> {
        hyper.validate()?;
        let expected = Trainable::<T>::zeros(&hyper);
        let shapes_match = expected.tensor_sizes() == weights.tensor_sizes()
            && expected.byte_embedding.rows() == weights.byte_embedding.rows()
            && expected
                .conv
                .iter()
                .zip(&weights.conv)
                .all(|(a, b)| a.length == b.length && a.weights.cols() == b.weights.cols())
            && expected.output.weights.cols() == weights.output.weights.cols();
        if !shapes_match {
            return Err(NnError::ShapeMismatch("trainable arrays do not match hyperparameters".into()).into());
        }
        let position = position_embedding_matrix(hyper.seq_len, hyper.pos_dim).cast();
        Ok(ModelParams {
            hyper,
            weights,
            position,
        })
    }

    /// All-zero trainable arrays.
    pub fn zeros(hyper: HyperParams) -> Result<Self, ModelError> {
        let w = Trainable::zeros(&hyper);
        Self::from_trainable(hyper, w)
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    /// The `g x S` position matrix.
    pub fn position(&self) -> &Matrix<T> {
        &self.position
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            hyper: self.hyper.clone(),
            weights: self.weights.cast(),
            position: position_embedding_matrix(self.hyper.seq_len, self.hyper.pos_dim).cast(),
        }
    }
}

/// Seeded initialization: byte embedding ~ U(-0.05, 0.05), convolution and dense weights
/// Glorot-uniform, biases zero.
///
/// Convolution fans follow the usual 4-D kernel convention (`k x g x 1 x filters`): fan-in is
/// `k*g` and fan-out is `filters*k*g`.
pub fn init_params<T: Scalar>(hyper: &HyperParams, seed: u64) -> Result<ModelParams<T>, ModelError> {
    hyper.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Trainable::<T>::zeros(hyper);
    fill_uniform(w.byte_embedding.as_mut_slice(), 0.05, &mut rng);
    for bank in &mut w.conv {
        let receptive = (bank.length * hyper.pos_dim) as f64;
        let limit = (6.0 / (receptive + hyper.num_filters as f64 * receptive)).sqrt();
        fill_uniform(bank.weights.as_mut_slice(), limit, &mut rng);
    }
    if let Some(h) = &mut w.hidden {
        let limit = (6.0 / (h.weights.cols() + h.weights.rows()) as f64).sqrt();
        fill_uniform(h.weights.as_mut_slice(), limit, &mut rng);
    }
    let out = &mut w.output.weights;
    let limit = (6.0 / (out.cols() + out.rows()) as f64).sqrt();
    fill_uniform(out.as_mut_slice(), limit, &mut rng);
    ModelParams::from_trainable(hyper.clone(), w)
}

fn fill_uniform<T: Scalar>(dst: &mut [T], limit: f64, rng: &mut ChaCha8Rng) {
    for x in dst {
        *x = T::from_f64_lossy(rng.gen_range(-limit..=limit));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_param_count() {
        assert_eq!(param_count(&HyperParams::default()), 1024 + 28672 + 512 + 2048 + 4);
        assert_eq!(param_count(&HyperParams::default()), 32260);
        let p = init_params::<f32>(&HyperParams::default(), 0).unwrap();
        assert_eq!(p.weights.len(), 32260);
    }

    #[test]
    fn zero_filters_leaves_embedding_and_bias() {
        let h = HyperParams {
            num_filters: 0,
            ..HyperParams::default()
        };
        assert_eq!(param_count(&h), 256 * 4 + 4);
    }

    #[test]
    fn doubling_filters_roughly_doubles_the_rest() {
        let base = HyperParams::default();
        let doubled = HyperParams {
            num_filters: 256,
            ..base.clone()
        };
        let fixed = base.vocab * base.byte_dim + base.classes;
        let a = param_count(&base) - fixed;
        let b = param_count(&doubled) - fixed;
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn hidden_layer_count() {
        let h = HyperParams {
            hidden_units: Some(32),
            ..HyperParams::default()
        };
        assert_eq!(param_count(&h), 1024 + 28672 + 512 + (32 * 512 + 32) + (4 * 32 + 4));
        let p = init_params::<f32>(&h, 1).unwrap();
        assert_eq!(p.weights.len(), param_count(&h));
    }

    #[test]
    fn hyper_validation() {
        let ok = HyperParams::default();
        assert!(ok.validate().is_ok());
        for bad in [
            HyperParams { pos_dim: 15, ..ok.clone() },
            HyperParams { kernel_lengths: vec![3, 2], ..ok.clone() },
            HyperParams { kernel_lengths: vec![2, 2000], ..ok.clone() },
            HyperParams { kernel_lengths: vec![], ..ok.clone() },
            HyperParams { classes: 5, ..ok.clone() },
            HyperParams { vocab: 300, ..ok.clone() },
            HyperParams { hidden_units: Some(0), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(ModelError::InvalidHyper(_))), "{bad:?}");
        }
    }

    #[test]
    fn position_single_slot_is_half() {
        for g in 1..10 {
            let f = position_embedding_matrix(1, g);
            for k in 0..g {
                assert!((f.get(k, 0) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn position_endpoints_default_shape() {
        let f = position_embedding_matrix(1024, 16);
        assert_eq!((f.rows(), f.cols()), (16, 1024));
        assert!((f.get(0, 0) - (1.0 - 1.0 / 1025.0)).abs() < 1e-15);
        assert!((f.get(0, 0) - 0.9990244).abs() < 1e-7);
        assert!((f.get(0, 1023) - 1.0 / 1025.0).abs() < 1e-15);
        assert!((f.get(0, 1023) - 0.0009756).abs() < 1e-7);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let h = HyperParams::default();
        let a = init_params::<f32>(&h, 42).unwrap();
        let b = init_params::<f32>(&h, 42).unwrap();
        let c = init_params::<f32>(&h, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert!(a.weights.conv.iter().all(|b| b.biases.iter().all(|&x| x == 0.0)));
        assert!(a.weights.output.biases.iter().all(|&x| x == 0.0));
        assert!(a
            .weights
            .byte_embedding
            .as_slice()
            .iter()
            .all(|&x| x.abs() <= 0.05));
    }

    #[test]
    fn tensor_views_agree() {
        let h = HyperParams {
            hidden_units: Some(3),
            num_filters: 2,
            ..HyperParams::default()
        };
        let mut p = init_params::<f64>(&h, 0).unwrap();
        let names = p.weights.tensor_names();
        let sizes = p.weights.tensor_sizes();
        let mut_sizes: Vec<usize> = p.weights.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(names.len(), sizes.len());
        assert_eq!(sizes, mut_sizes);
        assert_eq!(names[1], "conv2.weights");
        assert_eq!(names[5], "conv2.biases");
    }

    proptest! {
        #[test]
        fn position_symmetry(s in 1usize..300, g in 1usize..40) {
            let f = position_embedding_matrix(s, g);
            for n in 1..=s {
                for k in 0..g {
                    let sum = f.get(k, n - 1) + f.get(k, s - n);
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
