use super::{shape_err, Matrix, NnError, Scalar};

/// Probability floor applied before taking the log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid (unpadded) convolution of a full-width kernel down the rows of `input`.
///
/// `out[i] = sum_{r<k, c<W} input[i+r][c] * kernel[r][c] + bias`, giving `S - k + 1` outputs.
pub fn conv_valid<T: Scalar>(
    input: &Matrix<T>,
    kernel: &Matrix<T>,
    bias: T,
) -> Result<Vec<T>, NnError> {
    if kernel.cols() != input.cols() {
        return Err(shape_err(format!(
            "kernel width {} != input width {}",
            kernel.cols(),
            input.cols()
        )));
    }
    if kernel.rows() == 0 || kernel.rows() > input.rows() {
        return Err(shape_err(format!(
            "kernel length {} not in 1..={}",
            kernel.rows(),
            input.rows()
        )));
    }
    let mut out = vec![T::zero(); input.rows() - kernel.rows() + 1];
    conv_valid_into(input.as_slice(), input.cols(), kernel.as_slice(), bias, &mut out);
    Ok(out)
}

/// Unchecked core of [`conv_valid`] over flat row-major storage. Because the kernel spans the
/// full row width, window `i` is the contiguous slice `input[i*width .. (i+k)*width]`.
#[inline]
pub fn conv_valid_into<T: Scalar>(input: &[T], width: usize, kernel: &[T], bias: T, out: &mut [T]) {
    let span = kernel.len();
    for (i, o) in out.iter_mut().enumerate() {
        let start = i * width;
        *o = dot(&input[start..start + span], kernel) + bias;
    }
}

pub fn relu<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| x.max(T::zero())).collect()
}

pub fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Maximum and the smallest index attaining it.
pub fn global_max_pool<T: Scalar>(v: &[T]) -> Result<(T, usize), NnError> {
    let (&first, rest) = v.split_first().ok_or(NnError::EmptyInput)?;
    let mut best = (first, 0);
    for (i, &x) in rest.iter().enumerate() {
        if x > best.0 {
            best = (x, i + 1);
        }
    }
    Ok(best)
}

/// `W x + b`.
pub fn dense<T: Scalar>(x: &[T], w: &Matrix<T>, b: &[T]) -> Result<Vec<T>, NnError> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(shape_err(format!(
            "dense {}x{} with input {} and bias {}",
            w.rows(),
            w.cols(),
            x.len(),
            b.len()
        )));
    }
    Ok((0..w.rows()).map(|r| dot(w.row(r), x) + b[r]).collect())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T, NnError> {
    let p = *probs.get(label).ok_or(NnError::BadLabel {
        label,
        classes: probs.len(),
    })?;
    Ok(-p.max(T::from_f64_lossy(PROB_FLOOR)).ln())
}
