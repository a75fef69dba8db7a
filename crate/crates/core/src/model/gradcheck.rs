use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{init_params, HyperParams, ModelError, ModelParams};
use crate::nn::{check_gradients, GradCheckReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub hyper: HyperParams,
    pub eps: f64,
    /// Coordinates sampled per parameter tensor.
    pub max_per_group: usize,
    /// Uniform noise added to the initialized parameters so every path (biases included) is
    /// exercised away from the zero-bias start.
    pub jitter: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            hyper: HyperParams {
                seq_len: 8,
                bytes_per_insn: 4,
                vocab: 16,
                byte_dim: 2,
                pos_dim: 8,
                kernel_lengths: vec![2, 3, 4, 5],
                num_filters: 2,
                classes: 4,
                hidden_units: None,
            },
            eps: 1e-5,
            max_per_group: 256,
            jitter: 0.3,
        }
    }
}

/// Finite-difference check of the analytic gradients at a random point: seeded parameters,
/// seeded input bytes and label.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params::<f64>(&cfg.hyper, seed)?;
    for t in params.weights.tensors_mut() {
        for x in t {
            *x += rng.gen_range(-cfg.jitter..=cfg.jitter);
        }
    }
    let bytes: Vec<u8> = (0..cfg.hyper.input_bytes())
        .map(|_| rng.gen_range(0..cfg.hyper.vocab) as u8)
        .collect();
    let label = rng.gen_range(0..cfg.hyper.classes);
    grad_check_at(&mut params, &bytes, label, cfg.eps, cfg.max_per_group, &mut rng)
}

/// Finite-difference check at the given parameters and input.
pub fn grad_check_at<R: Rng>(
    params: &mut ModelParams<f64>,
    bytes: &[u8],
    label: usize,
    eps: f64,
    max_per_group: usize,
    rng: &mut R,
) -> Result<GradCheckReport, ModelError> {
    let (_, grad, _) = params.loss_and_gradients(bytes, label)?;
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|t| t.to_vec()).collect();
    let names = grad.tensor_names();
    // Input validity was established by the analytic pass above.
    let loss = |p: &ModelParams<f64>| {
        let trace = p.forward_trace(bytes).expect("validated input");
        p.loss(&trace, label).expect("validated label")
    };
    Ok(check_gradients(
        params,
        |p| p.weights.tensors_mut(),
        loss,
        &names,
        &analytic,
        eps,
        max_per_group,
        rng,
    ))
}
