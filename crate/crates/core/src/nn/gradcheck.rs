use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Gradients below this magnitude are effectively compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
}

/// Compares analytic gradients with central differences `(L(θ+ε) - L(θ-ε)) / 2ε`.
///
/// `tensors` exposes the parameter tensors of `params` in the same order as `analytic`;
/// at most `max_per_group` coordinates per tensor are sampled (all of them when the tensor is
/// smaller).
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<P, R: Rng>(
    params: &mut P,
    tensors: impl Fn(&mut P) -> Vec<&mut [f64]>,
    loss: impl Fn(&P) -> f64,
    names: &[String],
    analytic: &[Vec<f64>],
    eps: f64,
    max_per_group: usize,
    rng: &mut R,
) -> GradCheckReport {
    let mut groups = Vec::with_capacity(analytic.len());
    for (g, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let coords: Vec<usize> = if len <= max_per_group {
            (0..len).collect()
        } else {
            let mut picked = sample(rng, len, max_per_group).into_vec();
            picked.sort_unstable();
            picked
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &coords {
            let orig = tensors(params)[g][i];
            tensors(params)[g][i] = orig + eps;
            let plus = loss(params);
            tensors(params)[g][i] = orig - eps;
            let minus = loss(params);
            tensors(params)[g][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (numeric - grad[i]).abs();
            let rel = abs / numeric.abs().max(grad[i].abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        groups.push(GroupError {
            name: names.get(g).cloned().unwrap_or_else(|| format!("tensor{g}")),
            checked: coords.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        groups,
        max_rel_error,
    }
}
