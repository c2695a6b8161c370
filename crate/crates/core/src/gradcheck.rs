//! Central finite-difference checks of analytic gradients over a
//! [`ParamSet`]. Inputs that need checking are stored in the set too.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub entries: usize,
    /// Largest analytic gradient magnitude seen, to detect vacuous checks.
    pub max_abs_grad: f64,
}

/// Compares `grads` against central differences of `loss` for up to
/// `per_tensor` randomly chosen entries of every trainable tensor.
pub fn check(
    params: &ParamSet<f64>,
    grads: &BTreeMap<String, Tensor<f64>>,
    step: f64,
    per_tensor: usize,
    seed: u64,
    loss: impl Fn(&ParamSet<f64>) -> Result<f64>,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut probe = params.clone();
    for name in params.trainable_names() {
        let len = params.get(&name)?.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_tensor).into_vec()
        };
        for i in picks {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.entries += 1;
            report.max_abs_grad = report.max_abs_grad.max(analytic.abs());
            if report.worst.is_empty() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    Ok(report)
}
