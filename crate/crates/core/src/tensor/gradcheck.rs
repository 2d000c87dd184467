//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamSet, Tensor};
use crate::error::{config_err, Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

/// Which parameter elements to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    All,
    /// `count` elements drawn without replacement across all tensors.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes discarded because the stencil crossed a kink.
    pub skipped: usize,
    /// `(tensor, element, analytic, numeric)` of the worst element.
    pub worst: (usize, usize, f64, f64),
}

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against `(J(p+ε) − J(p−ε)) / 2ε` element by element.
///
/// `params` is perturbed in place and restored bit-exactly after each probe.
pub fn finite_diff_check<P, F>(
    params: &mut P,
    analytic: &[Tensor<f64>],
    eps: f64,
    sampling: Sampling,
    mut loss: F,
) -> Result<GradCheckReport>
where
    P: ParamSet<f64>,
    F: FnMut(&P) -> Result<f64>,
{
    finite_diff_check_piecewise(params, analytic, eps, sampling, |p| Ok((loss(p)?, 0)))
}

/// Like [`finite_diff_check`] for piecewise-smooth losses.
///
/// `loss` also returns a signature of its active pieces (e.g. ReLU on/off
/// pattern). A probe whose `±ε` evaluations land on a different piece than
/// the unperturbed point straddles a kink, where the central difference is
/// not an estimate of the derivative; such probes are skipped and, under
/// random sampling, replaced by further draws until `count` probes are valid
/// or the parameters are exhausted.
pub fn finite_diff_check_piecewise<P, F>(
    params: &mut P,
    analytic: &[Tensor<f64>],
    eps: f64,
    sampling: Sampling,
    mut loss: F,
) -> Result<GradCheckReport>
where
    P: ParamSet<f64>,
    F: FnMut(&P) -> Result<(f64, u64)>,
{
    if !(eps > 0.0) {
        return config_err("finite difference step must be positive");
    }
    let dims: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.dims().to_vec()).collect();
    if dims.len() != analytic.len() || dims.iter().zip(analytic).any(|(d, a)| d.as_slice() != a.dims()) {
        return config_err("analytic gradients do not mirror the parameter set");
    }
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, d| {
            let start = *acc;
            *acc += d.iter().product::<usize>();
            Some(start)
        })
        .collect();
    let total: usize = dims.iter().map(|d| d.iter().product::<usize>()).sum();
    let (order, wanted): (Vec<usize>, usize) = match sampling {
        Sampling::All => ((0..total).collect(), total),
        Sampling::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (sample(&mut rng, total, total).into_vec(), count.min(total))
        }
    };

    let mut eval = |p: &P| -> Result<(f64, u64)> {
        let (j, sig) = loss(p)?;
        if !j.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {j}")));
        }
        Ok((j, sig))
    };

    let (_, base_sig) = eval(params)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: (0, 0, 0.0, 0.0) };
    for flat in order {
        if report.checked == wanted {
            break;
        }
        let t = offsets.partition_point(|&o| o <= flat) - 1;
        let e = flat - offsets[t];
        let original = params.tensors()[t].data()[e];
        params.tensors_mut()[t].data_mut()[e] = original + eps;
        let (plus, sig_plus) = eval(params)?;
        params.tensors_mut()[t].data_mut()[e] = original - eps;
        let (minus, sig_minus) = eval(params)?;
        params.tensors_mut()[t].data_mut()[e] = original;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[t].data()[e];
        let rel = relative_error(a, numeric);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = (t, e, a, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
