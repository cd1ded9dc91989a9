//! Central finite-difference checks against tape gradients.

use rand::Rng;

use super::params::ParamSet;

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` at the worst point.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small absolute floor so coordinates whose
/// derivative is essentially zero do not divide by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient written by `grad` against central differences of
/// `loss` at `points` coordinates drawn uniformly over all scalars of `set`.
pub fn check_params<R: Rng + ?Sized>(
    set: &ParamSet,
    points: usize,
    h: f64,
    floor: f64,
    rng: &mut R,
    loss: impl Fn(&ParamSet) -> f64,
    grad: impl Fn(&mut ParamSet),
) -> GradCheck {
    check_params_matching(set, "", points, h, floor, rng, loss, grad)
}

/// Like [`check_params`], restricted to tensors whose name starts with
/// `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn check_params_matching<R: Rng + ?Sized>(
    set: &ParamSet,
    prefix: &str,
    points: usize,
    h: f64,
    floor: f64,
    rng: &mut R,
    loss: impl Fn(&ParamSet) -> f64,
    grad: impl Fn(&mut ParamSet),
) -> GradCheck {
    let mut analytic = set.clone();
    analytic.zero_grad();
    grad(&mut analytic);
    let chosen: Vec<usize> = (0..set.tensors().len())
        .filter(|&t| set.names()[t].starts_with(prefix))
        .collect();
    let total: usize = chosen.iter().map(|&t| set.tensors()[t].value.len()).sum();
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    if total == 0 {
        return report;
    }
    let mut probe = set.clone();
    for _ in 0..points {
        let mut k = rng.random_range(0..total);
        let mut c = 0;
        while k >= set.tensors()[chosen[c]].value.len() {
            k -= set.tensors()[chosen[c]].value.len();
            c += 1;
        }
        let t = chosen[c];
        let orig = set.tensors()[t].value.data()[k];
        probe.tensors_mut()[t].value.data_mut()[k] = orig + h;
        let up = loss(&probe);
        probe.tensors_mut()[t].value.data_mut()[k] = orig - h;
        let down = loss(&probe);
        probe.tensors_mut()[t].value.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.tensors()[t].grad.data()[k];
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((set.names()[t].clone(), k, a, numeric));
        }
    }
    report
}
