//! Central finite-difference verification of the backward pass.

use rand::Rng;

use super::{Scalar, Tape, Tensor, TensorError};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across all compared coordinates, with
    /// denominator `max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    /// Flat index of the worst coordinate within that parameter.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares analytic gradients against central finite differences.
///
/// `f` must rebuild the loss from the current parameter values on every call
/// and be deterministic: dropout disabled, any internal rng freshly seeded.
/// For each named parameter, `samples_per_param` coordinates are drawn
/// without replacement (0 means every coordinate) and perturbed by `±eps`.
/// Run this in 64-bit mode; central differences drown in rounding noise at
/// 32-bit precision.
pub fn finite_diff_check<T, R, F>(
    tape: &Tape<T>,
    params: &[(String, Tensor<T>)],
    mut f: F,
    eps: T,
    samples_per_param: usize,
    rng: &mut R,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut() -> Result<Tensor<T>, TensorError>,
{
    let mark = tape.mark();
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<T>> = params.iter().map(|(_, p)| p.grad()).collect();
    tape.reset_to(mark);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let two_eps = 2.0 * eps.to_f64();
    for ((name, param), grads) in params.iter().zip(analytic.iter()) {
        let n = param.numel();
        let coords: Vec<usize> = if samples_per_param == 0 || n <= samples_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, samples_per_param).into_vec()
        };
        let mut data = param.value();
        for &ci in &coords {
            let orig = data[ci];
            data[ci] = orig + eps;
            param.set_data(&data)?;
            let plus = {
                let l = f()?;
                let v = l.item()?;
                tape.reset_to(mark);
                v
            };
            data[ci] = orig - eps;
            param.set_data(&data)?;
            let minus = {
                let l = f()?;
                let v = l.item()?;
                tape.reset_to(mark);
                v
            };
            data[ci] = orig;
            param.set_data(&data)?;
            let numeric = (plus - minus).to_f64() / two_eps;
            let a = grads[ci].to_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = ci;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
