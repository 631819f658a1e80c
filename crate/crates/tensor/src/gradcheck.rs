//! Central finite differences for verifying analytic gradients.

use crate::error::Result;
use crate::tensor::Tensor;

/// Worst coordinate of a gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` with central differences of `f` around `x`.
///
/// `f` maps a candidate input to a scalar; `indices` selects which
/// coordinates to perturb (all when `None`).
pub fn check_gradient<F>(
    x: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    step: f64,
    floor: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in idx {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe)?;
        probe[i] = orig - step;
        let fm = f(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let rel = rel_error(analytic[i], numeric, floor);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check of a scalar function of one tensor input.
pub fn check_input_gradient<F>(x: &Tensor<f64>, step: f64, floor: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let leaf = x.requires_grad_leaf();
    let y = f(&leaf)?;
    let grads = y.backward();
    let analytic = grads
        .get(&leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let shape = x.shape().to_vec();
    check_gradient(x.data(), &analytic, None, step, floor, |v| {
        let t = Tensor::from_vec(v.to_vec(), &shape)?;
        Ok(f(&t)?.item())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = [0.3, -1.2, 2.0];
        let good = [2.0 * 0.3, 2.0 * -1.2, 2.0 * 2.0];
        let r = check_gradient(&x, &good, None, 1e-5, 1e-8, |v| Ok(v.iter().map(|a| a * a).sum())).unwrap();
        assert!(r.max_rel_error < 1e-8);
        let bad = [0.6, -2.4, 3.0];
        let r = check_gradient(&x, &bad, None, 1e-5, 1e-8, |v| Ok(v.iter().map(|a| a * a).sum())).unwrap();
        assert_eq!(r.worst_index, 2);
        assert!(r.max_rel_error > 0.2);
    }
}
