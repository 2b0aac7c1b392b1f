//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use crate::error::{Result, SvaeError};
use crate::rng::seeded;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error. Central differences at the
/// default step cannot resolve gradients below this scale.
pub const GRAD_FLOOR: f64 = 1e-7;

/// Options for [`GradCheck::run`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

fn evaluate<F>(loss_fn: &mut F, params: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(SvaeError::numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Loss value and reverse-mode gradients for every parameter.
pub fn analytic_gradients<F>(mut loss_fn: F, params: &[Tensor]) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|p| tape.leaf(p)).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let per_param = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, per_param))
}

impl GradCheck {
    pub fn run<F>(&self, mut loss_fn: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        let (_, analytic) = analytic_gradients(&mut loss_fn, params)?;
        self.compare(&analytic, loss_fn, params)
    }

    /// Compares supplied gradients against central differences of `loss_fn`.
    pub fn compare<F>(&self, analytic: &[Vec<f64>], mut loss_fn: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(SvaeError::contract(format!("eps must be > 0, got {}", self.eps)));
        }
        if analytic.len() != params.len() {
            return Err(SvaeError::dim(
                "gradcheck",
                "gradient count",
                params.len(),
                analytic.len(),
            ));
        }
        let mut rng = seeded(self.seed);
        let mut work: Vec<Tensor> = params.to_vec();
        let mut report = GradCheckReport {
            max_relative_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        };
        for (pi, grad) in analytic.iter().enumerate() {
            let n = work[pi].numel();
            if grad.len() != n {
                return Err(SvaeError::dim(
                    "gradcheck",
                    format!("gradient {pi} numel"),
                    n,
                    grad.len(),
                ));
            }
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => {
                    let mut c = sample(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for c in coords {
                let orig = work[pi].data()[c];
                work[pi].data_mut()[c] = orig + self.eps;
                let up = evaluate(&mut loss_fn, &work)?;
                work[pi].data_mut()[c] = orig - self.eps;
                let down = evaluate(&mut loss_fn, &work)?;
                work[pi].data_mut()[c] = orig;
                let numeric = (up - down) / (2.0 * self.eps);
                let a = grad[c];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                report.coords_checked += 1;
                if rel > report.max_relative_error {
                    report.max_relative_error = rel;
                    report.worst = (pi, c);
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error between reverse-mode and central-difference gradients
/// over every coordinate of every parameter.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let check = GradCheck {
        eps,
        ..GradCheck::default()
    };
    Ok(check.run(loss_fn, params)?.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(t: &mut Tape, p: &[Var]) -> Result<Var> {
        let sq = t.mul(p[0], p[0])?;
        let s = t.scale(sq, 3.0);
        let lin = t.scale(p[0], -2.0);
        let q = t.add(s, lin)?;
        Ok(t.sum(q))
    }

    fn params() -> Vec<Tensor> {
        vec![Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap()]
    }

    #[test]
    fn quadratic_is_exact() {
        let err = finite_difference_check(quadratic, &params(), 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (_, mut grads) = analytic_gradients(quadratic, &params()).unwrap();
        grads[0][2] *= 1.05;
        let report = GradCheck::default().compare(&grads, quadratic, &params()).unwrap();
        assert!(report.max_relative_error > 1e-2);
        assert_eq!(report.worst, (0, 2));
    }

    #[test]
    fn non_positive_eps_rejected() {
        assert!(matches!(
            finite_difference_check(quadratic, &params(), 0.0),
            Err(SvaeError::Contract(_))
        ));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let p = vec![Tensor::new(&[1], vec![800.0]).unwrap()];
        let err = finite_difference_check(
            |t: &mut Tape, v: &[Var]| {
                let e = t.exp(v[0]);
                Ok(t.sum(e))
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, SvaeError::Numeric(_)));
    }

    #[test]
    fn sampled_coordinates_subset() {
        let p = vec![Tensor::new(&[50], (0..50).map(|i| i as f64 * 0.1).collect()).unwrap()];
        let check = GradCheck {
            max_coords: Some(7),
            ..GradCheck::default()
        };
        let r = check.run(quadratic, &p).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
