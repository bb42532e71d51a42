//! Central-difference gradient checking.
//!
//! A closure maps a set of input tensors to a scalar loss plus its analytical
//! gradients. The checker perturbs coordinates by ±h and compares. For
//! near-zero gradients the relative error would be dominated by roundoff, so
//! the denominator is floored at 1e-3 (making the comparison absolute there).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Which coordinates of the flattened input space to probe.
#[derive(Debug, Clone, Copy)]
pub enum CoordPlan {
    All,
    /// Sample this many coordinates across all inputs, seeded.
    Sample(usize, u64),
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare a closure's analytical gradients against central differences.
///
/// The closure returns the scalar loss (as a 1-element tensor) and one
/// gradient tensor per input, shape-matched.
pub fn check_gradient<F>(
    f: &mut F,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    plan: CoordPlan,
) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> Result<(Tensor, Vec<Tensor>)>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::GradCheck(format!("step h={h} outside [1e-7, 1e-4]")));
    }
    let (loss, grads) = f(inputs)?;
    if loss.numel() != 1 {
        return Err(Error::GradCheck(format!(
            "closure output must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if grads.len() != inputs.len() {
        return Err(Error::GradCheck(format!(
            "closure returned {} gradients for {} inputs",
            grads.len(),
            inputs.len()
        )));
    }
    for (i, (g, x)) in grads.iter().zip(inputs).enumerate() {
        if g.shape() != x.shape() {
            return Err(Error::GradCheck(format!(
                "gradient {i} shape {:?} != input shape {:?}",
                g.shape(),
                x.shape()
            )));
        }
    }

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            coords.push((ti, ci));
        }
    }
    if let CoordPlan::Sample(n, seed) = plan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(n);
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for &(ti, ci) in &coords {
        let orig = work[ti].data()[ci];
        work[ti].data_mut()[ci] = orig + h;
        let (lp, _) = f(&work)?;
        work[ti].data_mut()[ci] = orig - h;
        let (lm, _) = f(&work)?;
        work[ti].data_mut()[ci] = orig;
        let numeric = (lp.data()[0] - lm.data()[0]) / (2.0 * h);
        let analytic = grads[ti].data()[ci];
        max_rel = max_rel.max(rel_err(analytic, numeric));
    }

    Ok(GradReport {
        max_rel_err: max_rel,
        checked: coords.len(),
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_has_exact_gradient() {
        let mut f = |xs: &[Tensor]| {
            let s: f64 = xs[0].data().iter().sum();
            Ok((Tensor::scalar(s), vec![Tensor::full(xs[0].shape(), 1.0)]))
        };
        let x = Tensor::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let report = check_gradient(&mut f, &[x], 1e-6, 1e-8, CoordPlan::All).unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut f = |xs: &[Tensor]| {
            let s: f64 = xs[0].data().iter().map(|v| v * v).sum();
            // deliberately wrong: forgets the factor 2
            let g = Tensor::from_vec(xs[0].shape(), xs[0].data().to_vec()).unwrap();
            Ok((Tensor::scalar(s), vec![g]))
        };
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = check_gradient(&mut f, &[x], 1e-6, 1e-4, CoordPlan::All).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_scalar_closure_is_rejected() {
        let mut f = |xs: &[Tensor]| {
            Ok((xs[0].clone(), vec![Tensor::full(xs[0].shape(), 1.0)]))
        };
        let x = Tensor::zeros(&[2]);
        let err = check_gradient(&mut f, &[x], 1e-6, 1e-4, CoordPlan::All).unwrap_err();
        assert!(err.to_string().contains("must be scalar"));
    }
}
