//! Training losses for scribble supervision.
//!
//! Three terms drive training: partial cross-entropy on the scribbled pixels,
//! a local saliency coherence loss that propagates labels to nearby
//! similar-colored pixels, and a structure consistency loss tying predictions
//! at two input scales together. [`total_objective`] composes them across the
//! final map and the three intermediate decoder maps.

mod coherence;
mod objective;
mod structure;

pub use coherence::{bilateral_weight, lsc_loss, lsc_loss_with_table, BilateralTable};
pub use objective::{total_objective, total_objective_detail, LossBreakdown, ObjectiveGrads};
pub use structure::{ssc_loss, ssim_backward, ssim_map, SsimStats};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel scribble state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Label {
    Unlabeled = 0,
    Foreground = 1,
    Background = 2,
}

/// Sparse ternary annotation; most pixels stay [`Label::Unlabeled`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScribbleMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
}

impl ScribbleMask {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "scribble_mask",
                format!("{}x{} mask wants {} labels, got {}", width, height, width * height, labels.len()),
            ));
        }
        Ok(ScribbleMask { width, height, labels })
    }

    pub fn unlabeled(width: usize, height: usize) -> Self {
        ScribbleMask {
            width,
            height,
            labels: vec![Label::Unlabeled; width * height],
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// H×W saliency values in `[0, 1]` (post-sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "saliency_map",
                format!("{}x{} map wants {} values, got {}", width, height, width * height, values.len()),
            ));
        }
        Ok(SaliencyMap { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        SaliencyMap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Bilateral kernel parameters for the coherence loss.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LscConfig {
    /// Window side length in pixels; must be odd.
    pub kernel_size: usize,
    /// Spatial Gaussian scale, in pixels.
    pub sigma_p: f64,
    /// Color Gaussian scale, in unit-range color units.
    pub sigma_i: f64,
    /// Normalizer `w`; the kernel carries a factor `1/w`.
    pub weight_norm: f64,
}

impl Default for LscConfig {
    fn default() -> Self {
        LscConfig {
            kernel_size: 5,
            sigma_p: 6.0,
            sigma_i: 0.1,
            weight_norm: 1.0,
        }
    }
}

impl LscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "lsc.kernel_size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        if self.sigma_p <= 0.0 || self.sigma_i <= 0.0 {
            return Err(Error::Config(
                "lsc.sigma_p and lsc.sigma_i must be > 0".to_string(),
            ));
        }
        if self.weight_norm <= 0.0 {
            return Err(Error::Config("lsc.weight_norm must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Mixing weights for the composed objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight on the coherence loss, in both dominant and auxiliary terms.
    pub beta: f64,
    /// SSIM share inside the structure consistency loss.
    pub alpha: f64,
    /// Auxiliary stage weights, ordered nearest-to-output first.
    pub lambda_q: [f64; 3],
    /// Down-scale factor for the dual-scale forward.
    pub scale_factor: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 0.3,
            alpha: 0.85,
            lambda_q: [0.8, 0.6, 0.4],
            scale_factor: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::Config("objective.beta must be >= 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("objective.alpha must be in [0, 1]".to_string()));
        }
        if self.lambda_q.iter().any(|l| *l < 0.0) {
            return Err(Error::Config("objective.lambda_q must be >= 0".to_string()));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor < 1.0) {
            return Err(Error::Config(
                "objective.scale_factor must be in (0, 1)".to_string(),
            ));
        }
        Ok(())
    }
}

const CE_CLAMP: f64 = 1e-7;

/// Cross-entropy over the scribbled pixels only.
///
/// Foreground and background means are computed separately and summed; a class
/// with no labeled pixels contributes zero. Predictions are clamped to
/// `[1e-7, 1-1e-7]` before the log.
pub fn partial_ce(pred: &SaliencyMap, mask: &ScribbleMask) -> Result<(f64, Vec<f64>)> {
    if pred.width != mask.width || pred.height != mask.height {
        return Err(Error::shape(
            "partial_ce",
            format!(
                "prediction {}x{} vs mask {}x{}",
                pred.width, pred.height, mask.width, mask.height
            ),
        ));
    }
    let n_fg = mask.count(Label::Foreground);
    let n_bg = mask.count(Label::Background);

    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (v, l)) in pred.values.iter().zip(&mask.labels).enumerate() {
        match l {
            Label::Foreground => {
                let c = v.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
                loss += -c.ln() / n_fg as f64;
                if (CE_CLAMP..=1.0 - CE_CLAMP).contains(v) {
                    grad[i] = -1.0 / (c * n_fg as f64);
                }
            }
            Label::Background => {
                let c = v.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
                loss += -(1.0 - c).ln() / n_bg as f64;
                if (CE_CLAMP..=1.0 - CE_CLAMP).contains(v) {
                    grad[i] = 1.0 / ((1.0 - c) * n_bg as f64);
                }
            }
            Label::Unlabeled => {}
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_of(values: &[f64], w: usize, h: usize) -> SaliencyMap {
        SaliencyMap::new(w, h, values.to_vec()).unwrap()
    }

    #[test]
    fn partial_ce_single_fg_pixel() {
        let pred = map_of(&[0.5], 1, 1);
        let mask = ScribbleMask::new(1, 1, vec![Label::Foreground]).unwrap();
        let (loss, grad) = partial_ce(&pred, &mask).unwrap();
        assert!((loss - 0.693_147_180_559_945_3).abs() < 1e-9);
        assert!((grad[0] - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn partial_ce_perfect_prediction_hits_clamp_floor() {
        let pred = map_of(&[1.0, 0.0], 2, 1);
        let mask =
            ScribbleMask::new(2, 1, vec![Label::Foreground, Label::Background]).unwrap();
        let (loss, grad) = partial_ce(&pred, &mask).unwrap();
        let expect = -2.0 * (1.0 - 1e-7f64).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!(loss < 3e-7);
        // clamped pixels carry no gradient
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn partial_ce_class_means_are_separate() {
        let pred = map_of(&[0.9, 0.8, 0.3], 3, 1);
        let mask = ScribbleMask::new(
            3,
            1,
            vec![Label::Foreground, Label::Foreground, Label::Background],
        )
        .unwrap();
        let (loss, _) = partial_ce(&pred, &mask).unwrap();
        let expect = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0 - 0.7f64.ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.520_927).abs() < 1e-6);
    }

    #[test]
    fn partial_ce_empty_class_contributes_zero() {
        let pred = map_of(&[0.5, 0.5], 2, 1);
        let mask = ScribbleMask::new(2, 1, vec![Label::Foreground, Label::Unlabeled]).unwrap();
        let (loss, _) = partial_ce(&pred, &mask).unwrap();
        assert!((loss - 0.693_147_180_559_945_3).abs() < 1e-12);

        let all_unlabeled = ScribbleMask::unlabeled(2, 1);
        let (loss, grad) = partial_ce(&pred, &all_unlabeled).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn partial_ce_dimension_mismatch() {
        let pred = map_of(&[0.5], 1, 1);
        let mask = ScribbleMask::unlabeled(2, 2);
        assert!(partial_ce(&pred, &mask).is_err());
    }

    #[test]
    fn partial_ce_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::{check_gradient, CoordPlan};
        use crate::tensor::Tensor;

        let mask = ScribbleMask::new(
            4,
            1,
            vec![
                Label::Foreground,
                Label::Background,
                Label::Unlabeled,
                Label::Foreground,
            ],
        )
        .unwrap();
        let mut f = |xs: &[Tensor]| {
            let pred = SaliencyMap::new(4, 1, xs[0].data().to_vec())?;
            let (loss, grad) = partial_ce(&pred, &mask)?;
            Ok((Tensor::scalar(loss), vec![Tensor::from_vec(&[4], grad)?]))
        };
        let x = Tensor::from_vec(&[4], vec![0.3, 0.6, 0.5, 0.9]).unwrap();
        let report = check_gradient(&mut f, &[x], 1e-6, 1e-8, CoordPlan::All).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
