//! Local saliency coherence: a windowed pairwise loss under a bilateral
//! kernel.
//!
//! For every pixel i and every in-bounds neighbor j inside a k×k window the
//! loss accumulates `F(i,j) · |S_i − S_j|` and finally divides by the pixel
//! count. `F` combines a spatial and a color Gaussian; it depends only on the
//! image, so it can be tabulated once per image and reused across maps.

use super::{LscConfig, SaliencyMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilateral kernel between two pixels given positions and unit-range colors.
pub fn bilateral_weight(
    pi: (usize, usize),
    pj: (usize, usize),
    ci: [f64; 3],
    cj: [f64; 3],
    cfg: &LscConfig,
) -> f64 {
    let dx = pi.0 as f64 - pj.0 as f64;
    let dy = pi.1 as f64 - pj.1 as f64;
    let pos_sq = dx * dx + dy * dy;
    let mut col_sq = 0.0;
    for ch in 0..3 {
        let d = ci[ch] - cj[ch];
        col_sq += d * d;
    }
    (-pos_sq / (2.0 * cfg.sigma_p * cfg.sigma_p) - col_sq / (2.0 * cfg.sigma_i * cfg.sigma_i))
        .exp()
        / cfg.weight_norm
}

/// Precomputed kernel values for the unordered pixel pairs of one image.
///
/// Offsets cover the lower half of the window (the ordered sum counts every
/// pair twice with identical weight, so only one direction is stored).
pub struct BilateralTable {
    width: usize,
    height: usize,
    /// (dy, dx) with dy > 0, or dy == 0 && dx > 0.
    offsets: Vec<(isize, isize)>,
    /// One weight plane per offset, indexed by the reference pixel; entries
    /// whose neighbor falls out of bounds are 0.
    planes: Vec<Vec<f64>>,
}

impl BilateralTable {
    /// `image` is `[3, H, W]` with unit-range colors.
    pub fn new(image: &Tensor, cfg: &LscConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(
                "bilateral_table",
                format!("expected [3, H, W] image, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[1], shape[2]);
        let r = (cfg.kernel_size / 2) as isize;
        let mut offsets = Vec::new();
        for dy in 0..=r {
            for dx in -r..=r {
                if dy == 0 && dx <= 0 {
                    continue;
                }
                offsets.push((dy, dx));
            }
        }

        let plane = h * w;
        let px = image.data();
        let inv_2sp2 = 1.0 / (2.0 * cfg.sigma_p * cfg.sigma_p);
        let inv_2si2 = 1.0 / (2.0 * cfg.sigma_i * cfg.sigma_i);
        let mut planes = Vec::with_capacity(offsets.len());
        for &(dy, dx) in &offsets {
            let spatial = (dy * dy + dx * dx) as f64 * inv_2sp2;
            let mut weights = vec![0.0; plane];
            for y in 0..h as isize {
                let ny = y + dy;
                if ny < 0 || ny >= h as isize {
                    continue;
                }
                for x in 0..w as isize {
                    let nx = x + dx;
                    if nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let i = (y * w as isize + x) as usize;
                    let j = (ny * w as isize + nx) as usize;
                    let mut col_sq = 0.0;
                    for ch in 0..3 {
                        let d = px[ch * plane + i] - px[ch * plane + j];
                        col_sq += d * d;
                    }
                    weights[i] = (-spatial - col_sq * inv_2si2).exp() / cfg.weight_norm;
                }
            }
            planes.push(weights);
        }
        Ok(BilateralTable {
            width: w,
            height: h,
            offsets,
            planes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Coherence loss and its gradient with respect to the prediction.
pub fn lsc_loss(pred: &SaliencyMap, image: &Tensor, cfg: &LscConfig) -> Result<(f64, Vec<f64>)> {
    let table = BilateralTable::new(image, cfg)?;
    lsc_loss_with_table(pred, &table)
}

/// Same as [`lsc_loss`] with a precomputed kernel table.
pub fn lsc_loss_with_table(pred: &SaliencyMap, table: &BilateralTable) -> Result<(f64, Vec<f64>)> {
    if pred.width != table.width || pred.height != table.height {
        return Err(Error::shape(
            "lsc_loss",
            format!(
                "prediction {}x{} vs image {}x{}",
                pred.width, pred.height, table.width, table.height
            ),
        ));
    }
    let (w, h) = (table.width, table.height);
    let s = &pred.values;
    let mut loss = 0.0;
    let mut grad = vec![0.0; s.len()];
    for (&(dy, dx), weights) in table.offsets.iter().zip(&table.planes) {
        for y in 0..h as isize {
            let ny = y + dy;
            if ny < 0 || ny >= h as isize {
                continue;
            }
            let x_lo = 0.max(-dx);
            let x_hi = (w as isize).min(w as isize - dx);
            for x in x_lo..x_hi {
                let i = (y * w as isize + x) as usize;
                let j = ((y + dy) * w as isize + (x + dx)) as usize;
                let f2 = 2.0 * weights[i];
                let d = s[i] - s[j];
                loss += f2 * d.abs();
                // subgradient 0 at ties
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[i] += f2 * sign;
                grad[j] -= f2 * sign;
            }
        }
    }
    let norm = 1.0 / (w * h) as f64;
    for g in &mut grad {
        *g *= norm;
    }
    Ok((loss * norm, grad))
}
