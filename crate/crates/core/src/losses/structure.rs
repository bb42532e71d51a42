//! Structure consistency between the two forward scales.
//!
//! Single-scale SSIM with 3×3 mean-filter statistics (reflection padding) and
//! the usual stabilizers C1 = 0.01², C2 = 0.03² on a unit dynamic range. The
//! consistency loss mixes `(1-SSIM)/2` with an L1 term.

use super::SaliencyMap;
use crate::error::{Error, Result};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Filtered moments saved for the backward pass.
pub struct SsimStats {
    width: usize,
    height: usize,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    m_xx: Vec<f64>,
    m_yy: Vec<f64>,
    m_xy: Vec<f64>,
}

fn reflect(i: isize, len: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i >= len as isize {
        2 * len - 1 - i as usize
    } else {
        i as usize
    }
}

/// 3×3 mean filter with reflection padding.
fn mean3x3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sy = reflect(y + dy, h);
                    let sx = reflect(x + dx, w);
                    acc += src[sy * w + sx];
                }
            }
            out[(y as usize) * w + x as usize] = acc / 9.0;
        }
    }
    out
}

/// Adjoint of [`mean3x3`]: scatters each window share back to its source.
fn mean3x3_adjoint(upstream: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let share = upstream[(y as usize) * w + x as usize] / 9.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let sy = reflect(y + dy, h);
                    let sx = reflect(x + dx, w);
                    out[sy * w + sx] += share;
                }
            }
        }
    }
    out
}

fn check_dims(x: &SaliencyMap, y: &SaliencyMap, op: &'static str) -> Result<()> {
    if x.width != y.width || x.height != y.height {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", x.width, x.height, y.width, y.height),
        ));
    }
    Ok(())
}

/// Per-pixel SSIM map plus the statistics needed for its backward pass.
pub fn ssim_map(x: &SaliencyMap, y: &SaliencyMap) -> Result<(Vec<f64>, SsimStats)> {
    check_dims(x, y, "ssim")?;
    let (w, h) = (x.width, x.height);
    let xx: Vec<f64> = x.values.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.values.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.values.iter().zip(&y.values).map(|(a, b)| a * b).collect();
    let stats = SsimStats {
        width: w,
        height: h,
        mu_x: mean3x3(&x.values, w, h),
        mu_y: mean3x3(&y.values, w, h),
        m_xx: mean3x3(&xx, w, h),
        m_yy: mean3x3(&yy, w, h),
        m_xy: mean3x3(&xy, w, h),
    };
    let mut map = vec![0.0; w * h];
    for i in 0..w * h {
        let (u, v) = (stats.mu_x[i], stats.mu_y[i]);
        let var_x = stats.m_xx[i] - u * u;
        let var_y = stats.m_yy[i] - v * v;
        let cov = stats.m_xy[i] - u * v;
        let a1 = 2.0 * u * v + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = u * u + v * v + C1;
        let b2 = var_x + var_y + C2;
        map[i] = (a1 * a2) / (b1 * b2);
    }
    Ok((map, stats))
}

/// Gradients of `sum(upstream ∘ SSIM)` with respect to both maps.
pub fn ssim_backward(
    x: &SaliencyMap,
    y: &SaliencyMap,
    stats: &SsimStats,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (w, h) = (stats.width, stats.height);
    if upstream.len() != w * h {
        return Err(Error::shape(
            "ssim_backward",
            format!("upstream has {} values, map has {}", upstream.len(), w * h),
        ));
    }
    // Upstream gradients on the five filtered moments.
    let mut g_u = vec![0.0; w * h];
    let mut g_v = vec![0.0; w * h];
    let mut g_xx = vec![0.0; w * h];
    let mut g_yy = vec![0.0; w * h];
    let mut g_xy = vec![0.0; w * h];
    for i in 0..w * h {
        let (u, v) = (stats.mu_x[i], stats.mu_y[i]);
        let var_x = stats.m_xx[i] - u * u;
        let var_y = stats.m_yy[i] - v * v;
        let cov = stats.m_xy[i] - u * v;
        let a1 = 2.0 * u * v + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = u * u + v * v + C1;
        let b2 = var_x + var_y + C2;
        let denom = b1 * b2;
        let s = (a1 * a2) / denom;
        let g = upstream[i];

        // s = a1*a2 / (b1*b2), with a2 and b2 depending on u,v through
        // cov = m_xy - u*v, var = m - mu^2.
        let ds_du = (2.0 * v * (a2 - a1) - s * 2.0 * u * (b2 - b1)) / denom;
        let ds_dv = (2.0 * u * (a2 - a1) - s * 2.0 * v * (b2 - b1)) / denom;
        let ds_dxx = -s / b2;
        let ds_dyy = -s / b2;
        let ds_dxy = 2.0 * a1 / denom;

        g_u[i] = g * ds_du;
        g_v[i] = g * ds_dv;
        g_xx[i] = g * ds_dxx;
        g_yy[i] = g * ds_dyy;
        g_xy[i] = g * ds_dxy;
    }

    let au = mean3x3_adjoint(&g_u, w, h);
    let av = mean3x3_adjoint(&g_v, w, h);
    let axx = mean3x3_adjoint(&g_xx, w, h);
    let ayy = mean3x3_adjoint(&g_yy, w, h);
    let axy = mean3x3_adjoint(&g_xy, w, h);

    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for i in 0..w * h {
        gx[i] = au[i] + 2.0 * x.values[i] * axx[i] + y.values[i] * axy[i];
        gy[i] = av[i] + 2.0 * y.values[i] * ayy[i] + x.values[i] * axy[i];
    }
    Ok((gx, gy))
}

/// Structure consistency loss between the down-scale prediction and the
/// down-scaled normal prediction, with gradients for both.
pub fn ssc_loss(
    s_small_pred: &SaliencyMap,
    s_down: &SaliencyMap,
    alpha: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dims(s_small_pred, s_down, "ssc_loss")?;
    let m = s_small_pred.len() as f64;
    let (map, stats) = ssim_map(s_small_pred, s_down)?;

    let mut loss = 0.0;
    let mut ga = vec![0.0; s_small_pred.len()];
    let mut gb = vec![0.0; s_small_pred.len()];
    for i in 0..s_small_pred.len() {
        let d = s_small_pred.values[i] - s_down.values[i];
        loss += alpha * (1.0 - map[i]) / 2.0 + (1.0 - alpha) * d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        ga[i] += (1.0 - alpha) * sign / m;
        gb[i] -= (1.0 - alpha) * sign / m;
    }
    loss /= m;

    let upstream = vec![-alpha / (2.0 * m); s_small_pred.len()];
    let (sx, sy) = ssim_backward(s_small_pred, s_down, &stats, &upstream)?;
    for i in 0..ga.len() {
        ga[i] += sx[i];
        gb[i] += sy[i];
    }
    Ok((loss, ga, gb))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradient, CoordPlan};
    use crate::tensor::Tensor;

    fn random_map(seed: u64, w: usize, h: usize) -> SaliencyMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SaliencyMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random_map(1, 6, 5);
        let (map, _) = ssim_map(&x, &x).unwrap();
        for v in &map {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_zero_vs_one_closed_form() {
        let x = SaliencyMap::new(4, 4, vec![0.0; 16]).unwrap();
        let y = SaliencyMap::new(4, 4, vec![1.0; 16]).unwrap();
        let (map, _) = ssim_map(&x, &y).unwrap();
        let expect = C1 / (1.0 + C1);
        for v in &map {
            assert!((v - expect).abs() < 1e-15);
            assert!((v - 9.999e-5).abs() < 1e-8);
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = random_map(2, 5, 5);
        let y = random_map(3, 5, 5);
        let (xy, _) = ssim_map(&x, &y).unwrap();
        let (yx, _) = ssim_map(&y, &x).unwrap();
        for (a, b) in xy.iter().zip(&yx) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn ssc_identical_maps_is_zero() {
        let x = random_map(4, 6, 6);
        let (loss, ga, gb) = ssc_loss(&x, &x, 0.85).unwrap();
        assert!(loss.abs() < 1e-12);
        // at a tie the L1 subgradient is 0; SSIM at its maximum has zero slope
        for (a, b) in ga.iter().zip(&gb) {
            assert!(a.abs() < 1e-9 && b.abs() < 1e-9);
        }
    }

    #[test]
    fn ssc_constant_maps_closed_form() {
        let x = SaliencyMap::new(4, 4, vec![0.0; 16]).unwrap();
        let y = SaliencyMap::new(4, 4, vec![1.0; 16]).unwrap();
        let (loss, _, _) = ssc_loss(&x, &y, 0.85).unwrap();
        let ssim = C1 / (1.0 + C1);
        let expect = 0.85 * (1.0 - ssim) / 2.0 + 0.15;
        assert!((loss - expect).abs() < 1e-15);
        assert!((loss - 0.574_958).abs() < 1e-6);
    }

    #[test]
    fn alpha_zero_reduces_to_mean_l1() {
        let x = random_map(5, 7, 4);
        let y = random_map(6, 7, 4);
        let (loss, _, _) = ssc_loss(&x, &y, 0.0).unwrap();
        let l1: f64 = x
            .values
            .iter()
            .zip(&y.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / x.len() as f64;
        assert!((loss - l1).abs() < 1e-12);
    }

    #[test]
    fn ssc_nonnegative_on_unit_maps() {
        for seed in 0..10 {
            let x = random_map(100 + seed, 5, 5);
            let y = random_map(200 + seed, 5, 5);
            let (loss, _, _) = ssc_loss(&x, &y, 0.85).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn ssc_gradients_match_finite_differences() {
        let x = random_map(7, 5, 5);
        let y = random_map(8, 5, 5);
        let mut f = |xs: &[Tensor]| {
            let a = SaliencyMap::new(5, 5, xs[0].data().to_vec())?;
            let b = SaliencyMap::new(5, 5, xs[1].data().to_vec())?;
            let (loss, ga, gb) = ssc_loss(&a, &b, 0.85)?;
            Ok((
                Tensor::scalar(loss),
                vec![Tensor::from_vec(&[25], ga)?, Tensor::from_vec(&[25], gb)?],
            ))
        };
        let xt = Tensor::from_vec(&[25], x.values.clone()).unwrap();
        let yt = Tensor::from_vec(&[25], y.values.clone()).unwrap();
        let report = check_gradient(&mut f, &[xt, yt], 1e-6, 1e-4, CoordPlan::All).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = random_map(9, 4, 4);
        let y = random_map(10, 5, 4);
        assert!(ssim_map(&x, &y).is_err());
        assert!(ssc_loss(&x, &y, 0.85).is_err());
    }
}
