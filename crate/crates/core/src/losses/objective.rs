//! Composition of the three losses into the training objective.
//!
//! The dominant term supervises the final map with cross-entropy, structure
//! consistency and coherence; each of the three intermediate maps adds a
//! weighted auxiliary term of cross-entropy plus coherence. All maps enter at
//! the input resolution; the consistency term internally down-resizes the
//! final map to the small prediction's size and chains gradients back through
//! that resize.

use super::coherence::{lsc_loss_with_table, BilateralTable};
use super::structure::ssc_loss;
use super::{partial_ce, LscConfig, ObjectiveConfig, SaliencyMap, ScribbleMask};
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Raw and weighted components of one objective evaluation.
///
/// `l_ce + l_ssc + beta·l_lsc + l_aux == l_total` (aux is already weighted).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_lsc: f64,
    pub l_ssc: f64,
    pub l_aux: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_ce.is_finite()
            && self.l_lsc.is_finite()
            && self.l_ssc.is_finite()
            && self.l_aux.is_finite()
            && self.l_total.is_finite()
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.l_ce += scale * other.l_ce;
        self.l_lsc += scale * other.l_lsc;
        self.l_ssc += scale * other.l_ssc;
        self.l_aux += scale * other.l_aux;
        self.l_total += scale * other.l_total;
    }
}

/// Gradients of the total objective with respect to every map that enters it.
pub struct ObjectiveGrads {
    pub final_map: Vec<f64>,
    pub intermediates: [Vec<f64>; 3],
    pub small: Option<Vec<f64>>,
}

/// Full objective with the coherence kernel computed from `image`.
///
/// `small_pred` is the prediction made on the down-scaled input; pass `None`
/// when the dual-scale forward is disabled, which zeroes the consistency term.
pub fn total_objective(
    final_map: &SaliencyMap,
    intermediates: &[SaliencyMap; 3],
    small_pred: Option<&SaliencyMap>,
    image: &Tensor,
    mask: &ScribbleMask,
    cfg: &ObjectiveConfig,
    lsc_cfg: &LscConfig,
) -> Result<(LossBreakdown, ObjectiveGrads)> {
    let table = BilateralTable::new(image, lsc_cfg)?;
    total_objective_detail(final_map, intermediates, small_pred, Some(&table), mask, cfg)
}

/// Objective with a caller-provided coherence kernel table.
///
/// `lsc_table: None` skips the coherence term entirely (ablation toggle); the
/// raw `l_lsc` is reported as 0 in that case.
pub fn total_objective_detail(
    final_map: &SaliencyMap,
    intermediates: &[SaliencyMap; 3],
    small_pred: Option<&SaliencyMap>,
    lsc_table: Option<&BilateralTable>,
    mask: &ScribbleMask,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, ObjectiveGrads)> {
    cfg.validate()?;
    for (q, m) in intermediates.iter().enumerate() {
        if m.width != final_map.width || m.height != final_map.height {
            return Err(Error::shape(
                "total_objective",
                format!(
                    "intermediate {q} is {}x{}, final map is {}x{}",
                    m.width, m.height, final_map.width, final_map.height
                ),
            ));
        }
    }
    if let Some(t) = lsc_table {
        if t.width() != final_map.width || t.height() != final_map.height {
            return Err(Error::shape(
                "total_objective",
                format!(
                    "coherence table {}x{} vs final map {}x{}",
                    t.width(),
                    t.height(),
                    final_map.width,
                    final_map.height
                ),
            ));
        }
    }

    let mut bd = LossBreakdown::default();
    let mut grad_final = vec![0.0; final_map.len()];

    // dominant: cross-entropy + consistency + beta * coherence on the final map
    let (ce, ce_grad) = partial_ce(final_map, mask)?;
    bd.l_ce = ce;
    for (g, c) in grad_final.iter_mut().zip(&ce_grad) {
        *g += c;
    }
    if let Some(table) = lsc_table {
        let (lsc, lsc_grad) = lsc_loss_with_table(final_map, table)?;
        bd.l_lsc = lsc;
        for (g, c) in grad_final.iter_mut().zip(&lsc_grad) {
            *g += cfg.beta * c;
        }
    }

    let mut grad_small = None;
    if let Some(small) = small_pred {
        // down-resize the final map to the small prediction's resolution
        let full = Tensor::from_vec(
            &[1, 1, final_map.height, final_map.width],
            final_map.values.clone(),
        )?;
        let down = ops::resize_bilinear_forward(&full, small.height, small.width)?;
        let s_down = SaliencyMap::new(small.width, small.height, down.data().to_vec())?;
        let (ssc, g_small, g_down) = ssc_loss(small, &s_down, cfg.alpha)?;
        bd.l_ssc = ssc;
        let down_grad = Tensor::from_vec(&[1, 1, small.height, small.width], g_down)?;
        let chained = ops::resize_bilinear_backward(full.shape(), &down_grad)?;
        for (g, c) in grad_final.iter_mut().zip(chained.data()) {
            *g += c;
        }
        grad_small = Some(g_small);
    }

    // auxiliary stages: lambda_q * (ce + beta * lsc)
    let mut grad_inter: [Vec<f64>; 3] = [
        vec![0.0; final_map.len()],
        vec![0.0; final_map.len()],
        vec![0.0; final_map.len()],
    ];
    for q in 0..3 {
        let lambda = cfg.lambda_q[q];
        let (ce_q, ce_grad_q) = partial_ce(&intermediates[q], mask)?;
        let mut stage = ce_q;
        for (g, c) in grad_inter[q].iter_mut().zip(&ce_grad_q) {
            *g += lambda * c;
        }
        if let Some(table) = lsc_table {
            let (lsc_q, lsc_grad_q) = lsc_loss_with_table(&intermediates[q], table)?;
            stage += cfg.beta * lsc_q;
            for (g, c) in grad_inter[q].iter_mut().zip(&lsc_grad_q) {
                *g += lambda * cfg.beta * c;
            }
        }
        bd.l_aux += lambda * stage;
    }

    bd.l_total = bd.l_ce + bd.l_ssc + cfg.beta * bd.l_lsc + bd.l_aux;
    Ok((
        bd,
        ObjectiveGrads {
            final_map: grad_final,
            intermediates: grad_inter,
            small: grad_small,
        },
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::losses::{bilateral_weight, Label};
    use crate::tensor::gradcheck::{check_gradient, CoordPlan};

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SaliencyMap {
        SaliencyMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.05..0.95)).collect())
            .unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ScribbleMask {
        let labels = (0..w * h)
            .map(|_| match rng.random_range(0..4) {
                0 => Label::Foreground,
                1 => Label::Background,
                _ => Label::Unlabeled,
            })
            .collect();
        ScribbleMask::new(w, h, labels).unwrap()
    }

    fn fixture(seed: u64, size: usize) -> (SaliencyMap, [SaliencyMap; 3], SaliencyMap, Tensor, ScribbleMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let final_map = random_map(&mut rng, size, size);
        let inters = [
            random_map(&mut rng, size, size),
            random_map(&mut rng, size, size),
            random_map(&mut rng, size, size),
        ];
        let small = random_map(&mut rng, size / 2, size / 2);
        let image = Tensor::rand_uniform(&[3, size, size], 0.0, 1.0, &mut rng);
        let mask = random_mask(&mut rng, size, size);
        (final_map, inters, small, image, mask)
    }

    #[test]
    fn extras_disabled_leaves_only_final_ce() {
        let (final_map, inters, _, image, mask) = fixture(1, 8);
        let cfg = ObjectiveConfig {
            beta: 0.0,
            lambda_q: [0.0; 3],
            ..ObjectiveConfig::default()
        };
        let (bd, grads) = total_objective(
            &final_map,
            &inters,
            None,
            &image,
            &mask,
            &cfg,
            &LscConfig::default(),
        )
        .unwrap();
        let (ce, ce_grad) = partial_ce(&final_map, &mask).unwrap();
        assert!((bd.l_total - ce).abs() < 1e-15);
        assert_eq!(bd.l_ssc, 0.0);
        assert_eq!(bd.l_aux, 0.0);
        for (a, b) in grads.final_map.iter().zip(&ce_grad) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(grads.small.is_none());
    }

    #[test]
    fn lambda_weighting_is_linear() {
        // all four stage losses equal v, beta = 0, no ssc:
        // total = v * (1 + 0.8 + 0.6 + 0.4)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let size = 6;
        let shared = random_map(&mut rng, size, size);
        let inters = [shared.clone(), shared.clone(), shared.clone()];
        let image = Tensor::rand_uniform(&[3, size, size], 0.0, 1.0, &mut rng);
        let mask = random_mask(&mut rng, size, size);
        let cfg = ObjectiveConfig {
            beta: 0.0,
            ..ObjectiveConfig::default()
        };
        let (bd, _) = total_objective(
            &shared,
            &inters,
            None,
            &image,
            &mask,
            &cfg,
            &LscConfig::default(),
        )
        .unwrap();
        let (v, _) = partial_ce(&shared, &mask).unwrap();
        assert!((bd.l_total - 2.8 * v).abs() < 1e-12);
    }

    #[test]
    fn matches_independent_composition_oracle() {
        // scripted evaluation of the composed objective on a fixed sample
        let (final_map, inters, small, image, mask) = fixture(3, 16);
        let cfg = ObjectiveConfig::default();
        let lsc_cfg = LscConfig::default();
        let (bd, _) = total_objective(
            &final_map,
            &inters,
            Some(&small),
            &image,
            &mask,
            &cfg,
            &lsc_cfg,
        )
        .unwrap();

        // oracle: evaluate each term from first principles
        let oracle_ce = |m: &SaliencyMap| {
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for (v, l) in m.values.iter().zip(&mask.labels) {
                let c = v.clamp(1e-7, 1.0 - 1e-7);
                match l {
                    Label::Foreground => fg.push(-c.ln()),
                    Label::Background => bg.push(-(1.0 - c).ln()),
                    Label::Unlabeled => {}
                }
            }
            let mf = if fg.is_empty() { 0.0 } else { fg.iter().sum::<f64>() / fg.len() as f64 };
            let mb = if bg.is_empty() { 0.0 } else { bg.iter().sum::<f64>() / bg.len() as f64 };
            mf + mb
        };
        let oracle_lsc = |m: &SaliencyMap| {
            let (h, w) = (m.height, m.width);
            let plane = h * w;
            let r = (lsc_cfg.kernel_size / 2) as isize;
            let mut acc = 0.0;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dy == 0 && dx == 0 {
                                continue;
                            }
                            let (ny, nx) = (y + dy, x + dx);
                            if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                                continue;
                            }
                            let i = (y * w as isize + x) as usize;
                            let j = (ny * w as isize + nx) as usize;
                            let ci = [
                                image.data()[i],
                                image.data()[plane + i],
                                image.data()[2 * plane + i],
                            ];
                            let cj = [
                                image.data()[j],
                                image.data()[plane + j],
                                image.data()[2 * plane + j],
                            ];
                            let f = bilateral_weight(
                                (x as usize, y as usize),
                                (nx as usize, ny as usize),
                                ci,
                                cj,
                                &lsc_cfg,
                            );
                            acc += f * (m.values[i] - m.values[j]).abs();
                        }
                    }
                }
            }
            acc / plane as f64
        };
        let full = Tensor::from_vec(&[1, 1, 16, 16], final_map.values.clone()).unwrap();
        let down = ops::resize_bilinear_forward(&full, 8, 8).unwrap();
        let s_down = SaliencyMap::new(8, 8, down.data().to_vec()).unwrap();
        let (oracle_ssc, _, _) = ssc_loss(&small, &s_down, cfg.alpha).unwrap();

        let mut expect = oracle_ce(&final_map) + oracle_ssc + cfg.beta * oracle_lsc(&final_map);
        for q in 0..3 {
            expect += cfg.lambda_q[q] * (oracle_ce(&inters[q]) + cfg.beta * oracle_lsc(&inters[q]));
        }
        assert!(
            (bd.l_total - expect).abs() < 1e-9,
            "total {} vs oracle {expect}",
            bd.l_total
        );
    }

    #[test]
    fn breakdown_components_sum_to_total() {
        let (final_map, inters, small, image, mask) = fixture(4, 16);
        let cfg = ObjectiveConfig::default();
        let (bd, _) = total_objective(
            &final_map,
            &inters,
            Some(&small),
            &image,
            &mask,
            &cfg,
            &LscConfig::default(),
        )
        .unwrap();
        let sum = bd.l_ce + bd.l_ssc + cfg.beta * bd.l_lsc + bd.l_aux;
        assert!((sum - bd.l_total).abs() < 1e-10);
    }

    #[test]
    fn linear_in_beta_and_lambda() {
        let (final_map, inters, small, image, mask) = fixture(5, 8);
        let lsc_cfg = LscConfig::default();
        let eval = |beta: f64, lambda: [f64; 3]| {
            let cfg = ObjectiveConfig {
                beta,
                lambda_q: lambda,
                ..ObjectiveConfig::default()
            };
            total_objective(&final_map, &inters, Some(&small), &image, &mask, &cfg, &lsc_cfg)
                .unwrap()
                .0
        };
        let base = eval(0.0, [0.0; 3]);
        let b1 = eval(1.0, [0.0; 3]);
        let b03 = eval(0.3, [0.0; 3]);
        // total is affine in beta with fixed stage losses
        let predicted = base.l_total + 0.3 * (b1.l_total - base.l_total);
        assert!((b03.l_total - predicted).abs() < 1e-12);

        let l1 = eval(0.0, [1.0, 0.0, 0.0]);
        let l05 = eval(0.0, [0.5, 0.0, 0.0]);
        let predicted = base.l_total + 0.5 * (l1.l_total - base.l_total);
        assert!((l05.l_total - predicted).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (final_map, inters, small, image, mask) = fixture(6, 8);
        let cfg = ObjectiveConfig::default();
        let lsc_cfg = LscConfig::default();
        let n = 64;
        let mut f = |xs: &[Tensor]| {
            let fm = SaliencyMap::new(8, 8, xs[0].data().to_vec())?;
            let i0 = SaliencyMap::new(8, 8, xs[1].data().to_vec())?;
            let i1 = SaliencyMap::new(8, 8, xs[2].data().to_vec())?;
            let i2 = SaliencyMap::new(8, 8, xs[3].data().to_vec())?;
            let sm = SaliencyMap::new(4, 4, xs[4].data().to_vec())?;
            let (bd, grads) =
                total_objective(&fm, &[i0, i1, i2], Some(&sm), &image, &mask, &cfg, &lsc_cfg)?;
            let [g0, g1, g2] = grads.intermediates;
            Ok((
                Tensor::scalar(bd.l_total),
                vec![
                    Tensor::from_vec(&[n], grads.final_map)?,
                    Tensor::from_vec(&[n], g0)?,
                    Tensor::from_vec(&[n], g1)?,
                    Tensor::from_vec(&[n], g2)?,
                    Tensor::from_vec(&[16], grads.small.unwrap())?,
                ],
            ))
        };
        let inputs = vec![
            Tensor::from_vec(&[n], final_map.values.clone()).unwrap(),
            Tensor::from_vec(&[n], inters[0].values.clone()).unwrap(),
            Tensor::from_vec(&[n], inters[1].values.clone()).unwrap(),
            Tensor::from_vec(&[n], inters[2].values.clone()).unwrap(),
            Tensor::from_vec(&[16], small.values.clone()).unwrap(),
        ];
        let report =
            check_gradient(&mut f, &inputs, 1e-6, 1e-4, CoordPlan::Sample(120, 42)).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
