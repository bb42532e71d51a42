//! Saliency evaluation measures: mean F-measure over 256 binarization
//! thresholds (β² = 0.3), mean enhanced-alignment measure, and MAE, plus
//! dataset-level aggregation into a JSON report.
//!
//! F and E sweep thresholds t = i/255 with `pred >= t` as the binarization.
//! Both reduce to integer confusion counts per threshold, computed here from a
//! 256-bin histogram; this is count-exact with the direct per-pixel loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{load_binary_mask, BinaryMask};
use crate::error::{Error, Result};
use crate::losses::SaliencyMap;

const EPS_ALIGN: f64 = 1e-12;

/// Per-image and dataset-level metric triple.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub f_beta: f64,
    pub e_xi: f64,
    pub mae: f64,
    pub per_image: Vec<ImageEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub f_beta: f64,
    pub e_xi: f64,
    pub mae: f64,
}

fn check_dims(pred: &SaliencyMap, gt: &BinaryMask, op: &'static str) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(
            op,
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width, pred.height, gt.width, gt.height
            ),
        ));
    }
    Ok(())
}

/// Mean absolute error between a `[0,1]` map and a binary mask.
pub fn mae(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt, "mae")?;
    let total: f64 = pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(p, g)| (p - if *g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Largest threshold index i in 0..=255 such that `v >= i/255`.
fn threshold_level(v: f64) -> usize {
    let mut i = ((v * 255.0).floor() as isize).clamp(0, 255) as usize;
    while i < 255 && v >= (i + 1) as f64 / 255.0 {
        i += 1;
    }
    while i > 0 && v < i as f64 / 255.0 {
        i -= 1;
    }
    i
}

/// Histogram of prediction levels split by ground-truth class, plus suffix
/// sums giving TP and predicted-positive counts for every threshold.
struct ThresholdCounts {
    /// tp[i] = |{pred >= i/255 ∧ gt}|
    tp: [usize; 256],
    /// pp[i] = |{pred >= i/255}|
    pp: [usize; 256],
    n_pos: usize,
    n_px: usize,
}

fn threshold_counts(pred: &SaliencyMap, gt: &BinaryMask) -> ThresholdCounts {
    let mut hist_pos = [0usize; 256];
    let mut hist_all = [0usize; 256];
    for (p, g) in pred.values.iter().zip(&gt.values) {
        let lvl = threshold_level(*p);
        hist_all[lvl] += 1;
        if *g {
            hist_pos[lvl] += 1;
        }
    }
    let mut tp = [0usize; 256];
    let mut pp = [0usize; 256];
    let mut acc_p = 0;
    let mut acc_a = 0;
    for i in (0..256).rev() {
        acc_p += hist_pos[i];
        acc_a += hist_all[i];
        tp[i] = acc_p;
        pp[i] = acc_a;
    }
    ThresholdCounts {
        tp,
        pp,
        n_pos: gt.values.iter().filter(|v| **v).count(),
        n_px: pred.len(),
    }
}

/// Mean F-measure over the 256 uniform thresholds.
pub fn f_measure(pred: &SaliencyMap, gt: &BinaryMask, beta_sq: f64) -> Result<f64> {
    check_dims(pred, gt, "f_measure")?;
    let c = threshold_counts(pred, gt);
    if c.n_pos == 0 {
        return Err(Error::shape(
            "f_measure",
            "ground truth has no positive pixels; recall undefined".to_string(),
        ));
    }
    let mut total = 0.0;
    for i in 0..256 {
        let (tp, pp) = (c.tp[i] as f64, c.pp[i] as f64);
        if pp == 0.0 || tp == 0.0 {
            continue; // F = 0 with no predicted positives or no hits
        }
        let precision = tp / pp;
        let recall = tp / c.n_pos as f64;
        let denom = beta_sq * precision + recall;
        if denom > 0.0 {
            total += (1.0 + beta_sq) * precision * recall / denom;
        }
    }
    Ok(total / 256.0)
}

/// Mean enhanced-alignment measure over the 256 uniform thresholds.
pub fn e_measure(pred: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt, "e_measure")?;
    let c = threshold_counts(pred, gt);
    if c.n_pos == 0 {
        return Err(Error::shape(
            "e_measure",
            "ground truth has no positive pixels".to_string(),
        ));
    }
    let m = c.n_px as f64;
    let mean_g = c.n_pos as f64 / m;
    let mut total = 0.0;
    for i in 0..256 {
        let pp = c.pp[i];
        if c.n_pos == c.n_px && pp == c.n_px {
            // both maps all-ones: perfect alignment by definition
            total += 1.0;
            continue;
        }
        let tp = c.tp[i] as f64;
        let fp = pp as f64 - tp;
        let fn_ = c.n_pos as f64 - tp;
        let tn = m - tp - fp - fn_;
        let mean_b = pp as f64 / m;

        let enhanced = |phi_b: f64, phi_g: f64| {
            let xi = 2.0 * phi_b * phi_g / (phi_b * phi_b + phi_g * phi_g + EPS_ALIGN);
            (xi + 1.0) * (xi + 1.0) / 4.0
        };
        let e = tp * enhanced(1.0 - mean_b, 1.0 - mean_g)
            + fp * enhanced(1.0 - mean_b, -mean_g)
            + fn_ * enhanced(-mean_b, 1.0 - mean_g)
            + tn * enhanced(-mean_b, -mean_g);
        total += e / m;
    }
    Ok(total / 256.0)
}

/// Evaluate every manifest entry that has a ground-truth mask against the
/// prediction maps in `predictions_dir` (one `<id>.pgm` per image).
pub fn evaluate_dataset(
    manifest: &crate::data::DatasetManifest,
    predictions_dir: &Path,
) -> Result<EvalResult> {
    let mut missing = BTreeSet::new();
    let mut jobs = Vec::new();
    for entry in &manifest.entries {
        let Some(mask_rel) = &entry.mask else { continue };
        let id = entry.id();
        let pred_path = predictions_dir.join(format!("{id}.pgm"));
        if pred_path.exists() {
            jobs.push((id, manifest.root.join(mask_rel), pred_path));
        } else {
            missing.insert(id);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPredictions {
            ids: missing.into_iter().collect(),
        });
    }
    if jobs.is_empty() {
        return Err(Error::Manifest {
            path: manifest.root.clone(),
            detail: "no entries with ground-truth masks to evaluate".to_string(),
        });
    }

    let mut per_image = Vec::with_capacity(jobs.len());
    for (id, mask_path, pred_path) in jobs {
        let gt = load_binary_mask(&mask_path)?;
        let pred = crate::data::load_map(&pred_path)?;
        per_image.push(ImageEval {
            f_beta: f_measure(&pred, &gt, 0.3)?,
            e_xi: e_measure(&pred, &gt)?,
            mae: mae(&pred, &gt)?,
            id,
        });
    }
    let n = per_image.len() as f64;
    Ok(EvalResult {
        f_beta: per_image.iter().map(|r| r.f_beta).sum::<f64>() / n,
        e_xi: per_image.iter().map(|r| r.e_xi).sum::<f64>() / n,
        mae: per_image.iter().map(|r| r.mae).sum::<f64>() / n,
        per_image,
    })
}

/// Machine-readable report; floats carry six decimals.
pub fn report_json(result: &EvalResult) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{{\"dataset\": {{\"f_beta\": {:.6}, \"e_xi\": {:.6}, \"mae\": {:.6}}}, \"images\": [",
        result.f_beta, result.e_xi, result.mae
    );
    for (i, img) in result.per_image.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(
            s,
            "{{\"id\": {}, \"f_beta\": {:.6}, \"e_xi\": {:.6}, \"mae\": {:.6}}}",
            serde_json::to_string(&img.id).expect("string serializes"),
            img.f_beta,
            img.e_xi,
            img.mae
        );
    }
    s.push_str("]}");
    s
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Direct per-threshold, per-pixel reference implementations.

    use super::*;

    pub fn f_measure_loops(pred: &SaliencyMap, gt: &BinaryMask, beta_sq: f64) -> f64 {
        let n_pos = gt.values.iter().filter(|v| **v).count() as f64;
        let mut total = 0.0;
        for i in 0..256 {
            let t = i as f64 / 255.0;
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (p, g) in pred.values.iter().zip(&gt.values) {
                if *p >= t {
                    if *g {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            if tp + fp == 0.0 || tp == 0.0 {
                continue;
            }
            let precision = tp / (tp + fp);
            let recall = tp / n_pos;
            let denom = beta_sq * precision + recall;
            if denom > 0.0 {
                total += (1.0 + beta_sq) * precision * recall / denom;
            }
        }
        total / 256.0
    }

    pub fn e_measure_loops(pred: &SaliencyMap, gt: &BinaryMask) -> f64 {
        let m = pred.len() as f64;
        let n_pos = gt.values.iter().filter(|v| **v).count();
        let mut total = 0.0;
        for i in 0..256 {
            let t = i as f64 / 255.0;
            let binary: Vec<f64> = pred
                .values
                .iter()
                .map(|p| if *p >= t { 1.0 } else { 0.0 })
                .collect();
            let np: f64 = binary.iter().sum();
            if n_pos == pred.len() && np as usize == pred.len() {
                total += 1.0;
                continue;
            }
            let mean_b = np / m;
            let mean_g = n_pos as f64 / m;
            let mut e = 0.0;
            for (b, g) in binary.iter().zip(&gt.values) {
                let phi_b = b - mean_b;
                let phi_g = if *g { 1.0 } else { 0.0 } - mean_g;
                let xi = 2.0 * phi_b * phi_g / (phi_b * phi_b + phi_g * phi_g + EPS_ALIGN);
                e += (xi + 1.0) * (xi + 1.0) / 4.0;
            }
            total += e / m;
        }
        total / 256.0
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_pair(seed: u64, w: usize, h: usize) -> (SaliencyMap, BinaryMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = SaliencyMap::new(
            w,
            h,
            (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut gt = BinaryMask {
            width: w,
            height: h,
            values: (0..w * h).map(|_| rng.random_bool(0.4)).collect(),
        };
        if !gt.values.iter().any(|v| *v) {
            gt.values[0] = true;
        }
        (pred, gt)
    }

    fn binary_map(gt: &BinaryMask) -> SaliencyMap {
        SaliencyMap::new(
            gt.width,
            gt.height,
            gt.values.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn mae_basic_cases() {
        let (_, gt) = random_pair(1, 8, 8);
        let exact = binary_map(&gt);
        assert_eq!(mae(&exact, &gt).unwrap(), 0.0);

        let inverted = SaliencyMap::new(
            8,
            8,
            gt.values.iter().map(|v| if *v { 0.0 } else { 1.0 }).collect(),
        )
        .unwrap();
        assert_eq!(mae(&inverted, &gt).unwrap(), 1.0);

        let half = SaliencyMap::new(8, 8, vec![0.5; 64]).unwrap();
        assert_eq!(mae(&half, &gt).unwrap(), 0.5);
    }

    #[test]
    fn mae_is_linear_in_blend() {
        let (pred, gt) = random_pair(2, 8, 8);
        let base = mae(&pred, &gt).unwrap();
        for lambda in [0.25, 0.5, 0.75] {
            let blended = SaliencyMap::new(
                8,
                8,
                pred.values
                    .iter()
                    .zip(&gt.values)
                    .map(|(p, g)| {
                        let gv = if *g { 1.0 } else { 0.0 };
                        lambda * p + (1.0 - lambda) * gv
                    })
                    .collect(),
            )
            .unwrap();
            let got = mae(&blended, &gt).unwrap();
            assert!((got - lambda * base).abs() < 1e-12);
        }
    }

    #[test]
    fn f_measure_perfect_binary_prediction() {
        let (_, gt) = random_pair(3, 8, 8);
        let pred = binary_map(&gt);
        let f = f_measure(&pred, &gt, 0.3).unwrap();
        // thresholds 1..=255 reproduce gt exactly (F = 1); t = 0 predicts
        // everything, giving F from the gt density
        let density = gt.values.iter().filter(|v| **v).count() as f64 / 64.0;
        let f_allpos = 1.3 * density / (0.3 * density + 1.0);
        let expect = (255.0 + f_allpos) / 256.0;
        assert!((f - expect).abs() < 1e-12);
    }

    #[test]
    fn f_measure_all_zero_prediction() {
        let (_, gt) = random_pair(4, 8, 8);
        let pred = SaliencyMap::new(8, 8, vec![0.0; 64]).unwrap();
        let f = f_measure(&pred, &gt, 0.3).unwrap();
        let density = gt.values.iter().filter(|v| **v).count() as f64 / 64.0;
        let f_allpos = 1.3 * density / (0.3 * density + 1.0);
        assert!((f - f_allpos / 256.0).abs() < 1e-12);
    }

    #[test]
    fn f_and_e_match_loop_oracles() {
        for seed in 0..100 {
            let (pred, gt) = random_pair(100 + seed, 8, 8);
            let f = f_measure(&pred, &gt, 0.3).unwrap();
            let fo = oracle::f_measure_loops(&pred, &gt, 0.3);
            assert!((f - fo).abs() < 1e-12, "seed {seed}: f {f} vs {fo}");
            let e = e_measure(&pred, &gt).unwrap();
            let eo = oracle::e_measure_loops(&pred, &gt);
            assert!((e - eo).abs() < 1e-12, "seed {seed}: e {e} vs {eo}");
        }
    }

    #[test]
    fn e_measure_perfect_and_complement() {
        let (_, gt) = random_pair(5, 8, 8);
        let pred = binary_map(&gt);
        let e = e_measure(&pred, &gt).unwrap();
        let eo = oracle::e_measure_loops(&pred, &gt);
        assert!((e - eo).abs() < 1e-12);

        // balanced 50/50 gt, complemented prediction: alignment -1, E ~ 0
        let mut gt = BinaryMask {
            width: 2,
            height: 2,
            values: vec![true, true, false, false],
        };
        let comp = SaliencyMap::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let e = e_measure(&comp, &gt).unwrap();
        // thresholds 1..=255 give the exact complement (E = 0); t = 0 gives
        // all-positive B
        assert!(e < 0.26, "complement e = {e}");
        gt.values = vec![true; 4];
        let ones = SaliencyMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert!((e_measure(&ones, &gt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gt_is_rejected() {
        let pred = SaliencyMap::new(4, 4, vec![0.5; 16]).unwrap();
        let gt = BinaryMask {
            width: 4,
            height: 4,
            values: vec![false; 16],
        };
        assert!(f_measure(&pred, &gt, 0.3).is_err());
        assert!(e_measure(&pred, &gt).is_err());
        assert!(mae(&pred, &gt).is_ok());
    }

    #[test]
    fn metrics_invariant_under_simultaneous_flip() {
        for seed in 0..10 {
            let (pred, gt) = random_pair(200 + seed, 7, 5);
            let (w, h) = (7, 5);
            let mut fp = vec![0.0; w * h];
            let mut fg = vec![false; w * h];
            for y in 0..h {
                for x in 0..w {
                    fp[y * w + x] = pred.values[y * w + (w - 1 - x)];
                    fg[y * w + x] = gt.values[y * w + (w - 1 - x)];
                }
            }
            let fpred = SaliencyMap::new(w, h, fp).unwrap();
            let fgt = BinaryMask {
                width: w,
                height: h,
                values: fg,
            };
            assert!(
                (f_measure(&pred, &gt, 0.3).unwrap() - f_measure(&fpred, &fgt, 0.3).unwrap())
                    .abs()
                    < 1e-12
            );
            assert!((e_measure(&pred, &gt).unwrap() - e_measure(&fpred, &fgt).unwrap()).abs() < 1e-12);
            assert!((mae(&pred, &gt).unwrap() - mae(&fpred, &fgt).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn quantizing_to_256_levels_changes_nothing() {
        for seed in 0..10 {
            let (pred, gt) = random_pair(300 + seed, 8, 8);
            let quantized = SaliencyMap::new(
                8,
                8,
                pred.values
                    .iter()
                    .map(|v| (v * 255.0).floor() / 255.0)
                    .collect(),
            )
            .unwrap();
            assert!(
                (f_measure(&pred, &gt, 0.3).unwrap()
                    - f_measure(&quantized, &gt, 0.3).unwrap())
                .abs()
                    < 1e-12
            );
            assert!(
                (e_measure(&pred, &gt).unwrap() - e_measure(&quantized, &gt).unwrap()).abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn report_json_uses_six_decimals() {
        let result = EvalResult {
            f_beta: 0.5,
            e_xi: 1.0 / 3.0,
            mae: 0.0,
            per_image: vec![ImageEval {
                id: "img_000".to_string(),
                f_beta: 0.5,
                e_xi: 1.0 / 3.0,
                mae: 0.0,
            }],
        };
        let json = report_json(&result);
        assert!(json.contains("\"f_beta\": 0.500000"));
        assert!(json.contains("\"e_xi\": 0.333333"));
        assert!(json.contains("\"mae\": 0.000000"));
        assert!(json.contains("\"id\": \"img_000\""));
        // must be valid JSON
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["images"].as_array().unwrap().len(), 1);
    }
}
