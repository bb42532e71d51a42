//! One-round end-to-end training: SGD with momentum and weight decay, a
//! triangular learning-rate schedule, a dual-scale forward for the structure
//! consistency loss, JSONL logging, and per-epoch checkpointing.
//!
//! All randomness is derived from `(seed, epoch, sample index)`, so a resumed
//! run replays the exact trajectory of an uninterrupted one and identical
//! configs produce bit-identical checkpoints and logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, resize_map, resize_sample, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    total_objective_detail, BilateralTable, LossBreakdown, LscConfig, ObjectiveConfig,
    SaliencyMap,
};
use crate::metrics::{self, EvalResult, ImageEval};
use crate::network::{nth_map, Network, NetworkConfig, ParamNodes, ParamStore, Parameter, TrainMeta};
use crate::tensor::graph::Graph;
use crate::tensor::ops::{self, BnMode};
use crate::tensor::Tensor;

fn mix(parts: &[u64]) -> u64 {
    crate::data::seed_mix(parts)
}

/// Width hyperparameters of the network, the part of its config a training
/// run chooses directly (input size tracks `train_size`, fusion weighting
/// tracks `enable_aggm`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkShape {
    pub stage_channels: [usize; 4],
    pub global_channels: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        NetworkShape {
            stage_channels: [16, 32, 64, 128],
            global_channels: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_size: usize,
    pub enable_lsc: bool,
    pub enable_ssc: bool,
    pub enable_aggm: bool,
    pub lsc: LscConfig,
    pub objective: ObjectiveConfig,
    pub network: NetworkShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr_max: 0.01,
            lr_min: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 1,
            train_size: 64,
            enable_lsc: true,
            enable_ssc: true,
            enable_aggm: true,
            lsc: LscConfig::default(),
            objective: ObjectiveConfig::default(),
            network: NetworkShape::default(),
        }
    }
}

impl TrainConfig {
    /// SSC down-scale factor (stored on the objective).
    pub fn rho(&self) -> f64 {
        self.objective.scale_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_min >= self.lr_max {
            return Err(Error::Config("lr_min must be < lr_max".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.train_size == 0 || self.train_size % 16 != 0 {
            return Err(Error::Config(format!(
                "train_size must be a positive multiple of 16, got {}",
                self.train_size
            )));
        }
        self.lsc.validate()?;
        self.objective.validate()?;
        self.network_config().validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            stage_channels: self.network.stage_channels,
            input_size: self.train_size,
            global_channels: self.network.global_channels,
            aggm: self.enable_aggm,
        }
    }

    /// Dual-scale forward resolution: `train_size · rho`, snapped to the
    /// nearest multiple of 16 (at least 16).
    pub fn small_size(&self) -> usize {
        let raw = self.train_size as f64 * self.rho();
        (((raw / 16.0).round() as usize) * 16).max(16)
    }
}

/// Piecewise-linear triangular schedule: `lr_min` up to `lr_max` at
/// `total_iters/2`, back down to `lr_min` at `total_iters`. Endpoints and
/// peak are exact.
pub fn lr_at(iter: usize, total_iters: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(total_iters >= 2 && iter <= total_iters);
    let peak = total_iters / 2;
    if iter == peak {
        cfg.lr_max
    } else if iter < peak {
        cfg.lr_min + (cfg.lr_max - cfg.lr_min) * iter as f64 / peak as f64
    } else {
        cfg.lr_min
            + (cfg.lr_max - cfg.lr_min) * (total_iters - iter) as f64
                / (total_iters - peak) as f64
    }
}

/// One SGD update with momentum; normalization affine parameters are exempt
/// from weight decay.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) {
    for p in params.iter_mut() {
        let wd = if p.decay_exempt { 0.0 } else { weight_decay };
        let Parameter {
            value,
            grad,
            momentum: buf,
            ..
        } = p;
        for ((v, g), b) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(buf.data_mut())
        {
            let step = momentum * *b + (g + wd * *v);
            *b = step;
            *v -= lr * step;
        }
    }
}

fn batch_tensor(batch: &[Sample], size: usize) -> Result<Tensor> {
    let plane = 3 * size * size;
    let mut data = Vec::with_capacity(batch.len() * plane);
    for s in batch {
        if s.image.shape() != [3, size, size] {
            return Err(Error::shape(
                "batch_tensor",
                format!("sample {} is {:?}, batch wants [3,{size},{size}]", s.id, s.image.shape()),
            ));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[batch.len(), 3, size, size], data)
}

/// Forward both scales, evaluate the objective per sample, backprop, and take
/// an SGD step. Returns the batch-mean loss breakdown.
pub fn train_step(
    net: &mut Network,
    batch: &[Sample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let breakdown = step_losses(net, batch, cfg, true)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite {
            ids: batch.iter().map(|s| s.id.clone()).collect(),
            detail: format!("{breakdown:?}"),
        });
    }
    sgd_step(&mut net.params, lr, cfg.momentum, cfg.weight_decay);
    Ok(breakdown)
}

/// Shared forward/backward; with `accumulate_grads` false this only reports
/// the batch loss (still train-mode statistics, no parameter update).
fn step_losses(
    net: &mut Network,
    batch: &[Sample],
    cfg: &TrainConfig,
    accumulate_grads: bool,
) -> Result<LossBreakdown> {
    let n = batch.len();
    let size = cfg.train_size;
    let images = batch_tensor(batch, size)?;

    let mut g = Graph::new();
    let mut pn = ParamNodes::new(net.params.len());
    let out = net.forward(&mut g, &images, BnMode::Train, &mut pn)?;
    let small_out = if cfg.enable_ssc {
        let s = cfg.small_size();
        let small_images = ops::resize_bilinear_forward(&images, s, s)?;
        Some(net.forward(&mut g, &small_images, BnMode::Train, &mut pn)?)
    } else {
        None
    };

    // per-sample objective; the bilateral table is built once per sample and
    // shared by the final and intermediate maps
    struct PerSample {
        bd: LossBreakdown,
        final_grad: Vec<f64>,
        inter_grads: [Vec<f64>; 3],
        small_grad: Option<Vec<f64>>,
    }
    let plane = size * size;
    let per_sample: Result<Vec<PerSample>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let fm = nth_map(g.value(out.final_map), s)?;
            let inters = [
                nth_map(g.value(out.intermediates[0]), s)?,
                nth_map(g.value(out.intermediates[1]), s)?,
                nth_map(g.value(out.intermediates[2]), s)?,
            ];
            let small = match &small_out {
                Some(so) => Some(nth_map(g.value(so.final_map), s)?),
                None => None,
            };
            let table = if cfg.enable_lsc {
                Some(BilateralTable::new(&batch[s].image, &cfg.lsc)?)
            } else {
                None
            };
            let (bd, grads) = total_objective_detail(
                &fm,
                &inters,
                small.as_ref(),
                table.as_ref(),
                &batch[s].scribble,
                &cfg.objective,
            )?;
            Ok(PerSample {
                bd,
                final_grad: grads.final_map,
                inter_grads: grads.intermediates,
                small_grad: grads.small,
            })
        })
        .collect();
    let per_sample = per_sample?;

    let scale = 1.0 / n as f64;
    let mut breakdown = LossBreakdown::default();
    for ps in &per_sample {
        breakdown.add_scaled(&ps.bd, scale);
    }

    if accumulate_grads {
        let mut seed_final = vec![0.0; n * plane];
        let mut seed_inters = [
            vec![0.0; n * plane],
            vec![0.0; n * plane],
            vec![0.0; n * plane],
        ];
        let small_plane = cfg.small_size() * cfg.small_size();
        let mut seed_small = vec![0.0; n * small_plane];
        let mut any_small = false;
        for (s, ps) in per_sample.iter().enumerate() {
            for (d, v) in seed_final[s * plane..(s + 1) * plane].iter_mut().zip(&ps.final_grad) {
                *d = scale * v;
            }
            for q in 0..3 {
                for (d, v) in seed_inters[q][s * plane..(s + 1) * plane]
                    .iter_mut()
                    .zip(&ps.inter_grads[q])
                {
                    *d = scale * v;
                }
            }
            if let Some(sg) = &ps.small_grad {
                any_small = true;
                for (d, v) in seed_small[s * small_plane..(s + 1) * small_plane]
                    .iter_mut()
                    .zip(sg)
                {
                    *d = scale * v;
                }
            }
        }
        let mut seeds = vec![(out.final_map, seed_final)];
        for (q, seed) in seed_inters.into_iter().enumerate() {
            seeds.push((out.intermediates[q], seed));
        }
        if let (Some(so), true) = (&small_out, any_small) {
            seeds.push((so.final_map, seed_small));
        }
        net.params.zero_grads();
        g.backward(seeds)?;
        pn.harvest(&g, &mut net.params, 1.0);
    }
    Ok(breakdown)
}

/// Eval-mode prediction for one sample at its original resolution.
pub fn infer_sample(net: &mut Network, sample: &Sample) -> Result<SaliencyMap> {
    let (h, w) = match sample.image.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(Error::shape(
                "infer",
                format!("expected [3,H,W] image, got {other:?}"),
            ))
        }
    };
    let size = net.cfg.input_size;
    let resized = resize_sample(sample, size)?;
    let images = batch_tensor(std::slice::from_ref(&resized), size)?;
    let pred = net.predict(&images)?;
    let map = nth_map(&pred, 0)?;
    resize_map(&map, h, w)
}

/// Dataset metrics at original resolution; samples without masks are skipped.
/// Samples run through the network in batches of 8.
pub fn evaluate_network(net: &mut Network, samples: &[Sample]) -> Result<Option<EvalResult>> {
    let size = net.cfg.input_size;
    let with_masks: Vec<&Sample> = samples.iter().filter(|s| s.full_mask.is_some()).collect();
    let mut per_image = Vec::new();
    for chunk in with_masks.chunks(8) {
        let resized: Vec<Sample> = chunk
            .iter()
            .map(|s| resize_sample(s, size))
            .collect::<Result<_>>()?;
        let images = batch_tensor(&resized, size)?;
        let pred = net.predict(&images)?;
        let evals: Result<Vec<ImageEval>> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, sample)| {
                let gt = sample.full_mask.as_ref().expect("filtered");
                let map = nth_map(&pred, i)?;
                let map = resize_map(&map, gt.height, gt.width)?;
                Ok(ImageEval {
                    f_beta: metrics::f_measure(&map, gt, 0.3)?,
                    e_xi: metrics::e_measure(&map, gt)?,
                    mae: metrics::mae(&map, gt)?,
                    id: sample.id.clone(),
                })
            })
            .collect();
        per_image.extend(evals?);
    }
    if per_image.is_empty() {
        return Ok(None);
    }
    let n = per_image.len() as f64;
    Ok(Some(EvalResult {
        f_beta: per_image.iter().map(|r| r.f_beta).sum::<f64>() / n,
        e_xi: per_image.iter().map(|r| r.e_xi).sum::<f64>() / n,
        mae: per_image.iter().map(|r| r.mae).sum::<f64>() / n,
        per_image,
    }))
}

/// Mean |S^⇓ − S^↓| over samples: prediction on the down-scaled input versus
/// the down-scaled prediction on the normal input.
pub fn scale_consistency(net: &mut Network, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let size = cfg.train_size;
    let small = cfg.small_size();
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let resized = resize_sample(sample, size)?;
        let images = batch_tensor(std::slice::from_ref(&resized), size)?;
        let full_pred = nth_map(&net.predict(&images)?, 0)?;
        let small_images = ops::resize_bilinear_forward(&images, small, small)?;
        let small_pred = nth_map(&net.predict(&small_images)?, 0)?;
        let down = resize_map(&full_pred, small, small)?;
        let diff: f64 = small_pred
            .values
            .iter()
            .zip(&down.values)
            .map(|(a, b)| (a - b).abs())
            .sum();
        total += diff / (small * small) as f64;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: u64,
    pub final_eval: Option<EvalResult>,
    pub param_scalars: usize,
}

pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    train_with_resume(manifest, cfg, out_dir, None)
}

/// Run (or continue) the schedule. `resume` must point at a checkpoint
/// written by the same config; training restarts at the epoch boundary it
/// recorded and replays the identical trajectory.
pub fn train_with_resume(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    train_impl(manifest, cfg, out_dir, resume, None)
}

/// `stop_after` interrupts at an epoch boundary while keeping the full
/// schedule horizon, leaving a checkpoint a later resume continues exactly.
fn train_impl(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;

    let samples: Vec<Sample> = (0..manifest.len())
        .map(|i| manifest.load_sample(i))
        .collect::<Result<_>>()?;
    let n = samples.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_iters = (cfg.epochs * batches_per_epoch).max(2);

    let (mut net, start_epoch, mut iteration, resumed_best) = match resume {
        Some(path) => {
            let (net, meta) = Network::load_checkpoint(path)?;
            if net.cfg != cfg.network_config() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: "checkpoint network config differs from the requested one".to_string(),
                });
            }
            (net, meta.epoch as usize, meta.iteration, meta.best_f_beta)
        }
        None => (Network::new(cfg.network_config(), cfg.seed)?, 0, 0, None),
    };

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io_at(&log_path, e))?;

    let ckpt_path = out_dir.join("checkpoint.scws");
    let best_path = out_dir.join("best.scws");
    let masks_available = samples.iter().any(|s| s.full_mask.is_some());
    let mut best_f_beta: Option<f64> = resumed_best;
    let mut last_eval = None;

    let end_epoch = stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x51, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&idx| {
                    augment(
                        &samples[idx],
                        mix(&[cfg.seed, 0xa0, epoch as u64, idx as u64]),
                        cfg.train_size,
                    )
                })
                .collect::<Result<_>>()?;
            let lr = lr_at(iteration as usize, total_iters, cfg);
            let bd = train_step(&mut net, &batch, cfg, lr)?;
            let record = serde_json::json!({
                "iter": iteration,
                "lr": lr,
                "l_ce": bd.l_ce,
                "l_lsc": bd.l_lsc,
                "l_ssc": bd.l_ssc,
                "l_aux": bd.l_aux,
                "l_total": bd.l_total,
            });
            writeln!(log, "{record}").map_err(|e| Error::io_at(&log_path, e))?;
            iteration += 1;
        }

        let mut meta = TrainMeta {
            epoch: (epoch + 1) as u64,
            iteration,
            best_f_beta,
        };
        if masks_available {
            let eval = evaluate_network(&mut net, &samples)?.expect("masks present");
            let record = serde_json::json!({
                "epoch": epoch + 1,
                "f_beta": eval.f_beta,
                "e_xi": eval.e_xi,
                "mae": eval.mae,
            });
            writeln!(log, "{record}").map_err(|e| Error::io_at(&log_path, e))?;
            eprintln!(
                "epoch {:>3}/{}: f_beta {:.4} e_xi {:.4} mae {:.4}",
                epoch + 1,
                cfg.epochs,
                eval.f_beta,
                eval.e_xi,
                eval.mae
            );
            if best_f_beta.is_none_or(|b| eval.f_beta > b) {
                best_f_beta = Some(eval.f_beta);
                meta.best_f_beta = best_f_beta;
                net.save_checkpoint(&best_path, Some(&meta))?;
            }
            last_eval = Some(eval);
        } else {
            eprintln!("epoch {:>3}/{} done", epoch + 1, cfg.epochs);
        }
        meta.best_f_beta = best_f_beta;
        net.save_checkpoint(&ckpt_path, Some(&meta))?;
        log.flush().map_err(|e| Error::io_at(&log_path, e))?;
    }

    Ok(TrainReport {
        checkpoint: ckpt_path,
        log: log_path,
        iterations: iteration,
        final_eval: last_eval,
        param_scalars: net.param_scalar_count(),
    })
}
