//! The finite-difference verification suite behind the `gradcheck` command.
//!
//! Every differentiable kernel, each loss, the composed objective, and the
//! end-to-end network objective are checked against central differences
//! (h = 1e-6). Kernel and loss checks must reach 1e-4 relative error; the
//! end-to-end check samples 32 parameter coordinates at 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    lsc_loss, partial_ce, ssc_loss, total_objective, Label, LscConfig, ObjectiveConfig,
    SaliencyMap, ScribbleMask,
};
use crate::network::{nth_map, Network, NetworkConfig, ParamNodes};
use crate::tensor::gradcheck::{check_gradient, CoordPlan, GradReport};
use crate::tensor::graph::Graph;
use crate::tensor::ops::{self, BnMode, BnRunning};
use crate::tensor::Tensor;

pub struct SuiteCheck {
    pub name: &'static str,
    pub report: GradReport,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

const H: f64 = 1e-6;
const TOL_OP: f64 = 1e-4;
const TOL_E2E: f64 = 1e-3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_scribble(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ScribbleMask {
    let labels = (0..w * h)
        .map(|_| match rng.random_range(0..5) {
            0 => Label::Foreground,
            1 => Label::Background,
            _ => Label::Unlabeled,
        })
        .collect();
    ScribbleMask::new(w, h, labels).expect("sized")
}

fn conv_check(seed: u64, stride: usize, padding: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let weight = Tensor::rand_uniform(&[3, 2, 3, 3], -0.7, 0.7, &mut rng);
    let bias = Tensor::rand_uniform(&[3], -0.3, 0.3, &mut rng);
    let out = ops::conv2d_forward(&input, &weight, &bias, stride, padding)?;
    let proj = Tensor::rand_uniform(out.shape(), -1.0, 1.0, &mut rng);
    let mut f = |xs: &[Tensor]| {
        let out = ops::conv2d_forward(&xs[0], &xs[1], &xs[2], stride, padding)?;
        let (gi, gw, gb) = ops::conv2d_backward(&xs[0], &xs[1], stride, padding, &proj)?;
        Ok((Tensor::scalar(dot(out.data(), proj.data())), vec![gi, gw, gb]))
    };
    check_gradient(&mut f, &[input, weight, bias], H, TOL_OP, CoordPlan::All)
}

fn batch_norm_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::rand_uniform(&[2, 3, 4, 4], -2.0, 2.0, &mut rng);
    let gamma = Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng);
    let beta = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng);
    let proj = Tensor::rand_uniform(input.shape(), -1.0, 1.0, &mut rng);
    let mut f = |xs: &[Tensor]| {
        let mut running = BnRunning::new(3);
        let (out, cache) = ops::batch_norm_forward(
            &xs[0], &xs[1], &xs[2], &mut running, BnMode::Train, 1e-5, 0.1,
        )?;
        let (gi, gg, gb) = ops::batch_norm_backward(&xs[0], &xs[1], &cache, &proj)?;
        Ok((Tensor::scalar(dot(out.data(), proj.data())), vec![gi, gg, gb]))
    };
    check_gradient(&mut f, &[input, gamma, beta], H, TOL_OP, CoordPlan::All)
}

fn activation_check(seed: u64, which: &str) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep relu inputs away from its kink at 0
    let mut input = Tensor::rand_uniform(&[2, 2, 3, 3], -2.0, 2.0, &mut rng);
    for v in input.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let proj = Tensor::rand_uniform(input.shape(), -1.0, 1.0, &mut rng);
    let which = which.to_string();
    let mut f = move |xs: &[Tensor]| {
        let (out, grad) = match which.as_str() {
            "relu" => {
                let out = ops::relu_forward(&xs[0]);
                let g = ops::relu_backward(&xs[0], proj.data());
                (out, g)
            }
            "sigmoid" => {
                let out = ops::sigmoid_forward(&xs[0]);
                let g = ops::sigmoid_backward(&out, proj.data());
                (out, g)
            }
            _ => {
                let out = ops::softplus_forward(&xs[0]);
                let g = ops::softplus_backward(&xs[0], proj.data());
                (out, g)
            }
        };
        Ok((
            Tensor::scalar(dot(out.data(), proj.data())),
            vec![Tensor::from_vec(xs[0].shape(), grad)?],
        ))
    };
    check_gradient(&mut f, &[input], H, TOL_OP, CoordPlan::All)
}

fn resize_check(seed: u64, out_h: usize, out_w: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::rand_uniform(&[1, 2, 5, 6], -1.0, 1.0, &mut rng);
    let proj = Tensor::rand_uniform(&[1, 2, out_h, out_w], -1.0, 1.0, &mut rng);
    let shape = input.shape().to_vec();
    let mut f = move |xs: &[Tensor]| {
        let out = ops::resize_bilinear_forward(&xs[0], out_h, out_w)?;
        let gi = ops::resize_bilinear_backward(&shape, &proj)?;
        Ok((Tensor::scalar(dot(out.data(), proj.data())), vec![gi]))
    };
    check_gradient(&mut f, &[input], H, TOL_OP, CoordPlan::All)
}

fn gap_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let proj = Tensor::rand_uniform(&[2, 3, 1, 1], -1.0, 1.0, &mut rng);
    let shape = input.shape().to_vec();
    let mut f = move |xs: &[Tensor]| {
        let out = ops::global_avg_pool_forward(&xs[0])?;
        let gi = ops::global_avg_pool_backward(&shape, &proj)?;
        Ok((Tensor::scalar(dot(out.data(), proj.data())), vec![gi]))
    };
    check_gradient(&mut f, &[input], H, TOL_OP, CoordPlan::All)
}

fn merge_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2usize, 2, 3, 3];
    let fs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng))
        .collect();
    let ws: Vec<Tensor> = (0..3)
        .map(|_| Tensor::rand_uniform(&[2], 0.2, 2.0, &mut rng))
        .collect();
    let proj = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng);
    let mut f = move |xs: &[Tensor]| {
        let feats = [&xs[0], &xs[1], &xs[2]];
        let weights = [&xs[3], &xs[4], &xs[5]];
        let out = ops::weighted_merge_forward(feats, weights, 1e-8)?;
        let (gf, gw) = ops::weighted_merge_backward(feats, weights, 1e-8, &out, &proj)?;
        let mut grads: Vec<Tensor> = gf.into_iter().collect();
        grads.extend(gw);
        Ok((Tensor::scalar(dot(out.data(), proj.data())), grads))
    };
    let inputs: Vec<Tensor> = fs.into_iter().chain(ws).collect();
    check_gradient(&mut f, &inputs, H, TOL_OP, CoordPlan::All)
}

fn partial_ce_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = random_scribble(&mut rng, 5, 5);
    let pred = Tensor::rand_uniform(&[25], 0.05, 0.95, &mut rng);
    let mut f = move |xs: &[Tensor]| {
        let p = SaliencyMap::new(5, 5, xs[0].data().to_vec())?;
        let (loss, grad) = partial_ce(&p, &mask)?;
        Ok((Tensor::scalar(loss), vec![Tensor::from_vec(&[25], grad)?]))
    };
    check_gradient(&mut f, &[pred], H, TOL_OP, CoordPlan::All)
}

fn lsc_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::rand_uniform(&[3, 6, 6], 0.0, 1.0, &mut rng);
    let pred = Tensor::rand_uniform(&[36], 0.0, 1.0, &mut rng);
    let cfg = LscConfig::default();
    let mut f = move |xs: &[Tensor]| {
        let p = SaliencyMap::new(6, 6, xs[0].data().to_vec())?;
        let (loss, grad) = lsc_loss(&p, &image, &cfg)?;
        Ok((Tensor::scalar(loss), vec![Tensor::from_vec(&[36], grad)?]))
    };
    check_gradient(&mut f, &[pred], H, TOL_OP, CoordPlan::All)
}

fn ssc_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::rand_uniform(&[25], 0.0, 1.0, &mut rng);
    let b = Tensor::rand_uniform(&[25], 0.0, 1.0, &mut rng);
    let mut f = |xs: &[Tensor]| {
        let x = SaliencyMap::new(5, 5, xs[0].data().to_vec())?;
        let y = SaliencyMap::new(5, 5, xs[1].data().to_vec())?;
        let (loss, gx, gy) = ssc_loss(&x, &y, 0.85)?;
        Ok((
            Tensor::scalar(loss),
            vec![Tensor::from_vec(&[25], gx)?, Tensor::from_vec(&[25], gy)?],
        ))
    };
    check_gradient(&mut f, &[a, b], H, TOL_OP, CoordPlan::All)
}

fn objective_check(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8usize;
    let image = Tensor::rand_uniform(&[3, n, n], 0.0, 1.0, &mut rng);
    let mask = random_scribble(&mut rng, n, n);
    let cfg = ObjectiveConfig::default();
    let lsc_cfg = LscConfig::default();
    let inputs = vec![
        Tensor::rand_uniform(&[n * n], 0.05, 0.95, &mut rng),
        Tensor::rand_uniform(&[n * n], 0.05, 0.95, &mut rng),
        Tensor::rand_uniform(&[n * n], 0.05, 0.95, &mut rng),
        Tensor::rand_uniform(&[n * n], 0.05, 0.95, &mut rng),
        Tensor::rand_uniform(&[16], 0.05, 0.95, &mut rng),
    ];
    let mut f = move |xs: &[Tensor]| {
        let fm = SaliencyMap::new(n, n, xs[0].data().to_vec())?;
        let inters = [
            SaliencyMap::new(n, n, xs[1].data().to_vec())?,
            SaliencyMap::new(n, n, xs[2].data().to_vec())?,
            SaliencyMap::new(n, n, xs[3].data().to_vec())?,
        ];
        let small = SaliencyMap::new(4, 4, xs[4].data().to_vec())?;
        let (bd, grads) =
            total_objective(&fm, &inters, Some(&small), &image, &mask, &cfg, &lsc_cfg)?;
        let [g0, g1, g2] = grads.intermediates;
        Ok((
            Tensor::scalar(bd.l_total),
            vec![
                Tensor::from_vec(&[n * n], grads.final_map)?,
                Tensor::from_vec(&[n * n], g0)?,
                Tensor::from_vec(&[n * n], g1)?,
                Tensor::from_vec(&[n * n], g2)?,
                Tensor::from_vec(&[16], grads.small.unwrap())?,
            ],
        ))
    };
    check_gradient(&mut f, &inputs, H, TOL_OP, CoordPlan::Sample(80, seed))
}

/// Loss of the whole network plus objective, as a function of the parameters.
fn end_to_end_loss(
    template: &Network,
    param_values: &[Tensor],
    images: &Tensor,
    small_images: Option<&Tensor>,
    masks: &[ScribbleMask],
    obj_cfg: &ObjectiveConfig,
    lsc_cfg: &LscConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut net = Network::new(template.cfg.clone(), 0)?;
    for (idx, value) in param_values.iter().enumerate() {
        net.params
            .get_mut(idx)
            .value
            .data_mut()
            .copy_from_slice(value.data());
    }
    net.params.zero_grads();

    let (n, _, h, w) = images.dims4()?;
    let mut g = Graph::new();
    let mut pn = ParamNodes::new(net.params.len());
    let out = net.forward(&mut g, images, BnMode::Train, &mut pn)?;
    let small_out = match small_images {
        Some(si) => Some(net.forward(&mut g, si, BnMode::Train, &mut pn)?),
        None => None,
    };

    let plane = h * w;
    let mut total = 0.0;
    let mut seeds: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut seed_final = vec![0.0; n * plane];
    let mut seed_inters = [
        vec![0.0; n * plane],
        vec![0.0; n * plane],
        vec![0.0; n * plane],
    ];
    let mut seed_small: Option<Vec<f64>> = None;
    for s in 0..n {
        let fm = nth_map(g.value(out.final_map), s)?;
        let inters = [
            nth_map(g.value(out.intermediates[0]), s)?,
            nth_map(g.value(out.intermediates[1]), s)?,
            nth_map(g.value(out.intermediates[2]), s)?,
        ];
        let small_map = match &small_out {
            Some(so) => Some(nth_map(g.value(so.final_map), s)?),
            None => None,
        };
        let image3 = Tensor::from_vec(
            &[3, h, w],
            images.data()[s * 3 * plane..(s + 1) * 3 * plane].to_vec(),
        )?;
        let (bd, grads) = total_objective(
            &fm,
            &inters,
            small_map.as_ref(),
            &image3,
            &masks[s],
            obj_cfg,
            lsc_cfg,
        )?;
        let scale = 1.0 / n as f64;
        total += scale * bd.l_total;
        seed_final[s * plane..(s + 1) * plane]
            .iter_mut()
            .zip(&grads.final_map)
            .for_each(|(d, v)| *d = scale * v);
        for q in 0..3 {
            seed_inters[q][s * plane..(s + 1) * plane]
                .iter_mut()
                .zip(&grads.intermediates[q])
                .for_each(|(d, v)| *d = scale * v);
        }
        if let Some(gs) = grads.small {
            let sp = gs.len();
            let buf = seed_small.get_or_insert_with(|| vec![0.0; n * sp]);
            buf[s * sp..(s + 1) * sp]
                .iter_mut()
                .zip(&gs)
                .for_each(|(d, v)| *d = scale * v);
        }
    }
    seeds.push((out.final_map, seed_final));
    for q in 0..3 {
        seeds.push((out.intermediates[q], std::mem::take(&mut seed_inters[q])));
    }
    if let (Some(so), Some(buf)) = (&small_out, seed_small) {
        seeds.push((so.final_map, buf));
    }
    g.backward(seeds)?;
    pn.harvest(&g, &mut net.params, 1.0);

    let grads = net.params.iter().map(|p| p.grad.clone()).collect();
    Ok((total, grads))
}

fn end_to_end_check(seed: u64, size: usize, with_ssc: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetworkConfig {
        stage_channels: [4, 6, 8, 12],
        input_size: size,
        global_channels: 12,
        aggm: true,
    };
    let template = Network::new(cfg, seed)?;
    let images = Tensor::rand_uniform(&[2, 3, size, size], 0.0, 1.0, &mut rng);
    let small_images = if with_ssc {
        Some(ops::resize_bilinear_forward(&images, size / 2, size / 2)?)
    } else {
        None
    };
    let masks: Vec<ScribbleMask> = (0..2).map(|_| random_scribble(&mut rng, size, size)).collect();
    let obj_cfg = ObjectiveConfig::default();
    let lsc_cfg = LscConfig::default();

    let inputs: Vec<Tensor> = template.params.iter().map(|p| p.value.clone()).collect();
    let mut f = move |xs: &[Tensor]| {
        let (loss, grads) = end_to_end_loss(
            &template,
            xs,
            &images,
            small_images.as_ref(),
            &masks,
            &obj_cfg,
            &lsc_cfg,
        )?;
        Ok((Tensor::scalar(loss), grads))
    };
    check_gradient(&mut f, &inputs, H, TOL_E2E, CoordPlan::Sample(32, seed ^ 0xabcd))
}

/// Run every check; `seed` drives all sampled data.
pub fn run_full_suite(seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, report: GradReport| {
        out.push(SuiteCheck { name, report });
    };
    push("conv2d(stride=1,pad=1)", conv_check(seed, 1, 1)?);
    push("conv2d(stride=2,pad=1)", conv_check(seed ^ 1, 2, 1)?);
    push("batch_norm(train)", batch_norm_check(seed ^ 2)?);
    push("relu", activation_check(seed ^ 3, "relu")?);
    push("sigmoid", activation_check(seed ^ 4, "sigmoid")?);
    push("softplus", activation_check(seed ^ 5, "softplus")?);
    push("resize_bilinear(up)", resize_check(seed ^ 6, 9, 11)?);
    push("resize_bilinear(down)", resize_check(seed ^ 7, 3, 3)?);
    push("global_avg_pool", gap_check(seed ^ 8)?);
    push("weighted_merge", merge_check(seed ^ 9)?);
    push("partial_ce", partial_ce_check(seed ^ 10)?);
    push("lsc_loss", lsc_check(seed ^ 11)?);
    push("ssc_loss", ssc_check(seed ^ 12)?);
    push("total_objective", objective_check(seed ^ 13)?);
    push("network+objective(16px)", end_to_end_check(seed ^ 14, 16, false)?);
    push("network+objective(32px,dual-scale)", end_to_end_check(seed ^ 15, 32, true)?);
    Ok(out)
}
