//! Compact fully-convolutional encoder–decoder for saliency prediction.
//!
//! Four encoder stages (each conv-BN-ReLU, then a stride-2 conv-BN-ReLU)
//! produce features at strides 2/4/8/16. A global-context head pools the
//! deepest features through a 1×1 conv. Three decoder stages fuse the
//! upsampled preceding output, the matching encoder skip, and the broadcast
//! global context through per-sample scalar weights (softplus of a pooled
//! 3×3 conv per branch) normalized by their sum, then refine with
//! conv-BN-ReLU. Every stage emits a 1-channel logit head; the last stage's
//! head is the final map, and all maps are bilinearly upsampled to the input
//! resolution and passed through a sigmoid.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SaliencyMap;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::ops::{BnMode, BnRunning};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SCWS1";
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const MERGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Encoder widths per stage.
    pub stage_channels: [usize; 4],
    /// Nominal input side length; inference resizes to this. The network
    /// itself is fully convolutional.
    pub input_size: usize,
    /// Channels of the global-context descriptor.
    pub global_channels: usize,
    /// When false, decoder fusion uses fixed equal weights and the
    /// weight-learning convs are not created.
    pub aggm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stage_channels: [16, 32, 64, 128],
            input_size: 64,
            global_channels: 128,
            aggm: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|c| *c == 0) || self.global_channels == 0 {
            return Err(Error::Config("network channels must be >= 1".to_string()));
        }
        if self.input_size % 16 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "network.input_size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// A learnable tensor with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
    /// Normalization affine parameters are exempt from weight decay.
    pub decay_exempt: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    items: Vec<Parameter>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: String, value: Tensor, decay_exempt: bool) -> usize {
        let shape = value.shape().to_vec();
        self.items.push(Parameter {
            name,
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
            value,
            decay_exempt,
        });
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.items.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.items[idx]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.fill(0.0);
        }
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncStage {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
}

#[derive(Debug, Clone)]
struct DecStage {
    proj_h: Conv,
    proj_l: Conv,
    proj_g: Conv,
    /// Weight-learning convs for the h/g/l branches; absent without AGGM.
    weight_convs: Option<[Conv; 3]>,
    refine: Conv,
    refine_bn: Bn,
    head: Conv,
}

/// Builder that owns naming, initialization, and layer bookkeeping.
struct Assembler<'a> {
    params: &'a mut ParamStore,
    bn_states: &'a mut Vec<BnRunning>,
    rng: ChaCha8Rng,
}

impl Assembler<'_> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = Tensor::randn(&[cout, cin, k, k], std, &mut self.rng);
        let w = self.params.add(format!("{name}.weight"), weight, false);
        let b = self
            .params
            .add(format!("{name}.bias"), Tensor::zeros(&[cout]), false);
        Conv {
            weight: w,
            bias: b,
            stride,
            padding,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> Bn {
        let gamma = self
            .params
            .add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true);
        let beta = self
            .params
            .add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        self.bn_states.push(BnRunning::new(channels));
        Bn {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
        }
    }
}

/// Graph handles for one forward pass.
#[derive(Debug)]
pub struct NetworkOutputs {
    /// Post-sigmoid final map at input resolution, `[N, 1, H, W]`.
    pub final_map: NodeId,
    /// Post-sigmoid stage maps at input resolution, ordered nearest-to-output
    /// first.
    pub intermediates: [NodeId; 3],
}

/// Cache of parameter leaf nodes, one graph's worth. Reusing it across the
/// dual-scale forwards makes both passes share leaves so gradients accumulate
/// in one place.
pub struct ParamNodes {
    ids: Vec<Option<NodeId>>,
}

impl ParamNodes {
    pub fn new(n_params: usize) -> Self {
        ParamNodes {
            ids: vec![None; n_params],
        }
    }

    fn node(&mut self, g: &mut Graph, params: &ParamStore, idx: usize) -> NodeId {
        *self.ids[idx].get_or_insert_with(|| g.leaf(params.get(idx).value.clone()))
    }

    /// Add each parameter's accumulated graph gradient (scaled) into its
    /// grad buffer.
    pub fn harvest(&self, g: &Graph, params: &mut ParamStore, scale: f64) {
        for (idx, id) in self.ids.iter().enumerate() {
            let Some(id) = id else { continue };
            if let Some(grad) = g.grad(*id) {
                let acc = params.get_mut(idx).grad.data_mut();
                for (a, v) in acc.iter_mut().zip(grad) {
                    *a += scale * v;
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
    pub bn_states: Vec<BnRunning>,
    enc: [EncStage; 4],
    global_conv: Conv,
    bottleneck_head: Conv,
    dec: [DecStage; 3],
}

impl Network {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut bn_states = Vec::new();
        let mut a = Assembler {
            params: &mut params,
            bn_states: &mut bn_states,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let ch = cfg.stage_channels;
        let enc = [0, 1, 2, 3].map(|s| {
            let cin = if s == 0 { 3 } else { ch[s - 1] };
            EncStage {
                conv1: a.conv(&format!("enc{s}.conv1"), cin, ch[s], 3, 1, 1),
                bn1: a.bn(&format!("enc{s}.bn1"), ch[s]),
                conv2: a.conv(&format!("enc{s}.conv2"), ch[s], ch[s], 3, 2, 1),
                bn2: a.bn(&format!("enc{s}.bn2"), ch[s]),
            }
        });
        let global_conv = a.conv("global.conv", ch[3], cfg.global_channels, 1, 1, 0);
        let bottleneck_head = a.conv("bottleneck.head", ch[3], 1, 3, 1, 1);

        // decoder stage d consumes the skip from encoder stage 2-d
        let dec = [0usize, 1, 2].map(|d| {
            let skip_ch = ch[2 - d];
            let prev_ch = if d == 0 { ch[3] } else { ch[3 - d] };
            let name = format!("dec{d}");
            DecStage {
                proj_h: a.conv(&format!("{name}.proj_h"), prev_ch, skip_ch, 1, 1, 0),
                proj_l: a.conv(&format!("{name}.proj_l"), skip_ch, skip_ch, 1, 1, 0),
                proj_g: a.conv(&format!("{name}.proj_g"), cfg.global_channels, skip_ch, 1, 1, 0),
                weight_convs: cfg.aggm.then(|| {
                    [
                        a.conv(&format!("{name}.weight_h"), skip_ch, 1, 3, 1, 1),
                        a.conv(&format!("{name}.weight_g"), skip_ch, 1, 3, 1, 1),
                        a.conv(&format!("{name}.weight_l"), skip_ch, 1, 3, 1, 1),
                    ]
                }),
                refine: a.conv(&format!("{name}.refine"), skip_ch, skip_ch, 3, 1, 1),
                refine_bn: a.bn(&format!("{name}.bn"), skip_ch),
                head: a.conv(&format!("{name}.head"), skip_ch, 1, 3, 1, 1),
            }
        });

        Ok(Network {
            cfg,
            params,
            bn_states,
            enc,
            global_conv,
            bottleneck_head,
            dec,
        })
    }

    pub fn param_scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn apply_conv(
        &self,
        g: &mut Graph,
        pn: &mut ParamNodes,
        conv: &Conv,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = pn.node(g, &self.params, conv.weight);
        let b = pn.node(g, &self.params, conv.bias);
        g.conv2d(x, w, b, conv.stride, conv.padding)
    }

    fn apply_bn(
        &mut self,
        g: &mut Graph,
        pn: &mut ParamNodes,
        bn: Bn,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let gamma = pn.node(g, &self.params, bn.gamma);
        let beta = pn.node(g, &self.params, bn.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            &mut self.bn_states[bn.state],
            mode,
            BN_EPS,
            BN_MOMENTUM,
        )
    }

    fn conv_bn_relu(
        &mut self,
        g: &mut Graph,
        pn: &mut ParamNodes,
        conv: Conv,
        bn: Bn,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let c = self.apply_conv(g, pn, &conv, x)?;
        let n = self.apply_bn(g, pn, bn, c, mode)?;
        Ok(g.relu(n))
    }

    /// Full forward pass; builds onto `g` and returns map handles.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        images: &Tensor,
        mode: BnMode,
        pn: &mut ParamNodes,
    ) -> Result<NetworkOutputs> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape(
                "network_forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(
                "network_forward",
                format!("input {h}x{w} must be divisible by 16"),
            ));
        }

        let mut x = g.leaf(images.clone());
        let mut skips = Vec::with_capacity(4);
        for s in 0..4 {
            let stage = self.enc[s];
            x = self.conv_bn_relu(g, pn, stage.conv1, stage.bn1, x, mode)?;
            x = self.conv_bn_relu(g, pn, stage.conv2, stage.bn2, x, mode)?;
            skips.push(x);
        }
        let deepest = skips[3];

        // global context: GAP then 1x1 conv + ReLU on the pooled descriptor
        let pooled = g.global_avg_pool(deepest)?;
        let gctx = {
            let c = self.apply_conv(g, pn, &self.global_conv.clone(), pooled)?;
            g.relu(c)
        };

        let bneck_logit = self.apply_conv(g, pn, &self.bottleneck_head.clone(), deepest)?;

        let mut prev = deepest;
        let mut stage_logits = Vec::with_capacity(3);
        for d in 0..3 {
            let stage = self.dec[d].clone();
            let skip = skips[2 - d];
            let (sh, sw) = {
                let s = g.value(skip).shape();
                (s[2], s[3])
            };
            let up = g.resize_bilinear(prev, sh, sw)?;
            let f_h = self.apply_conv(g, pn, &stage.proj_h, up)?;
            let f_l = self.apply_conv(g, pn, &stage.proj_l, skip)?;
            let g_b = g.resize_bilinear(gctx, sh, sw)?;
            let f_g = self.apply_conv(g, pn, &stage.proj_g, g_b)?;

            let weights = match &stage.weight_convs {
                Some(wc) => {
                    let mut ws = [0usize; 3];
                    for (i, (conv, feat)) in wc.iter().zip([f_h, f_g, f_l]).enumerate() {
                        let squeezed = self.apply_conv(g, pn, conv, feat)?;
                        let pooled = g.global_avg_pool(squeezed)?;
                        ws[i] = g.softplus(pooled);
                    }
                    ws
                }
                None => {
                    let n = g.value(f_h).shape()[0];
                    let one = g.leaf(Tensor::full(&[n, 1, 1, 1], 1.0));
                    [one, one, one]
                }
            };
            let fused = g.weighted_merge([f_h, f_g, f_l], weights, MERGE_EPS)?;
            let refined =
                self.conv_bn_relu(g, pn, stage.refine, stage.refine_bn, fused, mode)?;
            stage_logits.push(self.apply_conv(g, pn, &stage.head, refined)?);
            prev = refined;
        }

        let to_full_sigmoid = |g: &mut Graph, logit: NodeId| -> Result<NodeId> {
            let up = g.resize_bilinear(logit, h, w)?;
            Ok(g.sigmoid(up))
        };
        let final_map = to_full_sigmoid(g, stage_logits[2])?;
        let intermediates = [
            to_full_sigmoid(g, stage_logits[1])?,
            to_full_sigmoid(g, stage_logits[0])?,
            to_full_sigmoid(g, bneck_logit)?,
        ];
        Ok(NetworkOutputs {
            final_map,
            intermediates,
        })
    }

    /// Eval-mode forward returning the final map tensor `[N, 1, H, W]`.
    pub fn predict(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(self.params.len());
        let out = self.forward(&mut g, images, BnMode::Eval, &mut pn)?;
        Ok(g.value(out.final_map).clone())
    }
}

/// Extract sample `n` of a `[N, 1, H, W]` map tensor.
pub fn nth_map(t: &Tensor, n: usize) -> Result<SaliencyMap> {
    let (batch, c, h, w) = t.dims4()?;
    if c != 1 || n >= batch {
        return Err(Error::shape(
            "nth_map",
            format!("want sample {n} of [N,1,H,W], shape is {:?}", t.shape()),
        ));
    }
    SaliencyMap::new(w, h, t.data()[n * h * w..(n + 1) * h * w].to_vec())
}

// ---------------------------------------------------------------------------
// checkpoint format
// ---------------------------------------------------------------------------

/// Trainer bookkeeping persisted alongside the parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub epoch: u64,
    pub iteration: u64,
    pub best_f_beta: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    has_state: bool,
    #[serde(default)]
    meta: TrainMeta,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("truncated at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Network {
    /// Versioned binary checkpoint: magic, JSON header (config + trainer
    /// meta), named shape-prefixed little-endian f64 parameter arrays
    /// (momentum buffers included when trainer state is saved), then BN
    /// running statistics.
    pub fn save_checkpoint(&self, path: &Path, meta: Option<&TrainMeta>) -> Result<()> {
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            has_state: meta.is_some(),
            meta: meta.cloned().unwrap_or_default(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("serialize checkpoint header: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, header_json.len() as u32);
        buf.extend_from_slice(&header_json);

        put_u32(&mut buf, self.params.len() as u32);
        for p in self.params.iter() {
            put_u32(&mut buf, p.name.len() as u32);
            buf.extend_from_slice(p.name.as_bytes());
            put_u32(&mut buf, p.value.shape().len() as u32);
            for d in p.value.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut buf, p.value.data());
            if header.has_state {
                put_f64s(&mut buf, p.momentum.data());
            }
        }
        put_u32(&mut buf, self.bn_states.len() as u32);
        for bn in &self.bn_states {
            put_u32(&mut buf, bn.mean.len() as u32);
            put_f64s(&mut buf, &bn.mean);
            put_f64s(&mut buf, &bn.var);
        }

        // atomic: write sibling temp file then rename into place
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io_at(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
    }

    /// Load a checkpoint, validating every parameter name and shape against a
    /// network rebuilt from the stored config.
    pub fn load_checkpoint(path: &Path) -> Result<(Network, TrainMeta)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io_at(path, e))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(5)? != CHECKPOINT_MAGIC {
            return Err(cur.fail("bad magic, not a checkpoint"));
        }
        let header_len = cur.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len)?)
            .map_err(|e| cur.fail(format!("bad header json: {e}")))?;
        let mut net = Network::new(header.config, 0)?;

        let n_params = cur.u32()? as usize;
        if n_params != net.params.len() {
            return Err(cur.fail(format!(
                "has {n_params} parameters, config builds {}",
                net.params.len()
            )));
        }
        for idx in 0..n_params {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| cur.fail("parameter name is not utf-8"))?;
            let ndim = cur.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cur.u64()? as usize);
            }
            {
                let expect = net.params.get(idx);
                if expect.name != name {
                    return Err(cur.fail(format!(
                        "parameter {idx} is '{name}', expected '{}'",
                        expect.name
                    )));
                }
                if expect.value.shape() != dims.as_slice() {
                    return Err(cur.fail(format!(
                        "parameter '{name}' has shape {dims:?}, expected {:?}",
                        expect.value.shape()
                    )));
                }
            }
            let numel: usize = dims.iter().product();
            let values = cur.f64s(numel)?;
            let momentum = if header.has_state {
                Some(cur.f64s(numel)?)
            } else {
                None
            };
            let p = net.params.get_mut(idx);
            p.value.data_mut().copy_from_slice(&values);
            if let Some(m) = momentum {
                p.momentum.data_mut().copy_from_slice(&m);
            }
        }

        let n_bn = cur.u32()? as usize;
        if n_bn != net.bn_states.len() {
            return Err(cur.fail(format!(
                "has {n_bn} BN states, config builds {}",
                net.bn_states.len()
            )));
        }
        for idx in 0..n_bn {
            let ch = cur.u32()? as usize;
            if ch != net.bn_states[idx].mean.len() {
                return Err(cur.fail(format!(
                    "BN state {idx} has {ch} channels, expected {}",
                    net.bn_states[idx].mean.len()
                )));
            }
            net.bn_states[idx].mean = cur.f64s(ch)?;
            net.bn_states[idx].var = cur.f64s(ch)?;
        }
        Ok((net, header.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            stage_channels: [4, 8, 12, 16],
            input_size: 32,
            global_channels: 16,
            aggm: true,
        }
    }

    #[test]
    fn output_shapes_and_range() {
        let mut net = Network::new(small_cfg(), 1).unwrap();
        let images = Tensor::rand_uniform(
            &[2, 3, 32, 32],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        let out = net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap();
        assert_eq!(g.value(out.final_map).shape(), &[2, 1, 32, 32]);
        for id in out.intermediates {
            assert_eq!(g.value(id).shape(), &[2, 1, 32, 32]);
            for v in g.value(id).data() {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
        for v in g.value(out.final_map).data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn encoder_feature_sizes_follow_strides() {
        let mut net = Network::new(NetworkConfig::default(), 3).unwrap();
        let images = Tensor::zeros(&[1, 3, 64, 64]);
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap();
        // relu outputs of the four encoder stages appear at strides 2,4,8,16
        let mut seen = std::collections::BTreeSet::new();
        for id in 0..g.len() {
            let s = g.value(id).shape();
            if s.len() == 4 {
                seen.insert((s[2], s[3], s[1]));
            }
        }
        for (side, ch) in [(32, 16), (16, 32), (8, 64), (4, 128)] {
            assert!(
                seen.contains(&(side, side, ch)),
                "missing {side}x{side}x{ch} feature"
            );
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut net = Network::new(small_cfg(), 1).unwrap();
        let images = Tensor::zeros(&[1, 3, 30, 32]);
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        let err = net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap_err();
        assert!(err.to_string().contains("divisible by 16"));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = Network::new(small_cfg(), 4).unwrap();
        let images = Tensor::rand_uniform(
            &[1, 3, 32, 32],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        let a = net.predict(&images).unwrap();
        let b = net.predict(&images).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn param_count_is_independent_of_input_size() {
        let mut cfg = small_cfg();
        let a = Network::new(cfg.clone(), 1).unwrap().param_scalar_count();
        cfg.input_size = 64;
        let b = Network::new(cfg, 1).unwrap().param_scalar_count();
        assert_eq!(a, b);
        assert!(a > 0);
    }

    #[test]
    fn aggm_toggle_changes_parameter_set() {
        let with = Network::new(small_cfg(), 1).unwrap();
        let without = Network::new(
            NetworkConfig {
                aggm: false,
                ..small_cfg()
            },
            1,
        )
        .unwrap();
        assert!(with.params.len() > without.params.len());
        assert!(with.params.iter().any(|p| p.name.contains("weight_h")));
        assert!(!without.params.iter().any(|p| p.name.contains("weight_h")));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.scws");
        let mut net = Network::new(small_cfg(), 7).unwrap();
        // give running stats a non-default value
        let images = Tensor::rand_uniform(
            &[2, 3, 32, 32],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(8),
        );
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap();

        let meta = TrainMeta {
            epoch: 3,
            iteration: 75,
            best_f_beta: Some(0.91),
        };
        net.save_checkpoint(&path, Some(&meta)).unwrap();
        let (mut loaded, loaded_meta) = Network::load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        for (a, b) in net.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.momentum.data(), b.momentum.data());
        }
        assert_eq!(net.bn_states, loaded.bn_states);

        let x = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(net.predict(&x).unwrap().data(), loaded.predict(&x).unwrap().data());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.scws");
        let net = Network::new(small_cfg(), 7).unwrap();
        net.save_checkpoint(&path, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = Network::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"));

        let truncated = std::fs::read(&path).unwrap();
        net.save_checkpoint(&path, None).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        let err = Network::load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        drop(truncated);
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_encoder_features() {
        let mut net = Network::new(small_cfg(), 1).unwrap();
        // biases start at zero; BN beta starts at zero, so stage outputs stay 0
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let mut g = Graph::new();
        let mut pn = ParamNodes::new(net.params.len());
        net.forward(&mut g, &images, BnMode::Train, &mut pn).unwrap();
        // first encoder stage relu output is node after conv+bn+relu chain;
        // scan for the 16x16 feature map (stride-2 of stage 0) and check zeros
        for id in 0..g.len() {
            let t = g.value(id);
            if t.shape() == [1, 4, 16, 16] {
                assert!(t.data().iter().all(|v| *v == 0.0));
            }
        }
    }
}
