//! Multi-scale analyzer and synthesizer networks.
//!
//! The analyzer trunk has `depth` conv layers: two stride-2 layers in
//! front, then one layer per quantized scale (the first at stride 1, the
//! rest at stride 2), so scale i sits at 1/2^(i+2) of the input resolution.
//! Each scale taps off its trunk layer through a 3x3 projection followed by
//! batch norm, clip-and-scale preprocessing and the quantizer. The
//! synthesizer mirrors this with nearest-neighbor upsampling plus 3x3
//! convolutions, concatenating each quantized map as its resolution is
//! reached, and clamps the output to [0, 1].

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::img::Image;
use crate::metrics::{ms_ssim, ms_ssim_node, MsSsimConfig};
use crate::params::{adam_step, init_conv_weight, lr_scale, AdamState, ParamId, ParamStore};
use crate::quantizer::{preprocess_node, quantize_map, quantize_node, QuantizerConfig};
use crate::tensor::{FeatureTensor, QuantizedFeatures, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Shape and rate parameters of one codec instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    /// Number of quantized scales (M).
    pub m: usize,
    /// Channels per scale, finest first; zeros mean the scale is unused.
    pub channels: Vec<usize>,
    /// Quantization levels (N).
    pub n_levels: u8,
    /// Quantizer clip bound (u).
    pub u: f64,
    /// Channel width of the non-quantized trunk layers.
    pub hidden_width: usize,
    /// Conv layers in the analyzer trunk; must equal m + 2.
    pub depth: usize,
    /// Schedule blocks (K) for the lossless coder.
    pub k_blocks: usize,
    /// Hidden width of the per-step context models.
    pub ctx_hidden: usize,
}

impl CodecConfig {
    /// The full-scale architecture shape: 6 conv layers, 4 quantized
    /// scales, 32 channels at the deepest scale.
    pub fn full_preset(channels: [usize; 4], n_levels: u8, k_blocks: usize) -> Self {
        CodecConfig {
            m: 4,
            channels: channels.to_vec(),
            n_levels,
            u: 4.0,
            hidden_width: 32,
            depth: 6,
            k_blocks,
            ctx_hidden: 24,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::config("need at least one scale"));
        }
        if self.channels.len() != self.m {
            return Err(Error::config("channels list length must equal M"));
        }
        if *self.channels.last().unwrap() < 1 {
            return Err(Error::config("deepest scale must keep at least one channel"));
        }
        if self.n_levels < 2 {
            return Err(Error::config("need at least 2 quantization levels"));
        }
        if self.u <= 0.0 {
            return Err(Error::config("clip bound u must be positive"));
        }
        if self.depth != self.m + 2 {
            return Err(Error::config(format!(
                "trunk depth {} must be M + 2 = {} under the fixed stride plan",
                self.depth,
                self.m + 2
            )));
        }
        if !self.k_blocks.is_multiple_of(2) {
            return Err(Error::config("K must be even"));
        }
        if self.hidden_width < 1 || self.ctx_hidden < 1 {
            return Err(Error::config("widths must be positive"));
        }
        Ok(())
    }

    pub fn quantizer(&self) -> QuantizerConfig {
        QuantizerConfig {
            u: self.u,
            n_levels: self.n_levels,
            alpha: 0.5,
        }
    }

    /// Input dims must be divisible by this before analysis: the deepest
    /// scale sits at 1/2^(M+1) resolution and the coder's seed grid needs
    /// the finest scale divisible by 2^(K/2).
    pub fn pad_multiple(&self) -> usize {
        let for_scales = 1usize << (self.m + 1);
        let for_schedule = 1usize << (self.k_blocks / 2 + 2);
        for_scales.max(for_schedule)
    }

    /// (channels, height, width) of every scale for a padded input.
    pub fn scale_dims(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        (0..self.m)
            .map(|i| (self.channels[i], height >> (i + 2), width >> (i + 2)))
            .collect()
    }

    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Label summarizing the rate-relevant knobs, used in reports. Kept
    /// free of commas so CSV rows stay trivially parseable.
    pub fn label(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!("N{}-C{}-K{}", self.n_levels, ch.join("."), self.k_blocks)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TapIds {
    pub conv: ConvIds,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
}

/// Parameter handles for analyzer and synthesizer.
#[derive(Debug, Clone)]
pub struct AutoencoderIds {
    pub trunk: Vec<ConvIds>,
    pub taps: Vec<Option<TapIds>>,
    pub synth_head: ConvIds,
    /// One merge conv per scale below the deepest, ordered deep to shallow.
    pub synth_merge: Vec<ConvIds>,
    /// Final two upsampling convs; the second outputs RGB.
    pub synth_tail: [ConvIds; 2],
}

fn trunk_stride(layer: usize) -> usize {
    // Two downsamplers in front, then stride 1 at the first tap layer and
    // stride 2 between consecutive taps.
    if layer < 2 {
        2
    } else if layer == 2 {
        1
    } else {
        2
    }
}

fn trunk_kernel(layer: usize) -> usize {
    if layer == 0 {
        5
    } else {
        3
    }
}

/// Registers all autoencoder parameters in their fixed declaration order.
pub fn register_autoencoder(
    store: &mut ParamStore<f32>,
    cfg: &CodecConfig,
    rng: &mut ChaCha20Rng,
) -> AutoencoderIds {
    let hid = cfg.hidden_width;
    let conv = |store: &mut ParamStore<f32>, rng: &mut ChaCha20Rng, name: String, oc: usize, ic: usize, k: usize| {
        let w = store.add(format!("{name}.w"), init_conv_weight(rng, oc, ic, k, k), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, oc, 1, 1), true);
        ConvIds { w, b }
    };

    let mut trunk = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let ic = if l == 0 { 3 } else { hid };
        trunk.push(conv(store, rng, format!("ae.trunk{l}"), hid, ic, trunk_kernel(l)));
    }

    let mut taps = Vec::with_capacity(cfg.m);
    for (i, &c) in cfg.channels.iter().enumerate() {
        if c == 0 {
            taps.push(None);
            continue;
        }
        let tap_conv = conv(store, rng, format!("ae.tap{i}"), c, hid, 3);
        let gamma = store.add(format!("ae.tap{i}.bn.gamma"), Tensor::full(1, c, 1, 1, 1.0), true);
        // Start the post-BN distribution centered in the clip range [0, u]
        // instead of half-saturated at the lower bound.
        let beta = store.add(
            format!("ae.tap{i}.bn.beta"),
            Tensor::full(1, c, 1, 1, (cfg.u / 2.0) as f32),
            true,
        );
        let run_mean = store.add(format!("ae.tap{i}.bn.run_mean"), Tensor::zeros(1, c, 1, 1), false);
        let run_var = store.add(format!("ae.tap{i}.bn.run_var"), Tensor::full(1, c, 1, 1, 1.0), false);
        taps.push(Some(TapIds {
            conv: tap_conv,
            gamma,
            beta,
            run_mean,
            run_var,
        }));
    }

    let deepest = *cfg.channels.last().unwrap();
    let synth_head = conv(store, rng, "syn.head".to_string(), hid, deepest, 3);
    let mut synth_merge = Vec::new();
    for i in (0..cfg.m - 1).rev() {
        let ic = hid + cfg.channels[i];
        synth_merge.push(conv(store, rng, format!("syn.merge{i}"), hid, ic, 3));
    }
    let tail0 = conv(store, rng, "syn.tail0".to_string(), hid, hid, 3);
    let tail1 = conv(store, rng, "syn.tail1".to_string(), 3, hid, 3);
    // Mid-gray start keeps early reconstructions off the clamp boundary.
    store.value_mut(tail1.b).data.fill(0.5);

    AutoencoderIds {
        trunk,
        taps,
        synth_head,
        synth_merge,
        synth_tail: [tail0, tail1],
    }
}

/// How the quantizer behaves inside a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Frozen batch-norm statistics, hard rounding: the codec path.
    Eval,
    /// Batch statistics, hard forward / soft backward: the training path.
    TrainHard,
    /// Batch statistics, soft forward: the differentiable surrogate used by
    /// gradient checks.
    TrainSoft,
}

/// Analyzer trunk + taps. Returns the raw (pre-batch-norm) feature node per
/// scale; empty scales yield None.
pub fn analyzer_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
    image: NodeId,
) -> Vec<Option<NodeId>> {
    let slope = T::c(LEAKY_SLOPE);
    let mut x = image;
    let mut acts = Vec::with_capacity(cfg.depth);
    for (l, c) in ids.trunk.iter().enumerate() {
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        let k = trunk_kernel(l);
        x = g.conv2d(x, w, Some(b), trunk_stride(l), k / 2);
        x = g.leaky_relu(x, slope);
        acts.push(x);
    }
    let first_tap_layer = cfg.depth - cfg.m;
    (0..cfg.m)
        .map(|i| {
            ids.taps[i].as_ref().map(|tap| {
                let w = g.param(store, tap.conv.w);
                let b = g.param(store, tap.conv.b);
                g.conv2d(acts[first_tap_layer + i], w, Some(b), 1, 1)
            })
        })
        .collect()
}

/// Quantizer nodes per scale plus the batch-norm nodes feeding them (the
/// latter expose batch statistics during training).
pub struct QuantizedNodes {
    pub q: Vec<Option<NodeId>>,
    pub bn: Vec<Option<NodeId>>,
}

/// Batch norm + clip + scale + rounding for every non-empty scale.
/// Quantized node values are levels in 0..N-1 presented as reals.
pub fn quantize_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
    z_nodes: &[Option<NodeId>],
    mode: QuantMode,
) -> QuantizedNodes {
    let qc = cfg.quantizer();
    let eps = T::c(BN_EPS);
    let mut q = Vec::with_capacity(cfg.m);
    let mut bns = Vec::with_capacity(cfg.m);
    for (i, z) in z_nodes.iter().enumerate() {
        match z {
            None => {
                q.push(None);
                bns.push(None);
            }
            Some(z) => {
                let tap = ids.taps[i].as_ref().unwrap();
                let gamma = g.param(store, tap.gamma);
                let beta = g.param(store, tap.beta);
                let bn = match mode {
                    QuantMode::Eval => {
                        let mean = store.value(tap.run_mean).data.clone();
                        let var = store.value(tap.run_var).data.clone();
                        g.batchnorm_eval(*z, gamma, beta, mean, var, eps)
                    }
                    _ => g.batchnorm_train(*z, gamma, beta, eps),
                };
                let pre = preprocess_node(g, bn, &qc);
                q.push(Some(quantize_node(g, pre, &qc, mode != QuantMode::TrainSoft)));
                bns.push(Some(bn));
            }
        }
    }
    QuantizedNodes { q, bn: bns }
}

/// Synthesizer: deepest scale up to the image, merging each quantized map
/// at its resolution; output clamped to [0, 1].
///
/// Levels enter through a fixed affine map onto [-0.5, 0.5]. Feeding the
/// raw 0..N-1 values instead leaves most of the output clamp-saturated at
/// initialization (the level mean dwarfs the He-scaled weights) and
/// training stalls at a features-ignored optimum.
pub fn synthesizer_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
    q_nodes: &[Option<NodeId>],
) -> NodeId {
    let slope = T::c(LEAKY_SLOPE);
    let rescale = |g: &mut Graph<T>, q: NodeId| {
        let s = g.mul_scalar(q, T::one() / T::c((cfg.n_levels - 1).max(1) as f64));
        g.add_scalar(s, T::c(-0.5))
    };
    let deepest = q_nodes[cfg.m - 1].expect("deepest scale always has channels");
    let deepest = rescale(g, deepest);
    let w = g.param(store, ids.synth_head.w);
    let b = g.param(store, ids.synth_head.b);
    let mut x = g.conv2d(deepest, w, Some(b), 1, 1);
    x = g.leaky_relu(x, slope);
    for (mi, i) in (0..cfg.m - 1).rev().enumerate() {
        x = g.upsample_nearest(x, 2);
        if let Some(q) = q_nodes[i] {
            let q = rescale(g, q);
            x = g.concat_channels(&[x, q]);
        }
        let c = &ids.synth_merge[mi];
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        x = g.conv2d(x, w, Some(b), 1, 1);
        x = g.leaky_relu(x, slope);
    }
    for (t, c) in ids.synth_tail.iter().enumerate() {
        x = g.upsample_nearest(x, 2);
        let w = g.param(store, c.w);
        let b = g.param(store, c.b);
        x = g.conv2d(x, w, Some(b), 1, 1);
        if t == 0 {
            x = g.leaky_relu(x, slope);
        }
    }
    g.clamp(x, T::zero(), T::one())
}

/// Raw multi-scale features of one padded image (pre batch-norm).
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub maps: Vec<FeatureTensor<f32>>,
}

/// Analyzer inference. The image must already be padded to the config's
/// multiple.
pub fn analyze(
    image: &Image,
    store: &ParamStore<f32>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
) -> Result<MultiScaleFeatures> {
    let mult = cfg.pad_multiple();
    if !image.height().is_multiple_of(mult) || !image.width().is_multiple_of(mult) {
        return Err(Error::config(format!(
            "image dims {}x{} not divisible by {mult}; pad first",
            image.height(),
            image.width()
        )));
    }
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::from_feature(&image.pixels));
    let z_nodes = analyzer_forward(&mut g, store, ids, cfg, x);
    let dims = cfg.scale_dims(image.height(), image.width());
    let maps = z_nodes
        .iter()
        .zip(dims.iter())
        .map(|(z, &(c, h, w))| match z {
            Some(z) => {
                let t = &g.value(*z).to_features()[0];
                debug_assert_eq!(t.shape(), (c, h, w));
                t.clone()
            }
            None => FeatureTensor::zeros(0, h, w),
        })
        .collect();
    Ok(MultiScaleFeatures { maps })
}

/// Frozen-statistics preprocessing plus hard rounding of analyzer output.
pub fn quantize_features(
    features: &MultiScaleFeatures,
    store: &ParamStore<f32>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
) -> QuantizedFeatures {
    let qc = cfg.quantizer();
    let maps = features
        .maps
        .iter()
        .enumerate()
        .map(|(i, z)| {
            if z.channels == 0 {
                return crate::tensor::LevelMap::zeros(0, z.height, z.width);
            }
            let tap = ids.taps[i].as_ref().unwrap();
            let mut g = Graph::<f32>::new();
            let zn = g.input(Tensor::from_feature(z));
            let gamma = g.param(store, tap.gamma);
            let beta = g.param(store, tap.beta);
            let mean = store.value(tap.run_mean).data.clone();
            let var = store.value(tap.run_var).data.clone();
            let bn = g.batchnorm_eval(zn, gamma, beta, mean, var, BN_EPS as f32);
            let pre = preprocess_node(&mut g, bn, &qc);
            quantize_map(&g.value(pre).to_features()[0], &qc)
        })
        .collect();
    QuantizedFeatures { maps }
}

/// Synthesizer inference from integer levels; returns the padded-dims
/// reconstruction (cropping happens at the container boundary).
pub fn synthesize(
    q: &QuantizedFeatures,
    store: &ParamStore<f32>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
) -> Result<Image> {
    if q.maps.len() != cfg.m {
        return Err(Error::config("scale count mismatch"));
    }
    let mut g = Graph::<f32>::new();
    let q_nodes: Vec<Option<NodeId>> = q
        .maps
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if cfg.channels[i] == 0 {
                None
            } else {
                Some(g.input(Tensor::from_feature(&m.to_feature::<f32>())))
            }
        })
        .collect();
    let out = synthesizer_forward(&mut g, store, ids, cfg, &q_nodes);
    let px = g.value(out).to_features().remove(0);
    Ok(Image::new(px))
}

/// 1 - MS-SSIM between two images (averaged over RGB); the training loss
/// and evaluation distortion.
pub fn distortion_loss(x: &Image, x_hat: &Image, ms_cfg: &MsSsimConfig) -> Result<f64> {
    Ok(1.0 - ms_ssim(x, x_hat, ms_cfg)?)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSchedule {
    pub updates: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    /// Fraction of updates after which the learning rate decays linearly to 0.
    pub decay_start: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            updates: 2000,
            batch: 8,
            crop: 32,
            seed: 0,
            decay_start: 0.75,
        }
    }
}

pub use crate::lossless::TrainRow;

/// Stage-1 training: minimizes 1 - MS-SSIM over random crops with the hard
/// forward / soft backward quantizer; batch-norm running statistics are
/// tracked with momentum 0.9 and frozen afterwards. On a non-finite loss
/// the store is restored to the last good snapshot and an error returned.
pub fn train_autoencoder(
    corpus: &[Image],
    store: &mut ParamStore<f32>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
    ms_cfg: &MsSsimConfig,
    sched: &TrainSchedule,
) -> Result<Vec<TrainRow>> {
    if corpus.is_empty() {
        return Err(Error::config("empty training corpus"));
    }
    if !sched.crop.is_multiple_of(cfg.pad_multiple()) {
        return Err(Error::config(format!(
            "crop {} must be a multiple of {}",
            sched.crop,
            cfg.pad_multiple()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(sched.seed);
    let mut adam = AdamState::new(store);
    let mut log = Vec::with_capacity(sched.updates);
    let padded: Vec<Image> = corpus.iter().map(|im| im.pad_to_multiple(sched.crop)).collect();
    let mut snapshot = store.flatten();

    for update in 0..sched.updates {
        let crops: Vec<FeatureTensor<f32>> = (0..sched.batch)
            .map(|_| {
                let im = &padded[rng.gen_range(0..padded.len())];
                let y0 = rng.gen_range(0..=(im.height() - sched.crop));
                let x0 = rng.gen_range(0..=(im.width() - sched.crop));
                im.crop(y0, x0, sched.crop, sched.crop).pixels
            })
            .collect();
        let batch = Tensor::from_features(&crops);

        let mut g = Graph::<f32>::new();
        let x = g.input(batch);
        let z = analyzer_forward(&mut g, store, ids, cfg, x);
        let qn = quantize_forward(&mut g, store, ids, cfg, &z, QuantMode::TrainHard);
        let recon = synthesizer_forward(&mut g, store, ids, cfg, &qn.q);
        let (ms, _) = ms_ssim_node(&mut g, x, recon, ms_cfg)?;
        let neg = g.mul_scalar(ms, -1.0);
        let loss = g.add_scalar(neg, 1.0);
        let loss_val = g.value(loss).item() as f64;
        if !loss_val.is_finite() {
            store.unflatten(&snapshot)?;
            return Err(Error::NonFinite(format!(
                "loss became non-finite at update {update}; restored last good checkpoint"
            )));
        }

        // Track running statistics before the parameters move.
        for (i, tap) in ids.taps.iter().enumerate() {
            if let (Some(tap), Some(bn)) = (tap, qn.bn[i]) {
                let (bm, bv) = g.bn_batch_stats(bn);
                let rm = store.value_mut(tap.run_mean);
                for (r, b) in rm.data.iter_mut().zip(bm.iter()) {
                    *r = (BN_MOMENTUM as f32) * *r + (1.0 - BN_MOMENTUM as f32) * b;
                }
                let rv = store.value_mut(tap.run_var);
                for (r, b) in rv.data.iter_mut().zip(bv.iter()) {
                    *r = (BN_MOMENTUM as f32) * *r + (1.0 - BN_MOMENTUM as f32) * b;
                }
            }
        }

        let grads = g.backward(loss);
        g.accumulate_param_grads(&grads, store);
        let scale = lr_scale(update, sched.updates, sched.decay_start);
        adam_step(store, &mut adam, scale as f32)?;
        if update % 50 == 0 {
            snapshot = store.flatten();
        }
        log.push(TrainRow {
            update,
            loss: loss_val,
            lr_scale: scale,
        });
    }
    if sched.updates > 0 {
        recalibrate_bn_stats(&padded, store, ids, cfg, sched)?;
    }
    Ok(log)
}

/// Replaces the momentum-tracked running statistics with population
/// statistics of the final weights over a fixed sample of training crops.
/// The deepest scales see only a handful of values per batch, so the EMA
/// alone is far too noisy to freeze.
fn recalibrate_bn_stats(
    padded: &[Image],
    store: &mut ParamStore<f32>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
    sched: &TrainSchedule,
) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(sched.seed ^ 0x5bd1_e995);
    let crops = 64usize;
    let mut sums: Vec<Vec<f64>> = cfg.channels.iter().map(|&c| vec![0.0; c]).collect();
    let mut sq_sums = sums.clone();
    let mut counts: Vec<f64> = vec![0.0; cfg.m];
    for chunk in 0..crops.div_ceil(8) {
        let _ = chunk;
        let batch: Vec<FeatureTensor<f32>> = (0..8)
            .map(|_| {
                let im = &padded[rng.gen_range(0..padded.len())];
                let y0 = rng.gen_range(0..=(im.height() - sched.crop));
                let x0 = rng.gen_range(0..=(im.width() - sched.crop));
                im.crop(y0, x0, sched.crop, sched.crop).pixels
            })
            .collect();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_features(&batch));
        let z = analyzer_forward(&mut g, store, ids, cfg, x);
        for (i, zn) in z.iter().enumerate() {
            let Some(zn) = zn else { continue };
            let zv = g.value(*zn);
            for c in 0..zv.c {
                for n in 0..zv.n {
                    for y in 0..zv.h {
                        for x_ in 0..zv.w {
                            let v = zv.at(n, c, y, x_) as f64;
                            sums[i][c] += v;
                            sq_sums[i][c] += v * v;
                        }
                    }
                }
            }
            counts[i] += (zv.n * zv.h * zv.w) as f64;
        }
    }
    for (i, tap) in ids.taps.iter().enumerate() {
        let Some(tap) = tap else { continue };
        let rm = store.value_mut(tap.run_mean);
        for (c, r) in rm.data.iter_mut().enumerate() {
            *r = (sums[i][c] / counts[i]) as f32;
        }
        let rv = store.value_mut(tap.run_var);
        for (c, r) in rv.data.iter_mut().enumerate() {
            let mean = sums[i][c] / counts[i];
            *r = (sq_sums[i][c] / counts[i] - mean * mean).max(0.0) as f32;
        }
    }
    Ok(())
}

/// Mean held-out distortion (1 - MS-SSIM) of the eval-mode codec path.
pub fn held_out_distortion(
    images: &[Image],
    store: &ParamStore<f32>,
    ids: &AutoencoderIds,
    cfg: &CodecConfig,
    ms_cfg: &MsSsimConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for im in images {
        let padded = im.pad_to_multiple(cfg.pad_multiple());
        let z = analyze(&padded, store, ids, cfg)?;
        let q = quantize_features(&z, store, ids, cfg);
        let recon = synthesize(&q, store, ids, cfg)?;
        total += distortion_loss(&padded, &recon, ms_cfg)?;
    }
    Ok(total / images.len() as f64)
}
