//! Per-step conditional models for the lossless coder.
//!
//! Each schedule step owns a 4-layer CNN (3x3 kernels, stride 1, receptive
//! field radius 4) that maps the currently known portion of the integrated
//! map — value channels plus one mask channel — to N-way logits per
//! (position, channel). The same forward pass runs on encoder and decoder,
//! so its output must be, and is, bit-identical for identical inputs.

use crate::entropy::{quantize_probs, ProbTable};
use crate::graph::{Graph, NodeId};
use crate::params::{init_conv_weight, ParamId, ParamStore};
use crate::schedule::IntegratedMap;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha20Rng;

pub const CONTEXT_LAYERS: usize = 4;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct StepModelIds {
    pub convs: Vec<(ParamId, ParamId)>,
}

/// Parameter handles for all K step models.
#[derive(Debug, Clone)]
pub struct ContextParams {
    pub steps: Vec<StepModelIds>,
    pub c_total: usize,
    pub n_levels: u8,
    pub hidden: usize,
}

/// Registers K fresh step models in declaration order.
pub fn register_context_models<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha20Rng,
    k: usize,
    c_total: usize,
    n_levels: u8,
    hidden: usize,
) -> ContextParams {
    let in_ch = c_total + 1;
    let out_ch = c_total * n_levels as usize;
    let mut steps = Vec::with_capacity(k);
    for s in 0..k {
        let mut convs = Vec::with_capacity(CONTEXT_LAYERS);
        let widths = [in_ch, hidden, hidden, hidden, out_ch];
        for l in 0..CONTEXT_LAYERS {
            let w = store.add(
                format!("ctx{s}.conv{l}.w"),
                init_conv_weight(rng, widths[l + 1], widths[l], 3, 3),
                true,
            );
            let b = store.add(format!("ctx{s}.conv{l}.b"), Tensor::zeros(1, widths[l + 1], 1, 1), true);
            convs.push((w, b));
        }
        steps.push(StepModelIds { convs });
    }
    ContextParams {
        steps,
        c_total,
        n_levels,
        hidden,
    }
}

/// Conditioning input for one step: per-channel scaled values zeroed at
/// unknown positions, plus a 0/1 mask channel.
pub fn build_step_input<T: Scalar>(
    visible: &IntegratedMap,
    known: &[bool],
    n_levels: u8,
) -> Tensor<T> {
    let (c_total, h, w) = (visible.grid.channels, visible.grid.height, visible.grid.width);
    debug_assert_eq!(known.len(), h * w);
    let scale = T::one() / T::c((n_levels - 1).max(1) as f64);
    let half = T::c(0.5);
    let mut t = Tensor::zeros(1, c_total + 1, h, w);
    for c in 0..c_total {
        for y in 0..h {
            for x in 0..w {
                if known[y * w + x] {
                    let v = T::c(visible.grid.at(c, y, x) as f64) * scale - half;
                    t.set(0, c, y, x, v);
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if known[y * w + x] {
                t.set(0, c_total, y, x, T::one());
            }
        }
    }
    t
}

/// Forward pass of one step model on a pre-built input node.
pub fn step_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    step: &StepModelIds,
    input: NodeId,
) -> NodeId {
    let mut x = input;
    for (l, (w, b)) in step.convs.iter().enumerate() {
        let wn = g.param(store, *w);
        let bn = g.param(store, *b);
        x = g.conv2d(x, wn, Some(bn), 1, 1);
        if l + 1 < CONTEXT_LAYERS {
            x = g.leaky_relu(x, T::c(LEAKY_SLOPE));
        }
    }
    x
}

/// Inference-only step evaluation; returns the logits tensor.
pub fn step_logits(
    store: &ParamStore<f32>,
    step: &StepModelIds,
    input: Tensor<f32>,
) -> Tensor<f32> {
    let mut g = Graph::<f32>::new();
    let x = g.input(input);
    let out = step_forward(&mut g, store, step, x);
    g.value(out).clone()
}

/// One table per (target position, owned channel) for a schedule step,
/// computed from a single model evaluation over the currently known grid.
/// Targets never condition on each other: the input is masked to the
/// positions known before the step. The returned tables are in the coding
/// order (targets row-major, channels ascending, owned channels only) and
/// are bitwise identical on encoder and decoder.
pub fn step_probabilities(
    store: &ParamStore<f32>,
    ctx: &ContextParams,
    step: &crate::schedule::ScheduleStep,
    visible: &IntegratedMap,
    known: &[bool],
) -> Vec<ProbTable> {
    let input = build_step_input::<f32>(visible, known, ctx.n_levels);
    let logits = step_logits(store, &ctx.steps[step.index], input);
    let mut out = Vec::new();
    for &(y, x) in &step.targets {
        let (y, x) = (y as usize, x as usize);
        for (c, info) in visible.channels.iter().enumerate() {
            if crate::schedule::is_owner(y, x, info.stride) {
                out.push(table_from_logits(&logits, y, x, c, ctx.n_levels));
            }
        }
    }
    out
}

/// Fixed-point probability table for one (position, channel) from a logits
/// tensor. Softmax is evaluated in f64 from the f32 logits; both sides of
/// the codec run exactly this code path.
pub fn table_from_logits(
    logits: &Tensor<f32>,
    y: usize,
    x: usize,
    channel: usize,
    n_levels: u8,
) -> ProbTable {
    let n = n_levels as usize;
    let mut raw = Vec::with_capacity(n);
    let mut mx = f64::NEG_INFINITY;
    for k in 0..n {
        let v = logits.at(0, channel * n + k, y, x) as f64;
        mx = mx.max(v);
        raw.push(v);
    }
    let mut sum = 0.0;
    for v in &mut raw {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in &mut raw {
        *v /= sum;
    }
    quantize_probs(&raw).expect("softmax output is a valid distribution")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{integrate, ChannelInfo};
    use crate::tensor::{LevelMap, QuantizedFeatures};
    use rand::SeedableRng;

    fn toy_map(h: usize, w: usize, fill: impl Fn(usize, usize) -> u8) -> IntegratedMap {
        let mut m = LevelMap::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(0, y, x, fill(y, x));
            }
        }
        integrate(&QuantizedFeatures { maps: vec![m] }).unwrap()
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_tables() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ctx = register_context_models(&mut store, &mut rng, 1, 1, 5, 8);
        // Zero the final conv weights and bias.
        let (w, b) = ctx.steps[0].convs[CONTEXT_LAYERS - 1];
        for v in &mut store.value_mut(w).data {
            *v = 0.0;
        }
        for v in &mut store.value_mut(b).data {
            *v = 0.0;
        }
        let vis = toy_map(4, 4, |y, x| ((y + x) % 5) as u8);
        let known = vec![true; 16];
        let input = build_step_input::<f32>(&vis, &known, 5);
        let logits = step_logits(&store, &ctx.steps[0], input);
        let t = table_from_logits(&logits, 2, 2, 0, 5);
        assert_eq!(t, ProbTable::uniform(5));
    }

    #[test]
    fn masked_target_value_cannot_leak() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let ctx = register_context_models(&mut store, &mut rng, 1, 1, 5, 8);
        let mut known = vec![true; 36];
        known[2 * 6 + 3] = false; // target position (2,3) masked out

        let vis_a = toy_map(6, 6, |y, x| ((y * 2 + x) % 5) as u8);
        let mut vis_b = vis_a.clone();
        vis_b.grid.set(0, 2, 3, (vis_a.grid.at(0, 2, 3) + 1) % 5);

        let in_a = build_step_input::<f32>(&vis_a, &known, 5);
        let in_b = build_step_input::<f32>(&vis_b, &known, 5);
        assert_eq!(in_a, in_b, "masked value reached the model input");

        let la = step_logits(&store, &ctx.steps[0], in_a);
        let lb = step_logits(&store, &ctx.steps[0], in_b);
        assert_eq!(
            table_from_logits(&la, 2, 3, 0, 5),
            table_from_logits(&lb, 2, 3, 0, 5)
        );
    }

    #[test]
    fn receptive_field_is_four_layers_of_3x3() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ctx = register_context_models(&mut store, &mut rng, 1, 1, 5, 8);
        let known = vec![true; 11 * 11];
        let base = toy_map(11, 11, |y, x| ((y + 2 * x) % 5) as u8);
        let target = (5usize, 5usize);

        // Perturbing outside the radius-4 field leaves the table unchanged.
        let mut far = base.clone();
        far.grid.set(0, 0, 0, (base.grid.at(0, 0, 0) + 2) % 5);
        let t_base = {
            let l = step_logits(&store, &ctx.steps[0], build_step_input::<f32>(&base, &known, 5));
            table_from_logits(&l, target.0, target.1, 0, 5)
        };
        let t_far = {
            let l = step_logits(&store, &ctx.steps[0], build_step_input::<f32>(&far, &known, 5));
            table_from_logits(&l, target.0, target.1, 0, 5)
        };
        assert_eq!(t_base, t_far);

        // Perturbing inside the field moves the logits.
        let mut near = base.clone();
        near.grid.set(0, 4, 4, (base.grid.at(0, 4, 4) + 2) % 5);
        let l_near = step_logits(&store, &ctx.steps[0], build_step_input::<f32>(&near, &known, 5));
        let l_base = step_logits(&store, &ctx.steps[0], build_step_input::<f32>(&base, &known, 5));
        let moved = (0..5).any(|k| {
            l_near.at(0, k, target.0, target.1) != l_base.at(0, k, target.0, target.1)
        });
        assert!(moved, "in-field perturbation had no effect");
    }

    #[test]
    fn channel_info_strides_drive_input_layout() {
        let fine = LevelMap {
            channels: 1,
            height: 4,
            width: 4,
            data: vec![1; 16],
        };
        let coarse = LevelMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![3; 4],
        };
        let im = integrate(&QuantizedFeatures { maps: vec![fine, coarse] }).unwrap();
        assert_eq!(im.channels[1], ChannelInfo { scale: 1, stride: 2 });
        let known = vec![true; 16];
        let t = build_step_input::<f32>(&im, &known, 5);
        assert_eq!(t.shape(), (1, 3, 4, 4));
        // mask channel all ones
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(t.at(0, 2, y, x), 1.0);
            }
        }
    }
}
