//! Lossless coding of quantized features: seed grid from per-channel
//! histograms, then the schedule's conditional steps, each driven by one
//! context-model evaluation. Encode and decode walk identical state, so the
//! probability tables agree bit for bit.

use crate::context::{build_step_input, step_probabilities, ContextParams};
use crate::entropy::{quantize_probs, ProbTable, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{adam_step, lr_scale, AdamState, ParamStore};
use crate::schedule::{integrate, is_owner, GridSchedule, IntegratedMap};
use crate::tensor::{LevelMap, QuantizedFeatures};
use rand::prelude::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Per-channel marginal distribution of integrated-map levels, Laplace
/// smoothed; codes the seed grid and the fully independent baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseHistogram {
    pub n_levels: u8,
    /// c_total x n_levels probabilities, row-major per channel.
    pub probs: Vec<f32>,
}

impl BaseHistogram {
    pub fn channels(&self) -> usize {
        self.probs.len() / self.n_levels as usize
    }

    /// Laplace(+1)-smoothed distribution from raw level counts.
    pub fn from_counts(counts: &[Vec<u64>], n_levels: u8) -> Self {
        let n = n_levels as usize;
        let mut probs = Vec::with_capacity(counts.len() * n);
        for ch in counts {
            assert_eq!(ch.len(), n);
            let total: u64 = ch.iter().sum();
            let denom = (total + n as u64) as f64;
            for &c in ch {
                probs.push(((c + 1) as f64 / denom) as f32);
            }
        }
        BaseHistogram { n_levels, probs }
    }

    /// Counts levels over a corpus of quantized features. Channel order
    /// matches `integrate`: scales ascending, channels within scale.
    pub fn from_features(corpus: &[QuantizedFeatures], n_levels: u8) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::config("empty feature corpus"))?;
        let c_total: usize = first.maps.iter().map(|m| m.channels).sum();
        let mut counts = vec![vec![0u64; n_levels as usize]; c_total];
        for q in corpus {
            let mut c_off = 0;
            for m in &q.maps {
                for c in 0..m.channels {
                    for y in 0..m.height {
                        for x in 0..m.width {
                            let v = m.at(c, y, x) as usize;
                            if v >= n_levels as usize {
                                return Err(Error::config("level outside 0..N in corpus"));
                            }
                            counts[c_off + c][v] += 1;
                        }
                    }
                }
                c_off += m.channels;
            }
        }
        Ok(Self::from_counts(&counts, n_levels))
    }

    pub fn table(&self, channel: usize) -> ProbTable {
        let n = self.n_levels as usize;
        let p: Vec<f64> = self.probs[channel * n..(channel + 1) * n]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let sum: f64 = p.iter().sum();
        let norm: Vec<f64> = p.iter().map(|v| v / sum).collect();
        quantize_probs(&norm).expect("histogram rows are valid distributions")
    }
}

/// Instrumentation for one coding pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoderStats {
    /// Context-model forward passes (one per active schedule step).
    pub model_evals: usize,
    /// Symbols pushed through the arithmetic coder.
    pub symbols: usize,
    /// Sum of -log2 of the fixed-point probability of each coded symbol.
    pub info_bits: f64,
}

trait SymbolSink {
    fn put(&mut self, symbol: usize, table: &ProbTable);
}

struct EncodeSink<'a> {
    enc: &'a mut RangeEncoder,
}

impl SymbolSink for EncodeSink<'_> {
    fn put(&mut self, symbol: usize, table: &ProbTable) {
        self.enc.encode(symbol, table);
    }
}

struct RateSink;

impl SymbolSink for RateSink {
    fn put(&mut self, _symbol: usize, _table: &ProbTable) {}
}

fn validate_geometry(
    im: &IntegratedMap,
    ctx: &ContextParams,
    hist: &BaseHistogram,
    schedule: &GridSchedule,
) -> Result<()> {
    if im.grid.height != schedule.height || im.grid.width != schedule.width {
        return Err(Error::config(format!(
            "integrated grid {}x{} does not match schedule {}x{}",
            im.grid.height, im.grid.width, schedule.height, schedule.width
        )));
    }
    if im.grid.channels != ctx.c_total || im.grid.channels != hist.channels() {
        return Err(Error::config("channel count mismatch between features, models and histogram"));
    }
    Ok(())
}

/// Walks the fixed coding order, feeding every coded symbol and its table
/// into `sink`. Shared by encoding and rate estimation.
fn code_walk(
    im: &IntegratedMap,
    store: &ParamStore<f32>,
    ctx: &ContextParams,
    hist: &BaseHistogram,
    schedule: &GridSchedule,
    sink: &mut dyn SymbolSink,
) -> Result<CoderStats> {
    validate_geometry(im, ctx, hist, schedule)?;
    let (c_total, h, w) = (im.grid.channels, im.grid.height, im.grid.width);
    let mut stats = CoderStats::default();
    let mut known = vec![false; h * w];
    let mut visible = IntegratedMap {
        channels: im.channels.clone(),
        grid: LevelMap::zeros(c_total, h, w),
    };

    let hist_tables: Vec<ProbTable> = (0..c_total).map(|c| hist.table(c)).collect();
    for (y, x) in schedule.seed_positions() {
        let (y, x) = (y as usize, x as usize);
        for c in 0..c_total {
            if is_owner(y, x, im.channels[c].stride) {
                let v = im.grid.at(c, y, x);
                sink.put(v as usize, &hist_tables[c]);
                stats.symbols += 1;
                stats.info_bits += hist_tables[c].self_info_bits(v as usize);
            }
            visible.grid.set(c, y, x, im.grid.at(c, y, x));
        }
        known[y * w + x] = true;
    }

    for step in schedule.active_steps() {
        let tables = step_probabilities(store, ctx, step, &visible, &known);
        stats.model_evals += 1;
        let mut ti = 0;
        for &(y, x) in &step.targets {
            let (y, x) = (y as usize, x as usize);
            for c in 0..c_total {
                if is_owner(y, x, im.channels[c].stride) {
                    let table = &tables[ti];
                    ti += 1;
                    let v = im.grid.at(c, y, x);
                    sink.put(v as usize, table);
                    stats.symbols += 1;
                    stats.info_bits += table.self_info_bits(v as usize);
                }
                visible.grid.set(c, y, x, im.grid.at(c, y, x));
            }
            known[y * w + x] = true;
        }
        debug_assert_eq!(ti, tables.len());
    }
    Ok(stats)
}

/// Losslessly encodes quantized features into a payload.
pub fn encode_features(
    q: &QuantizedFeatures,
    store: &ParamStore<f32>,
    ctx: &ContextParams,
    hist: &BaseHistogram,
    schedule: &GridSchedule,
) -> Result<(Vec<u8>, CoderStats)> {
    let im = integrate(q)?;
    let mut enc = RangeEncoder::new();
    let stats = code_walk(&im, store, ctx, hist, schedule, &mut EncodeSink { enc: &mut enc })?;
    Ok((enc.finish(), stats))
}

/// Total -log2 probability of the features under the model, in bits; the
/// rate estimate without producing a stream.
pub fn factorized_logprob(
    q: &QuantizedFeatures,
    store: &ParamStore<f32>,
    ctx: &ContextParams,
    hist: &BaseHistogram,
    schedule: &GridSchedule,
) -> Result<(f64, CoderStats)> {
    let im = integrate(q)?;
    let stats = code_walk(&im, store, ctx, hist, schedule, &mut RateSink)?;
    Ok((stats.info_bits, stats))
}

/// Exact inverse of `encode_features`. `shapes` gives (channels, h, w) per
/// scale. Model evaluations equal the number of active schedule steps.
pub fn decode_features(
    payload: &[u8],
    store: &ParamStore<f32>,
    ctx: &ContextParams,
    hist: &BaseHistogram,
    schedule: &GridSchedule,
    shapes: &[(usize, usize, usize)],
) -> Result<(QuantizedFeatures, CoderStats)> {
    let (c_total, h, w) = (ctx.c_total, schedule.height, schedule.width);
    if hist.channels() != c_total {
        return Err(Error::config("histogram channel count mismatch"));
    }
    let declared: usize = shapes.iter().map(|&(c, _, _)| c).sum();
    if declared != c_total {
        return Err(Error::config("shape channel total does not match models"));
    }
    let mut channels = Vec::with_capacity(c_total);
    let mut finest_seen = false;
    for (i0, &(c, sh, sw)) in shapes.iter().enumerate() {
        if c == 0 {
            continue;
        }
        if !finest_seen {
            if sh != h || sw != w {
                return Err(Error::config("densest scale dims do not match schedule"));
            }
            finest_seen = true;
        }
        let stride = h / sh;
        if stride * sh != h || stride * sw != w {
            return Err(Error::config(format!("scale {i0} dims inconsistent with grid")));
        }
        for _ in 0..c {
            channels.push(crate::schedule::ChannelInfo { scale: i0, stride });
        }
    }

    let mut stats = CoderStats::default();
    let mut dec = RangeDecoder::new(payload)?;
    let mut known = vec![false; h * w];
    let mut visible = IntegratedMap {
        channels,
        grid: LevelMap::zeros(c_total, h, w),
    };

    let hist_tables: Vec<ProbTable> = (0..c_total).map(|c| hist.table(c)).collect();
    for (y, x) in schedule.seed_positions() {
        let (y, x) = (y as usize, x as usize);
        for c in 0..c_total {
            let stride = visible.channels[c].stride;
            if is_owner(y, x, stride) {
                let v = dec.decode(&hist_tables[c])?;
                if v >= ctx.n_levels as usize {
                    return Err(Error::corrupt("decoded level outside 0..N"));
                }
                stats.symbols += 1;
                stats.info_bits += hist_tables[c].self_info_bits(v);
                visible.grid.set(c, y, x, v as u8);
            } else {
                let (oy, ox) = (y - y % stride, x - x % stride);
                let v = visible.grid.at(c, oy, ox);
                visible.grid.set(c, y, x, v);
            }
        }
        known[y * w + x] = true;
    }

    for step in schedule.active_steps() {
        let tables = step_probabilities(store, ctx, step, &visible, &known);
        stats.model_evals += 1;
        let mut ti = 0;
        for &(y, x) in &step.targets {
            let (y, x) = (y as usize, x as usize);
            for c in 0..c_total {
                let stride = visible.channels[c].stride;
                if is_owner(y, x, stride) {
                    let table = &tables[ti];
                    ti += 1;
                    let v = dec.decode(table)?;
                    stats.symbols += 1;
                    stats.info_bits += table.self_info_bits(v);
                    visible.grid.set(c, y, x, v as u8);
                } else {
                    let (oy, ox) = (y - y % stride, x - x % stride);
                    let v = visible.grid.at(c, oy, ox);
                    visible.grid.set(c, y, x, v);
                }
            }
            known[y * w + x] = true;
        }
        debug_assert_eq!(ti, tables.len());
    }
    dec.finish()?;
    Ok((visible.split(shapes), stats))
}

#[derive(Debug, Clone, Copy)]
pub struct CoderTrainSchedule {
    pub updates: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of updates after which the learning rate decays linearly to 0.
    pub decay_start: f64,
}

impl Default for CoderTrainSchedule {
    fn default() -> Self {
        CoderTrainSchedule {
            updates: 2000,
            batch: 4,
            seed: 0,
            decay_start: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainRow {
    pub update: usize,
    pub loss: f64,
    pub lr_scale: f64,
}

/// Trains the per-step context models by cross-entropy against a corpus of
/// quantized features from the frozen autoencoder; the base histogram must
/// already be populated. Returns the training log; `loss` is bits per
/// coded symbol.
pub fn train_context_model(
    corpus: &[QuantizedFeatures],
    store: &mut ParamStore<f32>,
    ctx: &ContextParams,
    k: usize,
    sched: &CoderTrainSchedule,
) -> Result<Vec<TrainRow>> {
    if corpus.is_empty() {
        return Err(Error::config("empty feature corpus"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(sched.seed);
    let mut adam = AdamState::new(store);
    let mut log = Vec::with_capacity(sched.updates);

    // Integrated maps and schedules are reused across updates.
    let prepared: Vec<(IntegratedMap, GridSchedule)> = corpus
        .iter()
        .map(|q| {
            let im = integrate(q)?;
            let s = crate::schedule::build_schedule(im.grid.height, im.grid.width, k)?;
            Ok((im, s))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for update in 0..sched.updates {
        let mut batch_bits = 0.0f64;
        let mut batch_symbols = 0usize;
        for b in 0..sched.batch {
            if (update * sched.batch + b).is_multiple_of(prepared.len()) {
                order.shuffle(&mut rng);
            }
            let (im, schedule) = &prepared[order[(update * sched.batch + b) % prepared.len()]];
            let (h, w) = (im.grid.height, im.grid.width);
            for (s_idx, step) in schedule.active_steps().iter().enumerate() {
                let known = schedule.known_mask(s_idx);
                let input = build_step_input::<f32>(im, &known, ctx.n_levels);
                // Zero out unknown values in the conditioning copy only; the
                // targets themselves come from the true map.
                let mut g = Graph::<f32>::new();
                let x = g.input(input);
                let logits = crate::context::step_forward(&mut g, store, &ctx.steps[step.index], x);

                let mut targets = vec![0u16; ctx.c_total * h * w];
                let mut weights = vec![0.0f32; ctx.c_total * h * w];
                let mut n_syms = 0usize;
                for &(y, x_) in &step.targets {
                    let (y, x_) = (y as usize, x_ as usize);
                    for c in 0..ctx.c_total {
                        if is_owner(y, x_, im.channels[c].stride) {
                            let slot = (c * h + y) * w + x_;
                            targets[slot] = im.grid.at(c, y, x_) as u16;
                            weights[slot] = 1.0;
                            n_syms += 1;
                        }
                    }
                }
                if n_syms == 0 {
                    continue;
                }
                let loss = g.masked_ce_loss(logits, ctx.n_levels as usize, targets, weights);
                let scale = 1.0 / (sched.batch as f32 * schedule.active_steps().len() as f32);
                let scaled = g.mul_scalar(loss, scale);
                let grads = g.backward(scaled);
                g.accumulate_param_grads(&grads, store);
                batch_bits += g.value(loss).item() as f64 / std::f64::consts::LN_2 * n_syms as f64;
                batch_symbols += n_syms;
            }
        }
        let scale = lr_scale(update, sched.updates, sched.decay_start);
        adam_step(store, &mut adam, scale as f32)?;
        log.push(TrainRow {
            update,
            loss: if batch_symbols > 0 {
                batch_bits / batch_symbols as f64
            } else {
                0.0
            },
            lr_scale: scale,
        });
    }
    Ok(log)
}
