//! Whole-pipeline checks: analyzer/synthesizer shape plans, training
//! plumbing, schedule geometry over the full dimension matrix, coding
//! order accounting, and encoder/decoder probability symmetry.

use msic_core::autoencoder::{
    analyze, quantize_features, register_autoencoder, synthesize, train_autoencoder, CodecConfig,
    TrainSchedule,
};
use msic_core::codec::{compress_image, decompress_image};
use msic_core::context::step_probabilities;
use msic_core::entropy::RangeDecoder;
use msic_core::img::Image;
use msic_core::lossless::{encode_features, BaseHistogram};
use msic_core::metrics::{ms_ssim, MsSsimConfig};
use msic_core::model::CodecModel;
use msic_core::params::{lr_scale, ParamStore};
use msic_core::quantizer::round_hard;
use msic_core::schedule::{build_schedule, integrate, is_owner, IntegratedMap};
use msic_core::tensor::{FeatureTensor, LevelMap, QuantizedFeatures};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn toy_images(seed: u64, count: usize, h: usize, w: usize) -> Vec<Image> {
    msic_testkit::toy_corpus(seed, count, h, w)
        .into_iter()
        .map(|d| Image::new(FeatureTensor::from_data(3, h, w, d).unwrap()))
        .collect()
}

fn preset_config() -> CodecConfig {
    CodecConfig {
        m: 4,
        channels: vec![2, 2, 4, 8],
        n_levels: 7,
        u: 4.0,
        hidden_width: 8,
        depth: 6,
        k_blocks: 4,
        ctx_hidden: 8,
    }
}

#[test]
fn analyzer_shape_plan_64px() {
    let cfg = preset_config();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    let img = toy_images(2, 1, 64, 64).remove(0);
    let z = analyze(&img, &store, &ids, &cfg).unwrap();
    let shapes: Vec<_> = z.maps.iter().map(|m| m.shape()).collect();
    assert_eq!(
        shapes,
        vec![(2, 16, 16), (2, 8, 8), (4, 4, 4), (8, 2, 2)],
        "scale i must sit at 1/2^(i+2) resolution"
    );
}

#[test]
fn zero_image_zero_biases_gives_zero_features() {
    let cfg = preset_config();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    // Biases are zero-initialized already; the input is all zeros, and the
    // trunk is linear + leaky-relu (odd at 0), so every tap output is zero.
    let img = Image::new(FeatureTensor::zeros(3, 32, 32));
    let z = analyze(&img, &store, &ids, &cfg).unwrap();
    for m in &z.maps {
        assert!(m.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn analysis_is_deterministic() {
    let cfg = preset_config();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    let img = toy_images(5, 1, 64, 64).remove(0);
    let z1 = analyze(&img, &store, &ids, &cfg).unwrap();
    let z2 = analyze(&img, &store, &ids, &cfg).unwrap();
    for (a, b) in z1.maps.iter().zip(z2.maps.iter()) {
        assert_eq!(a.data, b.data, "same image must give bitwise-equal features");
    }
}

#[test]
fn synthesize_shape_round_trip_over_configs() {
    // synthesize(analyze(x)) restores the padded input dims for a spread
    // of configs and input sizes, including single-scale degenerations.
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let configs = vec![
        preset_config(),
        CodecConfig {
            m: 1,
            channels: vec![3],
            n_levels: 5,
            u: 4.0,
            hidden_width: 6,
            depth: 3,
            k_blocks: 2,
            ctx_hidden: 4,
        },
        CodecConfig {
            m: 4,
            channels: vec![0, 0, 0, 6],
            n_levels: 7,
            u: 4.0,
            hidden_width: 6,
            depth: 6,
            k_blocks: 0,
            ctx_hidden: 4,
        },
        CodecConfig {
            m: 3,
            channels: vec![0, 2, 4],
            n_levels: 13,
            u: 4.0,
            hidden_width: 6,
            depth: 5,
            k_blocks: 2,
            ctx_hidden: 4,
        },
    ];
    for cfg in configs {
        let mut store = ParamStore::<f32>::new();
        let ids = register_autoencoder(&mut store, &cfg, &mut rng);
        for (h, w) in [(40usize, 56usize), (64, 64), (33, 65)] {
            let img = toy_images(1000 + h as u64, 1, h, w).remove(0);
            let padded = img.pad_to_multiple(cfg.pad_multiple());
            let z = analyze(&padded, &store, &ids, &cfg).unwrap();
            let q = quantize_features(&z, &store, &ids, &cfg);
            let recon = synthesize(&q, &store, &ids, &cfg).unwrap();
            assert_eq!(
                (recon.height(), recon.width()),
                (padded.height(), padded.width()),
                "config {} at {h}x{w}",
                cfg.label()
            );
            assert!(recon.pixels.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn constant_features_give_constant_output_with_zero_weights() {
    let cfg = preset_config();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    // Zero every synthesizer weight; final bias is 0.5 by initialization.
    let zero = |store: &mut ParamStore<f32>, ids: &[msic_core::autoencoder::ConvIds]| {
        for c in ids {
            store.value_mut(c.w).data.fill(0.0);
        }
    };
    let all: Vec<msic_core::autoencoder::ConvIds> = std::iter::once(ids.synth_head)
        .chain(ids.synth_merge.iter().copied())
        .chain(ids.synth_tail.iter().copied())
        .collect();
    zero(&mut store, &all);
    let dims = cfg.scale_dims(64, 64);
    let q = QuantizedFeatures {
        maps: dims
            .iter()
            .map(|&(c, h, w)| LevelMap::zeros(c, h, w))
            .collect(),
    };
    let out = synthesize(&q, &store, &ids, &cfg).unwrap();
    let first = out.pixels.data[0];
    assert!((first - 0.5).abs() < 1e-6, "expected mid-gray, got {first}");
    assert!(out.pixels.data.iter().all(|&v| v == first), "output not constant");
}

#[test]
fn quantized_levels_in_range_and_requantization_fixed() {
    let cfg = preset_config();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    let img = toy_images(9, 1, 64, 64).remove(0);
    let z = analyze(&img, &store, &ids, &cfg).unwrap();
    let q = quantize_features(&z, &store, &ids, &cfg);
    for m in &q.maps {
        assert!(m.data.iter().all(|&v| v < cfg.n_levels));
        for &v in &m.data {
            assert_eq!(round_hard(v as f64), v as i64);
        }
    }
}

#[test]
fn zero_updates_leave_parameters_at_initialization() {
    let cfg = preset_config();
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    let before = store.flatten();
    let corpus = toy_images(11, 2, 32, 32);
    let sched = TrainSchedule {
        updates: 0,
        batch: 2,
        crop: 32,
        seed: 0,
        decay_start: 0.75,
    };
    train_autoencoder(&corpus, &mut store, &ids, &cfg, &MsSsimConfig::default(), &sched).unwrap();
    assert_eq!(store.flatten(), before);
}

#[test]
fn learning_rate_schedule_shape() {
    let total = 2000;
    // 1 before the decay start (75% of updates)...
    assert_eq!(lr_scale(0, total, 0.75), 1.0);
    assert_eq!(lr_scale(1499, total, 0.75), 1.0);
    assert_eq!(lr_scale(1500, total, 0.75), 1.0);
    // ...then linear to exactly 0 at the final update.
    let mid = lr_scale(1750, total, 0.75);
    assert!((mid - 0.4989979959919840).abs() < 1e-12);
    let mut prev = 1.0;
    for u in 1500..total {
        let s = lr_scale(u, total, 0.75);
        assert!(s <= prev);
        prev = s;
    }
    assert_eq!(lr_scale(total - 1, total, 0.75), 0.0);
}

#[test]
fn short_training_reduces_held_out_distortion() {
    let all = toy_images(12, 14, 48, 48);
    let (train, held) = all.split_at(10);
    let cfg = CodecConfig {
        m: 2,
        channels: vec![1, 2],
        n_levels: 5,
        u: 4.0,
        hidden_width: 8,
        depth: 4,
        k_blocks: 0,
        ctx_hidden: 4,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let mut store = ParamStore::<f32>::new();
    let ids = register_autoencoder(&mut store, &cfg, &mut rng);
    let ms_cfg = MsSsimConfig::default();
    let before =
        msic_core::autoencoder::held_out_distortion(held, &store, &ids, &cfg, &ms_cfg).unwrap();
    let sched = TrainSchedule {
        updates: 220,
        batch: 4,
        crop: 16,
        seed: 14,
        decay_start: 0.75,
    };
    train_autoencoder(train, &mut store, &ids, &cfg, &ms_cfg, &sched).unwrap();
    let after =
        msic_core::autoencoder::held_out_distortion(held, &store, &ids, &cfg, &ms_cfg).unwrap();
    assert!(
        after < before,
        "held-out 1-MS-SSIM did not improve: {before:.4} -> {after:.4}"
    );
}

#[test]
fn schedule_matrix_partition_and_decodability() {
    // Every (H, W, K) in {4..64} x {4..64} x {0,2,4,6,8} whose dims are
    // divisible by the seed stride: targets partition the non-seed grid and
    // never hit an already-known position.
    let mut checked = 0usize;
    for k in [0usize, 2, 4, 6, 8] {
        let stride = 1usize << (k / 2);
        for h in (4..=64usize).filter(|h| h % stride == 0) {
            for w in (4..=64usize).filter(|w| w % stride == 0) {
                let s = build_schedule(h, w, k).unwrap();
                let mut seen = vec![0u32; h * w];
                for (y, x) in s.seed_positions() {
                    seen[y as usize * w + x as usize] += 1;
                }
                for (i, step) in s.steps.iter().enumerate() {
                    let known = s.known_mask(i);
                    for &(y, x) in &step.targets {
                        let idx = y as usize * w + x as usize;
                        assert!(!known[idx], "{h}x{w} K={k}: conditioning violated");
                        seen[idx] += 1;
                    }
                }
                assert!(
                    seen.iter().all(|&c| c == 1),
                    "{h}x{w} K={k}: not a partition"
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 4000, "matrix unexpectedly small: {checked}");
}

#[test]
fn owned_channel_coverage_accounting() {
    // Every (position, channel) of the integrated map is coded exactly once
    // or copied from an already-known owner.
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    for (channels, h, w, k) in [
        (vec![1usize, 2, 1], 16usize, 16usize, 4usize),
        (vec![2], 8, 8, 2),
        (vec![0, 1, 2], 8, 8, 2),
    ] {
        let maps: Vec<LevelMap> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let first = channels.iter().position(|&v| v > 0).unwrap();
                let (sh, sw) = if i >= first { (h >> (i - first), w >> (i - first)) } else { (h, w) };
                LevelMap {
                    channels: c,
                    height: sh,
                    width: sw,
                    data: (0..c * sh * sw).map(|_| rng.gen_range(0..5)).collect(),
                }
            })
            .collect();
        let im = integrate(&QuantizedFeatures { maps }).unwrap();
        let schedule = build_schedule(im.grid.height, im.grid.width, k).unwrap();

        let c_total = im.grid.channels;
        // 0 = untouched, 1 = coded, 2 = copied
        let mut state = vec![0u8; c_total * h * w];
        let mark = |y: usize, x: usize, known: &mut Vec<bool>, im: &IntegratedMap, state: &mut Vec<u8>| {
            for c in 0..c_total {
                let stride = im.channels[c].stride;
                let idx = (c * h + y) * w + x;
                assert_eq!(state[idx], 0, "cell visited twice");
                if is_owner(y, x, stride) {
                    state[idx] = 1;
                } else {
                    let (oy, ox) = (y - y % stride, x - x % stride);
                    assert!(known[oy * w + ox], "copy source not yet decoded");
                    state[idx] = 2;
                }
            }
            known[y * w + x] = true;
        };
        let mut known = vec![false; h * w];
        for (y, x) in schedule.seed_positions() {
            mark(y as usize, x as usize, &mut known, &im, &mut state);
        }
        for step in schedule.active_steps() {
            // Owners referenced by copies must come from earlier steps.
            for &(y, x) in &step.targets {
                mark(y as usize, x as usize, &mut known, &im, &mut state);
            }
        }
        assert!(state.iter().all(|&s| s != 0), "uncovered cells remain");
        let coded = state.iter().filter(|&&s| s == 1).count();
        let expect_coded: usize = im
            .channels
            .iter()
            .map(|info| (h / info.stride) * (w / info.stride))
            .sum();
        assert_eq!(coded, expect_coded, "coded-cell count mismatch");
    }
}

#[test]
fn encode_decode_probability_symmetry() {
    // Decoder-side tables must be bitwise equal to encoder-side tables.
    // This walk re-implements the decode loop, logging tables from
    // step_probabilities on the progressively decoded state.
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let (h, w, k, n) = (8usize, 8usize, 4usize, 5u8);
    let channels = [1usize, 1];
    let maps: Vec<LevelMap> = channels
        .iter()
        .enumerate()
        .map(|(i, &c)|LevelMap {
            channels: c,
            height: h >> i,
            width: w >> i,
            data: (0..c * (h >> i) * (w >> i)).map(|_| rng.gen_range(0..n)).collect(),
        })
        .collect();
    let truth = QuantizedFeatures { maps };
    let im = integrate(&truth).unwrap();
    let mut store = ParamStore::<f32>::new();
    let ctx = msic_core::context::register_context_models(&mut store, &mut rng, k, 2, n, 6);
    let hist = BaseHistogram::from_features(std::slice::from_ref(&truth), n).unwrap();
    let schedule = build_schedule(h, w, k).unwrap();
    let (payload, _) = encode_features(&truth, &store, &ctx, &hist, &schedule).unwrap();

    // Encoder-side tables per step (state = truth masked by known-so-far).
    let mut enc_tables = Vec::new();
    {
        let mut known = vec![false; h * w];
        let mut visible = IntegratedMap {
            channels: im.channels.clone(),
            grid: LevelMap::zeros(2, h, w),
        };
        for (y, x) in schedule.seed_positions() {
            let (y, x) = (y as usize, x as usize);
            for c in 0..2 {
                visible.grid.set(c, y, x, im.grid.at(c, y, x));
            }
            known[y * w + x] = true;
        }
        for step in schedule.active_steps() {
            enc_tables.push(step_probabilities(&store, &ctx, step, &visible, &known));
            for &(y, x) in &step.targets {
                let (y, x) = (y as usize, x as usize);
                for c in 0..2 {
                    visible.grid.set(c, y, x, im.grid.at(c, y, x));
                }
                known[y * w + x] = true;
            }
        }
    }

    // Decoder-side walk over the real payload.
    let mut dec = RangeDecoder::new(&payload).unwrap();
    let mut known = vec![false; h * w];
    let mut visible = IntegratedMap {
        channels: im.channels.clone(),
        grid: LevelMap::zeros(2, h, w),
    };
    for (y, x) in schedule.seed_positions() {
        let (y, x) = (y as usize, x as usize);
        for c in 0..2 {
            let stride = im.channels[c].stride;
            if is_owner(y, x, stride) {
                let v = dec.decode(&hist.table(c)).unwrap();
                visible.grid.set(c, y, x, v as u8);
            } else {
                let (oy, ox) = (y - y % stride, x - x % stride);
                let v = visible.grid.at(c, oy, ox);
                visible.grid.set(c, y, x, v);
            }
        }
        known[y * w + x] = true;
    }
    for (si, step) in schedule.active_steps().iter().enumerate() {
        let tables = step_probabilities(&store, &ctx, step, &visible, &known);
        assert_eq!(tables, enc_tables[si], "step {si} tables differ across sides");
        let mut ti = 0;
        for &(y, x) in &step.targets {
            let (y, x) = (y as usize, x as usize);
            for c in 0..2 {
                let stride = im.channels[c].stride;
                if is_owner(y, x, stride) {
                    let v = dec.decode(&tables[ti]).unwrap();
                    ti += 1;
                    visible.grid.set(c, y, x, v as u8);
                } else {
                    let (oy, ox) = (y - y % stride, x - x % stride);
                    let v = visible.grid.at(c, oy, ox);
                    visible.grid.set(c, y, x, v);
                }
            }
            known[y * w + x] = true;
        }
    }
    assert_eq!(visible.grid, im.grid, "decoded grid differs from truth");
}

#[test]
fn file_boundary_adds_zero_distortion() {
    // decompress(compress(x)) scores exactly the MS-SSIM of the in-process
    // synthesize(quantize(analyze(x))) for a 50-image corpus.
    let corpus = toy_images(17, 50, 48, 48);
    let cfg = CodecConfig {
        m: 2,
        channels: vec![1, 2],
        n_levels: 5,
        u: 4.0,
        hidden_width: 6,
        depth: 4,
        k_blocks: 2,
        ctx_hidden: 6,
    };
    let mut model = CodecModel::new(cfg, 18).unwrap();
    model.add_coder(19);
    let features: Vec<QuantizedFeatures> = corpus
        .iter()
        .map(|im| {
            let padded = im.pad_to_multiple(model.config.pad_multiple());
            let z = analyze(&padded, &model.store, &model.ae, &model.config).unwrap();
            quantize_features(&z, &model.store, &model.ae, &model.config)
        })
        .collect();
    let hist = BaseHistogram::from_features(&features, model.config.n_levels).unwrap();
    model.set_histogram(&hist).unwrap();

    let ms_cfg = MsSsimConfig::default();
    for (im, q) in corpus.iter().zip(features.iter()) {
        let out = compress_image(im, &model, 0).unwrap();
        assert_eq!(&out.quantized, q, "pipeline quantized features drifted");
        let dec = decompress_image(&out.container, &model).unwrap();
        let direct = {
            let recon = synthesize(q, &model.store, &model.ae, &model.config).unwrap();
            let mut recon = recon;
            recon.original_height = im.original_height;
            recon.original_width = im.original_width;
            ms_ssim(im, &recon.crop_to_original(), &ms_cfg).unwrap()
        };
        let via_file = ms_ssim(im, &dec.image, &ms_cfg).unwrap();
        assert_eq!(via_file, direct, "file boundary changed the reconstruction");
    }
}
