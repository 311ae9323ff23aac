//! Rough training-throughput probe used while sizing the test fixtures.
//! Run: cargo run -p msic-core --example speed_probe --release

use msic_core::autoencoder::*;
use msic_core::img::Image;
use msic_core::lossless::*;
use msic_core::metrics::MsSsimConfig;
use msic_core::model::CodecModel;
use msic_core::tensor::{FeatureTensor, QuantizedFeatures};
use std::time::Instant;

fn main() {
    let corpus: Vec<Image> = msic_testkit::toy_corpus(7001, 20, 64, 64)
        .into_iter()
        .map(|d| Image::new(FeatureTensor::from_data(3, 64, 64, d).unwrap()))
        .collect();
    let cfg = CodecConfig {
        m: 4,
        channels: vec![1, 2, 4, 8],
        n_levels: 7,
        u: 4.0,
        hidden_width: 12,
        depth: 6,
        k_blocks: 4,
        ctx_hidden: 16,
    };
    let mut model = CodecModel::new(cfg, 42).unwrap();
    let ids = model.ae.clone();
    let cfgc = model.config.clone();
    let t0 = Instant::now();
    let sched = TrainSchedule {
        updates: 50,
        batch: 8,
        crop: 32,
        seed: 42,
        decay_start: 0.75,
    };
    train_autoencoder(&corpus, &mut model.store, &ids, &cfgc, &MsSsimConfig::default(), &sched)
        .unwrap();
    println!("AE: {:.1} ms/update", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);

    model.add_coder(43);
    model.freeze_autoencoder();
    let features: Vec<QuantizedFeatures> = corpus
        .iter()
        .map(|im| {
            let p = im.pad_to_multiple(model.config.pad_multiple());
            let z = analyze(&p, &model.store, &model.ae, &model.config).unwrap();
            quantize_features(&z, &model.store, &model.ae, &model.config)
        })
        .collect();
    let hist = BaseHistogram::from_features(&features, 7).unwrap();
    model.set_histogram(&hist).unwrap();
    let coder = model.coder.clone().unwrap();
    let t1 = Instant::now();
    let csched = CoderTrainSchedule {
        updates: 50,
        batch: 4,
        seed: 44,
        decay_start: 0.75,
    };
    train_context_model(&features, &mut model.store, &coder.ctx, 4, &csched).unwrap();
    println!("coder: {:.1} ms/update", t1.elapsed().as_secs_f64() * 1000.0 / 50.0);

    let t2 = Instant::now();
    let out = msic_core::codec::compress_image(&corpus[0], &model, 0).unwrap();
    let dt_enc = t2.elapsed().as_secs_f64();
    let t3 = Instant::now();
    let _ = msic_core::codec::decompress_image(&out.container, &model).unwrap();
    println!(
        "64x64 encode {:.1} ms / decode {:.1} ms, {} bytes",
        dt_enc * 1000.0,
        t3.elapsed().as_secs_f64() * 1000.0,
        out.container.len()
    );
}
