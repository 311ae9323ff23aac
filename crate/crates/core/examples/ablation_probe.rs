//! Reproduce the multi-vs-single ablation with full-precision prints and a
//! constant-output check.

use msic_core::autoencoder::*;
use msic_core::img::Image;
use msic_core::metrics::{ms_ssim, MsSsimConfig};
use msic_core::model::CodecModel;
use msic_core::tensor::FeatureTensor;

fn main() {
    let updates: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let all: Vec<Image> = msic_testkit::toy_corpus(8001, 60, 64, 64)
        .into_iter()
        .map(|d| Image::new(FeatureTensor::from_data(3, 64, 64, d).unwrap()))
        .collect();
    let (train, held) = all.split_at(50);
    let ms_cfg = MsSsimConfig::default();
    let sched = TrainSchedule {
        updates,
        batch: 8,
        crop: 32,
        seed: 21,
        decay_start: 0.75,
    };
    let configs: Vec<(&str, CodecConfig)> = vec![
        ("multi", CodecConfig { m: 4, channels: vec![1, 2, 4, 8], n_levels: 7, u: 4.0, hidden_width: 12, depth: 6, k_blocks: 0, ctx_hidden: 4 }),
        ("z2", CodecConfig { m: 2, channels: vec![0, 8], n_levels: 7, u: 4.0, hidden_width: 12, depth: 4, k_blocks: 0, ctx_hidden: 4 }),
        ("z3", CodecConfig { m: 3, channels: vec![0, 0, 30], n_levels: 7, u: 4.0, hidden_width: 12, depth: 5, k_blocks: 0, ctx_hidden: 4 }),
    ];
    for (name, cfg) in configs {
        let mut model = CodecModel::new(cfg, 99).unwrap();
        let ids = model.ae.clone();
        let cfgc = model.config.clone();
        let log = train_autoencoder(train, &mut model.store, &ids, &cfgc, &ms_cfg, &sched).unwrap();
        let mut d_sum = 0.0;
        let mut recons: Vec<Image> = Vec::new();
        for im in held {
            let padded = im.pad_to_multiple(model.config.pad_multiple());
            let z = analyze(&padded, &model.store, &model.ae, &model.config).unwrap();
            let q = quantize_features(&z, &model.store, &model.ae, &model.config);
            let recon = synthesize(&q, &model.store, &model.ae, &model.config).unwrap();
            d_sum += 1.0 - ms_ssim(&padded, &recon, &ms_cfg).unwrap();
            recons.push(recon);
        }
        let same = recons
            .windows(2)
            .all(|w| w[0].pixels.data == w[1].pixels.data);
        println!(
            "{name}: train {:.4}->{:.4}  held-out mean {:.8}  all-recons-identical: {same}",
            log.first().unwrap().loss,
            log.last().unwrap().loss,
            d_sum / held.len() as f64
        );
    }
}
