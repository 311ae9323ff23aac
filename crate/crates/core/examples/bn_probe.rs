//! Probe eval-mode feature statistics after a short training run: are the
//! quantized levels saturating under the frozen batch-norm statistics?

use msic_core::autoencoder::*;
use msic_core::img::Image;
use msic_core::metrics::{ms_ssim, MsSsimConfig};
use msic_core::model::CodecModel;
use msic_core::tensor::FeatureTensor;

fn main() {
    let all: Vec<Image> = msic_testkit::toy_corpus(8001, 60, 64, 64)
        .into_iter()
        .map(|d| Image::new(FeatureTensor::from_data(3, 64, 64, d).unwrap()))
        .collect();
    let (train, held) = all.split_at(50);
    let cfg = CodecConfig {
        m: 2,
        channels: vec![0, 8],
        n_levels: 7,
        u: 4.0,
        hidden_width: 12,
        depth: 4,
        k_blocks: 0,
        ctx_hidden: 4,
    };
    let mut model = CodecModel::new(cfg, 99).unwrap();
    let ids = model.ae.clone();
    let cfgc = model.config.clone();
    let sched = TrainSchedule {
        updates: std::env::args()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(2000),
        batch: 8,
        crop: 32,
        seed: 21,
        decay_start: 0.75,
    };
    let log = train_autoencoder(
        train,
        &mut model.store,
        &ids,
        &cfgc,
        &MsSsimConfig::default(),
        &sched,
    )
    .unwrap();
    println!(
        "train loss {:.4} -> {:.4}",
        log.first().unwrap().loss,
        log.last().unwrap().loss
    );

    // Running statistics vs what actually flows at eval.
    for tap in model.ae.taps.iter().flatten() {
        let rm = &model.store.value(tap.run_mean).data;
        let rv = &model.store.value(tap.run_var).data;
        println!(
            "run_mean[0..4] = {:?}\nrun_var [0..4] = {:?}",
            &rm[..4.min(rm.len())],
            &rv[..4.min(rv.len())]
        );
        let gm = &model.store.value(tap.gamma).data;
        let bt = &model.store.value(tap.beta).data;
        println!("gamma[0..4] = {:?}, beta[0..4] = {:?}", &gm[..4.min(gm.len())], &bt[..4.min(bt.len())]);
    }

    for (i, im) in held.iter().take(2).enumerate() {
        let padded = im.pad_to_multiple(model.config.pad_multiple());
        let z = analyze(&padded, &model.store, &model.ae, &model.config).unwrap();
        let q = quantize_features(&z, &model.store, &model.ae, &model.config);
        // level histogram of the deepest scale
        let mut histo = [0usize; 7];
        for &v in &q.maps[1].data {
            histo[v as usize] += 1;
        }
        let recon = synthesize(&q, &model.store, &model.ae, &model.config).unwrap();
        let d = 1.0 - ms_ssim(&padded, &recon, &MsSsimConfig::default()).unwrap();
        println!("held {i}: levels {histo:?}  1-msssim {d:.6}");
        // raw z stats
        let zs = &z.maps[1].data;
        let mean: f32 = zs.iter().sum::<f32>() / zs.len() as f32;
        let var: f32 = zs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / zs.len() as f32;
        println!("held {i}: raw z mean {mean:.4} var {var:.4}");
    }
}
