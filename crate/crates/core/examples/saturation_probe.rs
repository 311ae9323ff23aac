//! At-init saturation check: how much of the synthesizer output sits on the
//! [0,1] clamp boundary, and how close the trained plateau is to the
//! best-constant-per-image predictor.

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
    let (_, held) = all.split_at(50);
    let cfg = CodecConfig {
        m: 4,
        channels: vec![1, 2, 4, 8],
        n_levels: 7,
        u: 4.0,
        hidden_width: 12,
        depth: 6,
        k_blocks: 0,
        ctx_hidden: 4,
    };
    let model = CodecModel::new(cfg, 99).unwrap();
    let ms_cfg = MsSsimConfig::default();

    let mut saturated = 0usize;
    let mut total = 0usize;
    let mut dc_dist = 0.0;
    for im in held {
        let padded = im.pad_to_multiple(model.config.pad_multiple());
        let z = analyze(&padded, &model.store, &model.ae, &model.config).unwrap();
        let q = quantize_features(&z, &model.store, &model.ae, &model.config);
        let recon = synthesize(&q, &model.store, &model.ae, &model.config).unwrap();
        saturated += recon
            .pixels
            .data
            .iter()
            .filter(|&&v| v == 0.0 || v == 1.0)
            .count();
        total += recon.pixels.data.len();

        // best constant-per-channel predictor
        let mut dc = padded.clone();
        for c in 0..3 {
            let plane_len = padded.pixels.height * padded.pixels.width;
            let s: f32 = padded.pixels.data[c * plane_len..(c + 1) * plane_len].iter().sum();
            let mean = s / plane_len as f32;
            dc.pixels.data[c * plane_len..(c + 1) * plane_len].fill(mean);
        }
        dc_dist += 1.0 - ms_ssim(&padded, &dc, &ms_cfg).unwrap();
    }
    println!(
        "at-init clamp saturation: {:.1}% of output pixels",
        100.0 * saturated as f64 / total as f64
    );
    println!("per-image-mean constant predictor: held-out 1-MS-SSIM = {:.8}", dc_dist / held.len() as f64);
}
