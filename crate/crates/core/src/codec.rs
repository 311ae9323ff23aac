//! End-to-end compression pipeline: image -> container bytes -> image.

use crate::autoencoder::{analyze, quantize_features, synthesize};
use crate::container::{read_container, write_container, Header, CONTAINER_VERSION};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::lossless::{decode_features, encode_features, factorized_logprob, CoderStats};
use crate::metrics::bpp;
use crate::model::CodecModel;
use crate::schedule::{build_schedule, GridSchedule};
use crate::tensor::QuantizedFeatures;

#[derive(Debug, Clone)]
pub struct CompressOutcome {
    pub container: Vec<u8>,
    pub stats: CoderStats,
    pub bpp: f64,
    /// The integer levels actually written, for round-trip checks.
    pub quantized: QuantizedFeatures,
}

/// Schedule over the densest non-empty scale of a padded image.
fn schedule_for(model: &CodecModel, padded_h: usize, padded_w: usize, drop: usize) -> Result<GridSchedule> {
    let dims = model.config.scale_dims(padded_h, padded_w);
    let (_, h, w) = *dims
        .iter()
        .find(|&&(c, _, _)| c > 0)
        .ok_or_else(|| Error::config("all scales empty"))?;
    let full = build_schedule(h, w, model.config.k_blocks)?;
    full.drop_leading_blocks(drop)
}

/// Compresses an image with a coder-stage model. `drop_blocks` removes the
/// leading conditional steps and densifies the histogram-coded seed grid.
pub fn compress_image(img: &Image, model: &CodecModel, drop_blocks: usize) -> Result<CompressOutcome> {
    let coder = model
        .coder
        .as_ref()
        .ok_or_else(|| Error::config("model has no trained coder stage; run stage-2 training"))?;
    let cfg = &model.config;
    if img.original_height > u16::MAX as usize || img.original_width > u16::MAX as usize {
        return Err(Error::config("image dims exceed the u16 container limit"));
    }
    let padded = img.pad_to_multiple(cfg.pad_multiple());
    let z = analyze(&padded, &model.store, &model.ae, cfg)?;
    let q = quantize_features(&z, &model.store, &model.ae, cfg);
    let schedule = schedule_for(model, padded.height(), padded.width(), drop_blocks)?;
    let hist = model.histogram()?;
    let (payload, stats) = encode_features(&q, &model.store, &coder.ctx, &hist, &schedule)?;
    let header = Header {
        version: CONTAINER_VERSION,
        original_height: img.original_height as u16,
        original_width: img.original_width as u16,
        padded_height: padded.height() as u16,
        padded_width: padded.width() as u16,
        channels: cfg.channels.iter().map(|&c| c as u8).collect(),
        n_levels: cfg.n_levels,
        k_blocks: cfg.k_blocks as u8,
        dropped_blocks: drop_blocks as u8,
        model_digest: model.digest(),
        payload_len: payload.len() as u32,
    };
    let container = write_container(&header, &payload)?;
    let rate = bpp(container.len(), img.original_width, img.original_height);
    Ok(CompressOutcome {
        container,
        stats,
        bpp: rate,
        quantized: q,
    })
}

#[derive(Debug, Clone)]
pub struct DecompressOutcome {
    pub image: Image,
    pub stats: CoderStats,
    pub quantized: QuantizedFeatures,
}

/// Decodes a container produced by `compress_image` with the same model.
pub fn decompress_image(container: &[u8], model: &CodecModel) -> Result<DecompressOutcome> {
    let coder = model
        .coder
        .as_ref()
        .ok_or_else(|| Error::config("model has no coder stage"))?;
    let parsed = read_container(container)?;
    let h = &parsed.header;
    let digest = model.digest();
    if h.model_digest != digest {
        return Err(Error::ModelMismatch {
            container: h.model_digest,
            model: digest,
        });
    }
    let cfg = &model.config;
    let expect_channels: Vec<u8> = cfg.channels.iter().map(|&c| c as u8).collect();
    if h.channels != expect_channels || h.n_levels != cfg.n_levels || h.k_blocks as usize != cfg.k_blocks {
        return Err(Error::format("container config does not match model config"));
    }
    let (ph, pw) = (h.padded_height as usize, h.padded_width as usize);
    let schedule = schedule_for(model, ph, pw, h.dropped_blocks as usize)?;
    let shapes = cfg.scale_dims(ph, pw);
    let hist = model.histogram()?;
    let (q, stats) = decode_features(
        &parsed.payload,
        &model.store,
        &coder.ctx,
        &hist,
        &schedule,
        &shapes,
    )?;
    let mut image = synthesize(&q, &model.store, &model.ae, cfg)?;
    image.original_height = h.original_height as usize;
    image.original_width = h.original_width as usize;
    Ok(DecompressOutcome {
        image: image.crop_to_original(),
        stats,
        quantized: q,
    })
}

/// Model rate estimate of an image in bits, without producing a stream.
pub fn estimate_bits(img: &Image, model: &CodecModel, drop_blocks: usize) -> Result<(f64, CoderStats)> {
    let coder = model
        .coder
        .as_ref()
        .ok_or_else(|| Error::config("model has no coder stage"))?;
    let cfg = &model.config;
    let padded = img.pad_to_multiple(cfg.pad_multiple());
    let z = analyze(&padded, &model.store, &model.ae, cfg)?;
    let q = quantize_features(&z, &model.store, &model.ae, cfg);
    let schedule = schedule_for(model, padded.height(), padded.width(), drop_blocks)?;
    let hist = model.histogram()?;
    factorized_logprob(&q, &model.store, &coder.ctx, &hist, &schedule)
}
