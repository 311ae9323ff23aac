//! Subcommand implementations.

use crate::pngio::{corpus_paths, read_png, write_png};
use anyhow::{anyhow, bail, Context, Result};
use msic_core::autoencoder::{analyze, quantize_features, train_autoencoder, TrainSchedule};
use msic_core::codec::{compress_image, decompress_image};
use msic_core::img::Image;
use msic_core::lossless::{train_context_model, BaseHistogram, CoderTrainSchedule, TrainRow};
use msic_core::metrics::{ms_ssim, MsSsimConfig};
use msic_core::model::{parse_config_file, CodecModel};
use msic_core::report::{parse_rd_csv, rd_csv, rd_svg, RdPoint};
use msic_core::tensor::QuantizedFeatures;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct TrainArgs {
    pub stage: String,
    pub corpus: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub init: Option<PathBuf>,
    pub updates: Option<usize>,
    pub batch: Option<usize>,
    pub crop: Option<usize>,
}

fn load_corpus(dir: &Path) -> Result<Vec<Image>> {
    let paths = corpus_paths(dir)?;
    if paths.is_empty() {
        bail!("no PNG files in {}", dir.display());
    }
    paths.iter().map(|p| read_png(p)).collect()
}

fn write_train_log(path: &Path, rows: &[TrainRow]) -> Result<()> {
    let mut csv = String::from("update,loss,lr_scale\n");
    for r in rows {
        csv.push_str(&format!("{},{},{}\n", r.update, r.loss, r.lr_scale));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    match args.stage.as_str() {
        "ae" => {
            let cfg = match &args.config {
                Some(p) => parse_config_file(&std::fs::read_to_string(p)?)?,
                None => parse_config_file("")?,
            };
            let mut model = match &args.init {
                Some(p) => {
                    let m = CodecModel::load(p)?;
                    if m.config != cfg && args.config.is_some() {
                        bail!("--config conflicts with the config stored in --init model");
                    }
                    m
                }
                None => CodecModel::new(cfg.clone(), args.seed)?,
            };
            let sched = TrainSchedule {
                updates: args.updates.unwrap_or(2000),
                batch: args.batch.unwrap_or(8),
                crop: args.crop.unwrap_or_else(|| model.config.pad_multiple().max(32)),
                seed: args.seed,
                decay_start: 0.75,
            };
            let ms_cfg = MsSsimConfig::default();
            let eff = ms_cfg.effective_scales(sched.crop, sched.crop);
            if eff < ms_cfg.scales {
                eprintln!(
                    "warning: {0}x{0} crops support only {eff} of {1} MS-SSIM scales; weights renormalized",
                    sched.crop, ms_cfg.scales
                );
            }
            let ids = model.ae.clone();
            let log = train_autoencoder(&corpus, &mut model.store, &ids, &model.config, &ms_cfg, &sched)?;
            model.save(&args.out)?;
            write_train_log(&log_path(&args.out), &log)?;
            println!(
                "trained autoencoder: {} updates, final loss {:.6}",
                log.len(),
                log.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        "coder" => {
            let init = args
                .init
                .as_ref()
                .ok_or_else(|| anyhow!("coder stage needs a trained autoencoder model via --init"))?;
            let mut model = CodecModel::load(init)?;
            if !model.has_coder() {
                model.add_coder(args.seed.wrapping_add(1));
            }
            model.freeze_autoencoder();
            let features: Vec<QuantizedFeatures> = corpus
                .iter()
                .map(|im| quantized_of(im, &model))
                .collect::<Result<_>>()?;
            let hist = BaseHistogram::from_features(&features, model.config.n_levels)?;
            model.set_histogram(&hist)?;
            let sched = CoderTrainSchedule {
                updates: args.updates.unwrap_or(2000),
                batch: args.batch.unwrap_or(4),
                seed: args.seed,
                decay_start: 0.75,
            };
            let coder = model.coder.clone().expect("coder just ensured");
            let log = train_context_model(
                &features,
                &mut model.store,
                &coder.ctx,
                model.config.k_blocks,
                &sched,
            )?;
            model.save(&args.out)?;
            write_train_log(&log_path(&args.out), &log)?;
            println!(
                "trained lossless coder: {} updates, final cross-entropy {:.4} bits/symbol",
                log.len(),
                log.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        other => bail!("unknown stage '{other}'; expected 'ae' or 'coder'"),
    }
}

fn log_path(model_out: &Path) -> PathBuf {
    let mut s = model_out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn quantized_of(img: &Image, model: &CodecModel) -> Result<QuantizedFeatures> {
    let padded = img.pad_to_multiple(model.config.pad_multiple());
    let z = analyze(&padded, &model.store, &model.ae, &model.config)?;
    Ok(quantize_features(&z, &model.store, &model.ae, &model.config))
}

pub fn cmd_compress(input: &Path, model_path: &Path, out: &Path, drop_blocks: usize) -> Result<()> {
    let t0 = Instant::now();
    let img = read_png(input)?;
    let model = CodecModel::load(model_path)?;
    let outcome = compress_image(&img, &model, drop_blocks)?;
    std::fs::write(out, &outcome.container)?;
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{}: {} bytes, {:.6} bpp, {:.3}s",
        out.display(),
        outcome.container.len(),
        outcome.bpp,
        dt
    );
    Ok(())
}

pub fn cmd_decompress(input: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let container = std::fs::read(input)?;
    let model = CodecModel::load(model_path)?;
    let outcome = decompress_image(&container, &model)?;
    write_png(out, &outcome.image)?;
    println!("{}: decoded in {:.3}s", out.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

/// Compress + decompress one image, returning the RD point.
pub fn rd_point_for(
    path: &Path,
    img: &Image,
    model: &CodecModel,
    label: &str,
    ms_cfg: &MsSsimConfig,
    drop_blocks: usize,
    fixed_time: bool,
) -> Result<RdPoint> {
    let t0 = Instant::now();
    let outcome = compress_image(img, model, drop_blocks)?;
    let enc_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let decoded = decompress_image(&outcome.container, model)?;
    let dec_s = t1.elapsed().as_secs_f64();
    let score = ms_ssim(img, &decoded.image, ms_cfg)?;
    Ok(RdPoint {
        label: label.to_string(),
        image: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string()),
        bpp: outcome.bpp,
        ms_ssim: score,
        enc_s: if fixed_time { 0.0 } else { enc_s },
        dec_s: if fixed_time { 0.0 } else { dec_s },
    })
}

pub fn cmd_eval(
    corpus: &Path,
    model_path: &Path,
    out: &Path,
    drop_blocks: usize,
    fixed_time: bool,
) -> Result<()> {
    let model = CodecModel::load(model_path)?;
    let ms_cfg = MsSsimConfig::default();
    let label = model.config.label();
    let paths = corpus_paths(corpus)?;
    let mut rows = Vec::new();
    for p in &paths {
        let img = read_png(p)?;
        rows.push(rd_point_for(p, &img, &model, &label, &ms_cfg, drop_blocks, fixed_time)?);
    }
    std::fs::write(out, rd_csv(&rows))?;
    println!("wrote {} ({} images)", out.display(), rows.len());
    Ok(())
}

pub struct BenchArgs {
    pub corpus: PathBuf,
    pub model: PathBuf,
    pub jpeg_cmd: Option<String>,
    pub webp_cmd: Option<String>,
    pub bpg_cmd: Option<String>,
    pub out: PathBuf,
    pub drop_blocks: usize,
    pub fixed_time: bool,
}

const BENCH_QUALITIES: [u32; 7] = [5, 10, 20, 30, 50, 70, 90];

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let model = CodecModel::load(&args.model)?;
    let ms_cfg = MsSsimConfig::default();
    let paths = corpus_paths(&args.corpus)?;
    if paths.is_empty() {
        bail!("no PNG files in {}", args.corpus.display());
    }
    let mut rows = Vec::new();

    let label = model.config.label();
    for p in &paths {
        let img = read_png(p)?;
        rows.push(rd_point_for(p, &img, &model, &label, &ms_cfg, args.drop_blocks, args.fixed_time)?);
    }

    let externals: [(&str, &Option<String>); 3] = [
        ("jpeg", &args.jpeg_cmd),
        ("webp", &args.webp_cmd),
        ("bpg", &args.bpg_cmd),
    ];
    let tmp = args.out.join("bench_tmp");
    std::fs::create_dir_all(&tmp)?;
    for (name, template) in externals {
        let Some(template) = template else { continue };
        let mut failed = false;
        'quality: for q in BENCH_QUALITIES {
            for p in &paths {
                let img = read_png(p)?;
                match run_external(template, p, &tmp, name, q)? {
                    Some((bytes, recon, secs)) => {
                        let score = ms_ssim(&img, &recon, &ms_cfg)?;
                        rows.push(RdPoint {
                            label: format!("{name}-q{q}"),
                            image: p
                                .file_name()
                                .map(|s| s.to_string_lossy().into_owned())
                                .unwrap_or_default(),
                            bpp: msic_core::metrics::bpp(bytes, img.width(), img.height()),
                            ms_ssim: score,
                            enc_s: if args.fixed_time { 0.0 } else { secs },
                            dec_s: 0.0,
                        });
                    }
                    None => {
                        eprintln!("warning: {name} codec unavailable or failed; skipping");
                        failed = true;
                        break 'quality;
                    }
                }
            }
        }
        let _ = failed;
    }

    let csv = rd_csv(&rows);
    let csv_path = args.out.join("rd.csv");
    std::fs::write(&csv_path, &csv)?;
    let svg = rd_svg(&parse_rd_csv(&csv)?);
    std::fs::write(args.out.join("rd.svg"), svg)?;
    let _ = std::fs::remove_dir_all(&tmp);
    println!("wrote {} and rd.svg ({} rows)", csv_path.display(), rows.len());
    Ok(())
}

/// Runs one external codec template. Placeholders: {in} input PNG, {out}
/// compressed file, {q} quality, optional {png} reconstruction path. When
/// {png} is absent the compressed file itself is decoded. Returns
/// (compressed size, reconstruction, encode seconds), or None when the
/// command fails or the output cannot be decoded.
fn run_external(
    template: &str,
    input: &Path,
    tmp: &Path,
    name: &str,
    q: u32,
) -> Result<Option<(usize, Image, f64)>> {
    let cmp = tmp.join(format!("{name}-q{q}.bin"));
    let png = tmp.join(format!("{name}-q{q}.png"));
    let uses_png = template.contains("{png}");
    let cmdline = template
        .replace("{in}", &input.display().to_string())
        .replace("{out}", &cmp.display().to_string())
        .replace("{png}", &png.display().to_string())
        .replace("{q}", &q.to_string());
    let t0 = Instant::now();
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(&cmdline)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status();
    let secs = t0.elapsed().as_secs_f64();
    let ok = matches!(status, Ok(s) if s.success());
    if !ok || !cmp.exists() {
        return Ok(None);
    }
    let bytes = std::fs::metadata(&cmp)?.len() as usize;
    let recon_path = if uses_png { png.clone() } else { cmp.clone() };
    // Decode by content, not extension; compressed artifacts carry
    // arbitrary suffixes.
    let decoded = image::ImageReader::open(&recon_path)
        .ok()
        .and_then(|r| r.with_guessed_format().ok())
        .and_then(|r| r.decode().ok());
    let recon = match decoded {
        Some(dynimg) => {
            let rgb = dynimg.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Image::from_rgb8(h, w, rgb.as_raw()).context("bad external reconstruction")?
        }
        None => return Ok(None),
    };
    Ok(Some((bytes, recon, secs)))
}
