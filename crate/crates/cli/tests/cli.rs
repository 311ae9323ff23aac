//! End-to-end tests of the `msic` binary: the two-stage training flow,
//! compress/decompress round trips, eval/bench reports, and the exit-code
//! contract.

use msic_core::img::Image;
use msic_core::metrics::{ms_ssim, MsSsimConfig};
use msic_core::report::parse_rd_csv;
use msic_core::tensor::FeatureTensor;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

fn msic() -> &'static str {
    env!("CARGO_BIN_EXE_msic")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(msic()).args(args).output().expect("spawn msic");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_corpus(dir: &Path, count: usize, h: usize, w: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, data) in msic_testkit::toy_corpus(11, count, h, w).into_iter().enumerate() {
        let img = Image::new(FeatureTensor::from_data(3, h, w, data).unwrap());
        let buf = image::RgbImage::from_raw(w as u32, h as u32, img.to_rgb8()).unwrap();
        buf.save(dir.join(format!("toy{i:03}.png"))).unwrap();
    }
}

struct Fixture {
    #[allow(dead_code)]
    tmp: tempfile::TempDir,
    corpus: PathBuf,
    model: PathBuf,
    ae_model: PathBuf,
}

/// One tiny trained model shared by every test in this binary.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tmp.path().join("corpus");
        write_corpus(&corpus, 8, 48, 48);
        let config = tmp.path().join("toy.cfg");
        std::fs::write(
            &config,
            "m=2\nchannels=1,2\nn_levels=5\nhidden_width=6\ndepth=4\nk_blocks=2\nctx_hidden=6\n",
        )
        .unwrap();
        let ae_model = tmp.path().join("toy.ae.msicm");
        let model = tmp.path().join("toy.msicm");
        let (code, _, err) = run(&[
            "train", "--stage", "ae",
            "--corpus", corpus.to_str().unwrap(),
            "--config", config.to_str().unwrap(),
            "--out", ae_model.to_str().unwrap(),
            "--seed", "0", "--updates", "40", "--batch", "2", "--crop", "16",
        ]);
        assert_eq!(code, 0, "ae training failed: {err}");
        let (code, _, err) = run(&[
            "train", "--stage", "coder",
            "--corpus", corpus.to_str().unwrap(),
            "--init", ae_model.to_str().unwrap(),
            "--out", model.to_str().unwrap(),
            "--seed", "0", "--updates", "40", "--batch", "2",
        ]);
        assert_eq!(code, 0, "coder training failed: {err}");
        Fixture {
            tmp,
            corpus,
            model,
            ae_model,
        }
    })
}

#[test]
fn coder_stage_without_ae_model_errors() {
    let f = fixture();
    let (code, _, err) = run(&[
        "train", "--stage", "coder",
        "--corpus", f.corpus.to_str().unwrap(),
        "--out", "/tmp/never-written.msicm",
    ]);
    assert_eq!(code, 2, "expected data error, got {code}: {err}");
    assert!(err.contains("--init"));
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, _) = run(&["compress"]);
    assert_eq!(code, 1);
    let (code, _, _) = run(&["no-such-command"]);
    assert_eq!(code, 1);
}

#[test]
fn compress_decompress_round_trip_and_determinism() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let input = f.corpus.join("toy000.png");
    let bin = tmp.path().join("out.msic");
    let png1 = tmp.path().join("a.png");
    let png2 = tmp.path().join("b.png");

    let (code, stdout, err) = run(&[
        "compress", input.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", bin.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("bpp"));

    for png in [&png1, &png2] {
        let (code, _, err) = run(&[
            "decompress", bin.to_str().unwrap(),
            "--model", f.model.to_str().unwrap(),
            "--out", png.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let a = std::fs::read(&png1).unwrap();
    let b = std::fs::read(&png2).unwrap();
    assert_eq!(a, b, "repeated decompression must be byte-identical");

    // Dims restored to the original.
    let img = image::open(&png1).unwrap();
    assert_eq!((img.width(), img.height()), (48, 48));
}

#[test]
fn decompress_with_wrong_model_exits_three() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("out.msic");
    let (code, _, _) = run(&[
        "compress", f.corpus.join("toy001.png").to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", bin.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);

    // A differently seeded coder stage yields a different digest.
    let other = tmp.path().join("other.msicm");
    let (code, _, err) = run(&[
        "train", "--stage", "coder",
        "--corpus", f.corpus.to_str().unwrap(),
        "--init", f.ae_model.to_str().unwrap(),
        "--out", other.to_str().unwrap(),
        "--seed", "1", "--updates", "1", "--batch", "1",
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&[
        "decompress", bin.to_str().unwrap(),
        "--model", other.to_str().unwrap(),
        "--out", tmp.path().join("x.png").to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "expected model mismatch, got {code}: {err}");
}

#[test]
fn eval_is_reproducible_and_consistent_with_decompress() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let csv1 = tmp.path().join("rd1.csv");
    let csv2 = tmp.path().join("rd2.csv");
    for csv in [&csv1, &csv2] {
        let (code, _, err) = run(&[
            "eval",
            "--corpus", f.corpus.to_str().unwrap(),
            "--model", f.model.to_str().unwrap(),
            "--out", csv.to_str().unwrap(),
            "--fixed-time",
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let a = std::fs::read(&csv1).unwrap();
    let b = std::fs::read(&csv2).unwrap();
    assert_eq!(a, b, "eval CSV must be byte-identical across runs");

    let rows = parse_rd_csv(&String::from_utf8(a).unwrap()).unwrap();
    let per_image: Vec<_> = rows.iter().filter(|r| r.image != "(mean)").collect();
    assert_eq!(per_image.len(), 8);
    let mean_row = rows.iter().find(|r| r.image == "(mean)").unwrap();
    let mean_bpp = per_image.iter().map(|r| r.bpp).sum::<f64>() / per_image.len() as f64;
    assert!((mean_row.bpp - mean_bpp).abs() < 1e-12);

    // The CSV's ms_ssim must equal what decompress + metric gives.
    let bin = tmp.path().join("c.msic");
    let png = tmp.path().join("c.png");
    let input = f.corpus.join("toy000.png");
    run(&[
        "compress", input.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", bin.to_str().unwrap(),
    ]);
    run(&[
        "decompress", bin.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", png.to_str().unwrap(),
    ]);
    let orig = image::open(&input).unwrap().to_rgb8();
    let recon = image::open(&png).unwrap().to_rgb8();
    let as_img = |b: &image::RgbImage| {
        Image::from_rgb8(b.height() as usize, b.width() as usize, b.as_raw()).unwrap()
    };
    let direct = ms_ssim(&as_img(&orig), &as_img(&recon), &MsSsimConfig::default()).unwrap();
    let row = per_image.iter().find(|r| r.image == "toy000.png").unwrap();
    // The CSV records the pre-PNG float reconstruction; PNG quantizes to
    // 8 bits, so allow that rounding.
    assert!(
        (direct - row.ms_ssim).abs() < 2e-3,
        "direct {direct} vs eval {}",
        row.ms_ssim
    );
}

#[test]
fn bench_degrades_gracefully_and_svg_is_pure() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out1 = tmp.path().join("bench1");
    let out2 = tmp.path().join("bench2");
    for out in [&out1, &out2] {
        let (code, _, err) = run(&[
            "bench",
            "--corpus", f.corpus.to_str().unwrap(),
            "--model", f.model.to_str().unwrap(),
            "--jpeg-cmd", "definitely-not-a-codec {in} {out} {q}",
            "--out", out.to_str().unwrap(),
            "--fixed-time",
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let csv1 = std::fs::read(out1.join("rd.csv")).unwrap();
    let csv2 = std::fs::read(out2.join("rd.csv")).unwrap();
    assert_eq!(csv1, csv2);
    let svg1 = std::fs::read(out1.join("rd.svg")).unwrap();
    let svg2 = std::fs::read(out2.join("rd.svg")).unwrap();
    assert_eq!(svg1, svg2, "SVG from identical CSV must be byte-identical");
    // Internal rows only (the fake jpeg codec was skipped).
    let rows = parse_rd_csv(std::str::from_utf8(&csv1).unwrap()).unwrap();
    assert!(rows.iter().all(|r| !r.label.starts_with("jpeg")));
    assert!(rows.iter().any(|r| r.image != "(mean)"));
}

#[test]
fn bench_external_codec_path_with_identity_codec() {
    // `cp` stands in for a codec whose output is the PNG itself: rows must
    // appear for it with MS-SSIM 1 and bpp equal to the PNG size.
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let (code, _, err) = run(&[
        "bench",
        "--corpus", f.corpus.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--jpeg-cmd", "cp {in} {out}",
        "--out", out.to_str().unwrap(),
        "--fixed-time",
    ]);
    assert_eq!(code, 0, "{err}");
    let rows = parse_rd_csv(&std::fs::read_to_string(out.join("rd.csv")).unwrap()).unwrap();
    let ext: Vec<_> = rows
        .iter()
        .filter(|r| r.label.starts_with("jpeg") && r.image != "(mean)")
        .collect();
    assert!(!ext.is_empty(), "external rows missing");
    for r in ext {
        assert!((r.ms_ssim - 1.0).abs() < 1e-9, "identity codec scored {}", r.ms_ssim);
        assert!(r.bpp > 0.0);
    }
    assert!(out.join("rd.svg").exists());
}

#[test]
fn eval_on_empty_corpus_writes_header_only_csv() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let csv = tmp.path().join("rd.csv");
    let (code, _, err) = run(&[
        "eval",
        "--corpus", empty.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        std::fs::read_to_string(&csv).unwrap(),
        "label,image,bpp,ms_ssim,enc_s,dec_s\n"
    );
}

#[test]
fn alpha_png_is_rejected() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let rgba = tmp.path().join("alpha.png");
    let buf = image::RgbaImage::from_pixel(16, 16, image::Rgba([10, 20, 30, 200]));
    buf.save(&rgba).unwrap();
    let (code, _, err) = run(&[
        "compress", rgba.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", tmp.path().join("x.msic").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("alpha"), "unhelpful error: {err}");
}

#[test]
fn resumed_training_is_deterministic() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("resume_a.msicm");
    let b = tmp.path().join("resume_b.msicm");
    for out in [&a, &b] {
        let (code, _, err) = run(&[
            "train", "--stage", "ae",
            "--corpus", f.corpus.to_str().unwrap(),
            "--init", f.ae_model.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--seed", "3", "--updates", "10", "--batch", "2", "--crop", "16",
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let ba = std::fs::read(&a).unwrap();
    let bb = std::fs::read(&b).unwrap();
    assert_eq!(ba, bb, "two resumes from one checkpoint must agree bitwise");
    // Training logs identical too.
    let la = std::fs::read(tmp.path().join("resume_a.msicm.log.csv")).unwrap();
    let lb = std::fs::read(tmp.path().join("resume_b.msicm.log.csv")).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn drop_blocks_stays_decodable() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let input = f.corpus.join("toy002.png");
    let full = tmp.path().join("full.msic");
    let dropped = tmp.path().join("dropped.msic");
    let (c1, _, _) = run(&[
        "compress", input.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", full.to_str().unwrap(),
    ]);
    let (c2, _, err) = run(&[
        "compress", input.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", dropped.to_str().unwrap(),
        "--drop-blocks", "2",
    ]);
    assert_eq!((c1, c2), (0, 0), "{err}");
    let (code, _, err) = run(&[
        "decompress", dropped.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", tmp.path().join("d.png").to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    // Reconstruction identical to the full-schedule one: same levels.
    run(&[
        "decompress", full.to_str().unwrap(),
        "--model", f.model.to_str().unwrap(),
        "--out", tmp.path().join("f.png").to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(tmp.path().join("d.png")).unwrap(),
        std::fs::read(tmp.path().join("f.png")).unwrap()
    );
}
