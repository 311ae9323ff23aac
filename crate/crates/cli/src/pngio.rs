//! PNG ingestion and emission. Only 8-bit images without alpha are
//! accepted; grayscale is widened to RGB.

use anyhow::{bail, Context, Result};
use msic_core::img::Image;
use std::path::Path;

pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    let rgb = match dynimg {
        image::DynamicImage::ImageRgb8(img) => img,
        image::DynamicImage::ImageLuma8(img) => {
            image::DynamicImage::ImageLuma8(img).to_rgb8()
        }
        image::DynamicImage::ImageRgba8(_) | image::DynamicImage::ImageLumaA8(_) => {
            bail!("{}: images with an alpha channel are not supported", path.display())
        }
        other => bail!(
            "{}: unsupported pixel format {:?}; expected 8-bit RGB",
            path.display(),
            other.color()
        ),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_rgb8(h, w, rgb.as_raw()).map_err(anyhow::Error::from)?)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let buf = image::RgbImage::from_raw(w as u32, h as u32, img.to_rgb8())
        .expect("buffer size matches dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// PNG files of a corpus directory in name order (deterministic).
pub fn corpus_paths(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().map(|e| e.eq_ignore_ascii_case("png")).unwrap_or(false) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
