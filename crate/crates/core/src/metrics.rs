//! MS-SSIM distortion metric and bits-per-pixel accounting.
//!
//! MS-SSIM here is the weighted geometric mean of per-scale mean SSIM maps:
//! at each of the (up to) five scales the full SSIM index (luminance times
//! contrast-structure) is computed per position with an 11x11 Gaussian
//! window (sigma 1.5, valid positions only), averaged, raised to the scale
//! weight, and multiplied across scales. Images are compared per RGB
//! channel and the three channel scores are averaged. Between scales the
//! images are 2x2 mean pooled. Inputs are in [0, 1] (dynamic range 1).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::img::Image;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub weights: Vec<f64>,
    pub window: usize,
    pub sigma: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        // The canonical per-scale exponents sum to 1.0001; normalize so the
        // weights form a proper convex combination.
        let raw = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
        let sum: f64 = raw.iter().sum();
        MsSsimConfig {
            scales: 5,
            weights: raw.iter().map(|w| w / sum).collect(),
            window: 11,
            sigma: 1.5,
        }
    }
}

impl MsSsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.scales {
            return Err(Error::config("weight count must equal scale count"));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::config("window size must be odd"));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::config("weights must be nonnegative"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Number of scales the given dims support: each scale halves the image
    /// and the Gaussian window must still fit.
    pub fn effective_scales(&self, height: usize, width: usize) -> usize {
        let mut s = 0;
        let (mut h, mut w) = (height, width);
        while s < self.scales && h >= self.window && w >= self.window {
            s += 1;
            h /= 2;
            w /= 2;
        }
        s
    }

    /// Weights for a reduced scale count, renormalized to sum 1.
    pub fn weights_for(&self, scales: usize) -> Vec<f64> {
        let sum: f64 = self.weights[..scales].iter().sum();
        self.weights[..scales].iter().map(|w| w / sum).collect()
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn depthwise_kernel<T: Scalar>(channels: usize, kh: usize, kw: usize, weights: &[f64]) -> Tensor<T> {
    let mut k = Tensor::zeros(channels, 1, kh, kw);
    for c in 0..channels {
        for (i, &w) in weights.iter().enumerate() {
            k.data[c * kh * kw + i] = T::c(w);
        }
    }
    k
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Builds the differentiable MS-SSIM value of two (n, c, h, w) nodes.
/// Returns the scalar node (mean over batch and channels) and the scale
/// count actually used.
pub fn ms_ssim_node<T: Scalar>(
    g: &mut Graph<T>,
    a: NodeId,
    b: NodeId,
    cfg: &MsSsimConfig,
) -> Result<(NodeId, usize)> {
    cfg.validate()?;
    let (_, _, h, w) = g.value(a).shape();
    if g.value(b).shape() != g.value(a).shape() {
        return Err(Error::config("ms_ssim inputs must share dims"));
    }
    let scales = cfg.effective_scales(h, w);
    if scales == 0 {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let weights = cfg.weights_for(scales);
    let win = gaussian_window(cfg.window, cfg.sigma);
    let c1 = T::c(SSIM_K1 * SSIM_K1);
    let c2 = T::c(SSIM_K2 * SSIM_K2);

    let mut cur_a = a;
    let mut cur_b = b;
    let mut product: Option<NodeId> = None;
    for (scale, &weight) in weights.iter().enumerate() {
        let ch = g.value(cur_a).c;
        let kv = g.input(depthwise_kernel::<T>(ch, cfg.window, 1, &win));
        let kh = g.input(depthwise_kernel::<T>(ch, 1, cfg.window, &win));
        let blur = |g: &mut Graph<T>, x: NodeId| {
            let v = g.conv_depthwise(x, kv, 0);
            g.conv_depthwise(v, kh, 0)
        };

        let mu_a = blur(g, cur_a);
        let mu_b = blur(g, cur_b);
        let aa = g.mul(cur_a, cur_a);
        let bb = g.mul(cur_b, cur_b);
        let ab = g.mul(cur_a, cur_b);
        let e_aa = blur(g, aa);
        let e_bb = blur(g, bb);
        let e_ab = blur(g, ab);

        let mu_aa = g.mul(mu_a, mu_a);
        let mu_bb = g.mul(mu_b, mu_b);
        let mu_ab = g.mul(mu_a, mu_b);
        let var_a = g.sub(e_aa, mu_aa);
        let var_b = g.sub(e_bb, mu_bb);
        let cov = g.sub(e_ab, mu_ab);

        // luminance: (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
        let two_mu_ab = g.mul_scalar(mu_ab, T::c(2.0));
        let l_num = g.add_scalar(two_mu_ab, c1);
        let mu_sq = g.add(mu_aa, mu_bb);
        let l_den = g.add_scalar(mu_sq, c1);
        let lum = g.div(l_num, l_den);

        // contrast-structure: (2 cov + C2) / (var_a + var_b + C2)
        let two_cov = g.mul_scalar(cov, T::c(2.0));
        let cs_num = g.add_scalar(two_cov, c2);
        let var_sum = g.add(var_a, var_b);
        let cs_den = g.add_scalar(var_sum, c2);
        let cs = g.div(cs_num, cs_den);

        let ssim_map = g.mul(lum, cs);
        let m = g.mean_spatial(ssim_map);
        // Guard the power against rare non-positive means; never binds on
        // ordinary image pairs.
        let m = g.clamp(m, T::c(1e-9), T::c(2.0));
        let term = g.pow_scalar(m, T::c(weight));
        product = Some(match product {
            None => term,
            Some(p) => g.mul(p, term),
        });

        if scale + 1 < scales {
            cur_a = g.avg_pool(cur_a, 2);
            cur_b = g.avg_pool(cur_b, 2);
        }
    }
    Ok((g.mean_all(product.unwrap()), scales))
}

/// MS-SSIM of two images, averaged over RGB channels; evaluated in f64.
pub fn ms_ssim(a: &Image, b: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    Ok(ms_ssim_with_info(a, b, cfg)?.0)
}

/// MS-SSIM plus the scale count actually used (smaller than configured when
/// the image is too small; callers surface the fallback to the user).
pub fn ms_ssim_with_info(a: &Image, b: &Image, cfg: &MsSsimConfig) -> Result<(f64, usize)> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::config("ms_ssim inputs must share dims"));
    }
    let mut g = Graph::<f64>::new();
    let an = g.input(Tensor::from_feature(&a.pixels.map_into::<f64>()));
    let bn = g.input(Tensor::from_feature(&b.pixels.map_into::<f64>()));
    let (node, scales) = ms_ssim_node(&mut g, an, bn, cfg)?;
    Ok((g.value(node).item(), scales))
}

/// Bits per pixel from a file size: 8 * bytes / (width * height). Header
/// bytes count; meta-information is not removed from the accounting.
pub fn bpp(file_bytes: usize, width: usize, height: usize) -> f64 {
    assert!(width > 0 && height > 0, "bpp needs positive dims");
    8.0 * file_bytes as f64 / (width as f64 * height as f64)
}
