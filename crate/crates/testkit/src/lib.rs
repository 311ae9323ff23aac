//! Independent oracles and synthetic data for the codec test suites.
//!
//! Everything here is written from the definitions, not from the production
//! code: plain f64 loops over flat channel-major buffers. The crate is a
//! dev-dependency only and must stay free of `msic-core` imports so the
//! oracles cannot inherit a bug from the code they check.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Direct nested-loop 2D convolution: channel-major input (ci, h, w),
/// weight (co, ci, kh, kw), zero padding. Returns (data, (co, oh, ow)).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    input: &[f64],
    (ci, h, w): (usize, usize, usize),
    weight: &[f64],
    (co, wci, kh, kw): (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize, usize)) {
    assert_eq!(ci, wci);
    assert_eq!(input.len(), ci * h * w);
    assert_eq!(weight.len(), co * ci * kh * kw);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map(|b| b[oc]).unwrap_or(0.0);
                for ic in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let iv = input[(ic * h + iy as usize) * w + ix as usize];
                            let wv = weight[((oc * ci + ic) * kh + ky) * kw + kx];
                            acc += iv * wv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, (co, oh, ow))
}

/// Hand-computed Adam trajectory for a single scalar parameter.
pub fn adam_scalar_trajectory(
    x0: f64,
    grads: &[f64],
    lr_scales: &[f64],
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<f64> {
    assert_eq!(grads.len(), lr_scales.len());
    let mut x = x0;
    let mut m = 0.0;
    let mut v = 0.0;
    let mut out = Vec::with_capacity(grads.len());
    for (t, (&g, &s)) in grads.iter().zip(lr_scales.iter()).enumerate() {
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let mhat = m / (1.0 - beta1.powi(t as i32 + 1));
        let vhat = v / (1.0 - beta2.powi(t as i32 + 1));
        x -= alpha * s * mhat / (vhat.sqrt() + eps);
        out.push(x);
    }
    out
}

// --- clean-room MS-SSIM ------------------------------------------------

fn gaussian_window_2d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut w = vec![0.0; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            w[y * size + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn window_mean(plane: &[f64], w: usize, win: &[f64], size: usize, oy: usize, ox: usize) -> f64 {
    let mut acc = 0.0;
    for ky in 0..size {
        for kx in 0..size {
            acc += win[ky * size + kx] * plane[(oy + ky) * w + (ox + kx)];
        }
    }
    acc
}

fn mean_pool_2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (plane[(2 * y) * w + 2 * x]
                + plane[(2 * y) * w + 2 * x + 1]
                + plane[(2 * y + 1) * w + 2 * x]
                + plane[(2 * y + 1) * w + 2 * x + 1])
                / 4.0;
        }
    }
    (out, oh, ow)
}

/// Single-channel SSIM mean with an 11x11 (or `size`) Gaussian window over
/// valid positions: full SSIM index (luminance times contrast-structure),
/// C1 = 0.01^2, C2 = 0.03^2, dynamic range 1.
fn ssim_mean(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64], size: usize) -> f64 {
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mu_a = window_mean(a, w, win, size, oy, ox);
            let mu_b = window_mean(b, w, win, size, oy, ox);
            let mut e_aa = 0.0;
            let mut e_bb = 0.0;
            let mut e_ab = 0.0;
            for ky in 0..size {
                for kx in 0..size {
                    let av = a[(oy + ky) * w + (ox + kx)];
                    let bv = b[(oy + ky) * w + (ox + kx)];
                    let g = win[ky * size + kx];
                    e_aa += g * av * av;
                    e_bb += g * bv * bv;
                    e_ab += g * av * bv;
                }
            }
            let var_a = e_aa - mu_a * mu_a;
            let var_b = e_bb - mu_b * mu_b;
            let cov = e_ab - mu_a * mu_b;
            let lum = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
            let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
            total += lum * cs;
        }
    }
    total / (oh * ow) as f64
}

/// Clean-room MS-SSIM over channel-major (3, h, w) images in [0, 1]:
/// per-channel weighted geometric mean of per-scale mean SSIM (weights
/// 0.0448/0.2856/0.3001/0.2363/0.1333 renormalized when fewer than five
/// scales fit), 2x2 mean pooling between scales, averaged over channels.
pub fn msssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    const WINDOW: usize = 11;
    let win = gaussian_window_2d(WINDOW, 1.5);

    let mut scales = 0;
    {
        let (mut sh, mut sw) = (h, w);
        while scales < 5 && sh >= WINDOW && sw >= WINDOW {
            scales += 1;
            sh /= 2;
            sw /= 2;
        }
    }
    assert!(scales >= 1, "image too small for the SSIM window");
    let wsum: f64 = WEIGHTS[..scales].iter().sum();

    let mut channel_sum = 0.0;
    for c in 0..3 {
        let mut pa: Vec<f64> = a[c * h * w..(c + 1) * h * w].to_vec();
        let mut pb: Vec<f64> = b[c * h * w..(c + 1) * h * w].to_vec();
        let (mut sh, mut sw) = (h, w);
        let mut score = 1.0;
        for (s, &wt) in WEIGHTS[..scales].iter().enumerate() {
            let m = ssim_mean(&pa, &pb, sh, sw, &win, WINDOW);
            score *= m.max(1e-9).powf(wt / wsum);
            if s + 1 < scales {
                let (na, nh, nw) = mean_pool_2(&pa, sh, sw);
                let (nb, _, _) = mean_pool_2(&pb, sh, sw);
                pa = na;
                pb = nb;
                sh = nh;
                sw = nw;
            }
        }
        channel_sum += score;
    }
    channel_sum / 3.0
}

// --- synthetic corpus ---------------------------------------------------

/// Smooth structured test image: gradient base plus Gaussian blobs, a
/// sinusoidal texture and a solid rectangle. Returns channel-major
/// (3, h, w) values in [0, 1].
pub fn toy_image(rng: &mut ChaCha20Rng, h: usize, w: usize) -> Vec<f32> {
    let mut img = vec![0.0f64; 3 * h * w];
    // gradient base
    let ux: f64 = rng.gen_range(-1.0..1.0);
    let uy: f64 = rng.gen_range(-1.0..1.0);
    let base: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let amp: [f64; 3] = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = ux * x as f64 / w as f64 + uy * y as f64 / h as f64;
                img[(c * h + y) * w + x] = base[c] + amp[c] * t;
            }
        }
    }
    // blobs
    for _ in 0..rng.gen_range(1..4) {
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let sigma: f64 = rng.gen_range(0.08..0.35) * h.min(w) as f64;
        let gain: [f64; 3] = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(c * h + y) * w + x] += gain[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    // texture
    let fx: f64 = rng.gen_range(0.5..3.0);
    let fy: f64 = rng.gen_range(0.5..3.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let tex_amp: f64 = rng.gen_range(0.02..0.08);
    for c in 0..3 {
        let gain: f64 = rng.gen_range(0.3..1.0);
        for y in 0..h {
            for x in 0..w {
                let v = (std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                    + phase)
                    .sin();
                img[(c * h + y) * w + x] += tex_amp * gain * v;
            }
        }
    }
    // rectangle
    if rng.gen_bool(0.7) {
        let ry = rng.gen_range(0..h / 2);
        let rx = rng.gen_range(0..w / 2);
        let rh = rng.gen_range(h / 8..h / 2).max(1);
        let rw = rng.gen_range(w / 8..w / 2).max(1);
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let alpha: f64 = rng.gen_range(0.3..0.9);
        for c in 0..3 {
            for y in ry..(ry + rh).min(h) {
                for x in rx..(rx + rw).min(w) {
                    let i = (c * h + y) * w + x;
                    img[i] = (1.0 - alpha) * img[i] + alpha * color[c];
                }
            }
        }
    }
    img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()
}

/// Deterministic corpus of `count` toy images.
pub fn toy_corpus(seed: u64, count: usize, h: usize, w: usize) -> Vec<Vec<f32>> {
    use rand::SeedableRng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count).map(|_| toy_image(&mut rng, h, w)).collect()
}
