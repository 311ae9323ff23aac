//! Multi-level deterministic quantizer.
//!
//! Features are batch-normalized, clipped to [0, u], scaled into [0, N-1]
//! and rounded with round(x) = ceil(x - 0.5). Training replaces the rounding
//! with the smooth surrogate round_soft(x) = x - alpha*sin(2*pi*x)/(2*pi) on
//! the backward pass only; forward always sees real integer levels.

use crate::graph::{Graph, NodeId};
use crate::tensor::{FeatureTensor, LevelMap, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    /// Clip upper bound applied after batch norm.
    pub u: f64,
    /// Number of levels; quantized values live in 0..n_levels.
    pub n_levels: u8,
    /// Soft-round amplitude; must stay below 1 for monotonicity.
    pub alpha: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            u: 4.0,
            n_levels: 7,
            alpha: 0.5,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.u <= 0.0 {
            return Err(crate::error::Error::config("quantizer clip bound u must be positive"));
        }
        if self.n_levels < 2 {
            return Err(crate::error::Error::config("quantizer needs at least 2 levels"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(crate::error::Error::config("soft-round alpha must be in [0, 1)"));
        }
        Ok(())
    }

    /// Scale factor from clipped range [0, u] to level range [0, N-1].
    pub fn expand(&self) -> f64 {
        (self.n_levels as f64 - 1.0) / self.u
    }
}

/// Hard rounding: ceil(x - 0.5). Half points round down (2.5 -> 2).
#[inline]
pub fn round_hard(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// Smooth surrogate used on the backward pass; fixes every integer and
/// half-integer, strictly increasing for alpha < 1.
#[inline]
pub fn round_soft(x: f64, alpha: f64) -> f64 {
    x - alpha * (std::f64::consts::TAU * x).sin() / std::f64::consts::TAU
}

/// d/dx round_soft.
#[inline]
pub fn round_soft_deriv(x: f64, alpha: f64) -> f64 {
    1.0 - alpha * (std::f64::consts::TAU * x).cos()
}

/// Clip + scale applied to an already batch-normalized map. The graph form
/// of the same composition lives in `preprocess_node`.
pub fn preprocess_value(post_bn: f64, cfg: &QuantizerConfig) -> f64 {
    post_bn.clamp(0.0, cfg.u) * cfg.expand()
}

/// Graph node chain: clamp(x, 0, u) * (N-1)/u.
pub fn preprocess_node<T: Scalar>(g: &mut Graph<T>, post_bn: NodeId, cfg: &QuantizerConfig) -> NodeId {
    let clipped = g.clamp(post_bn, T::zero(), T::c(cfg.u));
    g.mul_scalar(clipped, T::c(cfg.expand()))
}

/// Quantize a preprocessed node. `hard` selects integer forward (codec and
/// training forward) versus the soft surrogate forward (gradient checks).
pub fn quantize_node<T: Scalar>(g: &mut Graph<T>, pre: NodeId, cfg: &QuantizerConfig, hard: bool) -> NodeId {
    if hard {
        g.round_hard_ste(pre, T::c(cfg.alpha))
    } else {
        g.round_soft_ste(pre, T::c(cfg.alpha))
    }
}

/// Eval-path quantization of a plain feature map that has already been
/// preprocessed into [0, N-1]; returns integer levels.
pub fn quantize_map<T: Scalar>(pre: &FeatureTensor<T>, cfg: &QuantizerConfig) -> LevelMap {
    let mut out = LevelMap::zeros(pre.channels, pre.height, pre.width);
    for (dst, &v) in out.data.iter_mut().zip(pre.data.iter()) {
        let lvl = round_hard(v.f64()).clamp(0, cfg.n_levels as i64 - 1);
        *dst = lvl as u8;
    }
    out
}
