//! Coding geometry for the parallel coarse-to-fine lossless coder.
//!
//! All quantized scales are unpooled to the finest quantized resolution and
//! concatenated (`IntegratedMap`). Positions of that grid are then coded in
//! a fixed schedule: a sparse seed grid first (stride 2^(K/2), coded from
//! per-channel histograms), then K steps in pairs that halve the stride —
//! first the diagonal centers of the current cells, then the axis midpoints.
//! Every step's targets only condition on positions already coded, and each
//! channel is coded once, at the top-left (owner) position of its unpooled
//! block; every other position of the block copies the owner's value.

use crate::error::{Error, Result};
use crate::tensor::{LevelMap, QuantizedFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Targets at offset (s/2, s/2) within each stride-s cell.
    DiagonalCenters,
    /// Targets at offsets (0, s/2) and (s/2, 0) within each stride-s cell.
    AxisMidpoints,
}

#[derive(Debug, Clone)]
pub struct ScheduleStep {
    /// Index into the trained per-step context models (0-based, stable
    /// under block dropping).
    pub index: usize,
    pub kind: StepKind,
    /// Cell stride this step subdivides.
    pub stride: usize,
    /// Target positions in row-major order.
    pub targets: Vec<(u16, u16)>,
}

#[derive(Debug, Clone)]
pub struct GridSchedule {
    pub height: usize,
    pub width: usize,
    /// Number of steps the schedule was built with (the trained K).
    pub k_total: usize,
    /// Leading steps replaced by a denser seed grid.
    pub dropped: usize,
    /// Stride of the histogram-coded seed grid.
    pub seed_stride: usize,
    pub steps: Vec<ScheduleStep>,
}

/// Builds the K-step schedule for an `height x width` finest grid. K must
/// be even and both dims divisible by 2^(K/2); images are padded upstream
/// to satisfy this.
pub fn build_schedule(height: usize, width: usize, k: usize) -> Result<GridSchedule> {
    if !k.is_multiple_of(2) {
        return Err(Error::config("block count K must be even"));
    }
    let seed_stride = 1usize << (k / 2);
    if !height.is_multiple_of(seed_stride) || !width.is_multiple_of(seed_stride) {
        return Err(Error::config(format!(
            "grid {height}x{width} not divisible by seed stride {seed_stride}; pad the input"
        )));
    }
    let mut steps = Vec::with_capacity(k);
    let mut stride = seed_stride;
    let mut index = 0;
    while stride > 1 {
        let half = stride / 2;
        let mut diag = Vec::new();
        let mut axis = Vec::new();
        for y in (0..height).step_by(half) {
            for x in (0..width).step_by(half) {
                let oy = y % stride;
                let ox = x % stride;
                if oy == half && ox == half {
                    diag.push((y as u16, x as u16));
                } else if (oy == 0 && ox == half) || (oy == half && ox == 0) {
                    axis.push((y as u16, x as u16));
                }
            }
        }
        steps.push(ScheduleStep {
            index,
            kind: StepKind::DiagonalCenters,
            stride,
            targets: diag,
        });
        steps.push(ScheduleStep {
            index: index + 1,
            kind: StepKind::AxisMidpoints,
            stride,
            targets: axis,
        });
        index += 2;
        stride = half;
    }
    Ok(GridSchedule {
        height,
        width,
        k_total: k,
        dropped: 0,
        seed_stride,
        steps,
    })
}

impl GridSchedule {
    /// Seed-grid positions in row-major order.
    pub fn seed_positions(&self) -> Vec<(u16, u16)> {
        let mut out = Vec::new();
        for y in (0..self.height).step_by(self.seed_stride) {
            for x in (0..self.width).step_by(self.seed_stride) {
                out.push((y as u16, x as u16));
            }
        }
        out
    }

    /// Steps that remain active (after any block dropping).
    pub fn active_steps(&self) -> &[ScheduleStep] {
        &self.steps
    }

    /// Known-position mask after the seed grid and the first `upto` active
    /// steps; this is exactly the conditioning set of step `upto`.
    pub fn known_mask(&self, upto: usize) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        for (y, x) in self.seed_positions() {
            mask[y as usize * self.width + x as usize] = true;
        }
        for step in &self.steps[..upto] {
            for &(y, x) in &step.targets {
                mask[y as usize * self.width + x as usize] = true;
            }
        }
        mask
    }

    /// Drops the first `n` conditional steps, densifying the seed grid to
    /// stride 2^((K-n)/2). The remaining steps are unchanged and keep their
    /// trained model indices.
    pub fn drop_leading_blocks(&self, n: usize) -> Result<GridSchedule> {
        if n == 0 {
            return Ok(self.clone());
        }
        if !n.is_multiple_of(2) {
            return Err(Error::config("dropped block count must be even"));
        }
        let remaining = self.steps.len();
        if n > remaining {
            return Err(Error::config(format!(
                "cannot drop {n} blocks from a schedule with {remaining} steps"
            )));
        }
        Ok(GridSchedule {
            height: self.height,
            width: self.width,
            k_total: self.k_total,
            dropped: self.dropped + n,
            seed_stride: self.seed_stride >> (n / 2),
            steps: self.steps[n..].to_vec(),
        })
    }
}

/// Origin metadata for one channel of the integrated map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelInfo {
    /// Scale the channel came from (0 = finest quantized scale).
    pub scale: usize,
    /// Unpooling factor; the channel is block-constant over stride x stride
    /// blocks whose top-left position owns the value.
    pub stride: usize,
}

/// All quantized scales unpooled to the finest quantized resolution and
/// concatenated along channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegratedMap {
    pub channels: Vec<ChannelInfo>,
    pub grid: LevelMap,
}

#[inline]
pub fn is_owner(y: usize, x: usize, stride: usize) -> bool {
    y.is_multiple_of(stride) && x.is_multiple_of(stride)
}

/// Unpools every scale to the resolution of the densest non-empty scale
/// (nearest neighbor) and concatenates the channels, finest scale first.
pub fn integrate(features: &QuantizedFeatures) -> Result<IntegratedMap> {
    let finest_idx = features
        .maps
        .iter()
        .position(|m| m.channels > 0)
        .ok_or_else(|| Error::config("no non-empty scales to integrate"))?;
    let (h, w) = {
        let m = &features.maps[finest_idx];
        (m.height, m.width)
    };
    let mut channels = Vec::new();
    let mut total = 0;
    for (i, m) in features.maps.iter().enumerate() {
        if m.channels == 0 {
            continue;
        }
        let stride = 1usize << (i - finest_idx);
        if m.height * stride != h || m.width * stride != w {
            return Err(Error::config(format!(
                "scale {i} dims {}x{} inconsistent with densest {h}x{w}",
                m.height, m.width
            )));
        }
        for _ in 0..m.channels {
            channels.push(ChannelInfo { scale: i, stride });
        }
        total += m.channels;
    }
    let mut grid = LevelMap::zeros(total, h, w);
    let mut c_off = 0;
    for (i, m) in features.maps.iter().enumerate() {
        if m.channels == 0 {
            continue;
        }
        let stride = 1usize << (i - finest_idx);
        for c in 0..m.channels {
            for y in 0..h {
                for x in 0..w {
                    grid.set(c_off + c, y, x, m.at(c, y / stride, x / stride));
                }
            }
        }
        c_off += m.channels;
    }
    Ok(IntegratedMap { channels, grid })
}

impl IntegratedMap {
    /// Splits an integrated map back into per-scale level maps, reading
    /// each channel at its owner positions. `shapes` gives (channels, h, w)
    /// per scale, including empty scales.
    pub fn split(&self, shapes: &[(usize, usize, usize)]) -> QuantizedFeatures {
        let (h, _w) = (self.grid.height, self.grid.width);
        let mut maps = Vec::with_capacity(shapes.len());
        let mut c_off = 0;
        for &(ci, sh, sw) in shapes {
            let mut m = LevelMap::zeros(ci, sh, sw);
            if ci > 0 {
                let stride = h / sh;
                for c in 0..ci {
                    for y in 0..sh {
                        for x in 0..sw {
                            m.set(c, y, x, self.grid.at(c_off + c, y * stride, x * stride));
                        }
                    }
                }
                c_off += ci;
            }
            maps.push(m);
        }
        QuantizedFeatures { maps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LevelMap;

    #[test]
    fn four_by_four_k2_counts() {
        let s = build_schedule(4, 4, 2).unwrap();
        assert_eq!(s.seed_positions().len(), 4);
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[0].kind, StepKind::DiagonalCenters);
        assert_eq!(s.steps[0].targets.len(), 4);
        assert_eq!(s.steps[1].kind, StepKind::AxisMidpoints);
        assert_eq!(s.steps[1].targets.len(), 8);
        let total = 4 + 4 + 8;
        assert_eq!(total, 16);
    }

    #[test]
    fn eight_by_eight_k4_known_counts() {
        let s = build_schedule(8, 8, 4).unwrap();
        assert_eq!(s.seed_positions().len(), 4);
        let after_pair1 = s.known_mask(2).iter().filter(|&&b| b).count();
        assert_eq!(after_pair1, 16);
        let after_pair2 = s.known_mask(4).iter().filter(|&&b| b).count();
        assert_eq!(after_pair2, 64);
    }

    #[test]
    fn k0_is_all_seed() {
        let s = build_schedule(6, 10, 0).unwrap();
        assert!(s.steps.is_empty());
        assert_eq!(s.seed_positions().len(), 60);
    }

    #[test]
    fn divisibility_enforced() {
        assert!(build_schedule(6, 6, 2).is_ok()); // 6 divisible by 2
        assert!(build_schedule(6, 6, 4).is_err()); // but not by 4
        assert!(build_schedule(4, 4, 3).is_err()); // odd K
        assert!(build_schedule(8, 8, 4).is_ok());
    }

    #[test]
    fn steps_partition_non_seed_positions() {
        for (h, w, k) in [(4usize, 4usize, 2usize), (8, 8, 4), (16, 8, 4), (16, 16, 8)] {
            let s = build_schedule(h, w, k).unwrap();
            let mut seen = vec![0u8; h * w];
            for (y, x) in s.seed_positions() {
                seen[y as usize * w + x as usize] += 1;
            }
            for step in &s.steps {
                for &(y, x) in &step.targets {
                    seen[y as usize * w + x as usize] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{h}x{w} K={k} not a partition");
        }
    }

    #[test]
    fn decodability_topological_order() {
        // Every target of step i must be unknown before step i, and the
        // block owner of any channel stride must come no later than the
        // other positions of its block.
        for (h, w, k) in [(8usize, 8usize, 4usize), (16, 16, 6), (32, 16, 4)] {
            let s = build_schedule(h, w, k).unwrap();
            for (i, step) in s.steps.iter().enumerate() {
                let known = s.known_mask(i);
                for &(y, x) in &step.targets {
                    assert!(
                        !known[y as usize * w + x as usize],
                        "position targeted twice"
                    );
                }
            }
        }
    }

    #[test]
    fn drop_leading_blocks_densifies_seed() {
        let s = build_schedule(16, 16, 4).unwrap();
        assert_eq!(s.seed_stride, 4);
        let d = s.drop_leading_blocks(2).unwrap();
        assert_eq!(d.seed_stride, 2);
        assert_eq!(d.steps.len(), 2);
        assert_eq!(d.steps[0].index, 2);
        let full = s.drop_leading_blocks(4).unwrap();
        assert_eq!(full.seed_stride, 1);
        assert!(full.steps.is_empty());
        let identity = s.drop_leading_blocks(0).unwrap();
        assert_eq!(identity.seed_stride, s.seed_stride);
        assert_eq!(identity.steps.len(), s.steps.len());
    }

    #[test]
    fn integrate_two_scales() {
        let fine = LevelMap {
            channels: 1,
            height: 4,
            width: 4,
            data: (0..16).map(|v| v as u8).collect(),
        };
        let coarse = LevelMap {
            channels: 1,
            height: 2,
            width: 2,
            data: vec![9, 8, 7, 6],
        };
        let q = QuantizedFeatures {
            maps: vec![fine.clone(), coarse],
        };
        let im = integrate(&q).unwrap();
        assert_eq!(im.grid.channels, 2);
        assert_eq!(im.channels[0], ChannelInfo { scale: 0, stride: 1 });
        assert_eq!(im.channels[1], ChannelInfo { scale: 1, stride: 2 });
        // Second channel block-constant over 2x2 blocks.
        for (y, x, v) in [(0, 0, 9u8), (0, 1, 9), (1, 1, 9), (0, 2, 8), (3, 0, 7), (2, 3, 6)] {
            assert_eq!(im.grid.at(1, y, x), v);
        }
        let back = im.split(&[(1, 4, 4), (1, 2, 2)]);
        assert_eq!(back, q);
    }

    #[test]
    fn integrate_single_scale_is_identity() {
        let fine = LevelMap {
            channels: 2,
            height: 4,
            width: 4,
            data: (0..32).map(|v| (v % 5) as u8).collect(),
        };
        let q = QuantizedFeatures { maps: vec![fine.clone()] };
        let im = integrate(&q).unwrap();
        assert_eq!(im.grid, fine);
    }
}
