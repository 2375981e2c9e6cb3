//! Inference: the backbone runs fully convolutionally over whole cubes in
//! eval mode (no gradient recording) and the anomalous-change intensity at
//! each pixel is the L2 norm over (channel, spectral) of the feature
//! difference.
//!
//! The tiled path produces the same scores as the whole-image path: tiles
//! carry a halo equal to the backbone's receptive radius, and the global
//! channel-attention descriptors are accumulated over all tile interiors in
//! a first pass before any gate is applied.

use super::{FeatureTap, MtcNetModel};
use crate::autodiff::{no_grad, Mode, Tensor};
use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::maps::ScoreMap;

fn check_pair(x1: &HsiCube, x2: &HsiCube) -> Result<()> {
    if !x1.same_dims(x2) {
        return Err(Error::shape(
            format!("{}x{}x{}", x1.height(), x1.width(), x1.bands()),
            format!("{}x{}x{}", x2.height(), x2.width(), x2.bands()),
        ));
    }
    Ok(())
}

/// Copy a spatial window of the cube into a [1, 1, C, rows, cols] tensor.
fn window_tensor(cube: &HsiCube, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
    let (rows, cols) = (r1 - r0, c1 - c0);
    let bands = cube.bands();
    let mut values = Vec::with_capacity(bands * rows * cols);
    for b in 0..bands {
        for r in r0..r1 {
            for c in c0..c1 {
                values.push(cube.get(r, c, b));
            }
        }
    }
    Tensor::from_vec(vec![1, 1, bands, rows, cols], values).unwrap()
}

/// Per-pixel L2 norm over (channel, depth) of the difference between two
/// [1, ch, D, H, W] feature volumes, restricted to a spatial window.
fn window_scores(
    f1: &Tensor,
    f2: &Tensor,
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    out: &mut [f64],
    out_width: usize,
    out_r0: usize,
    out_c0: usize,
) {
    let shape = f1.shape().to_vec();
    let (ch, d, h, w) = (shape[1], shape[2], shape[3], shape[4]);
    let v1 = f1.values();
    let v2 = f2.values();
    for r in r0..r1 {
        for c in c0..c1 {
            let mut sq = 0.0;
            for cc in 0..ch {
                for dd in 0..d {
                    let idx = ((cc * d + dd) * h + r) * w + c;
                    let diff = v1[idx] - v2[idx];
                    sq += diff * diff;
                }
            }
            out[(out_r0 + r - r0) * out_width + (out_c0 + c - c0)] = sq.sqrt();
        }
    }
}

/// Whole-image loss map: backbone features of both cubes (eval-mode batch
/// normalization), scored as the per-pixel feature-difference norm. Spatial
/// extents are preserved by same-padding; scores are nonnegative and zero
/// exactly where the features agree.
pub fn infer_loss_map(model: &MtcNetModel, x1: &HsiCube, x2: &HsiCube) -> Result<ScoreMap> {
    check_pair(x1, x2)?;
    no_grad(|| {
        let t1 = window_tensor(x1, 0, x1.height(), 0, x1.width());
        let t2 = window_tensor(x2, 0, x2.height(), 0, x2.width());
        let (_, f1) = model.backbone_forward(&t1, Mode::Eval)?;
        let (_, f2) = model.backbone_forward(&t2, Mode::Eval)?;
        let mut scores = vec![0.0; x1.pixel_count()];
        window_scores(
            &f1,
            &f2,
            0,
            x1.height(),
            0,
            x1.width(),
            &mut scores,
            x1.width(),
            0,
            0,
        );
        ScoreMap::new(x1.height(), x1.width(), scores)
    })
}

/// Running per-channel mean/max accumulator for the channel-attention
/// descriptors of one cube.
struct ChannelStats {
    sum: Vec<f64>,
    max: Vec<f64>,
    count: usize,
}

impl ChannelStats {
    fn new(channels: usize) -> Self {
        ChannelStats {
            sum: vec![0.0; channels],
            max: vec![f64::NEG_INFINITY; channels],
            count: 0,
        }
    }

    /// Fold in the interior window [r0, r1) x [c0, c1) of a [1, ch, D, H, W]
    /// feature tile.
    fn fold(&mut self, f: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) {
        let shape = f.shape().to_vec();
        let (ch, d, h, w) = (shape[1], shape[2], shape[3], shape[4]);
        let v = f.values();
        for cc in 0..ch {
            for dd in 0..d {
                for r in r0..r1 {
                    let base = ((cc * d + dd) * h + r) * w;
                    for c in c0..c1 {
                        let val = v[base + c];
                        self.sum[cc] += val;
                        if val > self.max[cc] {
                            self.max[cc] = val;
                        }
                    }
                }
            }
        }
        self.count += d * (r1 - r0) * (c1 - c0);
    }

    fn gate(&self, model: &MtcNetModel) -> Result<Tensor> {
        let ch = self.sum.len();
        let mean: Vec<f64> = self.sum.iter().map(|s| s / self.count as f64).collect();
        let mean_t = Tensor::from_vec(vec![1, ch], mean)?;
        let max_t = Tensor::from_vec(vec![1, ch], self.max.clone())?;
        model.channel_gate(&mean_t, &max_t)
    }
}

/// Tile bounds covering [0, extent) with the given tile size.
fn tile_ranges(extent: usize, tile: usize) -> Vec<(usize, usize)> {
    (0..extent)
        .step_by(tile)
        .map(|start| (start, (start + tile).min(extent)))
        .collect()
}

/// Tiled loss map over spatial blocks with overlap equal to the backbone's
/// receptive radius; scores match [`infer_loss_map`] up to floating-point
/// summation order in the pooled channel descriptor.
pub fn infer_loss_map_tiled(
    model: &MtcNetModel,
    x1: &HsiCube,
    x2: &HsiCube,
    tile: usize,
) -> Result<ScoreMap> {
    check_pair(x1, x2)?;
    if tile == 0 {
        return Err(Error::InvalidConfig {
            message: "tile size must be >= 1".into(),
        });
    }
    let (height, width) = (x1.height(), x1.width());
    let (rad_h, rad_w) = model.arch().receptive_radius();
    // Backbone radius excluding the attention conv.
    let bb_h = rad_h - (model.arch().kernel.1 - 1) / 2;
    let bb_w = rad_w - (model.arch().kernel.2 - 1) / 2;
    let att_h = rad_h - bb_h;
    let att_w = rad_w - bb_w;

    no_grad(|| {
        let row_tiles = tile_ranges(height, tile);
        let col_tiles = tile_ranges(width, tile);
        let mut scores = vec![0.0; height * width];

        let run_backbone = |cube: &HsiCube,
                            r0: usize,
                            r1: usize,
                            c0: usize,
                            c1: usize,
                            halo_h: usize,
                            halo_w: usize|
         -> Result<(Tensor, usize, usize)> {
            // Clamp the halo at the image border, where zero padding is the
            // true whole-image behavior anyway.
            let rr0 = r0.saturating_sub(halo_h);
            let rr1 = (r1 + halo_h).min(height);
            let cc0 = c0.saturating_sub(halo_w);
            let cc1 = (c1 + halo_w).min(width);
            let input = window_tensor(cube, rr0, rr1, cc0, cc1);
            let h1 = model.resnet1_forward(&input, Mode::Eval)?;
            let h2 = model.resnet2_forward(&h1, Mode::Eval)?;
            Ok((h2, r0 - rr0, c0 - cc0))
        };

        let needs_attention = model.arch().feature_tap == FeatureTap::AfterAttention;
        let gates = if needs_attention {
            // Pass 1: accumulate the global channel descriptors of both
            // cubes over tile interiors.
            let mut stats1 = ChannelStats::new(model.arch().c2);
            let mut stats2 = ChannelStats::new(model.arch().c2);
            for &(r0, r1) in &row_tiles {
                for &(c0, c1) in &col_tiles {
                    for (cube, stats) in [(x1, &mut stats1), (x2, &mut stats2)] {
                        let (h2, off_r, off_c) = run_backbone(cube, r0, r1, c0, c1, bb_h, bb_w)?;
                        stats.fold(&h2, off_r, off_r + (r1 - r0), off_c, off_c + (c1 - c0));
                    }
                }
            }
            Some((stats1.gate(model)?, stats2.gate(model)?))
        } else {
            None
        };

        // Pass 2: recompute per tile, apply attention with the fixed global
        // gates, and write the interior scores.
        for &(r0, r1) in &row_tiles {
            for &(c0, c1) in &col_tiles {
                let mut features = Vec::with_capacity(2);
                for (cube, which) in [(x1, 0usize), (x2, 1usize)] {
                    let (h2, off_r, off_c) =
                        run_backbone(cube, r0, r1, c0, c1, bb_h + att_h, bb_w + att_w)?;
                    let feature = match &gates {
                        Some(pair) => {
                            let gate = if which == 0 { &pair.0 } else { &pair.1 };
                            model.apply_attention(&h2, gate)?
                        }
                        None => h2,
                    };
                    features.push((feature, off_r, off_c));
                }
                let (f1, or1, oc1) = &features[0];
                let (f2, _, _) = &features[1];
                window_scores(
                    f1,
                    f2,
                    *or1,
                    *or1 + (r1 - r0),
                    *oc1,
                    *oc1 + (c1 - c0),
                    &mut scores,
                    width,
                    r0,
                    c0,
                );
            }
        }
        ScoreMap::new(height, width, scores)
    })
}
