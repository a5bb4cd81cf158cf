//! Grid encoder: frozen per-cell linear map, one 3x3 local mixing pass
//! with replicate padding (keeps constant fields constant), then adaptive
//! max pooling onto a fixed square grid of tokens.
//!
//! Pooling windows partition the raster exactly — window `i` covers cell
//! rows `[floor(i·H/side), floor((i+1)·H/side))` — so token footprints are
//! disjoint and tile the canvas.

use crate::geometry::BBox;
use crate::rng::Rng;
use crate::scene::{AttributeSpace, Raster};
use crate::{CoreError, Result};

use super::{VeConfig, VeKind, VisualToken, VisualTokenSet};

#[derive(Debug, Clone)]
pub(super) struct GridEncoder {
    /// [channels x dim] per-cell frozen map.
    weight: Vec<f64>,
    bias: Vec<f64>,
    /// [3 x 3 x dim] per-offset per-feature mixing coefficients.
    mix: Vec<f64>,
    channels: usize,
    dim: usize,
}

impl GridEncoder {
    pub(super) fn new(config: &VeConfig, attrs: AttributeSpace, rng: &mut Rng) -> Result<Self> {
        let channels = attrs.channels();
        let dim = config.grid_dim;
        // First `channels` features pass the cell's attribute channels
        // through; the rest are a random frozen mix.
        let mut weight = vec![0.0; channels * dim];
        for c in 0..channels {
            for j in 0..dim {
                weight[c * dim + j] =
                    if j == c { 1.0 } else if j >= channels { rng.normal() } else { 0.0 };
            }
        }
        let bias = (0..dim)
            .map(|j| if j < channels { 0.0 } else { rng.normal() * 0.1 })
            .collect();
        Ok(GridEncoder {
            weight,
            bias,
            mix: (0..9 * dim).map(|_| rng.normal() * 0.25).collect(),
            channels,
            dim,
        })
    }

    pub(super) fn visit_weights(&self, eat: &mut impl FnMut(&[f64])) {
        eat(&self.weight);
        eat(&self.bias);
        eat(&self.mix);
    }

    pub(super) fn encode(&self, raster: &Raster, config: &VeConfig) -> Result<VisualTokenSet> {
        let side = (config.grid_tokens as f64).sqrt().round() as usize;
        let (w, h) = (raster.width, raster.height);
        if w < side || h < side {
            return Err(CoreError::Config(format!(
                "raster {w}x{h} smaller than pooled grid {side}x{side}"
            )));
        }

        // Stage 1: per-cell frozen linear map + tanh.
        let mut stage1 = vec![0.0; w * h * self.dim];
        for y in 0..h {
            for x in 0..w {
                let cell = raster.cell(x, y);
                let base = (y * w + x) * self.dim;
                for j in 0..self.dim {
                    let mut s = self.bias[j];
                    for (c, &v) in cell.iter().enumerate().take(self.channels) {
                        s += v * self.weight[c * self.dim + j];
                    }
                    stage1[base + j] = s.tanh();
                }
            }
        }

        // Stage 2: 3x3 local mixing with replicate padding plus residual.
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        let mut stage2 = vec![0.0; w * h * self.dim];
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * self.dim;
                for j in 0..self.dim {
                    let mut acc = stage1[base + j];
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let nx = clamp(x as isize + dx, w);
                            let ny = clamp(y as isize + dy, h);
                            let k = ((dy + 1) * 3 + (dx + 1)) as usize;
                            acc += self.mix[k * self.dim + j]
                                * stage1[(ny * w + nx) * self.dim + j];
                        }
                    }
                    stage2[base + j] = acc.tanh();
                }
            }
        }

        // Adaptive max pooling over exact partition windows.
        let bound = |i: usize, n: usize| i * n / side; // floor
        let mut tokens = Vec::with_capacity(config.grid_tokens);
        for gy in 0..side {
            for gx in 0..side {
                let (x0, x1) = (bound(gx, w), bound(gx + 1, w));
                let (y0, y1) = (bound(gy, h), bound(gy + 1, h));
                let mut features = vec![f64::NEG_INFINITY; self.dim];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let base = (y * w + x) * self.dim;
                        for (f, &v) in features.iter_mut().zip(&stage2[base..base + self.dim]) {
                            if v > *f {
                                *f = v;
                            }
                        }
                    }
                }
                let footprint = BBox::new(
                    x0 as f64 / w as f64,
                    y0 as f64 / h as f64,
                    (x1 - x0) as f64 / w as f64,
                    (y1 - y0) as f64 / h as f64,
                );
                tokens.push(VisualToken { features, footprint, is_padding: false });
            }
        }
        Ok(VisualTokenSet { kind: VeKind::Grid, feature_dim: self.dim, tokens })
    }
}
