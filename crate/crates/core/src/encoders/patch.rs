//! Patch encoder: the raster is padded with background cells to a square
//! multiple of the patch grid, split into uniform patches, embedded by a
//! frozen linear map plus a sinusoidal position code, and mixed once by a
//! frozen single-head self-attention layer with residual (every token sees
//! every other — the global receptive field). No classification token is
//! ever emitted.
//!
//! Footprints are expressed in the original canvas frame and clipped to
//! the unit square, so patches that fall entirely in the padding carry a
//! zero-area footprint and never enter any overlap set.

use crate::geometry::BBox;
use crate::rng::Rng;
use crate::scene::{AttributeSpace, Raster};

use super::{VeConfig, VeKind, VisualToken, VisualTokenSet};

#[derive(Debug, Clone)]
pub(super) struct PatchEncoder {
    /// [patch_cells * channels x dim] frozen patch embedding.
    embed: Vec<f64>,
    embed_bias: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    channels: usize,
    dim: usize,
}

impl PatchEncoder {
    pub(super) fn new(config: &VeConfig, attrs: AttributeSpace, rng: &mut Rng) -> Self {
        let channels = attrs.channels();
        let dim = config.patch_dim;
        // Embedding input size depends on the raster; weights are sized at
        // encode time by slicing this oversized frozen pool deterministically.
        let max_patch_cells = 64; // up to 8x8 cells per patch
        let mut sq = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.normal() * scale).collect()
        };
        // wv/wo are scaled so the mixed context stays comparable to the
        // residual instead of swamping it.
        PatchEncoder {
            embed: sq(max_patch_cells * channels * dim, 0.6),
            embed_bias: sq(dim, 0.1),
            wq: sq(dim * dim, 0.5),
            wk: sq(dim * dim, 0.5),
            wv: sq(dim * dim, 0.3),
            wo: sq(dim * dim, 0.15),
            channels,
            dim,
        }
    }

    pub(super) fn visit_weights(&self, eat: &mut impl FnMut(&[f64])) {
        eat(&self.embed);
        eat(&self.embed_bias);
        eat(&self.wq);
        eat(&self.wk);
        eat(&self.wv);
        eat(&self.wo);
    }

    pub(super) fn encode(&self, raster: &Raster, config: &VeConfig) -> VisualTokenSet {
        let side = (config.patch_tokens as f64).sqrt().round() as usize;
        let canvas = raster.width.max(raster.height);
        // Pad with background cells so the padded canvas splits uniformly.
        let patch_cells = canvas.div_ceil(side);
        let padded = patch_cells * side;
        let d = self.dim;
        let in_dim = patch_cells * patch_cells * self.channels;
        assert!(
            in_dim * d <= self.embed.len(),
            "patch embedding pool too small for {patch_cells}x{patch_cells} patches"
        );

        // Embed each patch: flatten cells (background = zero) -> linear -> +position code.
        let n = config.patch_tokens;
        let mut tokens_data = vec![0.0; n * d];
        for py in 0..side {
            for px in 0..side {
                let t = py * side + px;
                let mut flat = vec![0.0; in_dim];
                for cy in 0..patch_cells {
                    for cx in 0..patch_cells {
                        let (gx, gy) = (px * patch_cells + cx, py * patch_cells + cy);
                        if gx < raster.width && gy < raster.height {
                            let cell = raster.cell(gx, gy);
                            let base = (cy * patch_cells + cx) * self.channels;
                            flat[base..base + self.channels].copy_from_slice(cell);
                        }
                    }
                }
                for j in 0..d {
                    let mut s = self.embed_bias[j];
                    if j < self.channels {
                        // pass-through block: mean attribute channels of
                        // the patch's cells, scaled up so content is not
                        // drowned by the position code
                        let cells = (patch_cells * patch_cells) as f64;
                        for cy in 0..patch_cells {
                            for cx in 0..patch_cells {
                                s += 3.0 * flat[(cy * patch_cells + cx) * self.channels + j] / cells;
                            }
                        }
                    } else {
                        for (i, &v) in flat.iter().enumerate() {
                            s += v * self.embed[i * d + j];
                        }
                    }
                    // sinusoidal position code over the flattened patch index
                    let k = j / 2;
                    let angle = t as f64 / 10_000f64.powf(2.0 * k as f64 / d as f64);
                    s += 0.5 * if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    tokens_data[t * d + j] = s;
                }
            }
        }

        // One frozen self-attention pass with residual.
        let matvec = |w: &[f64], x: &[f64], out: &mut [f64]| {
            for j in 0..d {
                let mut s = 0.0;
                for (p, &xv) in x.iter().enumerate() {
                    s += xv * w[p * d + j];
                }
                out[j] = s;
            }
        };
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for t in 0..n {
            let x = &tokens_data[t * d..(t + 1) * d];
            matvec(&self.wq, x, &mut q[t * d..(t + 1) * d]);
            matvec(&self.wk, x, &mut k[t * d..(t + 1) * d]);
            matvec(&self.wv, x, &mut v[t * d..(t + 1) * d]);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut mixed = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for t in 0..n {
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for p in 0..d {
                    dot += q[t * d + p] * k[j * d + p];
                }
                *s = dot * scale;
            }
            crate::tensor::softmax_slice(&mut scores);
            let mut ctx = vec![0.0; d];
            for (j, &a) in scores.iter().enumerate() {
                for p in 0..d {
                    ctx[p] += a * v[j * d + p];
                }
            }
            let mut out = vec![0.0; d];
            matvec(&self.wo, &ctx, &mut out);
            for p in 0..d {
                mixed[t * d + p] = tokens_data[t * d + p] + out[p];
            }
        }

        // Footprints in the original canvas frame, clipped to [0,1].
        let cell_norm = 1.0 / raster.width.max(raster.height) as f64;
        let _ = padded;
        let mut tokens = Vec::with_capacity(n);
        for py in 0..side {
            for px in 0..side {
                let t = py * side + px;
                let x0 = (px * patch_cells) as f64 * cell_norm;
                let y0 = (py * patch_cells) as f64 * cell_norm;
                let x1 = (((px + 1) * patch_cells) as f64 * cell_norm).min(1.0);
                let y1 = (((py + 1) * patch_cells) as f64 * cell_norm).min(1.0);
                let footprint = BBox::new(
                    x0.min(1.0),
                    y0.min(1.0),
                    (x1 - x0).max(0.0),
                    (y1 - y0).max(0.0),
                );
                tokens.push(VisualToken {
                    features: mixed[t * d..(t + 1) * d].to_vec(),
                    footprint,
                    is_padding: false,
                });
            }
        }
        VisualTokenSet { kind: VeKind::Patch, feature_dim: d, tokens }
    }
}
