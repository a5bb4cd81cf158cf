//! Region encoder: object-box proposals with per-scene jitter, padded to a
//! fixed token count with low-salience full-canvas background boxes.
//!
//! Feature layout per token: frozen linear map of the proposal's pooled
//! attribute channels, then one salience channel, then the five geometry
//! fields (x, y, w, h, w·h) — geometry always occupies the last five slots.

use crate::geometry::BBox;
use crate::rng::{splitmix64, Rng};
use crate::scene::{box_to_cells, AttributeSpace, Raster, Scene};

use super::{VeConfig, VeKind, VisualToken, VisualTokenSet, REGION_GEOMETRY_FIELDS, REGION_SALIENCE_FIELDS};

#[derive(Debug, Clone)]
pub(super) struct RegionEncoder {
    /// [channels x content_dim] frozen map of pooled attribute channels.
    weight: Vec<f64>,
    bias: Vec<f64>,
    channels: usize,
    content_dim: usize,
}

impl RegionEncoder {
    pub(super) fn new(config: &VeConfig, attrs: AttributeSpace, rng: &mut Rng) -> Self {
        let channels = attrs.channels();
        let content_dim = config.region_dim - REGION_GEOMETRY_FIELDS - REGION_SALIENCE_FIELDS;
        // Frozen linear map whose first `channels` outputs pass the pooled
        // attribute channels through (object-aligned features, as a
        // detector head would expose), the rest a random mix.
        let mut weight = vec![0.0; channels * content_dim];
        for c in 0..channels {
            for j in 0..content_dim {
                weight[c * content_dim + j] =
                    if j == c { 1.0 } else if j >= channels { rng.normal() } else { 0.0 };
            }
        }
        let bias = (0..content_dim)
            .map(|j| if j < channels { 0.0 } else { rng.normal() * 0.1 })
            .collect();
        RegionEncoder { weight, bias, channels, content_dim }
    }

    pub(super) fn visit_weights(&self, eat: &mut impl FnMut(&[f64])) {
        eat(&self.weight);
        eat(&self.bias);
    }

    /// Mean attribute vector over the cells covered by `bbox`.
    fn pool(&self, raster: &Raster, bbox: &BBox<f64>) -> Vec<f64> {
        let (x0, x1, y0, y1) = box_to_cells(bbox, raster.width);
        let (x1, y1) = (x1.max(x0 + 1).min(raster.width), y1.max(y0 + 1).min(raster.height));
        let x0 = x0.min(raster.width - 1);
        let y0 = y0.min(raster.height - 1);
        let mut acc = vec![0.0; self.channels];
        let mut n = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                for (a, &v) in acc.iter_mut().zip(raster.cell(x, y)) {
                    *a += v;
                }
                n += 1.0;
            }
        }
        for a in acc.iter_mut() {
            *a /= n;
        }
        acc
    }

    fn features_for(&self, raster: &Raster, bbox: &BBox<f64>, salience: f64, dim: usize) -> Vec<f64> {
        let pooled = self.pool(raster, bbox);
        let mut out = Vec::with_capacity(dim);
        for j in 0..self.content_dim {
            let mut s = self.bias[j];
            for (c, &p) in pooled.iter().enumerate() {
                s += p * self.weight[c * self.content_dim + j];
            }
            out.push(s);
        }
        out.push(salience);
        out.extend_from_slice(&[bbox.x, bbox.y, bbox.w, bbox.h, bbox.w * bbox.h]);
        debug_assert_eq!(out.len(), dim);
        out
    }

    pub(super) fn encode(&self, raster: &Raster, scene: &Scene, config: &VeConfig) -> VisualTokenSet {
        // Per-scene jitter stream derived from the frozen seed, so the
        // proposals are deterministic per (frozen seed, scene).
        let mut sm = config.frozen_seed ^ scene.scene_id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut jitter_rng = Rng::new(splitmix64(&mut sm));

        let occupancy_channel = scene.attributes.channels() - 1;
        let mut tokens = Vec::with_capacity(config.region_tokens);
        for obj in scene.objects.iter().take(config.region_tokens) {
            let dx = jitter_rng.normal() * config.region_jitter_std;
            let dy = jitter_rng.normal() * config.region_jitter_std;
            let x = (obj.bbox.x + dx).clamp(0.0, 1.0 - obj.bbox.w);
            let y = (obj.bbox.y + dy).clamp(0.0, 1.0 - obj.bbox.h);
            let proposal = BBox::new(x, y, obj.bbox.w, obj.bbox.h);
            let pooled = self.pool(raster, &proposal);
            let salience = pooled[occupancy_channel];
            tokens.push(VisualToken {
                features: self.features_for(raster, &proposal, salience, config.region_dim),
                footprint: proposal,
                is_padding: false,
            });
        }
        // Pad with zero-salience background boxes spanning the canvas.
        let full = BBox::new(0.0, 0.0, 1.0, 1.0);
        while tokens.len() < config.region_tokens {
            let mut features = vec![0.0; config.region_dim - REGION_GEOMETRY_FIELDS - REGION_SALIENCE_FIELDS];
            for (j, f) in features.iter_mut().enumerate() {
                *f = self.bias[j]; // frozen map of the zero attribute vector
            }
            features.push(0.0); // salience
            features.extend_from_slice(&[full.x, full.y, full.w, full.h, full.w * full.h]);
            tokens.push(VisualToken { features, footprint: full, is_padding: true });
        }
        VisualTokenSet { kind: VeKind::Region, feature_dim: config.region_dim, tokens }
    }
}
