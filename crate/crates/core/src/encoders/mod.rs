//! Three frozen synthetic vision encoders (region / grid / patch) plus the
//! trainable per-encoder projection MLP.
//!
//! The encoders are frozen random linear/mixing stacks over the raster's
//! attribute channels, seeded per kind so the three are architecturally
//! and statistically distinct. They run outside the autodiff tape; only
//! the projection MLPs receive gradients.

mod cache;
mod grid;
mod patch;
mod region;

pub use cache::{read_token_cache, write_token_cache};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scene::{AttributeSpace, Raster, Scene};
use crate::tensor::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum VeKind {
    Region,
    Grid,
    Patch,
}

impl VeKind {
    pub const ALL: [VeKind; 3] = [VeKind::Region, VeKind::Grid, VeKind::Patch];

    pub fn as_str(&self) -> &'static str {
        match self {
            VeKind::Region => "region",
            VeKind::Grid => "grid",
            VeKind::Patch => "patch",
        }
    }

    pub fn parse(s: &str) -> Result<VeKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "region" => Ok(VeKind::Region),
            "grid" => Ok(VeKind::Grid),
            "patch" => Ok(VeKind::Patch),
            other => Err(CoreError::Config(format!(
                "unknown vision encoder `{other}` (expected region|grid|patch)"
            ))),
        }
    }
}

impl std::fmt::Display for VeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualToken {
    pub features: Vec<f64>,
    pub footprint: BBox<f64>,
    pub is_padding: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokenSet {
    pub kind: VeKind,
    pub feature_dim: usize,
    pub tokens: Vec<VisualToken>,
}

impl VisualTokenSet {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Flat [tokens, feature_dim] matrix for projection.
    pub fn feature_matrix(&self) -> Tensor<f64> {
        let mut data = Vec::with_capacity(self.tokens.len() * self.feature_dim);
        for t in &self.tokens {
            data.extend_from_slice(&t.features);
        }
        Tensor::new(vec![self.tokens.len(), self.feature_dim], data)
    }

    pub fn non_padding_indices(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.is_padding)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Geometry fields appended to every region feature: (x, y, w, h, w·h).
pub const REGION_GEOMETRY_FIELDS: usize = 5;
/// One salience channel sits right before the geometry fields.
pub const REGION_SALIENCE_FIELDS: usize = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VeConfig {
    pub region_tokens: usize,
    pub grid_tokens: usize,
    pub patch_tokens: usize,
    pub region_dim: usize,
    pub grid_dim: usize,
    pub patch_dim: usize,
    pub frozen_seed: u64,
    /// Std-dev of the per-scene jitter on region proposal coordinates.
    pub region_jitter_std: f64,
}

impl Default for VeConfig {
    fn default() -> Self {
        VeConfig {
            region_tokens: 36,
            grid_tokens: 36,
            patch_tokens: 49,
            region_dim: 48,
            grid_dim: 64,
            patch_dim: 24,
            frozen_seed: 0x7177,
            region_jitter_std: 0.02,
        }
    }
}

impl VeConfig {
    pub fn token_count(&self, kind: VeKind) -> usize {
        match kind {
            VeKind::Region => self.region_tokens,
            VeKind::Grid => self.grid_tokens,
            VeKind::Patch => self.patch_tokens,
        }
    }

    pub fn feature_dim(&self, kind: VeKind) -> usize {
        match kind {
            VeKind::Region => self.region_dim,
            VeKind::Grid => self.grid_dim,
            VeKind::Patch => self.patch_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let square = |n: usize| {
            let s = (n as f64).sqrt().round() as usize;
            s * s == n
        };
        if self.region_tokens < 1 || self.grid_tokens < 1 || self.patch_tokens < 1 {
            return Err(CoreError::Config("token counts must be >= 1".into()));
        }
        if !square(self.grid_tokens) {
            return Err(CoreError::Config(format!(
                "grid token count {} is not a perfect square",
                self.grid_tokens
            )));
        }
        if !square(self.patch_tokens) {
            return Err(CoreError::Config(format!(
                "patch token count {} is not a perfect square",
                self.patch_tokens
            )));
        }
        if self.region_dim <= REGION_GEOMETRY_FIELDS + REGION_SALIENCE_FIELDS {
            return Err(CoreError::Config(format!(
                "region dim {} leaves no room for content features",
                self.region_dim
            )));
        }
        Ok(())
    }
}

/// The three frozen encoders with their weights fixed at construction.
#[derive(Debug, Clone)]
pub struct FrozenEncoders {
    pub config: VeConfig,
    pub attributes: AttributeSpace,
    region: region::RegionEncoder,
    grid: grid::GridEncoder,
    patch: patch::PatchEncoder,
}

impl FrozenEncoders {
    pub fn new(attributes: AttributeSpace, config: VeConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.frozen_seed);
        Ok(FrozenEncoders {
            region: region::RegionEncoder::new(&config, attributes, &mut root.child(1)),
            grid: grid::GridEncoder::new(&config, attributes, &mut root.child(2))?,
            patch: patch::PatchEncoder::new(&config, attributes, &mut root.child(3)),
            config,
            attributes,
        })
    }

    pub fn encode(&self, kind: VeKind, raster: &Raster, scene: &Scene) -> Result<VisualTokenSet> {
        match kind {
            VeKind::Region => Ok(self.region.encode(raster, scene, &self.config)),
            VeKind::Grid => self.grid.encode(raster, &self.config),
            VeKind::Patch => Ok(self.patch.encode(raster, &self.config)),
        }
    }

    /// FNV-1a over the exact bit patterns of every frozen weight; used to
    /// assert bit-identity of the encoders across training.
    pub fn weight_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |vals: &[f64]| {
            for v in vals {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        };
        self.region.visit_weights(&mut eat);
        self.grid.visit_weights(&mut eat);
        self.patch.visit_weights(&mut eat);
        h
    }
}

/// Parameter ids of one encoder's trainable 2-layer projection MLP.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionIds {
    pub fn register(
        params: &mut ParamSet<f64>,
        prefix: &str,
        in_dim: usize,
        model_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        ProjectionIds {
            w1: params.add(format!("{prefix}.w1"), Tensor::glorot_uniform(in_dim, model_dim, rng)),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(vec![model_dim])),
            w2: params.add(format!("{prefix}.w2"), Tensor::glorot_uniform(model_dim, model_dim, rng)),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(vec![model_dim])),
        }
    }
}

/// Trainable projection of frozen tokens into the model dimension:
/// two linear layers with a GELU between them. The token features enter
/// the tape untracked, so no gradient can reach the frozen encoder.
pub fn project<S: Scalar>(
    g: &mut Graph<S>,
    params: &ParamSet<S>,
    ids: &ProjectionIds,
    tokens: &VisualTokenSet,
) -> Result<Var> {
    let in_dim = params.get(ids.w1).value.shape()[0];
    if in_dim != tokens.feature_dim {
        return Err(CoreError::Config(format!(
            "projection expects feature dim {in_dim}, token set has {}",
            tokens.feature_dim
        )));
    }
    let feats = tokens.feature_matrix();
    let data: Vec<S> = feats.data().iter().map(|&v| S::from_f64_lossy(v)).collect();
    let x = g.leaf(Tensor::new(feats.shape().to_vec(), data));

    let w1 = g.param(params, ids.w1);
    let b1 = g.param(params, ids.b1);
    let w2 = g.param(params, ids.w2);
    let b2 = g.param(params, ids.b2);
    let h = g.linear(x, w1, b1)?;
    let h = g.gelu(h);
    g.linear(h, w2, b2)
}
