//! Synthetic scene generation: attributed objects with gold boxes, cell
//! rasters, captions and questions with grounded phrase spans.
//!
//! Scenes are the desk-scale stand-in for photographic datasets. A scene
//! is a small grid canvas with 2..=5 attributed objects (shape, color,
//! size); the raster encodes per-cell attribute channels that the frozen
//! vision encoders consume. Everything is a pure function of its seed.

mod task;
mod vocab;

pub use task::{
    caption_with_spans, is_resample_signal, make_matching_example, make_matching_example_forced,
    make_qa_example, PhraseSpan, TaskExample, TaskKind,
};
pub use vocab::Vocabulary;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::rng::Rng;
use crate::{CoreError, Result};

pub const SHAPE_NAMES: [&str; 5] = ["circle", "square", "triangle", "diamond", "star"];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SIZE_NAMES: [&str; 3] = ["small", "medium", "large"];

/// Cell extent per size category on the default 16-cell canvas.
const SIZE_EXTENT_CELLS: [usize; 3] = [3, 5, 7];

/// Attribute universe; fixes the raster channel layout:
/// one-hot shape ++ one-hot color ++ scalar size ++ occupancy bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpace {
    pub shapes: usize,
    pub colors: usize,
    pub sizes: usize,
}

impl Default for AttributeSpace {
    fn default() -> Self {
        AttributeSpace { shapes: SHAPE_NAMES.len(), colors: COLOR_NAMES.len(), sizes: SIZE_NAMES.len() }
    }
}

impl AttributeSpace {
    pub fn channels(&self) -> usize {
        self.shapes + self.colors + 2
    }

    /// Per-cell encoding of one object; background cells stay all-zero.
    pub fn encode(&self, obj: &SceneObject) -> Vec<f64> {
        let mut v = vec![0.0; self.channels()];
        v[obj.shape] = 1.0;
        v[self.shapes + obj.color] = 1.0;
        v[self.shapes + self.colors] = (obj.size + 1) as f64 / self.sizes as f64;
        v[self.shapes + self.colors + 1] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    /// Canvas side length in cells (square canvas).
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub attributes: AttributeSpace,
    /// Forbid two objects sharing the same (shape, color) pair.
    pub unique_attribute_pairs: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            canvas: 16,
            min_objects: 2,
            max_objects: 5,
            attributes: AttributeSpace::default(),
            unique_attribute_pairs: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 8 {
            return Err(CoreError::Config(format!("canvas {} below minimum 8", self.canvas)));
        }
        if self.max_objects < 1 || self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(CoreError::Config(format!(
                "invalid object count range {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.unique_attribute_pairs
            && self.max_objects > self.attributes.shapes * self.attributes.colors
        {
            return Err(CoreError::Generation(format!(
                "cannot place {} objects with unique (shape,color) pairs in a {}x{} attribute space",
                self.max_objects, self.attributes.shapes, self.attributes.colors
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: usize,
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    pub bbox: BBox<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub canvas: usize,
    pub attributes: AttributeSpace,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn object(&self, object_id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn validate(&self, config: &SceneConfig) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > config.max_objects {
            return Err(CoreError::Generation(format!(
                "scene {} has {} objects outside 1..={}",
                self.scene_id,
                self.objects.len(),
                config.max_objects
            )));
        }
        let mut ids: Vec<usize> = self.objects.iter().map(|o| o.object_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return Err(CoreError::Generation("duplicate object ids".into()));
        }
        for o in &self.objects {
            if !o.bbox.is_normalized() || o.bbox.w <= 0.0 || o.bbox.h <= 0.0 {
                return Err(CoreError::Generation(format!(
                    "object {} box {:?} outside canvas",
                    o.object_id, o.bbox
                )));
            }
        }
        Ok(())
    }
}

/// Cell raster with attribute-channel vectors, laid out `[y][x][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Cell range `[x0, x1) x [y0, y1)` covered by a normalized box on a
/// `canvas`-cell grid. Generator boxes are cell-aligned so this is exact.
pub fn box_to_cells(bbox: &BBox<f64>, canvas: usize) -> (usize, usize, usize, usize) {
    let w = canvas as f64;
    let x0 = (bbox.x * w).round().max(0.0) as usize;
    let y0 = (bbox.y * w).round().max(0.0) as usize;
    let x1 = ((bbox.x + bbox.w) * w).round().min(w) as usize;
    let y1 = ((bbox.y + bbox.h) * w).round().min(w) as usize;
    (x0, x1.max(x0), y0, y1.max(y0))
}

/// Deterministic scene sampler. Objects get cell-aligned boxes sized by
/// their size category; placement retries keep pairwise box IoU low so
/// later objects rarely bury earlier ones.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = Rng::new(seed).child(0x5ce8e);
    let attrs = config.attributes;
    let count = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);

    let mut used_pairs: Vec<(usize, usize)> = Vec::new();
    let mut objects: Vec<SceneObject> = Vec::new();
    for object_id in 0..count {
        let (shape, color) = loop {
            let s = rng.below(attrs.shapes);
            let c = rng.below(attrs.colors);
            if !config.unique_attribute_pairs || !used_pairs.contains(&(s, c)) {
                break (s, c);
            }
        };
        used_pairs.push((shape, color));
        let size = rng.below(attrs.sizes);
        let extent = SIZE_EXTENT_CELLS[size.min(SIZE_EXTENT_CELLS.len() - 1)].min(config.canvas);

        // keep proposals mostly disjoint; after enough retries accept anyway
        let mut best: Option<BBox<f64>> = None;
        for _ in 0..64 {
            let max_cell = config.canvas - extent;
            let cx = rng.below(max_cell + 1);
            let cy = rng.below(max_cell + 1);
            let cand = BBox::new(
                cx as f64 / config.canvas as f64,
                cy as f64 / config.canvas as f64,
                extent as f64 / config.canvas as f64,
                extent as f64 / config.canvas as f64,
            );
            let worst = objects
                .iter()
                .map(|o| crate::geometry::iou(&o.bbox, &cand))
                .fold(0.0f64, f64::max);
            best = Some(cand);
            if worst <= 0.25 {
                break;
            }
        }
        objects.push(SceneObject {
            object_id,
            shape,
            color,
            size,
            bbox: best.expect("at least one placement candidate"),
        });
    }

    let scene = Scene {
        scene_id: seed,
        canvas: config.canvas,
        attributes: attrs,
        objects,
        seed,
    };
    scene.validate(config)?;
    Ok(scene)
}

/// Paint objects onto the cell grid in object order (later wins).
pub fn render(scene: &Scene) -> Raster {
    let channels = scene.attributes.channels();
    let (w, h) = (scene.canvas, scene.canvas);
    let mut data = vec![0.0; w * h * channels];
    for obj in &scene.objects {
        let encoding = scene.attributes.encode(obj);
        let (x0, x1, y0, y1) = box_to_cells(&obj.bbox, scene.canvas);
        for y in y0..y1 {
            for x in x0..x1 {
                let base = (y * w + x) * channels;
                data[base..base + channels].copy_from_slice(&encoding);
            }
        }
    }
    Raster { width: w, height: h, channels, data }
}
