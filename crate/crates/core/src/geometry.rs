//! Token-footprint geometry: IoU, inter-encoder overlap sets, and
//! gold-box overlap sets.
//!
//! Overlap thresholds follow the grounding convention: strictly over 0.5
//! for region tokens and over 0.1 for grid/patch tokens. The same per-kind
//! thresholds are reused for token-to-token overlap in the surplus
//! analysis (keyed by the TARGET encoder's kind) — that reuse is an
//! assumption of this lab, not a published constant.

use serde::{Deserialize, Serialize};

use crate::encoders::{VeKind, VisualTokenSet};
use crate::scalar::Scalar;

/// Axis-aligned box with normalized coordinates in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<S> {
    pub x: S,
    pub y: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x: S, y: S, w: S, h: S) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    pub fn right(&self) -> S {
        self.x + self.w
    }

    pub fn bottom(&self) -> S {
        self.y + self.h
    }

    /// Valid normalized box: non-negative extent, inside the unit square
    /// (with a hair of slack for accumulated rounding).
    pub fn is_normalized(&self) -> bool {
        let eps = S::from_f64_lossy(1e-9);
        self.w >= S::zero()
            && self.h >= S::zero()
            && self.x >= -eps
            && self.y >= -eps
            && self.right() <= S::one() + eps
            && self.bottom() <= S::one() + eps
    }

    pub fn to_f64(&self) -> BBox<f64> {
        BBox {
            x: self.x.to_f64_lossy(),
            y: self.y.to_f64_lossy(),
            w: self.w.to_f64_lossy(),
            h: self.h.to_f64_lossy(),
        }
    }
}

/// Intersection over union. Degenerate (zero-area) unions yield 0.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let x_left = a.x.max(b.x);
    let y_top = a.y.max(b.y);
    let x_right = a.right().min(b.right());
    let y_bottom = a.bottom().min(b.bottom());
    if x_right <= x_left || y_bottom <= y_top {
        return S::zero();
    }
    let inter = (x_right - x_left) * (y_bottom - y_top);
    let union = a.area() + b.area() - inter;
    if union <= S::zero() {
        return S::zero();
    }
    inter / union
}

/// IoU thresholds per target-encoder kind; membership uses strict `>`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OverlapThresholds {
    pub region: f64,
    pub grid: f64,
    pub patch: f64,
}

impl Default for OverlapThresholds {
    fn default() -> Self {
        OverlapThresholds { region: 0.5, grid: 0.1, patch: 0.1 }
    }
}

impl OverlapThresholds {
    pub fn for_kind(&self, kind: VeKind) -> f64 {
        match kind {
            VeKind::Region => self.region,
            VeKind::Grid => self.grid,
            VeKind::Patch => self.patch,
        }
    }
}

/// Overlap structure for one ordered encoder pair (source -> target).
///
/// `overlapping[t]` is `None` when source token `t` is a padding token
/// (excluded from every set); otherwise it holds the sorted indices of
/// non-padding target tokens whose footprint IoU with `t` exceeds the
/// target-kind threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairOverlap {
    pub source: VeKind,
    pub target: VeKind,
    pub threshold: f64,
    pub overlapping: Vec<Option<Vec<usize>>>,
    /// Non-padding target token indices; the complement of `overlapping[t]`
    /// within this list is the non-overlapping set for `t`.
    pub valid_targets: Vec<usize>,
}

impl PairOverlap {
    /// Non-overlapping target indices for source token `t` (`I \ t`).
    pub fn complement(&self, t: usize) -> Option<Vec<usize>> {
        let over = self.overlapping[t].as_ref()?;
        Some(
            self.valid_targets
                .iter()
                .copied()
                .filter(|i| over.binary_search(i).is_err())
                .collect(),
        )
    }
}

/// All ordered-pair overlap sets for the active encoders, plus the
/// thresholds they were computed with.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct OverlapIndex {
    pub pairs: Vec<PairOverlap>,
}

impl OverlapIndex {
    pub fn pair(&self, source: VeKind, target: VeKind) -> Option<&PairOverlap> {
        self.pairs.iter().find(|p| p.source == source && p.target == target)
    }

    /// Build overlap sets for every ordered pair of distinct encoders.
    pub fn build(sets: &[&VisualTokenSet], thresholds: OverlapThresholds) -> Self {
        let mut pairs = Vec::new();
        for a in sets {
            for b in sets {
                if a.kind == b.kind {
                    continue;
                }
                pairs.push(overlap_sets(a, b, thresholds.for_kind(b.kind)));
            }
        }
        OverlapIndex { pairs }
    }
}

/// Overlap sets from every token of `source` onto `target` tokens, using
/// strict `iou > threshold` membership. Padding tokens never participate.
pub fn overlap_sets(
    source: &VisualTokenSet,
    target: &VisualTokenSet,
    threshold: f64,
) -> PairOverlap {
    let valid_targets: Vec<usize> = target
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, tok)| !tok.is_padding)
        .map(|(i, _)| i)
        .collect();
    let overlapping = source
        .tokens
        .iter()
        .map(|src| {
            if src.is_padding {
                return None;
            }
            Some(
                valid_targets
                    .iter()
                    .copied()
                    .filter(|&j| iou(&src.footprint, &target.tokens[j].footprint) > threshold)
                    .collect(),
            )
        })
        .collect();
    PairOverlap {
        source: source.kind,
        target: target.kind,
        threshold,
        overlapping,
        valid_targets,
    }
}

/// Token indices of `tokens` whose footprint IoU with the gold box is
/// strictly over the per-kind threshold (`I_{|g}`). May be empty; callers
/// skip such phrases.
pub fn gold_overlap_set(
    gold: &BBox<f64>,
    tokens: &VisualTokenSet,
    thresholds: OverlapThresholds,
) -> Vec<usize> {
    let threshold = thresholds.for_kind(tokens.kind);
    tokens
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, tok)| !tok.is_padding && iou(gold, &tok.footprint) > threshold)
        .map(|(i, _)| i)
        .collect()
}
