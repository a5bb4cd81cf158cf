//! Attention metrics over captured records: CLS attention shares,
//! cross-modal attention flow, overlapping-token surplus attention,
//! visual grounding accuracy, encoder-drop deltas, and seed aggregation.
//!
//! Definitions, for attention weights `a[m -> n]` of one head:
//! - CLS share of modality N: sum of `a[CLS -> n]` over `n in N`,
//!   averaged over heads. Shares over all segments (CLS included) sum to 1.
//! - flow(M -> N) = (1/|M|) * sum over m in M, n in N of `a[m -> n]`,
//!   CLS excluded from both sides.
//! - surplus(A -> B) for source token t of A: mean attention to B's tokens
//!   overlapping t minus mean attention to B's non-overlapping tokens,
//!   averaged over tokens with both sets non-empty.
//! - grounding: a head grounds a phrase iff the argmax of attention from
//!   the phrase's last token over a VE's tokens lands in the gold-overlap
//!   set; accuracy counts phrases with non-empty gold sets only.

mod aggregate;

pub use aggregate::{mean_std, SeedStats};

use std::collections::BTreeMap;

use crate::encoders::VeKind;
use crate::geometry::OverlapIndex;
use crate::model::{LayerAttention, ModalitySegmentMap, SegmentId};
use crate::scalar::Scalar;

/// CLS attention shares for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsAttention {
    pub segments: Vec<SegmentId>,
    /// [head][segment index] share.
    pub per_head: Vec<Vec<f64>>,
    /// Head-averaged share per segment.
    pub head_avg: Vec<f64>,
}

impl ClsAttention {
    pub fn share(&self, id: SegmentId) -> Option<f64> {
        let idx = self.segments.iter().position(|&s| s == id)?;
        Some(self.head_avg[idx])
    }
}

/// Sum of attention from the CLS token to each segment, averaged over
/// heads. The CLS segment's own share is the CLS self-attention.
pub fn cls_attention<S: Scalar>(
    layer: &LayerAttention<S>,
    segmap: &ModalitySegmentMap,
) -> ClsAttention {
    let segments: Vec<SegmentId> = segmap.segments().map(|(id, _)| id).collect();
    let mut per_head = Vec::with_capacity(layer.heads);
    for h in 0..layer.heads {
        let row = layer.row(h, 0);
        let shares: Vec<f64> = segmap
            .segments()
            .map(|(_, range)| row[range].iter().map(|v| v.to_f64_lossy()).sum())
            .collect();
        per_head.push(shares);
    }
    let head_avg = (0..segments.len())
        .map(|i| per_head.iter().map(|h| h[i]).sum::<f64>() / layer.heads as f64)
        .collect();
    ClsAttention { segments, per_head, head_avg }
}

/// Cross-modal attention flow for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    /// Modalities (CLS excluded), in segment order.
    pub modalities: Vec<SegmentId>,
    /// [head][source][target] flow fractions; `None` marks an absent pair
    /// (empty modality).
    pub per_head: Vec<Vec<Vec<Option<f64>>>>,
    /// Head-averaged [source][target].
    pub head_avg: Vec<Vec<Option<f64>>>,
    /// Per-source attention mass on the CLS column, head-averaged
    /// (completes each row to 1).
    pub cls_mass: Vec<f64>,
}

impl FlowMatrix {
    pub fn flow(&self, source: SegmentId, target: SegmentId) -> Option<f64> {
        let si = self.modalities.iter().position(|&m| m == source)?;
        let ti = self.modalities.iter().position(|&m| m == target)?;
        self.head_avg[si][ti]
    }
}

/// flow(M -> N) per head: mean over source tokens of the attention mass
/// landing in N, CLS excluded from both M and N.
pub fn cross_modal_flow<S: Scalar>(
    layer: &LayerAttention<S>,
    segmap: &ModalitySegmentMap,
) -> FlowMatrix {
    let mods: Vec<(SegmentId, std::ops::Range<usize>)> = segmap.modalities().collect();
    let modalities: Vec<SegmentId> = mods.iter().map(|(id, _)| *id).collect();
    let cls_col = segmap
        .range(SegmentId::Cls)
        .map(|r| r.start)
        .unwrap_or(0);

    let mut per_head = Vec::with_capacity(layer.heads);
    let mut cls_mass_acc = vec![0.0; mods.len()];
    for h in 0..layer.heads {
        let mut matrix = vec![vec![None; mods.len()]; mods.len()];
        for (si, (_, src_range)) in mods.iter().enumerate() {
            let inv_m = 1.0 / src_range.len() as f64;
            for (ti, (_, tgt_range)) in mods.iter().enumerate() {
                let mut sum = 0.0;
                for m in src_range.clone() {
                    let row = layer.row(h, m);
                    for n in tgt_range.clone() {
                        sum += row[n].to_f64_lossy();
                    }
                }
                matrix[si][ti] = Some(sum * inv_m);
            }
            let cls_sum: f64 = src_range
                .clone()
                .map(|m| layer.at(h, m, cls_col).to_f64_lossy())
                .sum();
            cls_mass_acc[si] += cls_sum * inv_m;
        }
        per_head.push(matrix);
    }

    let head_avg = (0..mods.len())
        .map(|si| {
            (0..mods.len())
                .map(|ti| {
                    let vals: Vec<f64> =
                        per_head.iter().filter_map(|m| m[si][ti]).collect();
                    if vals.is_empty() {
                        None
                    } else {
                        Some(vals.iter().sum::<f64>() / vals.len() as f64)
                    }
                })
                .collect()
        })
        .collect();
    let cls_mass = cls_mass_acc.iter().map(|v| v / layer.heads as f64).collect();
    FlowMatrix { modalities, per_head, head_avg, cls_mass }
}

/// Surplus attention for one (head, source VE, target VE) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SurplusEntry {
    pub head: usize,
    pub source: VeKind,
    pub target: VeKind,
    /// Mean over evaluable source tokens of (mean attention to overlapping
    /// target tokens - mean attention to non-overlapping ones). `None`
    /// when no token was evaluable.
    pub surplus: Option<f64>,
    /// Mean over source tokens of the total attention mass on the target
    /// encoder (the dot size of the scatter charts).
    pub total_attention: f64,
    pub evaluated_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurplusTable {
    pub entries: Vec<SurplusEntry>,
}

impl SurplusTable {
    pub fn get(&self, head: usize, source: VeKind, target: VeKind) -> Option<&SurplusEntry> {
        self.entries
            .iter()
            .find(|e| e.head == head && e.source == source && e.target == target)
    }
}

/// Per-head surplus attention between every ordered pair of encoders
/// present in the segment map, using precomputed overlap sets.
pub fn surplus_attention<S: Scalar>(
    layer: &LayerAttention<S>,
    segmap: &ModalitySegmentMap,
    overlap: &OverlapIndex,
) -> SurplusTable {
    let kinds = segmap.ve_kinds();
    let mut entries = Vec::new();
    for &src_kind in &kinds {
        for &tgt_kind in &kinds {
            if src_kind == tgt_kind {
                continue;
            }
            let Some(pair) = overlap.pair(src_kind, tgt_kind) else { continue };
            let src_range = segmap.range(SegmentId::Ve(src_kind)).expect("segment present");
            let tgt_range = segmap.range(SegmentId::Ve(tgt_kind)).expect("segment present");

            for h in 0..layer.heads {
                let mut diff_sum = 0.0;
                let mut evaluated = 0usize;
                let mut total_sum = 0.0;
                let mut total_count = 0usize;
                for (t_local, seq_pos) in src_range.clone().enumerate() {
                    let row = layer.row(h, seq_pos);
                    let Some(over) = pair.overlapping.get(t_local).and_then(|o| o.as_ref())
                    else {
                        continue; // padding source token
                    };
                    // total attention to the target encoder (non-padding targets)
                    let mut total = 0.0;
                    for &j in &pair.valid_targets {
                        total += row[tgt_range.start + j].to_f64_lossy();
                    }
                    total_sum += total;
                    total_count += 1;

                    let complement = pair.complement(t_local).expect("non-padding source");
                    if over.is_empty() || complement.is_empty() {
                        continue; // undefined difference, skipped not zeroed
                    }
                    let over_mean: f64 = over
                        .iter()
                        .map(|&j| row[tgt_range.start + j].to_f64_lossy())
                        .sum::<f64>()
                        / over.len() as f64;
                    let rest_mean: f64 = complement
                        .iter()
                        .map(|&j| row[tgt_range.start + j].to_f64_lossy())
                        .sum::<f64>()
                        / complement.len() as f64;
                    diff_sum += over_mean - rest_mean;
                    evaluated += 1;
                }
                entries.push(SurplusEntry {
                    head: h,
                    source: src_kind,
                    target: tgt_kind,
                    surplus: (evaluated > 0).then(|| diff_sum / evaluated as f64),
                    total_attention: if total_count > 0 {
                        total_sum / total_count as f64
                    } else {
                        0.0
                    },
                    evaluated_tokens: evaluated,
                });
            }
        }
    }
    SurplusTable { entries }
}

/// One phrase to ground: its last-token position in the sequence plus the
/// gold-overlap token sets per encoder (token indices within the encoder).
#[derive(Debug, Clone)]
pub struct PhraseGold {
    pub last_token_pos: usize,
    pub gold_sets: BTreeMap<VeKind, Vec<usize>>,
}

/// Grounding counts per (head, encoder) for one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundingCounts {
    /// [(head, kind) -> (correct, evaluated)]
    counts: BTreeMap<(usize, VeKind), (usize, usize)>,
    pub skipped_phrases: usize,
}

impl GroundingCounts {
    pub fn accuracy(&self, head: usize, kind: VeKind) -> Option<f64> {
        let &(correct, evaluated) = self.counts.get(&(head, kind))?;
        (evaluated > 0).then(|| correct as f64 / evaluated as f64)
    }

    pub fn correct_evaluated(&self, head: usize, kind: VeKind) -> (usize, usize) {
        self.counts.get(&(head, kind)).copied().unwrap_or((0, 0))
    }

    pub fn merge(&mut self, other: &GroundingCounts) {
        for (&k, &(c, e)) in &other.counts {
            let entry = self.counts.entry(k).or_insert((0, 0));
            entry.0 += c;
            entry.1 += e;
        }
        self.skipped_phrases += other.skipped_phrases;
    }
}

/// Score one example's phrases against one layer's attention: a phrase is
/// grounded by head `h` on encoder `k` iff the argmax of attention from
/// its last token over the encoder's (non-padding) tokens lands in the
/// gold-overlap set. Ties break toward the lowest token index. Phrases
/// with an empty gold set are excluded from the denominator.
pub fn grounding_accuracy<S: Scalar>(
    layer: &LayerAttention<S>,
    segmap: &ModalitySegmentMap,
    phrases: &[PhraseGold],
    valid_tokens: &BTreeMap<VeKind, Vec<usize>>,
) -> GroundingCounts {
    let mut out = GroundingCounts::default();
    if phrases.is_empty() {
        out.skipped_phrases += 1;
        return out;
    }
    for phrase in phrases {
        for (&kind, golds) in &phrase.gold_sets {
            let Some(range) = segmap.range(SegmentId::Ve(kind)) else { continue };
            let Some(valid) = valid_tokens.get(&kind) else { continue };
            if golds.is_empty() {
                continue; // empty gold-overlap set: not counted
            }
            for h in 0..layer.heads {
                let row = layer.row(h, phrase.last_token_pos);
                let mut best_idx = None;
                let mut best_val = f64::NEG_INFINITY;
                for &tok in valid {
                    let v = row[range.start + tok].to_f64_lossy();
                    if v > best_val {
                        best_val = v;
                        best_idx = Some(tok);
                    }
                }
                let Some(best_idx) = best_idx else { continue };
                let correct = golds.contains(&best_idx);
                let entry = out.counts.entry((h, kind)).or_insert((0, 0));
                entry.0 += correct as usize;
                entry.1 += 1;
            }
        }
    }
    out
}

/// Relative performance decrease after dropping an encoder:
/// `(full - dropped) / full`, undefined when the full metric is zero.
pub fn relative_decrease(metric_full: f64, metric_dropped: f64) -> Option<f64> {
    (metric_full != 0.0).then(|| (metric_full - metric_dropped) / metric_full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModalitySegmentMap;

    fn segmap_text2_grid3() -> ModalitySegmentMap {
        ModalitySegmentMap::build(2, &[(VeKind::Grid, 3)]).unwrap()
    }

    #[test]
    fn uniform_record_shares_equal_segment_fractions() {
        // TEXT=10, GRID=36, L=47
        let segmap = ModalitySegmentMap::build(10, &[(VeKind::Grid, 36)]).unwrap();
        let layer = LayerAttention::<f64>::uniform(4, segmap.total_len());
        let shares = cls_attention(&layer, &segmap);
        assert!((shares.share(SegmentId::Ve(VeKind::Grid)).unwrap() - 36.0 / 47.0).abs() < 1e-15);
        assert!((shares.share(SegmentId::Text).unwrap() - 10.0 / 47.0).abs() < 1e-15);
        let total: f64 = shares.head_avg.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_shares_are_bit_exact_on_dyadic_lengths() {
        // 1 + 15 + 48 = 64: every row value and partial sum is dyadic, so
        // the equality holds with no tolerance at all.
        let segmap = ModalitySegmentMap::build(15, &[(VeKind::Grid, 48)]).unwrap();
        assert_eq!(segmap.total_len(), 64);
        let layer = LayerAttention::<f64>::uniform(4, 64);
        let shares = cls_attention(&layer, &segmap);
        assert_eq!(shares.share(SegmentId::Ve(VeKind::Grid)).unwrap(), 48.0 / 64.0);
        assert_eq!(shares.share(SegmentId::Text).unwrap(), 15.0 / 64.0);
        assert_eq!(shares.share(SegmentId::Cls).unwrap(), 1.0 / 64.0);
    }

    #[test]
    fn one_hot_cls_attention() {
        // all CLS mass on one text token
        let segmap = segmap_text2_grid3();
        let len = segmap.total_len();
        let mut w = vec![0.0; 2 * len * len];
        for h in 0..2 {
            // CLS row: everything on text position 1
            w[(h * len) * len + 1] = 1.0;
            // remaining rows uniform so they stay stochastic
            for q in 1..len {
                for k in 0..len {
                    w[(h * len + q) * len + k] = 1.0 / len as f64;
                }
            }
        }
        let layer = LayerAttention::new(2, len, w);
        let shares = cls_attention(&layer, &segmap);
        assert_eq!(shares.share(SegmentId::Text).unwrap(), 1.0);
        assert_eq!(shares.share(SegmentId::Ve(VeKind::Grid)).unwrap(), 0.0);
        assert_eq!(shares.share(SegmentId::Cls).unwrap(), 0.0);
    }

    #[test]
    fn uniform_flow_equals_target_fraction() {
        // TEXT=2, GRID=3, L=6 including CLS: flow(TEXT->GRID) = 3/6
        let segmap = segmap_text2_grid3();
        assert_eq!(segmap.total_len(), 6);
        let layer = LayerAttention::<f64>::uniform(3, 6);
        let flow = cross_modal_flow(&layer, &segmap);
        let v = flow.flow(SegmentId::Text, SegmentId::Ve(VeKind::Grid)).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        // mass conservation: flows + cls mass = 1 per source
        for (si, _) in flow.modalities.iter().enumerate() {
            let row_sum: f64 = flow.head_avg[si].iter().map(|v| v.unwrap()).sum();
            assert!((row_sum + flow.cls_mass[si] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_flow_is_bit_exact_on_dyadic_lengths() {
        // 1 + 3 + 4 = 8 tokens: flow(TEXT -> GRID) = 4/8 with no rounding.
        let segmap = ModalitySegmentMap::build(3, &[(VeKind::Grid, 4)]).unwrap();
        let layer = LayerAttention::<f64>::uniform(2, 8);
        let flow = cross_modal_flow(&layer, &segmap);
        assert_eq!(flow.flow(SegmentId::Text, SegmentId::Ve(VeKind::Grid)).unwrap(), 0.5);
        assert_eq!(flow.flow(SegmentId::Text, SegmentId::Text).unwrap(), 3.0 / 8.0);
    }

    #[test]
    fn self_attending_text_flow_is_identity_like() {
        let segmap = segmap_text2_grid3();
        let len = segmap.total_len();
        let mut w = vec![0.0; len * len];
        for q in 0..len {
            w[q * len + q] = 1.0; // every token attends only to itself
        }
        let layer = LayerAttention::new(1, len, w);
        let flow = cross_modal_flow(&layer, &segmap);
        assert_eq!(flow.flow(SegmentId::Text, SegmentId::Text).unwrap(), 1.0);
        assert_eq!(flow.flow(SegmentId::Text, SegmentId::Ve(VeKind::Grid)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_surplus_is_exactly_zero() {
        // 1 + 7 + 4 + 4 = 16 tokens keeps every mean dyadic, so the
        // difference of means is exactly zero.
        let segmap =
            ModalitySegmentMap::build(7, &[(VeKind::Region, 4), (VeKind::Grid, 4)]).unwrap();
        assert_eq!(segmap.total_len(), 16);
        let layer = LayerAttention::<f64>::uniform(2, segmap.total_len());
        // synthetic overlap: token i of A overlaps token i of B
        let overlap = OverlapIndex {
            pairs: vec![
                crate::geometry::PairOverlap {
                    source: VeKind::Region,
                    target: VeKind::Grid,
                    threshold: 0.1,
                    overlapping: (0..4).map(|i| Some(vec![i])).collect(),
                    valid_targets: (0..4).collect(),
                },
                crate::geometry::PairOverlap {
                    source: VeKind::Grid,
                    target: VeKind::Region,
                    threshold: 0.5,
                    overlapping: (0..4).map(|i| Some(vec![i])).collect(),
                    valid_targets: (0..4).collect(),
                },
            ],
        };
        let table = surplus_attention(&layer, &segmap, &overlap);
        for e in &table.entries {
            assert_eq!(e.surplus.unwrap(), 0.0, "uniform rows must have zero surplus");
        }
    }

    #[test]
    fn surplus_hand_case() {
        // One source token attends 0.2 to its single overlapping target and
        // 0.05 to each of 4 non-overlapping: surplus = 0.15.
        let segmap =
            ModalitySegmentMap::build(1, &[(VeKind::Region, 1), (VeKind::Grid, 5)]).unwrap();
        let len = segmap.total_len(); // 1 + 1 + 1 + 5 = 8
        let mut w = vec![0.0; len * len];
        // rows uniform except the region token's row
        for q in 0..len {
            for k in 0..len {
                w[q * len + k] = 1.0 / len as f64;
            }
        }
        let region_pos = segmap.range(SegmentId::Ve(VeKind::Region)).unwrap().start;
        let grid_start = segmap.range(SegmentId::Ve(VeKind::Grid)).unwrap().start;
        for k in 0..len {
            w[region_pos * len + k] = 0.0;
        }
        w[region_pos * len + grid_start] = 0.2; // overlapping target (index 0)
        for j in 1..5 {
            w[region_pos * len + grid_start + j] = 0.05;
        }
        // park the rest of the row's mass on CLS to stay stochastic
        w[region_pos * len] = 1.0 - 0.2 - 4.0 * 0.05;
        let layer = LayerAttention::new(1, len, w);

        let overlap = OverlapIndex {
            pairs: vec![crate::geometry::PairOverlap {
                source: VeKind::Region,
                target: VeKind::Grid,
                threshold: 0.1,
                overlapping: vec![Some(vec![0])],
                valid_targets: (0..5).collect(),
            }],
        };
        let table = surplus_attention(&layer, &segmap, &overlap);
        let e = table.get(0, VeKind::Region, VeKind::Grid).unwrap();
        assert!((e.surplus.unwrap() - 0.15).abs() < 1e-12);
        assert!((e.total_attention - 0.4).abs() < 1e-12);
    }

    #[test]
    fn grounding_single_token_gold_and_empty_set() {
        let segmap = ModalitySegmentMap::build(3, &[(VeKind::Grid, 4)]).unwrap();
        let len = segmap.total_len();
        let mut w = vec![1.0 / len as f64; len * len];
        let grid_start = segmap.range(SegmentId::Ve(VeKind::Grid)).unwrap().start;
        let phrase_pos = 2; // a text token
        for k in 0..len {
            w[phrase_pos * len + k] = 0.0;
        }
        w[phrase_pos * len + grid_start + 2] = 1.0; // all mass on grid token 2
        let layer = LayerAttention::new(1, len, w);

        let valid: BTreeMap<VeKind, Vec<usize>> =
            [(VeKind::Grid, vec![0, 1, 2, 3])].into_iter().collect();

        // gold set containing the argmax token -> correct
        let phrases = vec![PhraseGold {
            last_token_pos: phrase_pos,
            gold_sets: [(VeKind::Grid, vec![2])].into_iter().collect(),
        }];
        let counts = grounding_accuracy(&layer, &segmap, &phrases, &valid);
        assert_eq!(counts.correct_evaluated(0, VeKind::Grid), (1, 1));

        // empty gold set -> excluded from the denominator
        let phrases = vec![PhraseGold {
            last_token_pos: phrase_pos,
            gold_sets: [(VeKind::Grid, vec![])].into_iter().collect(),
        }];
        let counts = grounding_accuracy(&layer, &segmap, &phrases, &valid);
        assert_eq!(counts.correct_evaluated(0, VeKind::Grid), (0, 0));
    }

    #[test]
    fn grounding_ties_break_to_lowest_index() {
        let segmap = ModalitySegmentMap::build(1, &[(VeKind::Grid, 3)]).unwrap();
        let len = segmap.total_len();
        let w = vec![1.0 / len as f64; len * len]; // all ties
        let layer = LayerAttention::new(1, len, w);
        let valid: BTreeMap<VeKind, Vec<usize>> = [(VeKind::Grid, vec![0, 1, 2])].into_iter().collect();
        let phrases = vec![PhraseGold {
            last_token_pos: 1,
            gold_sets: [(VeKind::Grid, vec![0])].into_iter().collect(),
        }];
        // argmax tie resolves to token 0, which is in the gold set
        let counts = grounding_accuracy(&layer, &segmap, &phrases, &valid);
        assert_eq!(counts.correct_evaluated(0, VeKind::Grid), (1, 1));
    }

    #[test]
    fn relative_decrease_edge_cases() {
        assert_eq!(relative_decrease(0.8, 0.8), Some(0.0));
        assert_eq!(relative_decrease(0.0, 0.3), None);
        assert!((relative_decrease(0.8, 0.2).unwrap() - 0.75).abs() < 1e-12);
    }
}
