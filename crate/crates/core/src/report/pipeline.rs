//! Capture-and-measure pipeline: forward the evaluation sample with
//! attention capture, accumulate every metric per layer and head, and
//! assemble the serializable report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    cls_attention, cross_modal_flow, grounding_accuracy, relative_decrease, surplus_attention,
    GroundingCounts, PhraseGold,
};
use crate::encoders::{VeKind, VisualTokenSet};
use crate::geometry::{gold_overlap_set, OverlapIndex, OverlapThresholds};
use crate::model::{
    write_attention_dump, AttentionRecord, ForwardOptions, FusionModel, LayerAttention,
    ModalitySegmentMap, SegmentId,
};
use crate::scene::{TaskExample, TaskKind};
use crate::tensor::Graph;
use crate::train::{evaluate, Corpus, EncodedCorpus, EvalMetrics};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Last,
    All,
}

impl LayerMode {
    pub fn label(&self) -> &'static str {
        match self {
            LayerMode::Last => "last",
            LayerMode::All => "all",
        }
    }
}

/// Which encoder of a 2-encoder model to drop during the drop evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropChoice {
    First,
    Second,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub sample: usize,
    pub layer_mode: LayerMode,
    pub drop_ve: Option<DropChoice>,
    /// Dump raw attention for the first N sampled examples.
    pub dump_attention: usize,
    pub thresholds: OverlapThresholds,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            sample: 512,
            layer_mode: LayerMode::Last,
            drop_ve: None,
            dump_attention: 0,
            thresholds: OverlapThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRow {
    pub layer: String,
    pub head: String,
    pub source: String,
    pub target: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurplusRow {
    pub layer: String,
    pub head: String,
    pub source: String,
    pub target: String,
    pub value: f64,
    pub total_attention: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub task: TaskKind,
    pub active_ves: Vec<VeKind>,
    pub n_examples: usize,
    pub layer_mode: LayerMode,
    pub layers: usize,
    pub heads: usize,
    pub eval_full: Option<EvalMetrics>,
    pub eval_dropped: Option<EvalMetrics>,
    pub dropped_ve: Option<VeKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub cls: Vec<MetricRow>,
    pub flow: Vec<MetricRow>,
    pub surplus: Vec<SurplusRow>,
    pub grounding: Vec<MetricRow>,
    pub drop: Vec<MetricRow>,
    pub skipped_phrases: usize,
}

fn layer_label(idx: usize, layers: usize) -> String {
    if idx == layers { "all".to_string() } else { idx.to_string() }
}

/// Layer tensors to analyze: each real layer plus the layer average at
/// index `layers`.
fn layer_views(record: &AttentionRecord<f64>) -> Vec<LayerAttention<f64>> {
    let mut views = record.layers.clone();
    views.push(record.layer_average());
    views
}

struct Accumulator {
    heads: usize,
    segments: Vec<SegmentId>,
    modalities: Vec<SegmentId>,
    pairs: Vec<(VeKind, VeKind)>,
    // [layer][head][segment] -> (sum, n)
    cls: Vec<Vec<Vec<(f64, usize)>>>,
    // [layer][head][src][tgt] -> (sum, n)
    flow: Vec<Vec<Vec<Vec<(f64, usize)>>>>,
    // [layer][head][pair] -> (surplus sum, surplus n, total sum, total n)
    surplus: Vec<Vec<Vec<(f64, usize, f64, usize)>>>,
    // [layer] -> accumulated counts
    grounding: Vec<GroundingCounts>,
}

impl Accumulator {
    fn new(layers: usize, heads: usize, segments: Vec<SegmentId>, ves: &[VeKind]) -> Self {
        let modalities: Vec<SegmentId> =
            segments.iter().copied().filter(|s| *s != SegmentId::Cls).collect();
        let mut pairs = Vec::new();
        for &a in ves {
            for &b in ves {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
        let l = layers + 1; // + "all"
        Accumulator {
            heads,
            cls: vec![vec![vec![(0.0, 0); segments.len()]; heads]; l],
            flow: vec![vec![vec![vec![(0.0, 0); modalities.len()]; modalities.len()]; heads]; l],
            surplus: vec![vec![vec![(0.0, 0, 0.0, 0); pairs.len()]; heads]; l],
            grounding: vec![GroundingCounts::default(); l],
            segments,
            modalities,
            pairs,
        }
    }

    fn add_example(
        &mut self,
        record: &AttentionRecord<f64>,
        overlap: &OverlapIndex,
        phrases: &[PhraseGold],
        valid: &BTreeMap<VeKind, Vec<usize>>,
    ) {
        for (li, layer) in layer_views(record).iter().enumerate() {
            let shares = cls_attention(layer, &record.segmap);
            for h in 0..self.heads {
                for (si, seg) in self.segments.iter().enumerate() {
                    if let Some(pos) = shares.segments.iter().position(|s| s == seg) {
                        let cell = &mut self.cls[li][h][si];
                        cell.0 += shares.per_head[h][pos];
                        cell.1 += 1;
                    }
                }
            }

            let flow = cross_modal_flow(layer, &record.segmap);
            for h in 0..self.heads {
                for (si, src) in self.modalities.iter().enumerate() {
                    for (ti, tgt) in self.modalities.iter().enumerate() {
                        let (Some(fsi), Some(fti)) = (
                            flow.modalities.iter().position(|m| m == src),
                            flow.modalities.iter().position(|m| m == tgt),
                        ) else {
                            continue;
                        };
                        if let Some(v) = flow.per_head[h][fsi][fti] {
                            let cell = &mut self.flow[li][h][si][ti];
                            cell.0 += v;
                            cell.1 += 1;
                        }
                    }
                }
            }

            let table = surplus_attention(layer, &record.segmap, overlap);
            for h in 0..self.heads {
                for (pi, &(a, b)) in self.pairs.iter().enumerate() {
                    if let Some(e) = table.get(h, a, b) {
                        let cell = &mut self.surplus[li][h][pi];
                        if let Some(s) = e.surplus {
                            cell.0 += s;
                            cell.1 += 1;
                        }
                        cell.2 += e.total_attention;
                        cell.3 += 1;
                    }
                }
            }

            let counts = grounding_accuracy(layer, &record.segmap, phrases, valid);
            self.grounding[li].merge(&counts);
        }
    }
}

/// Gold-overlap sets and the phrase positions for one example.
fn phrase_gold_for(
    example: &TaskExample,
    segmap: &ModalitySegmentMap,
    sets: &[(VeKind, &VisualTokenSet)],
    thresholds: OverlapThresholds,
) -> Vec<PhraseGold> {
    let text_range = match segmap.range(SegmentId::Text) {
        Some(r) => r,
        None => return Vec::new(),
    };
    example
        .phrases
        .iter()
        .filter(|p| p.last_token_index < text_range.len())
        .map(|p| {
            let gold_sets = sets
                .iter()
                .map(|(kind, set)| {
                    (*kind, gold_overlap_set(&p.gold_box, set, thresholds))
                })
                .collect();
            PhraseGold {
                last_token_pos: text_range.start + p.last_token_index,
                gold_sets,
            }
        })
        .collect()
}

/// Run the full analysis over a sample of `examples`: capture, all five
/// metric families, optional attention dumps and drop evaluation.
#[allow(clippy::too_many_arguments)]
pub fn analyze(
    model: &FusionModel,
    corpus: &Corpus,
    encoded: &EncodedCorpus,
    examples: &[TaskExample],
    opts: &AnalyzeOptions,
    config_hash: &str,
    seed: u64,
    dump_dir: Option<&Path>,
) -> Result<AnalysisReport> {
    if examples.is_empty() {
        return Err(CoreError::Data("analysis over an empty example set".into()));
    }
    let sample: Vec<&TaskExample> = examples.iter().take(opts.sample).collect();
    let layers = model.config.layers;
    let heads = model.config.heads;

    let mut acc: Option<Accumulator> = None;
    for (i, ex) in sample.iter().enumerate() {
        let sets = encoded.sets_for(ex.image_scene_id, &model.config.active_ves)?;
        let mut g = Graph::new();
        let out = model.forward(
            &mut g,
            &ex.text,
            &sets,
            ForwardOptions { capture: true, ..ForwardOptions::default() },
        )?;
        let record = AttentionRecord {
            example_id: ex.example_id,
            segmap: out.segmap.clone(),
            layers: out.attention,
        };

        let set_refs: Vec<&VisualTokenSet> = sets.iter().map(|(_, s)| *s).collect();
        let overlap = OverlapIndex::build(&set_refs, opts.thresholds);
        let phrases = phrase_gold_for(ex, &record.segmap, &sets, opts.thresholds);
        let valid: BTreeMap<VeKind, Vec<usize>> = sets
            .iter()
            .map(|(k, s)| (*k, s.non_padding_indices()))
            .collect();

        let acc = acc.get_or_insert_with(|| {
            Accumulator::new(
                layers,
                heads,
                record.segmap.segments().map(|(id, _)| id).collect(),
                &model.config.active_ves,
            )
        });
        acc.add_example(&record, &overlap, &phrases, &valid);

        if i < opts.dump_attention {
            if let Some(dir) = dump_dir {
                write_attention_dump(
                    &dir.join(format!("example_{:06}", ex.example_id)),
                    &record,
                    &ex.phrases,
                )?;
            }
        }
    }
    let acc = acc.expect("at least one example analyzed");

    // Optional drop evaluation over the same sample.
    let sample_owned: Vec<TaskExample> = sample.iter().map(|e| (*e).clone()).collect();
    let (eval_full, eval_dropped, dropped_ve) = match opts.drop_ve {
        Some(choice) => {
            if model.config.active_ves.len() < 2 {
                return Err(CoreError::Incompatible(
                    "drop evaluation needs a model with at least 2 encoders".into(),
                ));
            }
            let kind = match choice {
                DropChoice::First => model.config.active_ves[0],
                DropChoice::Second => model.config.active_ves[1],
            };
            let full = evaluate(model, corpus, encoded, &sample_owned, corpus.task, 32, None)?;
            let dropped =
                evaluate(model, corpus, encoded, &sample_owned, corpus.task, 32, Some(kind))?;
            (Some(full), Some(dropped), Some(kind))
        }
        None => (None, None, None),
    };

    // Assemble rows.
    let n_examples = sample.len();
    let mut cls = Vec::new();
    let mut flow = Vec::new();
    let mut surplus = Vec::new();
    let mut grounding = Vec::new();
    for li in 0..=layers {
        let ll = layer_label(li, layers);
        // head rows plus head-average rows
        for h in 0..=heads {
            let hl = if h == heads { "avg".to_string() } else { h.to_string() };
            let head_range: Vec<usize> = if h == heads { (0..heads).collect() } else { vec![h] };

            for (si, seg) in acc.segments.iter().enumerate() {
                let (sum, n): (f64, usize) = head_range
                    .iter()
                    .map(|&hh| acc.cls[li][hh][si])
                    .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                if n > 0 {
                    cls.push(MetricRow {
                        layer: ll.clone(),
                        head: hl.clone(),
                        source: "CLS".to_string(),
                        target: seg.label(),
                        value: sum / n as f64,
                        n,
                    });
                }
            }
            for (si, src) in acc.modalities.iter().enumerate() {
                for (ti, tgt) in acc.modalities.iter().enumerate() {
                    let (sum, n): (f64, usize) = head_range
                        .iter()
                        .map(|&hh| acc.flow[li][hh][si][ti])
                        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                    if n > 0 {
                        flow.push(MetricRow {
                            layer: ll.clone(),
                            head: hl.clone(),
                            source: src.label(),
                            target: tgt.label(),
                            value: sum / n as f64,
                            n,
                        });
                    }
                }
            }
            for (pi, &(a, b)) in acc.pairs.iter().enumerate() {
                let agg = head_range.iter().map(|&hh| acc.surplus[li][hh][pi]).fold(
                    (0.0, 0usize, 0.0, 0usize),
                    |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2, x.3 + y.3),
                );
                if agg.3 > 0 {
                    surplus.push(SurplusRow {
                        layer: ll.clone(),
                        head: hl.clone(),
                        source: SegmentId::Ve(a).label(),
                        target: SegmentId::Ve(b).label(),
                        value: if agg.1 > 0 { agg.0 / agg.1 as f64 } else { 0.0 },
                        total_attention: agg.2 / agg.3 as f64,
                        n: agg.1,
                    });
                }
            }
            if h < heads {
                for &kind in &model.config.active_ves {
                    let (correct, evaluated) = acc.grounding[li].correct_evaluated(h, kind);
                    if evaluated > 0 {
                        grounding.push(MetricRow {
                            layer: ll.clone(),
                            head: hl.clone(),
                            source: "TEXT".to_string(),
                            target: SegmentId::Ve(kind).label(),
                            value: correct as f64 / evaluated as f64,
                            n: evaluated,
                        });
                    }
                }
            }
        }
    }

    let mut drop_rows = Vec::new();
    if let (Some(full), Some(dropped), Some(kind)) = (eval_full, eval_dropped, dropped_ve) {
        let mut push = |metric: &str, f: f64, d: f64| {
            if let Some(rel) = relative_decrease(f, d) {
                drop_rows.push(MetricRow {
                    layer: "-".to_string(),
                    head: "-".to_string(),
                    source: SegmentId::Ve(kind).label(),
                    target: metric.to_string(),
                    value: rel,
                    n: n_examples,
                });
            }
        };
        push("accuracy", full.accuracy, dropped.accuracy);
        if let (Some(fr), Some(dr)) = (full.r_at_1, dropped.r_at_1) {
            push("r_at_1", fr, dr);
        }
    }

    Ok(AnalysisReport {
        provenance: Provenance {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            seed,
            task: corpus.task,
            active_ves: model.config.active_ves.clone(),
            n_examples,
            layer_mode: opts.layer_mode,
            layers,
            heads,
            eval_full,
            eval_dropped,
            dropped_ve,
        },
        cls,
        flow,
        surplus,
        grounding,
        drop: drop_rows,
        skipped_phrases: acc.grounding.first().map_or(0, |g| g.skipped_phrases),
    })
}
