//! Training harness: deterministic per-seed training runs with linear
//! warmup/decay AdamW, per-batch encoder dropout, best-validation
//! checkpointing, and the all-combinations experiment matrix.

mod config;
mod corpus;
mod eval;
mod matrix;

pub use config::{fnv1a, load_config, parse_config_str, render_config, ExperimentConfig};
pub use corpus::{
    load_corpus, load_manifest, save_corpus, Corpus, CorpusManifest, EncodedCorpus, Split,
    CORPUS_FILE, CORPUS_MANIFEST,
};
pub use eval::{evaluate, pool_recall_at_1, EvalMetrics};
pub use matrix::{run_matrix, CellKey, CellManifest, MatrixOutcome, MatrixRow};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::VeKind;
use crate::model::{ForwardOptions, FusionModel, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{splitmix64, Rng};
use crate::scene::TaskExample;
use crate::tensor::Graph;
use crate::{CoreError, Result};

/// Examples per gradient chunk. Chunks are summed in fixed order, so the
/// gradient is bit-identical no matter how many workers run.
const GRAD_CHUNK: usize = 4;

/// Per-batch encoder-dropout decision for 2-encoder models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropDecision {
    None,
    First,
    Second,
}

/// Uniform draw over {first, second, none}, once per batch. Only defined
/// for 2-encoder models.
pub fn sample_ve_dropout(rng: &mut Rng, num_ves: usize) -> Result<DropDecision> {
    if num_ves != 2 {
        return Err(CoreError::Config(format!(
            "ve-dropout training is defined for 2-encoder models, got {num_ves}"
        )));
    }
    Ok(match rng.below(3) {
        0 => DropDecision::First,
        1 => DropDecision::Second,
        _ => DropDecision::None,
    })
}

impl DropDecision {
    pub fn to_kind(self, active: &[VeKind]) -> Option<VeKind> {
        match self {
            DropDecision::None => None,
            DropDecision::First => Some(active[0]),
            DropDecision::Second => Some(active[1]),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model restored to the best-validation checkpoint.
    pub model: FusionModel,
    pub best_val_accuracy: f64,
    pub test: EvalMetrics,
    pub log: Vec<EpochLog>,
    pub truncated_examples: usize,
}

/// Model configuration derived from an experiment config and a combo.
pub fn model_config_for(cfg: &ExperimentConfig, ves: &[VeKind], vocab_size: usize) -> ModelConfig {
    ModelConfig {
        layers: cfg.layers,
        heads: cfg.heads,
        model_dim: cfg.model_dim,
        ffn_dim: cfg.ffn_dim,
        vocab_size,
        max_text_len: cfg.max_text_len,
        active_ves: ves.to_vec(),
        num_labels: cfg.task.label_count(cfg.scene.attributes.colors),
        type_embeddings: cfg.type_embeddings,
        dropout: cfg.dropout,
        layer_norm_eps: 1e-5,
    }
}

struct ChunkResult {
    flat_grads: Vec<f64>,
    loss_sum: f64,
    truncated: usize,
}

fn process_chunk(
    model: &FusionModel,
    encoded: &EncodedCorpus,
    examples: &[&TaskExample],
    batch_len: usize,
    drop_ve: Option<VeKind>,
    seed: u64,
    step: usize,
    chunk_offset: usize,
) -> Result<ChunkResult> {
    let mut flat = vec![0.0; model.params.total_values()];
    let mut loss_sum = 0.0;
    let mut truncated = 0;
    let mut g = Graph::new();
    for (i, ex) in examples.iter().enumerate() {
        g.clear();
        let sets = encoded.sets_for(ex.image_scene_id, &model.config.active_ves)?;
        // dropout stream depends only on (seed, step, batch position): the
        // chunking never changes the masks.
        let mut dropout_rng = Rng::new(splitmix64(
            &mut (seed ^ ((step as u64) << 24) ^ ((chunk_offset + i) as u64 + 1)),
        ));
        let out = model.forward(
            &mut g,
            &ex.text,
            &sets,
            ForwardOptions {
                capture: false,
                drop_ve,
                dropout_rng: Some(&mut dropout_rng),
            },
        )?;
        truncated += out.truncated as usize;
        let loss = model.task_loss(&mut g, out.logits, ex.label)?;
        let loss_val = g.data(loss)[0];
        if !loss_val.is_finite() {
            return Err(CoreError::Training(format!(
                "non-finite loss at step {step} on example {}",
                ex.example_id
            )));
        }
        loss_sum += loss_val;
        g.backward_scaled(loss, 1.0 / batch_len as f64);
        g.accumulate_param_grads_flat(&model.params, &mut flat);
    }
    Ok(ChunkResult { flat_grads: flat, loss_sum, truncated })
}

/// One deterministic training run: per-epoch validation, best-validation
/// checkpoint retained, final test evaluation with the retained weights.
pub fn train_single(
    cfg: &ExperimentConfig,
    ves: &[VeKind],
    seed: u64,
    corpus: &Corpus,
    encoded: &EncodedCorpus,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.ve_dropout_training && ves.len() != 2 {
        return Err(CoreError::Config(format!(
            "ve-dropout training requires exactly 2 encoders, got {}",
            ves.len()
        )));
    }
    if corpus.train.is_empty() {
        return Err(CoreError::Data("empty training split".into()));
    }

    let model_cfg = model_config_for(cfg, ves, corpus.vocab.len());
    let mut model = FusionModel::init(model_cfg, seed, &cfg.ve_config)?;

    let steps_per_epoch = corpus.train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let opt_cfg = AdamWConfig::new(
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.warmup_fraction,
        total_steps,
    );
    let mut opt = AdamW::new(opt_cfg, &model.params)?;

    let mut shuffle_rng = Rng::new(seed).child(0xba7c);
    let mut vedrop_rng = Rng::new(seed).child(0xd307);

    let mut best: Option<(f64, FusionModel)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut truncated_total = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&TaskExample> =
                batch_ids.iter().map(|&i| &corpus.train[i]).collect();
            let drop_ve = if cfg.ve_dropout_training {
                sample_ve_dropout(&mut vedrop_rng, ves.len())?.to_kind(ves)
            } else {
                None
            };

            let chunks: Vec<(usize, &[&TaskExample])> = batch
                .chunks(GRAD_CHUNK)
                .enumerate()
                .map(|(ci, c)| (ci * GRAD_CHUNK, c))
                .collect();
            let results: Vec<ChunkResult> = chunks
                .par_iter()
                .map(|(offset, chunk)| {
                    process_chunk(
                        &model, encoded, chunk, batch.len(), drop_ve, seed, step, *offset,
                    )
                })
                .collect::<Result<_>>()?;

            // fixed-order reduction keeps the gradient bit-stable
            for r in &results {
                model.params.accumulate_flat(&r.flat_grads);
                epoch_loss += r.loss_sum;
                truncated_total += r.truncated;
            }
            opt.step(&mut model.params)?;
        }
        let train_loss = epoch_loss / corpus.train.len() as f64;

        let val = evaluate(
            &model,
            corpus,
            encoded,
            &corpus.val,
            cfg.task,
            cfg.pool_size,
            None,
        )?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy: val.accuracy,
            val_loss: val.loss,
            learning_rate: opt.next_learning_rate(),
        });
        if best.as_ref().is_none_or(|(acc, _)| val.accuracy > *acc) {
            best = Some((val.accuracy, model.clone()));
        }
    }

    let (best_val_accuracy, best_model) = match best {
        Some((acc, m)) => (acc, m),
        // zero epochs: evaluate the initialization
        None => (0.0, model),
    };
    let test = evaluate(
        &best_model,
        corpus,
        encoded,
        &corpus.test,
        cfg.task,
        cfg.pool_size,
        None,
    )?;
    Ok(TrainOutcome {
        model: best_model,
        best_val_accuracy,
        test,
        log,
        truncated_examples: truncated_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_sampler_is_uniform() {
        let mut rng = Rng::new(31);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            match sample_ve_dropout(&mut rng, 2).unwrap() {
                DropDecision::First => counts[0] += 1,
                DropDecision::Second => counts[1] += 1,
                DropDecision::None => counts[2] += 1,
            }
        }
        for &c in &counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.01, "fraction {frac}");
        }
    }

    #[test]
    fn dropout_sampler_rejects_non_two_encoder_setups() {
        let mut rng = Rng::new(1);
        assert!(sample_ve_dropout(&mut rng, 1).is_err());
        assert!(sample_ve_dropout(&mut rng, 3).is_err());
    }

    #[test]
    fn drop_decision_maps_to_configured_order() {
        let active = [VeKind::Grid, VeKind::Patch];
        assert_eq!(DropDecision::First.to_kind(&active), Some(VeKind::Grid));
        assert_eq!(DropDecision::Second.to_kind(&active), Some(VeKind::Patch));
        assert_eq!(DropDecision::None.to_kind(&active), None);
    }
}
