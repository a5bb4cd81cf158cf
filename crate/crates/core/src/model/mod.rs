//! Single-stream multimodal fusion transformer: CLS + text embeddings +
//! concatenated projected visual tokens, modality-agnostic pre-norm
//! self-attention, classification head on the CLS output, with optional
//! lossless capture of every layer's post-softmax attention.

mod checkpoint;
mod dump;
mod record;
mod segmap;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use dump::{read_attention_dump, write_attention_dump, DumpSidecar};
pub use record::{AttentionRecord, LayerAttention};
pub use segmap::{ModalitySegmentMap, SegmentId};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::encoders::{project, ProjectionIds, VeConfig, VeKind, VisualTokenSet};
use crate::rng::Rng;
use crate::tensor::{
    feed_forward, multi_head_attention, AttentionVars, FeedForwardVars, Graph, LayerNormVars,
    ParamId, ParamSet, Tensor, Var,
};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub active_ves: Vec<VeKind>,
    pub num_labels: usize,
    pub type_embeddings: bool,
    /// Dropout probability on sublayer outputs during training. The value
    /// is a standard-practice default, configurable because nothing pins it.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn desk_scale(vocab_size: usize, active_ves: Vec<VeKind>, num_labels: usize) -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            vocab_size,
            max_text_len: 96,
            active_ves,
            num_labels,
            type_embeddings: true,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.active_ves.is_empty() {
            return Err(CoreError::Config("at least one active vision encoder required".into()));
        }
        let mut seen = self.active_ves.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.active_ves.len() {
            return Err(CoreError::Config("duplicate vision encoder in active set".into()));
        }
        if self.num_labels < 2 {
            return Err(CoreError::Config("need at least two labels".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    cls: ParamId,
    tokens: ParamId,
    positions: ParamId,
    type_text: Option<ParamId>,
    type_ve: BTreeMap<VeKind, ParamId>,
    proj: BTreeMap<VeKind, ProjectionIds>,
    layers: Vec<LayerIds>,
    final_ln: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

/// The trainable model: parameter store plus cached ids.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParamSet<f64>,
    ids: ModelIds,
}

fn vec_param(params: &mut ParamSet<f64>, name: String, dim: usize, rng: &mut Rng) -> ParamId {
    let bound = (6.0 / (1 + dim) as f64).sqrt();
    let data = (0..dim).map(|_| rng.uniform_in(-bound, bound)).collect();
    params.add(name, Tensor::new(vec![dim], data))
}

impl FusionModel {
    /// Seed-controlled initialization; matrices use scaled uniform init,
    /// biases start at zero, layer-norm gains at one.
    pub fn init(config: ModelConfig, seed: u64, ve_config: &VeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).child(0x1417);
        let d = config.model_dim;
        let mut params = ParamSet::new();

        let cls = params.add("cls.embedding", Tensor::glorot_uniform(1, d, &mut rng));
        let tokens = params.add(
            "text.tokens",
            Tensor::glorot_uniform(config.vocab_size, d, &mut rng),
        );
        let positions = params.add(
            "text.positions",
            Tensor::glorot_uniform(config.max_text_len, d, &mut rng),
        );
        let type_text = config
            .type_embeddings
            .then(|| vec_param(&mut params, "type.text".into(), d, &mut rng));

        let mut type_ve = BTreeMap::new();
        let mut proj = BTreeMap::new();
        for &kind in &config.active_ves {
            if config.type_embeddings {
                type_ve.insert(
                    kind,
                    vec_param(&mut params, format!("type.{kind}"), d, &mut rng),
                );
            }
            proj.insert(
                kind,
                ProjectionIds::register(
                    &mut params,
                    &format!("proj.{kind}"),
                    ve_config.feature_dim(kind),
                    d,
                    &mut rng,
                ),
            );
        }

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let ln1 = (
                params.add(p("ln1.gain"), Tensor::new(vec![d], vec![1.0; d])),
                params.add(p("ln1.bias"), Tensor::zeros(vec![d])),
            );
            let wq = params.add(p("attn.wq"), Tensor::glorot_uniform(d, d, &mut rng));
            let bq = params.add(p("attn.bq"), Tensor::zeros(vec![d]));
            let wk = params.add(p("attn.wk"), Tensor::glorot_uniform(d, d, &mut rng));
            let bk = params.add(p("attn.bk"), Tensor::zeros(vec![d]));
            let wv = params.add(p("attn.wv"), Tensor::glorot_uniform(d, d, &mut rng));
            let bv = params.add(p("attn.bv"), Tensor::zeros(vec![d]));
            // Residual-path output projections start at zero so every
            // block begins as the identity; desk-scale runs converge in
            // roughly half the steps this way.
            let wo = params.add(p("attn.wo"), Tensor::zeros(vec![d, d]));
            let bo = params.add(p("attn.bo"), Tensor::zeros(vec![d]));
            let ln2 = (
                params.add(p("ln2.gain"), Tensor::new(vec![d], vec![1.0; d])),
                params.add(p("ln2.bias"), Tensor::zeros(vec![d])),
            );
            let ffn_w1 = params.add(p("ffn.w1"), Tensor::glorot_uniform(d, config.ffn_dim, &mut rng));
            let ffn_b1 = params.add(p("ffn.b1"), Tensor::zeros(vec![config.ffn_dim]));
            let ffn_w2 = params.add(p("ffn.w2"), Tensor::zeros(vec![config.ffn_dim, d]));
            let ffn_b2 = params.add(p("ffn.b2"), Tensor::zeros(vec![d]));
            layers.push(LayerIds {
                ln1, wq, bq, wk, bk, wv, bv, wo, bo, ln2, ffn_w1, ffn_b1, ffn_w2, ffn_b2,
            });
        }

        let final_ln = (
            params.add("final_ln.gain", Tensor::new(vec![d], vec![1.0; d])),
            params.add("final_ln.bias", Tensor::zeros(vec![d])),
        );
        let head_w = params.add("head.w", Tensor::glorot_uniform(d, config.num_labels, &mut rng));
        let head_b = params.add("head.b", Tensor::zeros(vec![config.num_labels]));

        let ids = ModelIds {
            cls,
            tokens,
            positions,
            type_text,
            type_ve,
            proj,
            layers,
            final_ln,
            head_w,
            head_b,
        };
        Ok(FusionModel { config, params, ids })
    }

    /// Rebuild the id cache after loading parameters by name.
    pub(crate) fn from_parts(config: ModelConfig, params: ParamSet<f64>) -> Result<Self> {
        config.validate()?;
        let id = |n: &str| params.id(n);
        let mut type_ve = BTreeMap::new();
        let mut proj = BTreeMap::new();
        for &kind in &config.active_ves {
            if config.type_embeddings {
                type_ve.insert(kind, id(&format!("type.{kind}"))?);
            }
            proj.insert(
                kind,
                ProjectionIds {
                    w1: id(&format!("proj.{kind}.w1"))?,
                    b1: id(&format!("proj.{kind}.b1"))?,
                    w2: id(&format!("proj.{kind}.w2"))?,
                    b2: id(&format!("proj.{kind}.b2"))?,
                },
            );
        }
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1: (id(&p("ln1.gain"))?, id(&p("ln1.bias"))?),
                wq: id(&p("attn.wq"))?,
                bq: id(&p("attn.bq"))?,
                wk: id(&p("attn.wk"))?,
                bk: id(&p("attn.bk"))?,
                wv: id(&p("attn.wv"))?,
                bv: id(&p("attn.bv"))?,
                wo: id(&p("attn.wo"))?,
                bo: id(&p("attn.bo"))?,
                ln2: (id(&p("ln2.gain"))?, id(&p("ln2.bias"))?),
                ffn_w1: id(&p("ffn.w1"))?,
                ffn_b1: id(&p("ffn.b1"))?,
                ffn_w2: id(&p("ffn.w2"))?,
                ffn_b2: id(&p("ffn.b2"))?,
            });
        }
        let ids = ModelIds {
            cls: id("cls.embedding")?,
            tokens: id("text.tokens")?,
            positions: id("text.positions")?,
            type_text: if config.type_embeddings { Some(id("type.text")?) } else { None },
            type_ve,
            proj,
            layers,
            final_ln: (id("final_ln.gain")?, id("final_ln.bias")?),
            head_w: id("head.w")?,
            head_b: id("head.b")?,
        };
        Ok(FusionModel { config, params, ids })
    }
}

/// Per-forward options. `dropout_rng` enables train-mode dropout; capture
/// copies every layer's post-softmax weights out of the tape.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub capture: bool,
    pub drop_ve: Option<VeKind>,
    pub dropout_rng: Option<&'a mut Rng>,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub segmap: ModalitySegmentMap,
    pub attention: Vec<LayerAttention<f64>>,
    pub truncated: bool,
}

impl FusionModel {
    /// Assemble the fused input sequence. A dropped encoder's segment is
    /// removed before assembly, as if the model had been built without it.
    pub fn build_input(
        &self,
        g: &mut Graph<f64>,
        text: &[usize],
        token_sets: &[(VeKind, &VisualTokenSet)],
        drop_ve: Option<VeKind>,
    ) -> Result<(Var, ModalitySegmentMap, bool)> {
        let truncated = text.len() > self.config.max_text_len;
        let text = &text[..text.len().min(self.config.max_text_len)];

        let cls = g.param(&self.params, self.ids.cls);

        let tokens = g.param(&self.params, self.ids.tokens);
        let mut text_emb = g.gather_rows(tokens, text)?;
        let positions = g.param(&self.params, self.ids.positions);
        let pos = g.narrow_rows(positions, 0, text.len())?;
        text_emb = g.add(text_emb, pos)?;
        if let Some(tt) = self.ids.type_text {
            let tv = g.param(&self.params, tt);
            text_emb = g.add_row_vec(text_emb, tv)?;
        }

        let mut parts = vec![cls, text_emb];
        let mut ve_counts = Vec::new();
        for &kind in &self.config.active_ves {
            if drop_ve == Some(kind) {
                continue;
            }
            let set = token_sets
                .iter()
                .find(|(k, _)| *k == kind)
                .map(|(_, s)| *s)
                .ok_or_else(|| {
                    CoreError::Incompatible(format!("missing {kind} tokens for active encoder"))
                })?;
            let proj_ids = self.ids.proj[&kind];
            let mut projected = project(g, &self.params, &proj_ids, set)?;
            if let Some(&tv_id) = self.ids.type_ve.get(&kind) {
                let tv = g.param(&self.params, tv_id);
                projected = g.add_row_vec(projected, tv)?;
            }
            ve_counts.push((kind, set.token_count()));
            parts.push(projected);
        }
        if ve_counts.is_empty() {
            return Err(CoreError::Config("all encoders dropped from the input".into()));
        }

        let seq = g.concat_rows(&parts)?;
        let segmap = ModalitySegmentMap::build(text.len(), &ve_counts)?;
        debug_assert_eq!(segmap.total_len(), g.shape(seq)[0]);
        Ok((seq, segmap, truncated))
    }

    /// Full forward pass: assembled input through the pre-norm stack to
    /// task logits, with optional attention capture.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        text: &[usize],
        token_sets: &[(VeKind, &VisualTokenSet)],
        mut opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (mut x, segmap, truncated) = self.build_input(g, text, token_sets, opts.drop_ve)?;
        let seq_len = segmap.total_len();
        let mut attention = Vec::new();

        for (layer_idx, layer) in self.ids.layers.iter().enumerate() {
            let ln1 = LayerNormVars {
                gain: g.param(&self.params, layer.ln1.0),
                bias: g.param(&self.params, layer.ln1.1),
            };
            let eps = self.config.layer_norm_eps;
            let normed = g.layer_norm(x, ln1.gain, ln1.bias, eps)?;
            let attn_vars = AttentionVars {
                wq: g.param(&self.params, layer.wq),
                bq: g.param(&self.params, layer.bq),
                wk: g.param(&self.params, layer.wk),
                bk: g.param(&self.params, layer.bk),
                wv: g.param(&self.params, layer.wv),
                bv: g.param(&self.params, layer.bv),
                wo: g.param(&self.params, layer.wo),
                bo: g.param(&self.params, layer.bo),
            };
            let (attn_out, attn_node) =
                multi_head_attention(g, normed, self.config.heads, &attn_vars)?;
            if opts.capture {
                let (w, heads, len) = g
                    .attention_weights(attn_node)
                    .expect("attention node caches its weights");
                debug_assert_eq!(len, seq_len);
                attention.push(LayerAttention::new(heads, len, w.to_vec()));
            }
            let attn_out = self.maybe_dropout(g, attn_out, &mut opts)?;
            x = g.add(x, attn_out)?;

            let ln2 = LayerNormVars {
                gain: g.param(&self.params, layer.ln2.0),
                bias: g.param(&self.params, layer.ln2.1),
            };
            let normed = g.layer_norm(x, ln2.gain, ln2.bias, eps)?;
            let ffn = FeedForwardVars {
                w1: g.param(&self.params, layer.ffn_w1),
                b1: g.param(&self.params, layer.ffn_b1),
                w2: g.param(&self.params, layer.ffn_w2),
                b2: g.param(&self.params, layer.ffn_b2),
            };
            let ffn_out = feed_forward(g, normed, &ffn)?;
            let ffn_out = self.maybe_dropout(g, ffn_out, &mut opts)?;
            x = g.add(x, ffn_out)?;

            if !g.data(x).iter().all(|v| v.is_finite()) {
                return Err(CoreError::NonFiniteActivation { layer: layer_idx });
            }
        }

        let gain = g.param(&self.params, self.ids.final_ln.0);
        let bias = g.param(&self.params, self.ids.final_ln.1);
        let x = g.layer_norm(x, gain, bias, self.config.layer_norm_eps)?;
        let cls_row = g.narrow_rows(x, 0, 1)?;
        let head_w = g.param(&self.params, self.ids.head_w);
        let head_b = g.param(&self.params, self.ids.head_b);
        let logits = g.linear(cls_row, head_w, head_b)?;

        Ok(ForwardOutput { logits, segmap, attention, truncated })
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph<f64>,
        x: Var,
        opts: &mut ForwardOptions,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> = (0..g.data(x).len()).map(|_| !rng.bernoulli(p)).collect();
        g.dropout(x, keep, 1.0 - p)
    }

    /// Cross-entropy task loss for one example.
    pub fn task_loss(&self, g: &mut Graph<f64>, logits: Var, label: usize) -> Result<Var> {
        if label >= self.config.num_labels {
            return Err(CoreError::Config(format!(
                "label {label} incompatible with a {}-way head",
                self.config.num_labels
            )));
        }
        g.cross_entropy(logits, &[label])
    }

    /// Predicted label (argmax logit, lowest index wins ties).
    pub fn predict(&self, g: &Graph<f64>, logits: Var) -> usize {
        let data = g.data(logits);
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        best
    }
}
