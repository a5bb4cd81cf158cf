//! Transformer building blocks assembled from graph primitives.

use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::Result;

/// Projection weights for one attention block, already injected as vars.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Multi-head self-attention over `x` ([L,d]).
///
/// Returns the contextualized output ([L,d]) and the attention node whose
/// cached post-softmax weight tensor ([H,L,L], every row summing to one)
/// is readable through [`Graph::attention_weights`].
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    num_heads: usize,
    w: &AttentionVars,
) -> Result<(Var, Var)> {
    let q = g.linear(x, w.wq, w.bq)?;
    let k = g.linear(x, w.wk, w.bk)?;
    let v = g.linear(x, w.wv, w.bv)?;
    let mixed = g.attention(q, k, v, num_heads)?;
    let out = g.linear(mixed, w.wo, w.bo)?;
    Ok((out, mixed))
}

/// Two-layer feed-forward with GELU.
pub fn feed_forward<S: Scalar>(g: &mut Graph<S>, x: Var, w: &FeedForwardVars) -> Result<Var> {
    let h = g.linear(x, w.w1, w.b1)?;
    let h = g.gelu(h);
    g.linear(h, w.w2, w.b2)
}

pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    ln: &LayerNormVars,
    eps: S,
) -> Result<Var> {
    g.layer_norm(x, ln.gain, ln.bias, eps)
}
