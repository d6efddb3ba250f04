//! Multi-head scaled dot-product attention built from graph primitives.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::shape;

/// Projection matrices of one attention layer.
///
/// `wq: d×d`, `wk: d_ctx×d`, `wv: d_ctx×d`, `wo: d×d`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// `softmax(QKᵀ/√d_head)V` followed by the output projection, with queries,
/// keys and values all taken from `x: N×d`.
pub fn self_attention(g: &mut Graph, x: Var, w: &AttentionWeights) -> Result<Var> {
    cross_attention(g, x, x, w)
}

/// Queries from `x: N×d`, keys and values from `context: M×d_ctx`.
pub fn cross_attention(g: &mut Graph, x: Var, context: Var, w: &AttentionWeights) -> Result<Var> {
    attention_with_probs(g, x, context, w).map(|(out, _)| out)
}

/// Same as [`cross_attention`], also returning the per-head attention
/// probability matrices (each `N×M`).
pub fn attention_with_probs(
    g: &mut Graph,
    x: Var,
    context: Var,
    w: &AttentionWeights,
) -> Result<(Var, Vec<Var>)> {
    let d = match g.shape(w.wq) {
        [_, d] => *d,
        s => return Err(Error::Dimension(format!("query projection must be a matrix, got {s:?}"))),
    };
    let dh = shape::heads(d, w.heads)?;
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(context, w.wk)?;
    let v = g.matmul(context, w.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores);
        probs.push(p);
        outs.push(g.matmul(p, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((g.matmul(merged, w.wo)?, probs))
}
