//! Pre-norm transformer block shared by every model in the zoo.

use super::ModelWeights;
use crate::error::Result;
use crate::tensor::{Graph, NodeId};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct BlockNodes {
    ln1_g: NodeId,
    ln1_b: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl BlockNodes {
    pub(crate) fn load(g: &mut Graph, w: &ModelWeights, prefix: &str) -> Self {
        let mut c = |name: &str| g.constant(w.get(&format!("{prefix}{name}")).clone());
        Self {
            ln1_g: c("ln1.g"),
            ln1_b: c("ln1.b"),
            wq: c("attn.wq"),
            wk: c("attn.wk"),
            wv: c("attn.wv"),
            wo: c("attn.wo"),
            ln2_g: c("ln2.g"),
            ln2_b: c("ln2.b"),
            w1: c("mlp.w1"),
            b1: c("mlp.b1"),
            w2: c("mlp.w2"),
            b2: c("mlp.b2"),
        }
    }
}

/// Where a block's attention takes its keys and values from.
pub(crate) enum Attention {
    /// Every row attends to every row of the input.
    Bidirectional,
    /// A single new row attends to the cached past (`[H, p, hd]` each) and itself.
    Causal { past: Option<(NodeId, NodeId)> },
    /// Keys and values come from the given `[H, n, hd]` tensors instead of the input.
    Override { k: NodeId, v: NodeId },
}

pub(crate) struct BlockOut {
    pub x: NodeId,
    /// Keys and values computed from this block's input, `[n, width]`.
    pub k: NodeId,
    pub v: NodeId,
}

/// Keys and values the block would compute for `x`, without running it.
pub(crate) fn project_kv(g: &mut Graph, b: &BlockNodes, x: NodeId) -> Result<(NodeId, NodeId)> {
    let h = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    Ok((g.matmul(h, b.wk)?, g.matmul(h, b.wv)?))
}

pub(crate) fn forward(
    g: &mut Graph,
    b: &BlockNodes,
    x: NodeId,
    heads: usize,
    attention: Attention,
) -> Result<BlockOut> {
    let width = g.value(x).shape()[1];
    let hd = width / heads;
    let h = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    let q = g.matmul(h, b.wq)?;
    let k = g.matmul(h, b.wk)?;
    let v = g.matmul(h, b.wv)?;

    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * hd, hd)?;
        let (keys, vals) = match attention {
            Attention::Bidirectional => (
                g.slice_cols(k, head * hd, hd)?,
                g.slice_cols(v, head * hd, hd)?,
            ),
            Attention::Causal { past } => {
                let kh = g.slice_cols(k, head * hd, hd)?;
                let vh = g.slice_cols(v, head * hd, hd)?;
                match past {
                    Some((pk, pv)) => {
                        let pk = g.select(pk, head)?;
                        let pv = g.select(pv, head)?;
                        (g.concat_rows(&[pk, kh])?, g.concat_rows(&[pv, vh])?)
                    }
                    None => (kh, vh),
                }
            }
            Attention::Override { k: ok, v: ov } => (g.select(ok, head)?, g.select(ov, head)?),
        };
        let kt = g.transpose(keys)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        outs.push(g.matmul(weights, vals)?);
    }
    let attn = g.concat_cols(&outs)?;
    let attn = g.matmul(attn, b.wo)?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
    let h = g.matmul(h, b.w1)?;
    let h = g.add(h, b.b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, b.w2)?;
    let h = g.add(h, b.b2)?;
    let x = g.add(x, h)?;
    Ok(BlockOut { x, k, v })
}

/// `[n, H*hd]` row-major to the cache layout `[H, n, hd]`.
pub(crate) fn rows_to_heads(data: &[f64], n: usize, heads: usize, hd: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..n {
        for h in 0..heads {
            for j in 0..hd {
                out[(h * n + r) * hd + j] = data[r * heads * hd + h * hd + j];
            }
        }
    }
    out
}
