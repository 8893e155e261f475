//! Query bridge from the language model's slot states to the conditioning
//! space of the diffusion branch.

use regionedit_tensor::{ParamId, Scalar, Session, Var};

use crate::config::RunConfig;
use crate::error::{EditError, Result};
use crate::nn::{Builder, FeedForward, LayerNorm, Linear, MultiHeadAttention};

#[derive(Clone, Debug)]
struct BridgeBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// `n_q` learnable queries reading the `r` edit states through `depth`
/// blocks of self-attention, cross-attention and feed-forward.
#[derive(Clone, Debug)]
pub struct QFormer {
    pub queries: ParamId,
    pub rows: usize,
    ctx_proj: Linear,
    ctx_ln: LayerNorm,
    blocks: Vec<BridgeBlock>,
    final_ln: LayerNorm,
}

impl QFormer {
    pub fn new(b: &mut Builder, cfg: &RunConfig) -> Result<Self> {
        let dc = cfg.cond_width;
        let heads = cfg.cond_heads;
        b.scope("qformer", |b| {
            let queries = b.normal("queries", &[cfg.qformer_queries, dc], 1.0 / (dc as f64).sqrt(), true)?;
            let ctx_proj = Linear::new(b, "ctx_proj", cfg.vlm_width, dc, true)?;
            let ctx_ln = LayerNorm::new(b, "ctx_ln", dc, true)?;
            let mut blocks = Vec::with_capacity(cfg.qformer_depth);
            for i in 0..cfg.qformer_depth {
                blocks.push(b.scope(&format!("block{i}"), |b| {
                    Ok(BridgeBlock {
                        ln_self: LayerNorm::new(b, "ln_self", dc, true)?,
                        self_attn: MultiHeadAttention::new(b, "self_attn", dc, dc, heads, true)?,
                        ln_cross: LayerNorm::new(b, "ln_cross", dc, true)?,
                        cross_attn: MultiHeadAttention::new(b, "cross_attn", dc, dc, heads, true)?,
                        ln_ffn: LayerNorm::new(b, "ln_ffn", dc, true)?,
                        ffn: FeedForward::new(b, "ffn", dc, 2 * dc, true)?,
                    })
                })?);
            }
            Ok(Self {
                queries,
                rows: cfg.img_tokens,
                ctx_proj,
                ctx_ln,
                blocks,
                final_ln: LayerNorm::new(b, "final_ln", dc, true)?,
            })
        })
    }

    /// `e: [r, D] → e_t: [n_q, D_c]`.
    pub fn forward<T: Scalar>(&self, s: &Session<T>, e: Var) -> Result<Var> {
        let shape = s.shape(e);
        if shape.len() != 2 || shape[0] != self.rows {
            return Err(EditError::contract(format!(
                "bridge expects {} edit-state rows, got shape {shape:?}",
                self.rows
            )));
        }
        let ctx = self.ctx_proj.forward(s, e)?;
        let ctx = self.ctx_ln.forward(s, ctx)?;
        let mut x = s.param(self.queries);
        for blk in &self.blocks {
            let h = blk.ln_self.forward(s, x)?;
            x = s.add(x, blk.self_attn.forward(s, h, h)?)?;
            let h = blk.ln_cross.forward(s, x)?;
            x = s.add(x, blk.cross_attn.forward(s, h, ctx)?)?;
            let h = blk.ln_ffn.forward(s, x)?;
            x = s.add(x, blk.ffn.forward(s, h)?)?;
        }
        self.final_ln.forward(s, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use regionedit_tensor::Tensor;

    #[test]
    fn output_shape_ignores_row_count_and_checks_it() {
        let cfg = RunConfig::micro();
        let mut b = Builder::new(2);
        let q = QFormer::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let e = s.constant(Tensor::from_fn([cfg.img_tokens, cfg.vlm_width], |i| (i as f32).cos()));
        let out = q.forward(&s, e).unwrap();
        assert_eq!(s.shape(out), vec![cfg.qformer_queries, cfg.cond_width]);
        let wrong = s.constant(Tensor::zeros([cfg.img_tokens + 1, cfg.vlm_width]));
        assert!(matches!(q.forward(&s, wrong), Err(EditError::Contract(_))));
    }
}
