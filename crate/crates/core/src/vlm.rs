//! Region-aware causal language model with an expanded `[IMG]` vocabulary
//! and low-rank adapters on the attention query/value projections.
//!
//! The input sequence is `[text, image, region, img-slot]`. The hidden
//! states at the `r` slot positions form the edit representation.

use regionedit_tensor::{ParamId, Scalar, Session, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{EditError, Result};
use crate::nn::{attention, sinusoid_table, Builder, FeedForward, LayerNorm, Linear, LoraLinear};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Text,
    Image,
    Region,
    Slot,
}

/// An assembled input: embedding rows plus one segment tag per row.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub embeddings: Var,
    pub segments: Vec<Segment>,
}

impl Assembled {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: LoraLinear,
    k: Linear,
    v: LoraLinear,
    out: Linear,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Vlm {
    pub width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub img_tokens: usize,
    /// Frozen base token table `[vocab_size, D]`.
    pub table: ParamId,
    /// Trainable `[IMG]` expansion rows `[r, D]`.
    pub expansion: ParamId,
    /// Image-feature adapter.
    pub adapter: (Linear, Linear),
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    pos_scale: f64,
}

impl Vlm {
    pub fn new(b: &mut Builder, cfg: &RunConfig) -> Result<Self> {
        let d = cfg.vlm_width;
        let emb_std = 0.3;
        b.scope("vlm", |b| {
            let table = b.normal("table", &[cfg.vocab_size, d], emb_std, false)?;
            let expansion = b.normal("img_expansion", &[cfg.img_tokens, d], emb_std, true)?;
            let adapter = (
                Linear::new(b, "adapter.fc1", cfg.vision_width, d, true)?,
                Linear::new(b, "adapter.fc2", d, d, true)?,
            );
            let mut blocks = Vec::with_capacity(cfg.vlm_layers);
            for i in 0..cfg.vlm_layers {
                let block = b.scope(&format!("block{i}"), |b| {
                    Ok(Block {
                        ln1: LayerNorm::new(b, "ln1", d, false)?,
                        q: LoraLinear::new(b, "attn.q", d, d, cfg.lora_rank, cfg.lora_alpha)?,
                        k: Linear::new(b, "attn.k", d, d, false)?,
                        v: LoraLinear::new(b, "attn.v", d, d, cfg.lora_rank, cfg.lora_alpha)?,
                        out: Linear::new(b, "attn.out", d, d, false)?,
                        ln2: LayerNorm::new(b, "ln2", d, false)?,
                        ffn: FeedForward::new(b, "ffn", d, cfg.mlp_ratio * d, false)?,
                    })
                })?;
                blocks.push(block);
            }
            Ok(Self {
                width: d,
                heads: cfg.vlm_heads,
                vocab_size: cfg.vocab_size,
                img_tokens: cfg.img_tokens,
                table,
                expansion,
                adapter,
                blocks,
                final_ln: LayerNorm::new(b, "final_ln", d, false)?,
                pos_scale: emb_std,
            })
        })
    }

    /// Size of the expanded vocabulary, `vocab_size + r`.
    pub fn expanded_vocab(&self) -> usize {
        self.vocab_size + self.img_tokens
    }

    /// Id of slot token `[IMG_{i+1}]`.
    pub fn img_token(&self, i: usize) -> usize {
        self.vocab_size + i
    }

    /// Embedding rows of ids in the expanded vocabulary.
    pub fn embed<T: Scalar>(&self, s: &Session<T>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.expanded_vocab()) {
            return Err(EditError::contract(format!("token id {bad} >= {}", self.expanded_vocab())));
        }
        let table = self.output_table(s)?;
        Ok(s.embedding(table, ids)?)
    }

    fn output_table<T: Scalar>(&self, s: &Session<T>) -> Result<Var> {
        Ok(s.concat(&[s.param(self.table), s.param(self.expansion)], 0)?)
    }

    /// Image features through the two-layer adapter.
    pub fn adapt_image<T: Scalar>(&self, s: &Session<T>, features: Var) -> Result<Var> {
        let h = self.adapter.0.forward(s, features)?;
        self.adapter.1.forward(s, s.gelu(h))
    }

    /// `H = [c, W(μ(x)), P, Q]`, where `Q` holds the first `slots` slot
    /// embeddings (all `r` for training).
    pub fn assemble<T: Scalar>(
        &self,
        s: &Session<T>,
        text: &[usize],
        image_features: Var,
        regions: Var,
        slots: usize,
    ) -> Result<Assembled> {
        if let Some(&bad) = text.iter().find(|&&i| i >= self.vocab_size) {
            return Err(EditError::contract(format!("text token {bad} >= vocab_size {}", self.vocab_size)));
        }
        let image = self.adapt_image(s, image_features)?;
        let (li, lr) = (s.shape(image)[0], s.shape(regions)[0]);
        let d_r = s.shape(regions)[1];
        if d_r != self.width {
            return Err(EditError::Tensor(regionedit_tensor::TensorError::Shape {
                op: "assemble",
                lhs: vec![lr, d_r],
                rhs: vec![lr, self.width],
            }));
        }
        let mut parts = vec![self.embed(s, text)?, image];
        if lr > 0 {
            parts.push(regions);
        }
        let slot_ids: Vec<usize> = (0..slots).map(|i| self.img_token(i)).collect();
        if slots > 0 {
            parts.push(self.embed(s, &slot_ids)?);
        }
        let embeddings = s.concat(&parts, 0)?;
        let mut segments = vec![Segment::Text; text.len()];
        segments.extend(std::iter::repeat_n(Segment::Image, li));
        segments.extend(std::iter::repeat_n(Segment::Region, lr));
        segments.extend(std::iter::repeat_n(Segment::Slot, slots));
        Ok(Assembled { embeddings, segments })
    }

    fn causal_mask<T: Scalar>(&self, len: usize) -> Tensor<T> {
        let neg = T::from_f64(-1e9);
        Tensor::from_fn([self.heads, len, len], |i| {
            let (r, c) = (i / len % len, i % len);
            if c > r {
                neg
            } else {
                T::zero()
            }
        })
    }

    /// Pre-norm causal transformer; returns the final normalized hidden
    /// states `[len, D]`. `adapted == false` bypasses every low-rank update.
    pub fn forward_causal<T: Scalar>(&self, s: &Session<T>, input: &Assembled, adapted: bool) -> Result<Var> {
        let len = input.len();
        let pos = s.constant(sinusoid_table::<T>(len, self.width).map(|v| v * T::from_f64(self.pos_scale)));
        let mut x = s.add(input.embeddings, pos)?;
        let mask = s.constant(self.causal_mask(len));
        for blk in &self.blocks {
            let h = blk.ln1.forward(s, x)?;
            let q = blk.q.forward(s, h, adapted)?;
            let k = blk.k.forward(s, h)?;
            let v = blk.v.forward(s, h, adapted)?;
            let a = attention(s, q, k, v, self.heads, Some(mask))?;
            x = s.add(x, blk.out.forward(s, a)?)?;
            let h = blk.ln2.forward(s, x)?;
            x = s.add(x, blk.ffn.forward(s, h)?)?;
        }
        self.final_ln.forward(s, x)
    }

    /// Tied output head: `hidden · [table; E]ᵀ`, `[rows, vocab + r]`.
    pub fn logits<T: Scalar>(&self, s: &Session<T>, hidden: Var) -> Result<Var> {
        Ok(s.matmul_nt(hidden, self.output_table(s)?)?)
    }

    /// Teacher-forced negative log-likelihood of the `r` slot tokens, given
    /// the full-sequence logits `[len, vocab + r]`.
    pub fn loss(&self, s: &Session<impl Scalar>, logits: Var) -> Result<Var> {
        let r = self.img_tokens;
        let len = s.shape(logits)[0];
        let rows = self.slot_prediction_rows(len)?;
        let sel = s.slice(logits, 0, rows.start, rows.end)?;
        let targets: Vec<usize> = (0..r).map(|i| self.img_token(i)).collect();
        Ok(s.cross_entropy(sel, &targets)?)
    }

    /// [`loss`](Self::loss) computed from hidden states, evaluating the
    /// output head only on the rows that predict slots.
    pub fn slot_loss<T: Scalar>(&self, s: &Session<T>, hidden: Var) -> Result<Var> {
        let len = s.shape(hidden)[0];
        let rows = self.slot_prediction_rows(len)?;
        let sel = s.slice(hidden, 0, rows.start, rows.end)?;
        let logits = self.logits(s, sel)?;
        let targets: Vec<usize> = (0..self.img_tokens).map(|i| self.img_token(i)).collect();
        Ok(s.cross_entropy(logits, &targets)?)
    }

    /// Rows whose next-token prediction is a slot token: the position
    /// before each slot.
    pub fn slot_prediction_rows(&self, len: usize) -> Result<std::ops::Range<usize>> {
        let r = self.img_tokens;
        if r == 0 {
            return Err(EditError::contract("slot loss needs at least one [IMG] token"));
        }
        if len < r + 1 {
            return Err(EditError::contract(format!("sequence of {len} rows cannot hold {r} slots after a prefix")));
        }
        Ok(len - r - 1..len - 1)
    }

    /// Hidden rows at the slot positions, `[r, D]`.
    pub fn edit_states<T: Scalar>(&self, s: &Session<T>, hidden: Var) -> Result<Var> {
        let len = s.shape(hidden)[0];
        if len < self.img_tokens {
            return Err(EditError::contract(format!("{len} hidden rows, expected at least {}", self.img_tokens)));
        }
        Ok(s.slice(hidden, 0, len - self.img_tokens, len)?)
    }

    /// Greedy decoding of `r` tokens after the `[c, image, regions]` prefix.
    /// Decoded tokens are fed back through their own embeddings.
    pub fn greedy_slots<T: Scalar>(
        &self,
        s: &Session<T>,
        text: &[usize],
        image_features: Var,
        regions: Var,
    ) -> Result<Vec<usize>> {
        let prefix = self.assemble(s, text, image_features, regions, 0)?;
        let mut rows = prefix.embeddings;
        let mut segments = prefix.segments;
        let mut out = Vec::with_capacity(self.img_tokens);
        for _ in 0..self.img_tokens {
            let input = Assembled { embeddings: rows, segments: segments.clone() };
            let hidden = self.forward_causal(s, &input, true)?;
            let last = s.slice(hidden, 0, input.len() - 1, input.len())?;
            let logits = s.value(self.logits(s, last)?);
            let next = argmax(logits.data());
            out.push(next);
            rows = s.concat(&[rows, self.embed(s, &[next])?], 0)?;
            segments.push(Segment::Slot);
        }
        Ok(out)
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
