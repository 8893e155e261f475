//! Conditioning modules between the bridge and the denoiser:
//! the timestep-modulated target resampler, the hybrid visual
//! cross-attention stack, and the decoupled cross-attention used inside the
//! denoiser's attention layers.

use regionedit_tensor::{ParamId, Scalar, Session, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{EditError, Result};
use crate::nn::{attention, norm, sinusoid_row, Builder, FeedForward, LayerNorm, Linear, MultiHeadAttention};

/// Sinusoidal code of `t` followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    pub width: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimestepEmbedding {
    pub fn new(b: &mut Builder, name: &str, width: usize, out: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                width,
                fc1: Linear::new(b, "fc1", width, out, true)?,
                fc2: Linear::new(b, "fc2", out, out, true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, t: usize) -> Result<Var> {
        let code = Tensor::from_f64([1, self.width], &sinusoid_row(t as f64, self.width))?;
        let h = self.fc1.forward(s, s.constant(code))?;
        self.fc2.forward(s, s.silu(h))
    }
}

#[derive(Clone, Debug)]
struct ResamplerUnit {
    modulation: (Linear, Linear),
    ctx_ln: LayerNorm,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
}

/// Time-aware target injection: resampler units whose layer norms are
/// scaled and shifted by a projection of the timestep embedding.
#[derive(Clone, Debug)]
pub struct Tati {
    pub timesteps: usize,
    pub queries: ParamId,
    width: usize,
    temb: TimestepEmbedding,
    units: Vec<ResamplerUnit>,
    final_ln: LayerNorm,
}

impl Tati {
    pub fn new(b: &mut Builder, cfg: &RunConfig) -> Result<Self> {
        let dc = cfg.cond_width;
        b.scope("tati", |b| {
            let queries = b.normal("queries", &[cfg.tati_queries, dc], 1.0 / (dc as f64).sqrt(), true)?;
            let temb = TimestepEmbedding::new(b, "temb", dc, dc)?;
            let mut units = Vec::with_capacity(cfg.tati_units);
            for i in 0..cfg.tati_units {
                units.push(b.scope(&format!("unit{i}"), |b| {
                    Ok(ResamplerUnit {
                        modulation: (
                            Linear::new(b, "mod.fc1", dc, dc, true)?,
                            Linear::zeroed(b, "mod.fc2", dc, 4 * dc, true)?,
                        ),
                        ctx_ln: LayerNorm::new(b, "ctx_ln", dc, true)?,
                        cross_attn: MultiHeadAttention::new(b, "cross_attn", dc, dc, cfg.cond_heads, true)?,
                        ffn: FeedForward::new(b, "ffn", dc, 2 * dc, true)?,
                    })
                })?);
            }
            Ok(Self {
                timesteps: cfg.timesteps,
                queries,
                width: dc,
                temb,
                units,
                final_ln: LayerNorm::new(b, "final_ln", dc, true)?,
            })
        })
    }

    /// Parameters of the per-unit modulation output layers.
    pub fn modulation_params(&self) -> Vec<ParamId> {
        self.units
            .iter()
            .flat_map(|u| [u.modulation.1.weight, u.modulation.1.bias.expect("modulation bias")])
            .collect()
    }

    fn ada_norm<T: Scalar>(s: &Session<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = norm(s, x)?;
        let scaled = s.mul(n, s.add_scalar(gamma, T::one()))?;
        Ok(s.add(scaled, beta)?)
    }

    /// `e_t: [n_q, D_c] → [n_tq, D_c]` for timestep `t ∈ 0..=T`.
    pub fn forward<T: Scalar>(&self, s: &Session<T>, e_t: Var, t: usize) -> Result<Var> {
        if t > self.timesteps {
            return Err(EditError::contract(format!("timestep {t} outside 0..={}", self.timesteps)));
        }
        let d = self.width;
        let temb = s.silu(self.temb.forward(s, t)?);
        let mut x = s.param(self.queries);
        for unit in &self.units {
            let m = unit.modulation.0.forward(s, temb)?;
            let m = unit.modulation.1.forward(s, s.silu(m))?;
            let m = s.reshape(m, &[4 * d])?;
            let part = |i: usize| s.slice(m, 0, i * d, (i + 1) * d);
            let (g1, b1, g2, b2) = (part(0)?, part(1)?, part(2)?, part(3)?);
            let ctx = unit.ctx_ln.forward(s, e_t)?;
            let h = Self::ada_norm(s, x, g1, b1)?;
            x = s.add(x, unit.cross_attn.forward(s, h, ctx)?)?;
            let h = Self::ada_norm(s, x, g2, b2)?;
            x = s.add(x, unit.ffn.forward(s, h)?)?;
        }
        self.final_ln.forward(s, x)
    }
}

#[derive(Clone, Debug)]
struct HvcaBlock {
    ln_visual_q: LayerNorm,
    ln_visual_kv: LayerNorm,
    visual_attn: MultiHeadAttention,
    ln_text_q: LayerNorm,
    ln_text_kv: LayerNorm,
    text_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Hybrid visual cross-attention: learnable queries read the hybrid visual
/// tokens, then the text features, in each of `L` blocks.
#[derive(Clone, Debug)]
pub struct Hvca {
    pub queries: ParamId,
    visual_proj: Linear,
    blocks: Vec<HvcaBlock>,
    final_ln: LayerNorm,
}

impl Hvca {
    pub fn new(b: &mut Builder, cfg: &RunConfig) -> Result<Self> {
        let dc = cfg.cond_width;
        let heads = cfg.cond_heads;
        b.scope("hvca", |b| {
            let queries = b.normal("queries", &[cfg.hvca_queries, dc], 1.0 / (dc as f64).sqrt(), true)?;
            let visual_proj = Linear::new(b, "visual_proj", cfg.hybrid_width, dc, true)?;
            let mut blocks = Vec::with_capacity(cfg.hvca_blocks);
            for i in 0..cfg.hvca_blocks {
                blocks.push(b.scope(&format!("block{i}"), |b| {
                    Ok(HvcaBlock {
                        ln_visual_q: LayerNorm::new(b, "ln_visual_q", dc, true)?,
                        ln_visual_kv: LayerNorm::new(b, "ln_visual_kv", dc, true)?,
                        visual_attn: MultiHeadAttention::new(b, "visual_attn", dc, dc, heads, true)?,
                        ln_text_q: LayerNorm::new(b, "ln_text_q", dc, true)?,
                        ln_text_kv: LayerNorm::new(b, "ln_text_kv", dc, true)?,
                        text_attn: MultiHeadAttention::new(b, "text_attn", dc, dc, heads, true)?,
                        ln_ffn: LayerNorm::new(b, "ln_ffn", dc, true)?,
                        ffn: FeedForward::new(b, "ffn", dc, 2 * dc, true)?,
                    })
                })?);
            }
            Ok(Self { queries, visual_proj, blocks, final_ln: LayerNorm::new(b, "final_ln", dc, true)? })
        })
    }

    /// `hybrid: [L_h, D_h]`, `text: [n, D_c]` → `v: [n_hq, D_c]`.
    pub fn forward<T: Scalar>(&self, s: &Session<T>, hybrid: Var, text: Var) -> Result<Var> {
        let visual = self.visual_proj.forward(s, hybrid)?;
        let mut x = s.param(self.queries);
        for blk in &self.blocks {
            let h = blk.ln_visual_q.forward(s, x)?;
            let kv = blk.ln_visual_kv.forward(s, visual)?;
            x = s.add(x, blk.visual_attn.forward(s, h, kv)?)?;
            let h = blk.ln_text_q.forward(s, x)?;
            let kv = blk.ln_text_kv.forward(s, text)?;
            x = s.add(x, blk.text_attn.forward(s, h, kv)?)?;
            let h = blk.ln_ffn.forward(s, x)?;
            x = s.add(x, blk.ffn.forward(s, h)?)?;
        }
        self.final_ln.forward(s, x)
    }
}

/// Single-head attention with one query projection and separate key/value
/// projections for the text and visual conditions:
/// `Z' = softmax(Q K1ᵀ/√d) V1 + λ · softmax(Q K2ᵀ/√d) V2`.
#[derive(Clone, Debug)]
pub struct DecoupledCrossAttention {
    pub q: Linear,
    pub k_text: Linear,
    pub v_text: Linear,
    pub k_visual: Linear,
    pub v_visual: Linear,
}

/// The two branches of a decoupled attention, before mixing.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledBranches {
    pub text: Var,
    pub visual: Option<Var>,
}

impl DecoupledCrossAttention {
    pub fn new(b: &mut Builder, name: &str, d_u: usize, d_c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                q: Linear::no_bias(b, "q", d_u, d_u, true)?,
                k_text: Linear::no_bias(b, "k_text", d_c, d_u, true)?,
                v_text: Linear::no_bias(b, "v_text", d_c, d_u, true)?,
                k_visual: Linear::no_bias(b, "k_visual", d_c, d_u, true)?,
                v_visual: Linear::no_bias(b, "v_visual", d_c, d_u, true)?,
            })
        })
    }

    pub fn branches<T: Scalar>(&self, s: &Session<T>, z: Var, cond: Var, visual: Option<Var>) -> Result<DecoupledBranches> {
        let q = self.q.forward(s, z)?;
        let k1 = self.k_text.forward(s, cond)?;
        let v1 = self.v_text.forward(s, cond)?;
        let text = attention(s, q, k1, v1, 1, None)?;
        let visual = match visual {
            Some(v) => {
                let k2 = self.k_visual.forward(s, v)?;
                let v2 = self.v_visual.forward(s, v)?;
                Some(attention(s, q, k2, v2, 1, None)?)
            }
            None => None,
        };
        Ok(DecoupledBranches { text, visual })
    }

    pub fn mix<T: Scalar>(s: &Session<T>, branches: DecoupledBranches, lambda: f64) -> Result<Var> {
        match branches.visual {
            Some(v) => Ok(s.add(branches.text, s.scale(v, T::from_f64(lambda)))?),
            None => Ok(branches.text),
        }
    }

    /// `z: [m, d_u]`, `cond: [a, D_c]`, `visual: [b, D_c]` → `[m, d_u]`.
    /// Without a visual condition only the text branch runs.
    pub fn forward<T: Scalar>(&self, s: &Session<T>, z: Var, cond: Var, visual: Option<Var>, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() {
            return Err(EditError::contract(format!("lambda must be finite, got {lambda}")));
        }
        let branches = self.branches(s, z, cond, visual)?;
        Self::mix(s, branches, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use regionedit_tensor::ParamStore;

    fn micro() -> (RunConfig, Builder) {
        (RunConfig::micro(), Builder::new(4))
    }

    #[test]
    fn tati_shape_and_range() {
        let (cfg, mut b) = micro();
        let tati = Tati::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let e_t = s.constant(Tensor::from_fn([5, cfg.cond_width], |i| (i as f32 * 0.3).sin()));
        let out = tati.forward(&s, e_t, 1).unwrap();
        assert_eq!(s.shape(out), vec![cfg.tati_queries, cfg.cond_width]);
        assert!(tati.forward(&s, e_t, cfg.timesteps + 1).is_err());
    }

    #[test]
    fn hvca_shape() {
        let (cfg, mut b) = micro();
        let hvca = Hvca::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let hybrid = s.constant(Tensor::from_fn([7, cfg.hybrid_width], |i| (i as f32).sin()));
        let text = s.constant(Tensor::from_fn([3, cfg.cond_width], |i| (i as f32).cos()));
        assert_eq!(s.shape(hvca.forward(&s, hybrid, text).unwrap()), vec![cfg.hvca_queries, cfg.cond_width]);
    }

    #[test]
    fn two_key_attention_matches_hand_softmax() {
        // d = 1, m = 1: Q = zq·wq, keys k_i = c_i·wk, values c_i·wv
        let mut store = ParamStore::<f64>::new();
        let mut ids = Vec::new();
        for (name, w) in [("q", 0.8), ("k1", 1.5), ("v1", -0.5), ("k2", 0.3), ("v2", 2.0)] {
            ids.push(store.add(name, Tensor::new([1, 1], vec![w]).unwrap(), true).unwrap());
        }
        let lin = |id| Linear { weight: id, bias: None, d_in: 1, d_out: 1 };
        let dca = DecoupledCrossAttention {
            q: lin(ids[0]),
            k_text: lin(ids[1]),
            v_text: lin(ids[2]),
            k_visual: lin(ids[3]),
            v_visual: lin(ids[4]),
        };
        let s = Session::new(&store);
        let z = s.constant(Tensor::new([1, 1], vec![1.2]).unwrap());
        let c = s.constant(Tensor::new([2, 1], vec![0.4, -1.1]).unwrap());
        let v = s.constant(Tensor::new([2, 1], vec![2.0, 0.5]).unwrap());
        let out = s.item(dca.forward(&s, z, c, Some(v), 0.7).unwrap()).unwrap();
        let q = 1.2 * 0.8;
        let branch = |keys: [f64; 2], wk: f64, wv: f64| {
            let s0 = (q * keys[0] * wk).exp();
            let s1 = (q * keys[1] * wk).exp();
            (s0 * keys[0] * wv + s1 * keys[1] * wv) / (s0 + s1)
        };
        let want = branch([0.4, -1.1], 1.5, -0.5) + 0.7 * branch([2.0, 0.5], 0.3, 2.0);
        assert!((out - want).abs() < 1e-6, "{out} vs {want}");
    }
}
