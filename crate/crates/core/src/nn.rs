//! Parameter construction and the small layer vocabulary shared by every
//! module: linear maps (optionally low-rank adapted), layer norms,
//! feed-forward blocks and multi-head attention.
//!
//! Layers hold only [`ParamId`]s. Forward passes are generic over the scalar
//! type and read values through a [`Session`], so the same model runs in f32
//! for training and in f64 for gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regionedit_tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Allocates named parameters from a seeded stream.
pub struct Builder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }

    /// Runs `f` with `name` appended to the parameter-name prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn add(&mut self, name: &str, value: Tensor<f32>, trainable: bool) -> Result<ParamId> {
        let full = self.full_name(name);
        Ok(self.store.add(full, value, trainable)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        });
        self.add(name, t, trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()), trainable)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), 1.0), trainable)
    }
}

/// Affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize, trainable: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.normal("weight", &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), trainable)?,
                bias: Some(b.zeros("bias", &[d_out], trainable)?),
                d_in,
                d_out,
            })
        })
    }

    /// A linear map whose weights start at zero.
    pub fn zeroed(b: &mut Builder, name: &str, d_in: usize, d_out: usize, trainable: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.zeros("weight", &[d_in, d_out], trainable)?,
                bias: Some(b.zeros("bias", &[d_out], trainable)?),
                d_in,
                d_out,
            })
        })
    }

    pub fn no_bias(b: &mut Builder, name: &str, d_in: usize, d_out: usize, trainable: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                weight: b.normal("weight", &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), trainable)?,
                bias: None,
                d_in,
                d_out,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Result<Var> {
        let y = s.matmul(x, s.param(self.weight))?;
        Ok(match self.bias {
            Some(b) => s.add(y, s.param(b))?,
            None => y,
        })
    }
}

/// A frozen linear map plus a trainable low-rank update `scale·(x·A)·B`,
/// with `B` zero at initialization.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

impl LoraLinear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        let base = Linear::new(b, name, d_in, d_out, false)?;
        b.scope(name, |b| {
            Ok(Self {
                base,
                down: b.normal("lora_a", &[d_in, rank], 1.0 / (d_in as f64).sqrt(), true)?,
                up: b.zeros("lora_b", &[rank, d_out], true)?,
                scale: alpha / rank as f64,
            })
        })
    }

    /// With `adapted == false` only the frozen base map is evaluated.
    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var, adapted: bool) -> Result<Var> {
        let y = self.base.forward(s, x)?;
        if !adapted {
            return Ok(y);
        }
        let low = s.matmul(x, s.param(self.down))?;
        let delta = s.matmul(low, s.param(self.up))?;
        Ok(s.add(y, s.scale(delta, T::from_f64(self.scale)))?)
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, d: usize, trainable: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gain: b.ones("gain", &[d], trainable)?,
                bias: b.zeros("bias", &[d], trainable)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        Ok(s.layer_norm(x, Some(g), Some(b), T::from_f64(LN_EPS))?)
    }
}

/// Plain normalization without affine parameters.
pub fn norm<T: Scalar>(s: &Session<T>, x: Var) -> Result<Var> {
    Ok(s.layer_norm(x, None, None, T::from_f64(LN_EPS))?)
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, d: usize, hidden: usize, trainable: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                fc1: Linear::new(b, "fc1", d, hidden, trainable)?,
                fc2: Linear::new(b, "fc2", hidden, d, trainable)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        self.fc2.forward(s, s.gelu(h))
    }
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q: [Lq, D]`, `k, v: [Lk, D]`; `mask`, when given, is an additive
/// `[heads, Lq, Lk]` tensor.
pub fn attention<T: Scalar>(s: &Session<T>, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
    let qs = s.shape(q);
    let ks = s.shape(k);
    let (lq, d, lk) = (qs[0], qs[1], ks[0]);
    let dh = d / heads;
    let split = |x: Var, len: usize| -> Result<Var> {
        let x = s.reshape(x, &[len, heads, dh])?;
        Ok(s.permute(x, &[1, 0, 2])?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = s.bmm(qh, kh, true)?;
    let mut scores = s.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        scores = s.add(scores, m)?;
    }
    let p = s.softmax_rows(scores)?;
    let out = s.bmm(p, vh, false)?;
    let out = s.permute(out, &[1, 0, 2])?;
    Ok(s.reshape(out, &[lq, d])?)
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Queries of width `d`, keys/values read from width `d_kv`.
    pub fn new(b: &mut Builder, name: &str, d: usize, d_kv: usize, heads: usize, trainable: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                q: Linear::new(b, "q", d, d, trainable)?,
                k: Linear::new(b, "k", d_kv, d, trainable)?,
                v: Linear::new(b, "v", d_kv, d, trainable)?,
                out: Linear::new(b, "out", d, d, trainable)?,
                heads,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var, ctx: Var) -> Result<Var> {
        let q = self.q.forward(s, x)?;
        let k = self.k.forward(s, ctx)?;
        let v = self.v.forward(s, ctx)?;
        let o = attention(s, q, k, v, self.heads, None)?;
        self.out.forward(s, o)
    }
}

/// Standard transformer sinusoidal code for a scalar position.
pub fn sinusoid_row(pos: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut row = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half.max(1) as f64).exp();
        row[i] = (pos * freq).sin();
        row[half + i] = (pos * freq).cos();
    }
    row
}

/// `[len, d]` table of [`sinusoid_row`] for positions `0..len`.
pub fn sinusoid_table<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let data: Vec<f64> = (0..len).flat_map(|p| sinusoid_row(p as f64, d)).collect();
    Tensor::from_f64([len, d], &data).expect("sinusoid extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_with_zero_up_matrix_equals_base() {
        let mut b = Builder::new(1);
        let layer = LoraLinear::new(&mut b, "proj", 5, 3, 2, 4.0).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let x = s.constant(Tensor::from_fn([4, 5], |i| (i as f32 * 0.37).sin()));
        let base = s.value(layer.forward(&s, x, false).unwrap());
        let adapted = s.value(layer.forward(&s, x, true).unwrap());
        assert!(base.bit_eq(&adapted));
        assert_eq!(store.get(layer.base.weight).name, "proj.weight");
        assert!(!store.get(layer.base.weight).trainable);
        assert!(store.get(layer.up).trainable);
    }

    #[test]
    fn attention_with_one_key_returns_its_value() {
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let q = s.constant(Tensor::from_fn([3, 4], |i| i as f64));
        let k = s.constant(Tensor::from_fn([1, 4], |i| -(i as f64)));
        let v = s.constant(Tensor::new([1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = s.value(attention(&s, q, k, v, 2, None).unwrap());
        for row in out.data().chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn sinusoid_rows_are_distinct() {
        let t = sinusoid_table::<f64>(64, 8);
        for a in 0..64 {
            for b in a + 1..64 {
                let diff: f64 = (0..8).map(|i| (t.at(&[a, i]) - t.at(&[b, i])).abs()).sum();
                assert!(diff > 1e-6, "{a} vs {b}");
            }
        }
    }
}
