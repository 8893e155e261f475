//! Latent diffusion branch: noise schedule, forward noising, the U-shaped
//! denoiser with decoupled cross-attention, dual-scale guidance and the
//! ancestral sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use regionedit_tensor::{ParamId, Scalar, Session, Tensor, Var};

use crate::config::RunConfig;
use crate::conditioning::{DecoupledCrossAttention, TimestepEmbedding};
use crate::error::{EditError, Result};
use crate::nn::{Builder, LayerNorm, Linear};

/// Linear β ramp; `alpha_bar[t] = Π_{s ≤ t} (1 − β_s)` with `alpha_bar[0] = 1`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Self {
        let k = 1000.0 / steps as f64;
        let (start, end) = (1e-4 * k, 2e-2 * k);
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                start + (end - start) * frac
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Self { betas, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(EditError::contract(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
    pub fn add_noise<T: Scalar>(&self, z0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return Err(regionedit_tensor::TensorError::Shape {
                op: "add_noise",
                lhs: z0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            }
            .into());
        }
        let a = self.alpha_bar[t];
        let (ca, cn) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
        let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| ca * z + cn * e).collect();
        Ok(Tensor::new(z0.shape().to_vec(), data)?)
    }

    /// Decreasing timesteps visited by a sampler with `steps` steps, ending
    /// at 1 and starting at `T`.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(EditError::contract(format!("sampling steps {steps} outside 1..={t_max}")));
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    t_max
                } else {
                    1 + ((t_max - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize
                }
            })
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// Dual-scale guidance: `ε(∅,∅) + s_I·(ε(c_I,∅) − ε(∅,∅)) + s_T·(ε(c_I,c_T) − ε(c_I,∅))`.
pub fn cfg_combine<T: Scalar>(
    uncond: &Tensor<T>,
    image: &Tensor<T>,
    full: &Tensor<T>,
    s_img: f64,
    s_txt: f64,
) -> Result<Tensor<T>> {
    for other in [image, full] {
        if other.shape() != uncond.shape() {
            return Err(regionedit_tensor::TensorError::Shape {
                op: "cfg_combine",
                lhs: uncond.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
            .into());
        }
    }
    let data = uncond
        .data()
        .iter()
        .zip(image.data())
        .zip(full.data())
        .map(|((&u, &i), &f)| {
            let (u, i, f) = (u.as_f64(), i.as_f64(), f.as_f64());
            T::from_f64(u + s_img * (i - u) + s_txt * (f - i))
        })
        .collect();
    Ok(Tensor::new(uncond.shape().to_vec(), data)?)
}

/// Independent image/text condition drops for one training record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Dropout {
    pub image: bool,
    pub text: bool,
}

pub fn condition_dropout(p_img: f64, p_txt: f64, rng: &mut impl Rng) -> Result<Dropout> {
    for p in [p_img, p_txt] {
        if !(0.0..=1.0).contains(&p) {
            return Err(EditError::contract(format!("drop probability {p} outside [0, 1]")));
        }
    }
    Ok(Dropout { image: rng.random_bool(p_img), text: rng.random_bool(p_txt) })
}

/// Ancestral DDPM sampling over the respaced timesteps. `predict(z_t, t)`
/// returns the noise estimate; `clip_x0` projects each clean-latent
/// estimate back into the data range.
pub fn ddpm_sample(
    schedule: &NoiseSchedule,
    steps: usize,
    shape: &[usize],
    rng: &mut impl Rng,
    mut predict: impl FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
    mut clip_x0: impl FnMut(Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let ts = schedule.respaced(steps)?;
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    let n: usize = shape.iter().product();
    let mut z = Tensor::from_f64(shape.to_vec(), &normal(n))?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = predict(&z, t)?;
        let (ab, ab_prev) = (schedule.alpha_bar[t], schedule.alpha_bar[t_prev]);
        let x0: Vec<f64> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zt, &e)| (zt as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt())
            .collect();
        let x0 = clip_x0(Tensor::from_f64(shape.to_vec(), &x0)?)?;
        if t_prev == 0 {
            z = x0;
            break;
        }
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let noise = normal(n);
        let next: Vec<f64> = x0
            .data()
            .iter()
            .zip(z.data())
            .zip(&noise)
            .map(|((&x, &zt), &w)| c0 * x as f64 + ct * zt as f64 + sigma * w)
            .collect();
        z = Tensor::from_f64(shape.to_vec(), &next)?;
    }
    Ok(z)
}

/// Convolution as patch extraction plus a linear map, on `[h·w, c]` rows.
#[derive(Clone, Debug)]
struct Conv {
    lin: Linear,
    kernel: usize,
    stride: usize,
}

impl Conv {
    fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self { lin: Linear::new(b, name, kernel * kernel * c_in, c_out, true)?, kernel, stride })
    }

    fn forward<T: Scalar>(&self, s: &Session<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = s.shape(x)[1];
        let grid = s.reshape(x, &[h, w, c])?;
        let cols = s.im2col(grid, self.kernel, self.stride, self.kernel / 2)?;
        self.lin.forward(s, cols)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    ln1: LayerNorm,
    conv1: Conv,
    temb: Linear,
    ln2: LayerNorm,
    conv2: Conv,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, c_in: usize, c_out: usize, t_width: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ln1: LayerNorm::new(b, "ln1", c_in, true)?,
                conv1: Conv::new(b, "conv1", c_in, c_out, 3, 1)?,
                temb: Linear::new(b, "temb", t_width, c_out, true)?,
                ln2: LayerNorm::new(b, "ln2", c_out, true)?,
                conv2: Conv::new(b, "conv2", c_out, c_out, 3, 1)?,
                skip: if c_in == c_out { None } else { Some(Linear::new(b, "skip", c_in, c_out, true)?) },
            })
        })
    }

    fn forward<T: Scalar>(&self, s: &Session<T>, x: Var, temb: Var, h: usize, w: usize) -> Result<Var> {
        let y = s.silu(self.ln1.forward(s, x)?);
        let y = self.conv1.forward(s, y, h, w)?;
        let tproj = self.temb.forward(s, temb)?;
        let width = s.shape(tproj)[1];
        let y = s.add(y, s.reshape(tproj, &[width])?)?;
        let y = s.silu(self.ln2.forward(s, y)?);
        let y = self.conv2.forward(s, y, h, w)?;
        let skip = match &self.skip {
            Some(l) => l.forward(s, x)?,
            None => x,
        };
        Ok(s.add(skip, y)?)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    ln: LayerNorm,
    dca: DecoupledCrossAttention,
    out: Linear,
}

impl AttnBlock {
    fn new(b: &mut Builder, name: &str, c: usize, d_c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ln: LayerNorm::new(b, "ln", c, true)?,
                dca: DecoupledCrossAttention::new(b, "dca", c, d_c)?,
                out: Linear::new(b, "out", c, c, true)?,
            })
        })
    }

    fn forward<T: Scalar>(&self, s: &Session<T>, x: Var, cond: &DenoiserCondition) -> Result<Var> {
        let h = self.ln.forward(s, x)?;
        let a = self.dca.forward(s, h, cond.text, cond.visual, cond.lambda)?;
        Ok(s.add(x, self.out.forward(s, a)?)?)
    }
}

/// What the attention layers of one denoiser call see.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserCondition {
    /// Keys/values of the text branch.
    pub text: Var,
    /// Keys/values of the visual branch; `None` disables it.
    pub visual: Option<Var>,
    pub lambda: f64,
}

/// U-shaped denoiser on `[L, L, 2·d_z]` inputs (noisy latent and source
/// latent stacked on channels), predicting `[L, L, d_z]` noise.
#[derive(Clone, Debug)]
pub struct Denoiser {
    latent: usize,
    channels: usize,
    levels: Vec<usize>,
    conv_in: Conv,
    pos: ParamId,
    temb: TimestepEmbedding,
    down: Vec<(ResBlock, Option<AttnBlock>)>,
    downsample: Vec<Conv>,
    mid: (ResBlock, Option<AttnBlock>),
    up: Vec<(ResBlock, Option<AttnBlock>)>,
    upsample: Vec<Conv>,
    out_ln: LayerNorm,
    conv_out: Conv,
}

impl Denoiser {
    pub fn new(b: &mut Builder, cfg: &RunConfig) -> Result<Self> {
        let c0 = cfg.unet_channels;
        let dz = cfg.latent_channels();
        let l = cfg.latent_size();
        let dc = cfg.cond_width;
        let t_width = 2 * c0;
        let levels: Vec<usize> = (0..cfg.unet_levels).map(|i| c0 << i).collect();
        let attn = |b: &mut Builder, name: &str, level: usize| -> Result<Option<AttnBlock>> {
            if cfg.attn_levels.contains(&level) {
                Ok(Some(AttnBlock::new(b, name, levels[level], dc)?))
            } else {
                Ok(None)
            }
        };
        b.scope("unet", |b| {
            let conv_in = Conv::new(b, "conv_in", 2 * dz, c0, 3, 1)?;
            let pos = b.normal("pos", &[l * l, c0], 0.1, true)?;
            let temb = TimestepEmbedding::new(b, "temb", c0, t_width)?;
            let last = levels.len() - 1;
            let mut down = Vec::new();
            let mut downsample = Vec::new();
            for (i, &c) in levels.iter().enumerate() {
                let c_in = if i == 0 { c0 } else { levels[i - 1] };
                let res = ResBlock::new(b, &format!("down{i}.res"), c_in, c, t_width)?;
                down.push((res, attn(b, &format!("down{i}.attn"), i)?));
                if i < last {
                    downsample.push(Conv::new(b, &format!("down{i}.downsample"), c, c, 3, 2)?);
                }
            }
            let mid = (
                ResBlock::new(b, "mid.res", levels[last], levels[last], t_width)?,
                attn(b, "mid.attn", last)?,
            );
            let mut up = Vec::new();
            let mut upsample = Vec::new();
            for i in (0..levels.len()).rev() {
                let res = ResBlock::new(b, &format!("up{i}.res"), levels[i], levels[i], t_width)?;
                up.push((res, attn(b, &format!("up{i}.attn"), i)?));
                if i > 0 {
                    upsample.push(Conv::new(b, &format!("up{i}.upsample"), levels[i], levels[i - 1], 3, 1)?);
                }
            }
            Ok(Self {
                latent: l,
                channels: dz,
                levels: levels.clone(),
                conv_in,
                pos,
                temb,
                down,
                downsample,
                mid,
                up,
                upsample,
                out_ln: LayerNorm::new(b, "out_ln", c0, true)?,
                conv_out: Conv::new(b, "conv_out", c0, dz, 3, 1)?,
            })
        })
    }

    /// Noise estimate for `z_t` given the source latent block (zeros when
    /// the image condition is dropped) and the attention conditions.
    pub fn forward<T: Scalar>(
        &self,
        s: &Session<T>,
        z_t: Var,
        t: usize,
        src: Var,
        cond: &DenoiserCondition,
    ) -> Result<Var> {
        let want = vec![self.latent, self.latent, self.channels];
        for v in [z_t, src] {
            let got = s.shape(v);
            if got != want {
                return Err(regionedit_tensor::TensorError::Shape { op: "denoise", lhs: got, rhs: want }.into());
            }
        }
        let mut size = self.latent;
        let x = s.concat(&[z_t, src], 2)?;
        let x = s.reshape(x, &[size * size, 2 * self.channels])?;
        let mut h = self.conv_in.forward(s, x, size, size)?;
        h = s.add(h, s.param(self.pos))?;
        let temb = s.silu(self.temb.forward(s, t)?);

        let mut skips = Vec::with_capacity(self.levels.len());
        for (i, (res, attn)) in self.down.iter().enumerate() {
            h = res.forward(s, h, temb, size, size)?;
            if let Some(a) = attn {
                h = a.forward(s, h, cond)?;
            }
            skips.push(h);
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(s, h, size, size)?;
                size /= 2;
            }
        }
        h = self.mid.0.forward(s, h, temb, size, size)?;
        if let Some(a) = &self.mid.1 {
            h = a.forward(s, h, cond)?;
        }
        for (j, (res, attn)) in self.up.iter().enumerate() {
            h = s.add(h, skips.pop().expect("one skip per level"))?;
            h = res.forward(s, h, temb, size, size)?;
            if let Some(a) = attn {
                h = a.forward(s, h, cond)?;
            }
            if let Some(us) = self.upsample.get(j) {
                let c = s.shape(h)[1];
                let grid = s.reshape(h, &[size, size, c])?;
                let grid = s.upsample2x(grid)?;
                size *= 2;
                let rows = s.reshape(grid, &[size * size, c])?;
                h = us.forward(s, rows, size, size)?;
            }
        }
        let h = s.silu(self.out_ln.forward(s, h)?);
        let out = self.conv_out.forward(s, h, size, size)?;
        Ok(s.reshape(out, &[size, size, self.channels])?)
    }
}

/// Mean squared error between predicted and true noise.
pub fn loss_diffusion<T: Scalar>(s: &Session<T>, eps_hat: Var, eps: Var) -> Result<Var> {
    let d = s.sub(eps_hat, eps)?;
    Ok(s.mean(s.square(d)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_monotone_with_unit_start() {
        let sch = NoiseSchedule::linear(64);
        assert_eq!(sch.alpha_bar[0], 1.0);
        assert!(sch.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(sch.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(sch.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!((sch.betas[0] - 1e-4 * 1000.0 / 64.0).abs() < 1e-15);
        assert!((sch.betas[63] - 2e-2 * 1000.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn add_noise_boundaries() {
        let sch = NoiseSchedule::linear(32);
        let z0 = Tensor::<f64>::from_fn([2, 3], |i| i as f64 - 2.0);
        let eps = Tensor::<f64>::from_fn([2, 3], |i| (i as f64).sin());
        assert!(sch.add_noise(&z0, 0, &eps).unwrap().bit_eq(&z0));
        let zero = Tensor::<f64>::zeros([2, 3]);
        let pure = sch.add_noise(&zero, 9, &eps).unwrap();
        let c = (1.0 - sch.alpha_bar[9]).sqrt();
        for (p, e) in pure.data().iter().zip(eps.data()) {
            assert_eq!(*p, c * e);
        }
        assert!(sch.add_noise(&z0, 33, &eps).is_err());
        assert!(sch.add_noise(&z0, 3, &Tensor::zeros([3, 2])).is_err());
    }

    #[test]
    fn guidance_scalar_case() {
        let t = |v: f64| Tensor::new([1], vec![v]).unwrap();
        let out = cfg_combine(&t(1.0), &t(2.0), &t(4.0), 1.5, 7.5).unwrap();
        assert!((out.data()[0] - 17.5).abs() <= 1e-12);
    }

    #[test]
    fn respacing_covers_the_range() {
        let sch = NoiseSchedule::linear(64);
        assert_eq!(sch.respaced(64).unwrap(), (1..=64).rev().collect::<Vec<_>>());
        let short = sch.respaced(8).unwrap();
        assert_eq!((short[0], *short.last().unwrap(), short.len()), (64, 1, 8));
        assert!(sch.respaced(0).is_err());
        assert!(sch.respaced(65).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(condition_dropout(0.0, 0.0, &mut rng).unwrap(), Dropout::default());
            assert_eq!(condition_dropout(1.0, 1.0, &mut rng).unwrap(), Dropout { image: true, text: true });
        }
        assert!(condition_dropout(1.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn sampler_with_perfect_zero_noise_recovers_clip_target() {
        // With a predictor that always says "no noise", x0 = z_t/√ᾱ; clipping to
        // zero makes the chain collapse to zero.
        let sch = NoiseSchedule::linear(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = ddpm_sample(
            &sch,
            16,
            &[2, 2, 3],
            &mut rng,
            |z, _| Ok(Tensor::zeros(z.shape().to_vec())),
            |x| Ok(x.map(|_| 0.0)),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
