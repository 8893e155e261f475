//! The full editing model: vision stack, language model, bridge,
//! conditioning modules and denoiser, wired for training and sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regionedit_tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};

use crate::bridge::QFormer;
use crate::conditioning::{Hvca, Tati};
use crate::config::RunConfig;
use crate::data::DatasetRecord;
use crate::diffusion::{cfg_combine, ddpm_sample, loss_diffusion, Denoiser, DenoiserCondition, Dropout, NoiseSchedule};
use crate::error::{EditError, Result};
use crate::image::{Image, RegionSet};
use crate::nn::Builder;
use crate::vision::{detect, LatentCodec, VisionStack};
use crate::vlm::Vlm;

/// One noising of the target latent.
#[derive(Clone, Debug)]
pub struct Noise {
    pub t: usize,
    pub eps: Tensor<f64>,
}

/// Stochastic inputs of one training example: condition drops and one or
/// more noisings, whose diffusion losses are averaged.
#[derive(Clone, Debug)]
pub struct Draw {
    pub dropout: Dropout,
    pub noise: Vec<Noise>,
}

impl Draw {
    pub fn single(t: usize, eps: Tensor<f64>, dropout: Dropout) -> Self {
        Self { dropout, noise: vec![Noise { t, eps }] }
    }
}

/// Loss terms of one record.
#[derive(Clone, Copy, Debug)]
pub struct RecordLoss {
    /// Absent when the text condition was dropped.
    pub vlm: Option<Var>,
    pub diffusion: Var,
    pub total: Var,
}

/// Conditioning computed once per sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleConditions {
    /// Bridged edit representation, or the null rows.
    pub text: Var,
    pub visual: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct EditModel {
    pub cfg: RunConfig,
    pub vision: VisionStack,
    pub vlm: Vlm,
    pub qformer: QFormer,
    pub tati: Option<Tati>,
    pub hvca: Option<Hvca>,
    pub denoiser: Denoiser,
    pub null_text: ParamId,
    pub null_visual: Option<ParamId>,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
}

impl EditModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &RunConfig) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.seed);
        let vision = VisionStack::new(&mut b, cfg)?;
        let vlm = Vlm::new(&mut b, cfg)?;
        let qformer = QFormer::new(&mut b, cfg)?;
        let tati = if cfg.use_tati { Some(Tati::new(&mut b, cfg)?) } else { None };
        let hvca = if cfg.use_hvca { Some(Hvca::new(&mut b, cfg)?) } else { None };
        let denoiser = Denoiser::new(&mut b, cfg)?;
        let dc = cfg.cond_width;
        let null_text = b.normal("null.text", &[cfg.qformer_queries, dc], 1.0 / (dc as f64).sqrt(), true)?;
        let null_visual = if cfg.use_hvca {
            Some(b.normal("null.visual", &[cfg.hvca_queries, dc], 1.0 / (dc as f64).sqrt(), true)?)
        } else {
            None
        };
        let model = Self {
            cfg: cfg.clone(),
            vision,
            vlm,
            qformer,
            tati,
            hvca,
            denoiser,
            null_text,
            null_visual,
            codec: LatentCodec::new(cfg.latent_factor),
            schedule: NoiseSchedule::linear(cfg.timesteps),
        };
        Ok((model, b.finish()))
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        let l = self.cfg.latent_size();
        vec![l, l, self.cfg.latent_channels()]
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let n = self.cfg.image_size;
        if image.height != n || image.width != n {
            return Err(EditError::config(format!(
                "image is {}x{}, model expects {n}x{n}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Region tokens of `image` (zero rows when region tokens are disabled).
    pub fn region_tokens<T: Scalar>(
        &self,
        s: &Session<T>,
        image: &Image,
        oracle: &RegionSet,
        features: &crate::vision::FeatureMap,
    ) -> Result<Var> {
        if !self.cfg.use_region {
            return Ok(s.constant(Tensor::zeros([0, self.cfg.vlm_width])));
        }
        let regions = detect(image, self.cfg.detect_mode, Some(oracle), self.cfg.grid_k)?;
        self.vision.regions.forward(s, features, &regions)
    }

    /// Final hidden states of the teacher-forced sequence `[c, μ(x), P, Q]`.
    pub fn vlm_hidden<T: Scalar>(
        &self,
        s: &Session<T>,
        image: &Image,
        instruction: &[usize],
        oracle: &RegionSet,
        adapted: bool,
    ) -> Result<Var> {
        self.check_image(image)?;
        let features = self.vision.patches.forward(s, image)?;
        let regions = self.region_tokens(s, image, oracle, &features)?;
        let input = self.vlm.assemble(s, instruction, features.tokens, regions, self.cfg.img_tokens)?;
        self.vlm.forward_causal(s, &input, adapted)
    }

    /// Greedy `[IMG]` decoding for one record.
    pub fn greedy_slots<T: Scalar>(&self, s: &Session<T>, rec: &DatasetRecord) -> Result<Vec<usize>> {
        let features = self.vision.patches.forward(s, &rec.source)?;
        let regions = self.region_tokens(s, &rec.source, &rec.boxes, &features)?;
        self.vlm.greedy_slots(s, &rec.instruction, features.tokens, regions)
    }

    /// Refined visual embedding for the given text rows, or the null rows
    /// when the image condition is absent.
    fn visual<T: Scalar>(&self, s: &Session<T>, image: Option<&Image>, text: Var) -> Result<Option<Var>> {
        let (Some(hvca), Some(null)) = (&self.hvca, self.null_visual) else {
            return Ok(None);
        };
        match image {
            Some(img) => {
                let hybrid = self.vision.hybrid.forward(s, img)?;
                Ok(Some(hvca.forward(s, hybrid, text)?))
            }
            None => Ok(Some(s.param(null))),
        }
    }

    /// Text keys/values for the denoiser at timestep `t`.
    fn text_at<T: Scalar>(&self, s: &Session<T>, text: Var, t: usize) -> Result<Var> {
        match &self.tati {
            Some(tati) => tati.forward(s, text, t),
            None => Ok(text),
        }
    }

    /// Edit representation `e_t` of an instruction applied to `image`.
    pub fn edit_representation<T: Scalar>(
        &self,
        s: &Session<T>,
        image: &Image,
        instruction: &[usize],
        oracle: &RegionSet,
    ) -> Result<Var> {
        let hidden = self.vlm_hidden(s, image, instruction, oracle, true)?;
        let e = self.vlm.edit_states(s, hidden)?;
        self.qformer.forward(s, e)
    }

    /// Joint loss of one record under a fixed draw of timestep, noise and
    /// condition drops.
    pub fn record_loss<T: Scalar>(&self, s: &Session<T>, rec: &DatasetRecord, draw: &Draw) -> Result<RecordLoss> {
        self.check_image(&rec.source)?;
        self.check_image(&rec.target)?;
        let (vlm_loss, text) = if draw.dropout.text {
            (None, s.param(self.null_text))
        } else {
            let hidden = self.vlm_hidden(s, &rec.source, &rec.instruction, &rec.boxes, true)?;
            let loss = self.vlm.slot_loss(s, hidden)?;
            let e = self.vlm.edit_states(s, hidden)?;
            (Some(loss), self.qformer.forward(s, e)?)
        };
        let image = (!draw.dropout.image).then_some(&rec.source);
        let visual = self.visual(s, image, text)?;
        let src = s.constant(match image {
            Some(img) => self.codec.encode_image(img)?.cast(),
            None => Tensor::zeros(self.latent_shape()),
        });
        let z0: Tensor<T> = self.codec.encode_image(&rec.target)?.cast();
        if draw.noise.is_empty() {
            return Err(EditError::contract("a draw needs at least one noising"));
        }
        let mut diffusion: Option<Var> = None;
        for n in &draw.noise {
            let cond = DenoiserCondition { text: self.text_at(s, text, n.t)?, visual, lambda: self.cfg.lambda };
            let eps: Tensor<T> = n.eps.cast();
            let z_t = self.schedule.add_noise(&z0, n.t, &eps)?;
            let eps_hat = self.denoiser.forward(s, s.constant(z_t), n.t, src, &cond)?;
            let l = loss_diffusion(s, eps_hat, s.constant(eps))?;
            diffusion = Some(match diffusion {
                Some(acc) => s.add(acc, l)?,
                None => l,
            });
        }
        let mut diffusion = diffusion.expect("at least one noising");
        if draw.noise.len() > 1 {
            diffusion = s.scale(diffusion, T::from_f64(1.0 / draw.noise.len() as f64));
        }
        let total = match vlm_loss {
            Some(l) => s.add(l, diffusion)?,
            None => diffusion,
        };
        Ok(RecordLoss { vlm: vlm_loss, diffusion, total })
    }

    /// Conditions of the three guidance branches: (∅,∅), (c_I,∅), (c_I,c_T).
    pub fn branch_conditions<T: Scalar>(
        &self,
        s: &Session<T>,
        image: &Image,
        instruction: &[usize],
        oracle: &RegionSet,
    ) -> Result<[SampleConditions; 3]> {
        let null = s.param(self.null_text);
        let e_t = self.edit_representation(s, image, instruction, oracle)?;
        Ok([
            SampleConditions { text: null, visual: self.visual(s, None, null)? },
            SampleConditions { text: null, visual: self.visual(s, Some(image), null)? },
            SampleConditions { text: e_t, visual: self.visual(s, Some(image), e_t)? },
        ])
    }

    /// Guided noise estimate at `(z_t, t)` from the three branches.
    #[allow(clippy::too_many_arguments)]
    pub fn guided_eps(
        &self,
        store: &ParamStore<f32>,
        z_t: &Tensor<f32>,
        t: usize,
        src: &Tensor<f32>,
        branches: &[(Tensor<f32>, Option<Tensor<f32>>); 3],
        s_img: f64,
        s_txt: f64,
    ) -> Result<Tensor<f32>> {
        let zero = Tensor::zeros(self.latent_shape());
        let mut outs = Vec::with_capacity(3);
        for (i, (text, visual)) in branches.iter().enumerate() {
            let s = Session::new(store);
            let src_block = if i == 0 { &zero } else { src };
            let text = self.text_at(&s, s.constant(text.clone()), t)?;
            let visual = visual.as_ref().map(|v| s.constant(v.clone()));
            let cond = DenoiserCondition { text, visual, lambda: self.cfg.lambda };
            let out = self.denoiser.forward(&s, s.constant(z_t.clone()), t, s.constant(src_block.clone()), &cond)?;
            outs.push(s.value(out));
        }
        cfg_combine(&outs[0], &outs[1], &outs[2], s_img, s_txt)
    }

    /// Edits `image` following `instruction` with dual-scale guidance.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        store: &ParamStore<f32>,
        image: &Image,
        instruction: &[usize],
        oracle: &RegionSet,
        s_img: f64,
        s_txt: f64,
        steps: usize,
        seed: u64,
    ) -> Result<Image> {
        self.check_image(image)?;
        let branches = {
            let s = Session::new(store);
            let conds = self.branch_conditions(&s, image, instruction, oracle)?;
            conds.map(|c| (s.value(c.text), c.visual.map(|v| s.value(v))))
        };
        let src = self.codec.encode_image(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = ddpm_sample(
            &self.schedule,
            steps,
            &self.latent_shape(),
            &mut rng,
            |z_t, t| self.guided_eps(store, z_t, t, &src, &branches, s_img, s_txt),
            |x0| {
                let pixels = self.codec.decode(&x0)?.map(|v| v.clamp(-1.0, 1.0));
                self.codec.encode(&pixels)
            },
        )?;
        self.codec.decode_image(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn micro_model_runs_end_to_end() {
        let cfg = RunConfig::micro();
        let (model, store) = EditModel::new(&cfg).unwrap();
        let rec = &generate_dataset(&cfg, 3).unwrap()[0];
        let s = Session::new(&store);
        let draw = Draw::single(3, Tensor::from_fn(model.latent_shape(), |i| (i as f64).sin()), Dropout::default());
        let loss = model.record_loss(&s, rec, &draw).unwrap();
        assert!(s.item(loss.total).unwrap().is_finite());
        assert!(loss.vlm.is_some());
        let out = model.sample(&store, &rec.source, &rec.instruction, &rec.boxes, 1.5, 7.5, 4, 0).unwrap();
        assert_eq!((out.height, out.width), (cfg.image_size, cfg.image_size));
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
