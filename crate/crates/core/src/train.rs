//! Joint training loop: per-record tapes, batch-averaged gradients, Adam.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regionedit_tensor::{Adam, AdamConfig, ParamId, ParamStore, Session, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::DatasetRecord;
use crate::diffusion::condition_dropout;
use crate::error::{EditError, Result};
use crate::model::{Draw, EditModel, Noise};

/// Mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l_vlm: f64,
    pub l_diff: f64,
    pub l_total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        format!(
            "step={} l_vlm={:.6} l_diff={:.6} l_total={:.6} lr={:e}",
            self.step, self.l_vlm, self.l_diff, self.l_total, self.lr
        )
    }
}

/// Parses a line written by [`StepStats::log_line`].
pub fn parse_log_line(line: &str) -> Option<StepStats> {
    let mut stats = StepStats { step: 0, l_vlm: 0.0, l_diff: 0.0, l_total: 0.0, lr: 0.0, grad_norm: 0.0 };
    let mut seen = 0;
    for field in line.split_whitespace() {
        let (k, v) = field.split_once('=')?;
        match k {
            "step" => stats.step = v.parse().ok()?,
            "l_vlm" => stats.l_vlm = v.parse().ok()?,
            "l_diff" => stats.l_diff = v.parse().ok()?,
            "l_total" => stats.l_total = v.parse().ok()?,
            "lr" => stats.lr = v.parse().ok()?,
            _ => return None,
        }
        seen += 1;
    }
    (seen == 5).then_some(stats)
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Timestep, noise and condition drops for record `index` at `step`; a pure
/// function of `(seed, step, index)` so resumed runs replay exactly.
pub fn draw_for(model: &EditModel, step: u64, index: usize) -> Result<Draw> {
    let cfg = &model.cfg;
    let key = mix(mix(mix(cfg.seed) ^ step) ^ index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let dropout = condition_dropout(cfg.p_img, cfg.p_txt, &mut rng)?;
    let shape = model.latent_shape();
    let n: usize = shape.iter().product();
    let noise = (0..cfg.noise_draws)
        .map(|_| {
            let t = rand::Rng::random_range(&mut rng, 1..=cfg.timesteps);
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            Ok(Noise { t, eps: Tensor::new(shape.clone(), eps)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Draw { dropout, noise })
}

struct RecordGrad {
    grads: Vec<(ParamId, Vec<f32>)>,
    l_vlm: f64,
    l_diff: f64,
    l_total: f64,
}

fn record_grad(model: &EditModel, store: &ParamStore<f32>, rec: &DatasetRecord, draw: &Draw, step: u64) -> Result<RecordGrad> {
    let s = Session::new(store);
    let loss = model.record_loss(&s, rec, draw)?;
    let total = s.item(loss.total)? as f64;
    if !total.is_finite() {
        let tensor = match s.first_nan() {
            Some((var, kind)) => format!("node {} ({kind:?})", var.index()),
            None => "loss (infinite)".into(),
        };
        return Err(EditError::NanLoss { step: step as usize, tensor });
    }
    s.backward(loss.total)?;
    Ok(RecordGrad {
        grads: s.param_grads(),
        l_vlm: match loss.vlm {
            Some(v) => s.item(v)? as f64,
            None => 0.0,
        },
        l_diff: s.item(loss.diffusion)? as f64,
        l_total: total,
    })
}

/// Model, parameters and optimizer of a run in progress.
pub struct Trainer {
    pub model: EditModel,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let (model, store) = EditModel::new(cfg)?;
        let adam = Adam::new(adam_config(cfg), &store);
        Ok(Self { model, store, adam, step: 0 })
    }

    /// Continues the run saved in `ck`; the checkpoint's config wins.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let mut tr = Self::new(&ck.config)?;
        ck.restore(&mut tr.store, Some(&mut tr.adam))?;
        tr.step = ck.step;
        Ok(tr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.cfg, &self.store, Some(&self.adam), self.step)
    }

    /// Records used at `step`: a cyclic window of `batch_size` indices.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let b = self.model.cfg.batch_size;
        (0..b).map(|j| (step as usize * b + j) % n).collect()
    }

    /// Mean losses over a batch under the current parameters, without
    /// updating anything.
    pub fn evaluate_loss(&self, records: &[DatasetRecord], step: u64) -> Result<StepStats> {
        let idx = self.batch_indices(step, records.len());
        let mut stats = StepStats { step, l_vlm: 0.0, l_diff: 0.0, l_total: 0.0, lr: lr_at(&self.model.cfg, step), grad_norm: 0.0 };
        for &i in &idx {
            let draw = draw_for(&self.model, step, i)?;
            let s = Session::new(&self.store);
            let loss = self.model.record_loss(&s, &records[i], &draw)?;
            stats.l_vlm += loss.vlm.map_or(Ok(0.0), |v| s.item(v))? as f64;
            stats.l_diff += s.item(loss.diffusion)? as f64;
            stats.l_total += s.item(loss.total)? as f64;
        }
        let n = idx.len() as f64;
        stats.l_vlm /= n;
        stats.l_diff /= n;
        stats.l_total /= n;
        Ok(stats)
    }

    /// One optimizer step on the current batch.
    pub fn train_step(&mut self, records: &[DatasetRecord]) -> Result<StepStats> {
        if records.is_empty() {
            return Err(EditError::config("training needs at least one record"));
        }
        let step = self.step;
        self.adam.config.lr = lr_at(&self.model.cfg, step);
        let idx = self.batch_indices(step, records.len());
        let draws = idx.iter().map(|&i| draw_for(&self.model, step, i)).collect::<Result<Vec<_>>>()?;
        let workers = self.model.cfg.workers.min(idx.len()).max(1);
        let results: Vec<Result<RecordGrad>> = if workers == 1 {
            idx.iter()
                .zip(&draws)
                .map(|(&i, d)| record_grad(&self.model, &self.store, &records[i], d, step))
                .collect()
        } else {
            let (model, store) = (&self.model, &self.store);
            let jobs: Vec<(usize, &Draw)> = idx.iter().copied().zip(&draws).collect();
            let chunk = jobs.len().div_ceil(workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> = jobs
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || {
                            part.iter()
                                .map(|&(i, d)| record_grad(model, store, &records[i], d, step))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
            })
        };
        let mut stats = StepStats {
            step,
            l_vlm: 0.0,
            l_diff: 0.0,
            l_total: 0.0,
            lr: self.adam.config.lr,
            grad_norm: 0.0,
        };
        self.store.zero_grad();
        for r in results {
            // summed in record order whatever the worker count
            let r = r?;
            self.store.accumulate_grads(&r.grads);
            stats.l_vlm += r.l_vlm;
            stats.l_diff += r.l_diff;
            stats.l_total += r.l_total;
        }
        let n = idx.len() as f64;
        self.store.scale_grads(1.0 / n as f32);
        stats.l_vlm /= n;
        stats.l_diff /= n;
        stats.l_total /= n;
        stats.grad_norm = self.adam.step(&mut self.store);
        self.step += 1;
        Ok(stats)
    }

    /// Trains until `cfg.steps`, writing one log line per step and, when
    /// `out` is given, periodic and final checkpoints.
    pub fn run(&mut self, records: &[DatasetRecord], log: &mut dyn Write, out: Option<&Path>) -> Result<Vec<StepStats>> {
        let total = self.model.cfg.steps as u64;
        let every = self.model.cfg.checkpoint_every as u64;
        let mut history = Vec::new();
        while self.step < total {
            let stats = self.train_step(records)?;
            writeln!(log, "{}", stats.log_line())?;
            history.push(stats);
            if let Some(dir) = out {
                if every > 0 && self.step.is_multiple_of(every) && self.step < total {
                    self.checkpoint().save(&dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(history)
    }
}

/// Learning rate used at `step`.
pub fn lr_at(cfg: &RunConfig, step: u64) -> f64 {
    if !cfg.lr_decay || cfg.steps == 0 {
        return cfg.lr;
    }
    let progress = (step as f64 / cfg.steps as f64).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        clip_norm: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
        ..AdamConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_lines_parse_back() {
        let s = StepStats { step: 3, l_vlm: 1.5, l_diff: 0.25, l_total: 1.75, lr: 1e-3, grad_norm: 0.0 };
        let parsed = parse_log_line(&s.log_line()).unwrap();
        assert_eq!(parsed, s);
        assert!(parse_log_line("step=1 bogus=2").is_none());
    }

    #[test]
    fn draws_depend_only_on_seed_step_and_record() {
        let (model, _) = EditModel::new(&RunConfig::micro()).unwrap();
        let a = draw_for(&model, 5, 2).unwrap();
        let b = draw_for(&model, 5, 2).unwrap();
        assert_eq!(a.noise[0].t, b.noise[0].t);
        assert!(a.noise[0].eps.bit_eq(&b.noise[0].eps));
        let c = draw_for(&model, 6, 2).unwrap();
        assert!(!a.noise[0].eps.bit_eq(&c.noise[0].eps));
    }
}
