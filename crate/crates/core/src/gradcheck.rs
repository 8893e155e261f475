//! Finite-difference check of every trainable parameter group of the full
//! model, in `f64`, through the joint loss.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regionedit_tensor::numeric::relative_error;
use regionedit_tensor::fault::inject_sign_flip;
use regionedit_tensor::{OpKind, ParamId, ParamStore, Session, Tensor};

use crate::config::RunConfig;
use crate::data::{generate_dataset, DatasetRecord};
use crate::diffusion::Dropout;
use crate::error::{EditError, Result};
use crate::model::{Draw, EditModel};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Entries probed per parameter tensor (all of them when smaller).
    pub entries_per_group: usize,
    /// Standard deviation of the noise added to every parameter first, so
    /// zero-initialized paths carry gradient.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { entries_per_group: 6, perturb: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !(g.max_rel_err <= TOLERANCE)).collect()
    }

    pub fn passed(&self) -> bool {
        !self.groups.is_empty() && self.failures().is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let verdict = if g.max_rel_err <= TOLERANCE { "ok" } else { "FAIL" };
            writeln!(out, "{:<48} entries={:<4} max_rel_err={:.3e} {verdict}", g.name, g.entries, g.max_rel_err).unwrap();
        }
        writeln!(out, "groups={} max_rel_err={:.3e} passed={}", self.groups.len(), self.max_rel_err(), self.passed())
            .unwrap();
        out
    }
}

/// Two draws: one with every condition present and one with both dropped,
/// so the null rows are on the path too.
fn draws(model: &EditModel, seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let shape = model.latent_shape();
    let n: usize = shape.iter().product();
    let mut eps = || Tensor::new(shape.clone(), (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
    let t = model.cfg.timesteps;
    vec![
        Draw::single(t / 2, eps(), Dropout::default()),
        Draw::single(t / 3, eps(), Dropout { image: true, text: true }),
    ]
}

fn joint_loss(model: &EditModel, store: &ParamStore<f64>, rec: &DatasetRecord, draws: &[Draw]) -> Result<f64> {
    let mut total = 0.0;
    for d in draws {
        let s = Session::new(store);
        let loss = model.record_loss(&s, rec, d)?;
        total += s.item(loss.total)?;
    }
    Ok(total)
}

fn analytic_grads(model: &EditModel, store: &ParamStore<f64>, rec: &DatasetRecord, draws: &[Draw]) -> Result<ParamStore<f64>> {
    let mut acc = store.clone();
    acc.zero_grad();
    for d in draws {
        let s = Session::new(store);
        let loss = model.record_loss(&s, rec, d)?;
        s.backward(loss.total)?;
        acc.accumulate_grads(&s.param_grads());
    }
    Ok(acc)
}

/// Checks `cfg` (which must be a micro config) with the default options.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, GradcheckOptions::default())
}

pub fn gradcheck_with(cfg: &RunConfig, opts: GradcheckOptions) -> Result<GradcheckReport> {
    if cfg.max_width() > 8 {
        return Err(EditError::config(format!(
            "gradcheck needs a micro config (all widths <= 8), largest width is {}",
            cfg.max_width()
        )));
    }
    let (model, store32) = EditModel::new(cfg)?;
    let mut store: ParamStore<f64> = store32.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7065_7274);
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        for v in store.get_mut(id).value_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += opts.perturb * z;
        }
    }
    let rec = generate_dataset(cfg, cfg.seed)?.swap_remove(0);
    let draws = draws(&model, cfg.seed);
    let grads = analytic_grads(&model, &store, &rec, &draws)?;

    let mut groups = Vec::new();
    for &id in &ids {
        let (name, numel, trainable) = {
            let p = store.get(id);
            (p.name.clone(), p.value().len(), p.trainable)
        };
        if !trainable || numel == 0 {
            continue;
        }
        let picks: Vec<usize> = if numel <= opts.entries_per_group {
            (0..numel).collect()
        } else {
            (0..opts.entries_per_group).map(|_| rng.random_range(0..numel)).collect()
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = store.get(id).value()[i];
            store.get_mut(id).value_mut()[i] = orig + STEP;
            let up = joint_loss(&model, &store, &rec, &draws)?;
            store.get_mut(id).value_mut()[i] = orig - STEP;
            let down = joint_loss(&model, &store, &rec, &draws)?;
            store.get_mut(id).value_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(grads.get(id).grad()[i], numeric, FLOOR);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        groups.push(GroupCheck { name, entries: picks.len(), max_rel_err: worst });
    }
    Ok(GradcheckReport { groups })
}

/// Backward rules the mutation test corrupts.
pub const MUTATIONS: [OpKind; 6] =
    [OpKind::MatMul, OpKind::Softmax, OpKind::LayerNorm, OpKind::Gelu, OpKind::Im2Col, OpKind::CrossEntropy];

#[derive(Clone, Debug, PartialEq)]
pub struct MutationOutcome {
    pub kind: OpKind,
    pub detected: bool,
    pub max_rel_err: f64,
}

/// Re-runs the check with the sign of one backward rule flipped at a time;
/// each fault must make the check fail.
pub fn mutation_test(cfg: &RunConfig, kinds: &[OpKind]) -> Result<Vec<MutationOutcome>> {
    let opts = GradcheckOptions { entries_per_group: 2, ..GradcheckOptions::default() };
    kinds
        .iter()
        .map(|&kind| {
            let _fault = inject_sign_flip(kind);
            let report = gradcheck_with(cfg, opts)?;
            Ok(MutationOutcome { kind, detected: !report.passed(), max_rel_err: report.max_rel_err() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_wide_configs() {
        assert!(matches!(gradcheck(&RunConfig::default()), Err(EditError::Config(_))));
    }

    #[test]
    fn micro_config_passes() {
        let report = gradcheck(&RunConfig::micro()).unwrap();
        println!("{}", report.render());
        assert!(report.passed());
        assert_eq!(report, gradcheck(&RunConfig::micro()).unwrap());
    }

    #[test]
    fn sign_flips_are_caught() {
        let outcomes = mutation_test(&RunConfig::micro(), &MUTATIONS[..3]).unwrap();
        for o in &outcomes {
            assert!(o.detected, "{:?} went unnoticed", o.kind);
        }
    }
}
