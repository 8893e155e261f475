//! Component ablation: full model against runs with region tokens, TATI or
//! HVCA switched off, trained on a region-critical dataset and scored on
//! held-out records.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::{generate_dataset, DatasetRecord};
use crate::error::{EditError, Result};
use crate::eval::{evaluate, RecordMetrics, SampleSettings};
use crate::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Full,
    NoRegion,
    NoTati,
    NoHvca,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoRegion, Arm::NoTati, Arm::NoHvca];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoRegion => "no-region",
            Arm::NoTati => "no-tati",
            Arm::NoHvca => "no-hvca",
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Arm::Full => {}
            Arm::NoRegion => c.use_region = false,
            Arm::NoTati => c.use_tati = false,
            Arm::NoHvca => c.use_hvca = false,
        }
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    /// Shared settings; `seed` is replaced per run.
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub records: usize,
    pub held_out: usize,
    pub arms: Vec<Arm>,
}

impl AblationPlan {
    pub fn new(base: &RunConfig) -> Self {
        Self { base: base.clone(), seeds: vec![1, 2, 3], records: 64, held_out: 16, arms: Arm::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub seed: u64,
    pub arm: Arm,
    pub held_out: RecordMetrics,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub results: Vec<ArmResult>,
}

impl AblationReport {
    pub fn get(&self, seed: u64, arm: Arm) -> Option<&ArmResult> {
        self.results.iter().find(|r| r.seed == seed && r.arm == arm)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.results.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// Seeds where the full model has strictly lower held-out L1 than `arm`.
    pub fn l1_wins(&self, arm: Arm) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&seed| match (self.get(seed, Arm::Full), self.get(seed, arm)) {
                (Some(f), Some(a)) => f.held_out.l1 < a.held_out.l1,
                _ => false,
            })
            .count()
    }

    /// Seeds where the full model beats `arm` on L1 or on masked L1.
    pub fn any_wins(&self, arm: Arm) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&seed| match (self.get(seed, Arm::Full), self.get(seed, arm)) {
                (Some(f), Some(a)) => f.held_out.l1 < a.held_out.l1 || f.held_out.masked_l1 < a.held_out.masked_l1,
                _ => false,
            })
            .count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            writeln!(
                out,
                "seed={} arm={:<9} l1={:.6} masked_l1={:.6} l2={:.6} cosine={:.6} slot_acc={:.4} final_loss={:.6}",
                r.seed,
                r.arm.name(),
                r.held_out.l1,
                r.held_out.masked_l1,
                r.held_out.l2,
                r.held_out.cosine,
                r.held_out.slot_accuracy,
                r.final_loss
            )
            .unwrap();
        }
        let n = self.seeds().len();
        writeln!(out, "region l1 wins {}/{n}", self.l1_wins(Arm::NoRegion)).unwrap();
        writeln!(out, "tati l1-or-masked wins {}/{n}", self.any_wins(Arm::NoTati)).unwrap();
        writeln!(out, "hvca l1-or-masked wins {}/{n}", self.any_wins(Arm::NoHvca)).unwrap();
        out
    }
}

/// Trains one arm on `train` and scores it on `held_out`.
pub fn run_arm(cfg: &RunConfig, train: &[DatasetRecord], held_out: &[DatasetRecord]) -> Result<(RecordMetrics, f64)> {
    let mut trainer = Trainer::new(cfg)?;
    let history = trainer.run(train, &mut std::io::sink(), None)?;
    let tail = &history[history.len().saturating_sub(50)..];
    let final_loss = tail.iter().map(|s| s.l_total).sum::<f64>() / tail.len().max(1) as f64;
    let report = evaluate(&trainer.model, &trainer.store, held_out, SampleSettings::from_config(cfg))?;
    Ok((report.mean(), final_loss))
}

/// Runs every arm for every seed; `progress` receives each finished row.
pub fn run_ablation(plan: &AblationPlan, mut progress: impl FnMut(&ArmResult)) -> Result<AblationReport> {
    if plan.held_out == 0 || plan.held_out >= plan.records {
        return Err(EditError::config(format!(
            "held-out count {} must be between 1 and {}",
            plan.held_out,
            plan.records.saturating_sub(1)
        )));
    }
    let mut results = Vec::new();
    for &seed in &plan.seeds {
        let data_cfg = RunConfig { seed, records: plan.records, region_critical_only: true, ..plan.base.clone() };
        let records = generate_dataset(&data_cfg, seed)?;
        let (train, held_out) = records.split_at(plan.records - plan.held_out);
        for &arm in &plan.arms {
            let cfg = arm.apply(&data_cfg);
            let (metrics, final_loss) = run_arm(&cfg, train, held_out)?;
            let row = ArmResult { seed, arm, held_out: metrics, final_loss };
            progress(&row);
            results.push(row);
        }
    }
    Ok(AblationReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_toggle_one_switch_each() {
        let base = RunConfig::default();
        assert_eq!(Arm::Full.apply(&base), base);
        assert!(!Arm::NoRegion.apply(&base).use_region);
        assert!(!Arm::NoTati.apply(&base).use_tati);
        assert!(!Arm::NoHvca.apply(&base).use_hvca);
    }

    #[test]
    fn micro_ablation_runs() {
        let base = RunConfig { steps: 2, ..RunConfig::micro() };
        let plan = AblationPlan { seeds: vec![5], records: 4, held_out: 1, ..AblationPlan::new(&base) };
        let report = run_ablation(&plan, |_| {}).unwrap();
        assert_eq!(report.results.len(), 4);
        assert!(report.render().contains("region l1 wins"));
        assert!(run_ablation(&AblationPlan { held_out: 4, ..plan }, |_| {}).is_err());
    }
}
