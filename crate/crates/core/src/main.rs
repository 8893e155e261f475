use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use regionedit::ablation::{run_ablation, AblationPlan, Arm};
use regionedit::checkpoint::Checkpoint;
use regionedit::data::{detokenize, generate_dataset, load_dataset, save_dataset, DatasetRecord};
use regionedit::eval::{evaluate, SampleSettings};
use regionedit::gradcheck::{gradcheck, mutation_test, MUTATIONS};
use regionedit::image::Image;
use regionedit::model::EditModel;
use regionedit::train::Trainer;
use regionedit::RunConfig;

#[derive(Parser)]
#[command(name = "regionedit", version, about = "Region-aware instruction-guided image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "s-img", global = true)]
    s_img: Option<f64>,
    #[arg(long = "s-txt", global = true)]
    s_txt: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long = "no-region", global = true)]
    no_region: bool,
    #[arg(long = "no-tati", global = true)]
    no_tati: bool,
    #[arg(long = "no-hvca", global = true)]
    no_hvca: bool,
    /// extra config override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train jointly and write checkpoints plus a per-step log
    Train {
        #[command(flatten)]
        common: Common,
        /// dataset file; generated from the config when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Edit the records of a dataset with a trained checkpoint
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// only this record
        #[arg(long)]
        index: Option<usize>,
    },
    /// Score sampled edits against targets
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// exit with status 2 unless the overfit thresholds hold
        #[arg(long)]
        gate: bool,
    },
    /// Finite-difference check of every parameter group on the micro config
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// also verify that injected backward faults are detected
        #[arg(long)]
        mutations: bool,
    },
    /// Full model against the no-region, no-TATI and no-HVCA arms
    Ablate {
        #[command(flatten)]
        common: Common,
        /// seeds to run, comma separated
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
}

/// Exit status 2: a numeric gate failed.
struct GateFailed(String);

impl Common {
    fn config(&self, base: RunConfig) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => base,
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = self.s_img {
            cfg.s_img = v;
        }
        if let Some(v) = self.s_txt {
            cfg.s_txt = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if self.no_region {
            cfg.use_region = false;
        }
        if self.no_tati {
            cfg.use_tati = false;
        }
        if self.no_hvca {
            cfg.use_hvca = false;
        }
        cfg.validate()?;
        Ok(())
    }

    fn out_dir(&self) -> anyhow::Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_ppm(path: &Path, img: &Image) -> anyhow::Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn records_for(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<Vec<DatasetRecord>> {
    Ok(match data {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => generate_dataset(cfg, cfg.seed)?,
    })
}

/// Model from a checkpoint, with sampling-time overrides from the command line.
fn load_model(common: &Common, path: &Path) -> anyhow::Result<(EditModel, regionedit_tensor::ParamStore<f32>)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = ck.config.clone();
    common.apply(&mut cfg)?;
    let (model, mut store) = EditModel::new(&cfg)?;
    ck.restore(&mut store, None)?;
    Ok((model, store))
}

fn run(command: Command) -> anyhow::Result<Result<(), GateFailed>> {
    match command {
        Command::GenerateData { common } => {
            let cfg = common.config(RunConfig::default())?;
            let records = generate_dataset(&cfg, cfg.seed)?;
            let dir = common.out_dir()?;
            save_dataset(&dir.join("dataset.bin"), &records)?;
            cfg.save(&dir.join("config.txt"))?;
            for (i, r) in records.iter().enumerate() {
                println!("{i}: {}", detokenize(&r.instruction));
            }
            println!("wrote {} records to {}", records.len(), dir.join("dataset.bin").display());
        }
        Command::Train { common, data, resume } => {
            let mut trainer = match &resume {
                Some(path) => {
                    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                    Trainer::resume(&ck)?
                }
                None => Trainer::new(&common.config(RunConfig::default())?)?,
            };
            let records = records_for(&trainer.model.cfg, data.as_deref())?;
            let dir = common.out_dir()?;
            trainer.model.cfg.save(&dir.join("config.txt"))?;
            let log_path = dir.join("train.log");
            let mut log = fs::OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(&log_path)
                .with_context(|| format!("opening {}", log_path.display()))?;
            let history = trainer.run(&records, &mut log, Some(dir))?;
            log.flush()?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                println!("{}", first.log_line());
                println!("{}", last.log_line());
            }
            println!("checkpoint {}", dir.join("final.ckpt").display());
        }
        Command::Sample { common, checkpoint, data, index } => {
            let (model, store) = load_model(&common, &checkpoint)?;
            let records = load_dataset(&data)?;
            let dir = common.out_dir()?;
            let chosen: Vec<usize> = match index {
                Some(i) if i >= records.len() => bail!("record {i} out of range ({} records)", records.len()),
                Some(i) => vec![i],
                None => (0..records.len()).collect(),
            };
            let cfg = &model.cfg;
            for i in chosen {
                let r = &records[i];
                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let edited =
                    model.sample(&store, &r.source, &r.instruction, &r.boxes, cfg.s_img, cfg.s_txt, cfg.sample_steps, seed)?;
                write_ppm(&dir.join(format!("record{i:03}_source.ppm")), &r.source)?;
                write_ppm(&dir.join(format!("record{i:03}_edited.ppm")), &edited)?;
                write_ppm(&dir.join(format!("record{i:03}_target.ppm")), &r.target)?;
                println!("{i}: {}", detokenize(&r.instruction));
            }
        }
        Command::Eval { common, checkpoint, data, gate } => {
            let (model, store) = load_model(&common, &checkpoint)?;
            let records = load_dataset(&data)?;
            let report = evaluate(&model, &store, &records, SampleSettings::from_config(&model.cfg))?;
            let text = report.render();
            print!("{text}");
            fs::write(common.out_dir()?.join("metrics.txt"), &text)?;
            if gate {
                let m = report.mean();
                if !(m.l1 <= 0.05 && m.masked_l1 <= 0.02 && m.slot_accuracy == 1.0) {
                    return Ok(Err(GateFailed(format!(
                        "eval gate failed: l1={:.4} (<= 0.05), masked_l1={:.4} (<= 0.02), slot_acc={:.4} (= 1)",
                        m.l1, m.masked_l1, m.slot_accuracy
                    ))));
                }
            }
        }
        Command::Gradcheck { common, mutations } => {
            let cfg = common.config(RunConfig::micro())?;
            let report = gradcheck(&cfg)?;
            print!("{}", report.render());
            let mut failed = !report.passed();
            if mutations {
                for o in mutation_test(&cfg, &MUTATIONS)? {
                    println!(
                        "mutation {:?}: {} (max_rel_err={:.3e})",
                        o.kind,
                        if o.detected { "detected" } else { "MISSED" },
                        o.max_rel_err
                    );
                    failed |= !o.detected;
                }
            }
            if failed {
                return Ok(Err(GateFailed("gradient check failed".into())));
            }
        }
        Command::Ablate { common, seeds } => {
            let base = common.config(RunConfig::default())?;
            let plan = AblationPlan { seeds, ..AblationPlan::new(&base) };
            let report = run_ablation(&plan, |r| {
                println!("seed={} arm={} l1={:.6} masked_l1={:.6}", r.seed, r.arm.name(), r.held_out.l1, r.held_out.masked_l1)
            })?;
            let text = report.render();
            print!("{text}");
            fs::write(common.out_dir()?.join("ablation.txt"), &text)?;
            let n = plan.seeds.len();
            let ok = report.l1_wins(Arm::NoRegion) == n
                && report.any_wins(Arm::NoTati) == n
                && report.any_wins(Arm::NoHvca) == n;
            if !ok {
                return Ok(Err(GateFailed("ablation direction not reproduced in every seed".into())));
            }
        }
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(GateFailed(msg))) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
