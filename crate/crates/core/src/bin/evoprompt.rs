use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use evoprompt::config::{self, KeyValues};
use evoprompt::encoder::Modality;
use evoprompt::mpp;
use evoprompt::snapshot::{self, Section};
use evoprompt::tasks;
use evoprompt::trainer::{self, Ablation, TrainConfig, TrainReport, Trainer};

#[derive(Parser)]
#[command(name = "evoprompt", version, about = "Evolving prompt adaptation on a small frozen dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of key=value lines, or a preset: `default`, `tiny`.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override a config key, e.g. `--set loss.gamma=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of epochs (same as `--set evolution.epochs=N`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write report.json, epochs.csv and alphas.csv.
    Train(Common),
    /// Zero-shot accuracy of the frozen encoder on the configured task.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also export the task samples as CSV.
        #[arg(long)]
        export_task: bool,
    },
    /// Train ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `full`, one of no_mpp, no_shared, full_rank, no_evolution, no_kcl, no_fgr, or `all`.
        #[arg(long)]
        variant: String,
    },
    /// Finite-difference check of the full objective at every epoch's first step.
    Gradcheck(Common),
    /// Final magnitude of every frozen direction.
    TraceAlphas {
        #[command(flatten)]
        common: Common,
        /// Read an existing report instead of training.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Extended training of the full model against the no_evolution variant.
    Breakpoint {
        #[command(flatten)]
        common: Common,
        /// Epochs to train (default 2 * evolution.epochs).
        #[arg(long)]
        extended: Option<usize>,
        /// Number of consecutive seeds starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Closed-form trainable parameter counts per epoch.
    ParamCount(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric =
                e.chain().any(|c| c.downcast_ref::<evoprompt::Error>().is_some_and(evoprompt::Error::is_numeric));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn resolve(common: &Common) -> Result<TrainConfig> {
    let (base, kv) = match common.config.as_str() {
        "default" => (TrainConfig::default(), KeyValues::default()),
        "tiny" => (TrainConfig::tiny(), KeyValues::default()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            (TrainConfig::default(), KeyValues::parse(&text)?)
        }
    };
    let mut kv = kv;
    for o in &common.overrides {
        kv.extend(KeyValues::parse(o)?);
    }
    if let Some(s) = common.seed {
        kv.push("seed", s.to_string());
    }
    if let Some(e) = common.epochs {
        kv.push("evolution.epochs", e.to_string());
    }
    Ok(config::resolve(base, &kv)?)
}

/// Run manifest: written before any work and completed with artifact
/// checksums at the end. Feeding it back through `--config` reproduces the run.
struct Manifest {
    path: PathBuf,
    text: String,
}

impl Manifest {
    fn begin(out: &Path, command: &str, extra: &[(&str, String)], cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let mut text = format!("run.command={command}\nrun.outdir={}\n", out.display());
        for (k, v) in extra {
            text.push_str(&format!("run.{k}={v}\n"));
        }
        for (k, v) in config::to_key_values(cfg).iter() {
            text.push_str(&format!("{k}={v}\n"));
        }
        let m = Self { path: out.join("manifest.txt"), text };
        fs::write(&m.path, &m.text)?;
        Ok(m)
    }

    fn finish(mut self, artifacts: &[PathBuf]) -> Result<()> {
        for p in artifacts {
            let digest = hex::encode(Sha256::digest(fs::read(p)?));
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            self.text.push_str(&format!("artifact.{name}={digest}\n"));
        }
        fs::write(&self.path, &self.text)?;
        Ok(())
    }
}

fn write_with<F>(path: PathBuf, f: F) -> Result<PathBuf>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Writes the standard report artifacts into `out`.
fn write_report(out: &Path, r: &TrainReport) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write_with(out.join("report.json"), |b| Ok(b.write_all(r.to_json()?.as_bytes())?))?,
        write_with(out.join("epochs.csv"), |b| Ok(r.write_epochs_csv(b)?))?,
        write_with(out.join("alphas.csv"), |b| Ok(r.write_alphas_csv(b)?))?,
    ])
}

fn summary(r: &TrainReport) {
    let f = &r.final_eval;
    println!(
        "{:<14} base {:.4}  novel {:.4}  hm {:.4}  (zero-shot hm {:.4})",
        r.variant, f.base_acc, f.novel_acc, f.hm, r.zero_shot.hm
    );
}

fn train_and_write(cfg: &TrainConfig, out: &Path, command: &str, extra: &[(&str, String)]) -> Result<TrainReport> {
    let manifest = Manifest::begin(out, command, extra, cfg)?;
    let (enc, task) = cfg.setup()?;
    let mut trainer = Trainer::new(cfg.clone(), &enc, &task)?;
    let report = trainer.run()?;
    let mut artifacts = write_report(out, &report)?;
    artifacts.push(write_with(out.join("checkpoint.bin"), |b| {
        let sections =
            [Section::encoder(&enc), Section::trainable(trainer.store()), Section::history(trainer.projector())];
        Ok(snapshot::write_snapshot(b, &sections)?)
    })?);
    write_with(out.join("timing.csv"), |b| Ok(report.write_timing_csv(b)?))?;
    manifest.finish(&artifacts)?;
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve(&common)?;
            let r = train_and_write(&cfg, &common.out, "train", &[])?;
            summary(&r);
            println!("wrote {}", common.out.display());
        }
        Command::Eval { common, export_task } => {
            let cfg = resolve(&common)?;
            let manifest = Manifest::begin(&common.out, "eval", &[], &cfg)?;
            let (enc, task) = cfg.setup()?;
            let zs = tasks::zero_shot(&enc, &task, cfg.loss.tau)?;
            println!("zero-shot base {:.4}  novel {:.4}  hm {:.4}", zs.base_acc, zs.novel_acc, zs.hm);
            let mut artifacts =
                vec![write_with(common.out.join("eval.json"), |b| Ok(serde_json::to_writer_pretty(b, &zs)?))?];
            if export_task {
                artifacts.push(write_with(common.out.join("task.csv"), |b| Ok(task.write_csv(b)?))?);
            }
            manifest.finish(&artifacts)?;
        }
        Command::Ablate { common, variant } => {
            let cfg = resolve(&common)?;
            let names: Vec<String> = if variant == "all" {
                std::iter::once("full").chain(Ablation::VARIANTS).map(String::from).collect()
            } else {
                vec![variant]
            };
            let flags = names.iter().map(|n| Ablation::parse(n)).collect::<Result<Vec<_>, _>>()?;
            let mut rows = Vec::new();
            for (name, flag) in names.iter().zip(flags) {
                let c = TrainConfig { ablation: flag, ..cfg.clone() };
                let r = train_and_write(&c, &common.out.join(name), "ablate", &[("variant", name.clone())])?;
                summary(&r);
                rows.push(r);
            }
            write_with(common.out.join("ablation.csv"), |b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["variant", "base_acc", "novel_acc", "hm", "loss_fgr", "loss_kcl", "trainable_params"])?;
                for r in &rows {
                    let last = r.epochs.last().context("report without epochs")?;
                    w.write_record([
                        r.variant.clone(),
                        last.base_acc.to_string(),
                        last.novel_acc.to_string(),
                        last.hm.to_string(),
                        last.loss.fgr.to_string(),
                        last.loss.kcl.to_string(),
                        last.trainable_params.to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
        }
        Command::Gradcheck(common) => {
            let mut cfg = resolve(&common)?;
            cfg.gradcheck_each_epoch = true;
            let n = mpp::param_count(&cfg.mpp, &cfg.ablation.architecture(), &[cfg.evolution.r_high]).total;
            if n > 10_000 {
                bail!("gradcheck needs at most 10000 trainable parameters, this config has {n}");
            }
            let r = train_and_write(&cfg, &common.out, "gradcheck", &[])?;
            for g in &r.gradchecks {
                println!(
                    "epoch {:>2}  {:>5} parameters  max relative error {:.3e}",
                    g.epoch, g.parameters, g.max_rel_error
                );
            }
            println!("gradient check passed");
        }
        Command::TraceAlphas { common, report } => {
            let r = match report {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    fs::create_dir_all(&common.out)?;
                    TrainReport::from_json(&text)?
                }
                None => train_and_write(&resolve(&common)?, &common.out, "trace-alphas", &[])?,
            };
            let trace = trainer::alpha_trace(&r);
            if let Some(n) = &trace.notice {
                println!("{n}");
            }
            for (t, row) in trace.origins.iter().zip(&trace.values) {
                for (layer, pair) in trace.layers.iter().zip(row) {
                    println!(
                        "epoch {t:>2}  layer {layer}  {} {:+.6}  {} {:+.6}",
                        Modality::Vision.tag(),
                        pair[0],
                        Modality::Text.tag(),
                        pair[1]
                    );
                }
            }
            write_with(common.out.join("alpha_trace.json"), |b| Ok(serde_json::to_writer_pretty(b, &trace)?))?;
        }
        Command::Breakpoint { common, extended, seeds } => {
            let cfg = resolve(&common)?;
            let extended = extended.unwrap_or(2 * cfg.evolution.epochs);
            let manifest = Manifest::begin(
                &common.out,
                "breakpoint",
                &[("extended_epochs", extended.to_string()), ("seeds", seeds.to_string())],
                &cfg,
            )?;
            let (enc, task) = cfg.setup()?;
            let mut results = Vec::new();
            for k in 0..seeds {
                let c = TrainConfig { seed: cfg.seed + k, ..cfg.clone() };
                let r = trainer::breakpoint_experiment(&c, &enc, &task, extended)?;
                for curve in [&r.full, &r.no_evolution] {
                    println!(
                        "seed {:>3}  {:<13} novel drop {:.4}  final hm {:.4}",
                        c.seed, curve.variant, curve.novel_drop, curve.final_hm
                    );
                }
                results.push((c.seed, r));
            }
            let med = |f: &dyn Fn(&trainer::BreakpointResult) -> f64| {
                trainer::median(&results.iter().map(|(_, r)| f(r)).collect::<Vec<_>>())
            };
            println!(
                "median novel drop: full {:.4}  no_evolution {:.4}",
                med(&|r| r.full.novel_drop),
                med(&|r| r.no_evolution.novel_drop)
            );
            println!(
                "median final hm:   full {:.4}  no_evolution {:.4}",
                med(&|r| r.full.final_hm),
                med(&|r| r.no_evolution.final_hm)
            );
            let path = write_with(common.out.join("breakpoint.csv"), |b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["seed", "variant", "epoch", "base_acc", "novel_acc", "hm"])?;
                for (seed, r) in &results {
                    for c in [&r.full, &r.no_evolution] {
                        for i in 0..c.epochs.len() {
                            w.write_record([
                                seed.to_string(),
                                c.variant.clone(),
                                c.epochs[i].to_string(),
                                c.base_acc[i].to_string(),
                                c.novel_acc[i].to_string(),
                                c.hm[i].to_string(),
                            ])?;
                        }
                    }
                }
                w.flush()?;
                Ok(())
            })?;
            manifest.finish(&[path])?;
        }
        Command::ParamCount(common) => {
            let cfg = resolve(&common)?;
            let arch = cfg.ablation.architecture();
            println!("epoch  rank  total  vision_adapters  text_adapters  cumulative_adapters");
            for t in 1..=cfg.evolution.epochs {
                let pc = mpp::param_count_at(&cfg.mpp, &arch, &cfg.evolution, t)?;
                println!(
                    "{t:>5}  {:>4}  {:>5}  {:>15}  {:>13}  {:>19}",
                    cfg.evolution.rank_at(t)?,
                    pc.total,
                    pc.vision_adapters,
                    pc.text_adapters,
                    pc.cumulative_adapters
                );
            }
            for m in Modality::BOTH {
                println!("full per-layer weight baseline ({}): {}", m.tag(), mpp::full_weight_baseline(&cfg.mpp, m));
            }
        }
    }
    Ok(())
}
