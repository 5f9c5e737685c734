//! Command-line front end. Thin dispatch onto the library: every subcommand
//! resolves a run configuration (preset, optional config file, `--set`
//! overrides) and calls the corresponding harness entry point.
//!
//! Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gcdmoe::data;
use gcdmoe::error::Error;
use gcdmoe::harness::{
    ablate, build_model, evaluate_split, grad_check, load_checkpoint, train, write_eval_reports,
    DataSource, RunConfig, Variant,
};

#[derive(Parser)]
#[command(name = "gcdmoe", version, about = "Desk-scale category-discovery training stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: desk, tiny, or a full-scale row (cub, aircraft, scars,
    /// cifar10, cifar100, imagenet100, herbarium19).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override single keys, e.g. --set opt.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed (overrides the preset/config seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config `out` key).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut base = match self.preset.as_str() {
            "desk" => RunConfig::desk(0),
            "tiny" => RunConfig::tiny(0),
            name => RunConfig::paper_preset(name, 0)?,
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            base = RunConfig::apply_text(base, &text)?;
        }
        if !self.sets.is_empty() {
            let text = self.sets.join("\n");
            base = RunConfig::apply_text(base, &text)?;
        }
        if let Some(seed) = self.seed {
            base = RunConfig::apply_text(base, &format!("seed={seed}"))?;
            // Seed the data too unless the config pinned it explicitly.
            if let DataSource::Spec(ref mut spec) = base.data {
                spec.seed = seed;
            }
        }
        if let Some(out) = &self.out {
            base.out_dir = out.clone();
        }
        base.validate()?;
        Ok(base)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file (.gcd).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Destination file.
        #[arg(long)]
        dest: PathBuf,
    },
    /// Train per the configuration and write all run artifacts.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint: accuracy report, confusion matrix, route dumps.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to evaluate on (defaults to the config data source).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and compare ablation variants on shared data and seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variants (default: all of baseline,
        /// single_adapter, mea, mea_ba, mea_ba_cba).
        #[arg(long)]
        variants: Option<String>,
    },
    /// Write the per-sample route dump for a checkpoint.
    DumpRoutes {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_eval_split(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<data::GcdSplit, Error> {
    match data {
        Some(path) => data::load(path),
        None => cfg.load_split(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData { cfg, dest } => {
            let cfg = cfg.resolve()?;
            let split = cfg.load_split()?;
            data::save(&split, &dest)?;
            println!(
                "wrote {} ({} labeled + {} unlabeled samples, {} classes)",
                dest.display(),
                split.labeled.len(),
                split.unlabeled.len(),
                split.num_classes()
            );
            Ok(())
        }
        Cmd::Train { cfg } => {
            let cfg = cfg.resolve()?;
            let outcome = train(&cfg)?;
            println!(
                "trained {} steps; acc_all={:.4} acc_old={} acc_new={}",
                outcome.steps_run,
                outcome.report.acc_all,
                fmt_opt(outcome.report.acc_old),
                fmt_opt(outcome.report.acc_new),
            );
            println!("artifacts in {}", cfg.out_dir.display());
            Ok(())
        }
        Cmd::Evaluate {
            cfg,
            checkpoint,
            data,
        } => {
            let cfg = cfg.resolve()?;
            let split = load_eval_split(&cfg, &data)?;
            let model = build_model(&cfg, split.num_classes())?;
            load_checkpoint(&model.store, &cfg.hash(), &checkpoint)?;
            let (report, cm, stats, dump, _dev) =
                evaluate_split(&model, &split, &cfg.loss, cfg.constraint.tau_gate)?;
            write_eval_reports(&cfg.out_dir, &report, &cm, &stats, &dump)?;
            println!(
                "acc_all={:.4} acc_old={} acc_new={} ({} samples)",
                report.acc_all,
                fmt_opt(report.acc_old),
                fmt_opt(report.acc_new),
                report.n_all
            );
            println!("reports in {}", cfg.out_dir.display());
            Ok(())
        }
        Cmd::GradCheck { cfg, tolerance } => {
            let mut args = cfg;
            if args.config.is_none() && args.preset == "desk" {
                // Gradient checking enumerates every scalar; default tiny.
                args.preset = "tiny".into();
            }
            let cfg = args.resolve()?;
            let reports = grad_check(&cfg)?;
            let mut failed = false;
            for r in &reports {
                if r.skipped {
                    println!("{:<16} skipped (frozen)", r.group);
                } else {
                    let ok = r.passed(tolerance);
                    failed |= !ok;
                    println!(
                        "{:<16} max_rel_err={:.3e} over {} params: {}",
                        r.group,
                        r.max_rel_err,
                        r.params_checked,
                        if ok { "pass" } else { "FAIL" }
                    );
                }
            }
            if failed {
                return Err(Error::Numeric(format!(
                    "gradient check exceeded tolerance {tolerance}"
                )));
            }
            Ok(())
        }
        Cmd::Ablate { cfg, variants } => {
            let cfg = cfg.resolve()?;
            let list: Vec<Variant> = match variants {
                None => Variant::ALL.to_vec(),
                Some(s) => s
                    .split(',')
                    .map(|name| {
                        Variant::parse(name.trim()).ok_or_else(|| {
                            Error::Config(format!("unknown ablation variant {name:?}"))
                        })
                    })
                    .collect::<Result<_, _>>()?,
            };
            let rows = ablate(&cfg, &list)?;
            println!(
                "{:<16} {:>7} {:>10} {:>5} {:>5} {:>8} {:>8} {:>8}",
                "variant", "experts", "bottleneck", "ba", "cba", "acc_all", "acc_old", "acc_new"
            );
            for r in &rows {
                println!(
                    "{:<16} {:>7} {:>10} {:>5} {:>5} {:>8.4} {:>8} {:>8}",
                    r.variant,
                    r.experts,
                    r.bottleneck,
                    r.balanced_loss,
                    r.category_loss,
                    r.acc_all,
                    fmt_opt(r.acc_old),
                    fmt_opt(r.acc_new),
                );
            }
            println!("table in {}", cfg.out_dir.join("ablation.csv").display());
            Ok(())
        }
        Cmd::DumpRoutes {
            cfg,
            checkpoint,
            data,
        } => {
            let cfg = cfg.resolve()?;
            let split = load_eval_split(&cfg, &data)?;
            let model = build_model(&cfg, split.num_classes())?;
            load_checkpoint(&model.store, &cfg.hash(), &checkpoint)?;
            let (_report, _cm, _stats, dump, _dev) =
                evaluate_split(&model, &split, &cfg.loss, cfg.constraint.tau_gate)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let mut csv = String::from("block,sample_id,expert_id,pooled_weight\n");
            for (block, sample, expert, w) in &dump {
                csv.push_str(&format!("{block},{sample},{expert},{w:.17e}\n"));
            }
            let path = cfg.out_dir.join("routes.csv");
            std::fs::write(&path, csv)?;
            println!("wrote {} ({} rows)", path.display(), dump.len());
            Ok(())
        }
    }
}
