//! Experiment driver: dataset preparation, synthetic data, training runs,
//! parameter sweeps, the stability diagnostic and multi-run reporting.
//!
//! Logging verbosity comes from the `NMCDR_LOG` env var
//! (error|warn|info|debug).

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nmcdr::config::ExperimentConfig;
use nmcdr::runner;

#[derive(Parser)]
#[command(name = "nmcdr", version, about = "Cross-domain recommender experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set data.k_u=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.sets)
            .context("loading configuration")?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().context("validating configuration")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and index both domains, build the overlap/density variant and
    /// the leave-one-out split; writes dataset.json and stats.json.
    Prepare(ConfigArgs),
    /// Generate the synthetic two-domain dataset and its ground truth.
    Synth(ConfigArgs),
    /// Train and evaluate; writes history.jsonl, checkpoint.nmck,
    /// report.json (and peruser.csv when eval.per_user is set).
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Use prepared artifacts from this directory instead of --out.
        #[arg(long)]
        prepared: Option<PathBuf>,
    },
    /// Run one experiment per (value, seed) over a config key and emit
    /// plotdata CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dotted config key to sweep, e.g. data.k_u or model.matching_size.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds (defaults to the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compressed-model stability diagnostic; writes stability.json.
    Stability(ConfigArgs),
    /// Aggregate report.json files from run directories (mean ± std and
    /// best per domain).
    Report {
        /// Run directories (or report.json paths).
        dirs: Vec<PathBuf>,
        /// Also write the aggregate as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NMCDR_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare(args) => {
            let cfg = args.load()?;
            let archive = runner::prepare(&cfg, &args.out)?;
            println!(
                "prepared {} + {} users ({} overlapped) into {}",
                archive.dataset.domain_z.n_users(),
                archive.dataset.domain_zbar.n_users(),
                archive.dataset.overlap.len(),
                args.out.display()
            );
        }
        Command::Synth(args) => {
            let cfg = args.load()?;
            let (z, zbar) = runner::synth(&cfg, &args.out)?;
            println!("wrote {} and {}", z.display(), zbar.display());
        }
        Command::Run { config, prepared } => {
            let cfg = config.load()?;
            let report = match prepared {
                Some(dir) => {
                    let archive = runner::load_prepared(&dir)?;
                    runner::run_with(&cfg, archive, &config.out)?
                }
                None => runner::run(&cfg, &config.out)?,
            };
            println!(
                "z: HR@10 {:.4} NDCG@10 {:.4} | zbar: HR@10 {:.4} NDCG@10 {:.4} ({} epochs)",
                report.z.hr10,
                report.z.ndcg10,
                report.zbar.hr10,
                report.zbar.ndcg10,
                report.metadata.epochs_run
            );
        }
        Command::Sweep { config, param, values, seeds, jobs } => {
            if values.is_empty() {
                bail!("--values must not be empty");
            }
            let cfg = config.load()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let points = runner::sweep(&cfg, &param, &values, &seeds, &config.out, jobs)?;
            println!("{param}: value ndcg_mean±std hr_mean±std (seeds)");
            for p in points {
                println!(
                    "  {} {:.4}±{:.4} {:.4}±{:.4} ({})",
                    p.value, p.ndcg_mean, p.ndcg_std, p.hr_mean, p.hr_std, p.seeds
                );
            }
        }
        Command::Stability(args) => {
            let cfg = args.load()?;
            let d = runner::stability(&cfg, &args.out)?;
            println!(
                "gamma_hat {:.6e}, empirical ratio {:.6e} over {} trials: bound {}",
                d.gamma_hat,
                d.empirical_ratio,
                d.trials,
                if d.bound_satisfied { "satisfied" } else { "VIOLATED" }
            );
            if !d.bound_satisfied {
                bail!("stability bound violated");
            }
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                bail!("pass at least one run directory");
            }
            let (reports, agg) = runner::aggregate_reports(&dirs)?;
            println!("runs: {}", agg.runs);
            for (i, r) in reports.iter().enumerate() {
                println!(
                    "  [{}] seed {} K_u {:.3} D_s {:.2}: z {:.4}/{:.4} zbar {:.4}/{:.4}",
                    i,
                    r.metadata.seed,
                    r.metadata.k_u,
                    r.metadata.d_s,
                    r.z.ndcg10,
                    r.z.hr10,
                    r.zbar.ndcg10,
                    r.zbar.hr10
                );
            }
            println!(
                "z    NDCG@10 {:.4} ± {:.4} (best {:.4}) | HR@10 {:.4} ± {:.4} (best {:.4})",
                agg.ndcg_z_mean, agg.ndcg_z_std, agg.ndcg_z_best, agg.hr_z_mean, agg.hr_z_std, agg.hr_z_best
            );
            println!(
                "zbar NDCG@10 {:.4} ± {:.4} (best {:.4}) | HR@10 {:.4} ± {:.4} (best {:.4})",
                agg.ndcg_zbar_mean,
                agg.ndcg_zbar_std,
                agg.ndcg_zbar_best,
                agg.hr_zbar_mean,
                agg.hr_zbar_std,
                agg.hr_zbar_best
            );
            if let Some(path) = out {
                let bytes = serde_json::to_vec_pretty(&agg)?;
                std::fs::write(&path, bytes).with_context(|| path.display().to_string())?;
            }
        }
    }
    Ok(())
}
