use std::path::PathBuf;

use anyhow::Result;
use bap_cli::commands::{self, Ablation};
use bap_cli::config::ExperimentConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bap", version, about = "Background-invariant alignment experiments on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method tags.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated spurious-correlation levels.
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    /// Number of runs.
    #[arg(long)]
    runs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        if let Some(r) = &self.rho {
            cfg.rhos = r.clone();
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the grouped datasets and write their manifests.
    GenData(Common),
    /// Score additivity of planted teachers over the configured α values.
    ProbeAdditivity(Common),
    /// Sweep the anchor background count K.
    KAblation(Common),
    /// Train and evaluate every method over every ρ and run.
    RunMatrix(Common),
    /// Run one ablation: seg, n_sweep, m_sweep or k_train_sweep.
    Ablate {
        which: Ablation,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize an output directory and write plot data.
    Report {
        /// Directory written by earlier commands.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(c) => {
            let (cfg, out) = c.resolve()?;
            let sets = commands::gen_data(&cfg, &out)?;
            for ((train, test), rho) in sets.iter().zip(&cfg.rhos) {
                println!("rho={rho}: {} train, {} test", train.len(), test.len());
            }
        }
        Command::ProbeAdditivity(c) => {
            let (cfg, out) = c.resolve()?;
            for (alpha, rep) in commands::probe_additivity(&cfg, &out)? {
                println!("alpha={alpha}: S = {:.4} ± {:.4} (n={})", rep.mean, rep.std, rep.n);
            }
        }
        Command::KAblation(c) => {
            let (cfg, out) = c.resolve()?;
            let r = commands::k_ablation(&cfg, &out)?;
            for row in r.report.csv_rows() {
                println!("{row}");
            }
            println!("log-log slope of Var(eps) vs K: {:.4}", r.slope);
        }
        Command::RunMatrix(c) => {
            let (cfg, out) = c.resolve()?;
            let m = commands::run_matrix(&cfg, &out)?;
            print!("{}", commands::summarize(&m.rows));
        }
        Command::Ablate { which, common } => {
            let (cfg, out) = common.resolve()?;
            for r in commands::ablate(&cfg, which, &out)? {
                println!("{}: avg {:.4}, wga {:.4}", r.setting, r.avg, r.wga);
            }
        }
        Command::Report { out } => {
            let r = commands::report(&out)?;
            print!("{}", r.summary);
            for p in &r.plot_files {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
