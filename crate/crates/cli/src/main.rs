use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kpocat::basis::{layout, PAPER_KPO_CUTOFFS};
use kpocat::dynamics::WORKING_COPIES;
use kpocat::experiments::{
    estimate_loss, run_closed_kpo, run_j_sweep, run_table1, write_table1, ClosedKpoConfig, InternalLoss, Table1Config,
    Variant,
};
use kpocat::pump::ShortcutMode;

#[derive(Parser)]
#[command(name = "kpocat", version, about = "Traveling cat-state emission from a Kerr parametric oscillator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emission run for one of the four settings (a, b, c, d).
    Table1 {
        variant: Variant,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Photon number versus bin count, fitted to n_0 - b/J.
    Jsweep {
        #[arg(long, default_value = "a")]
        variant: Variant,
        /// Comma-separated bin counts.
        #[arg(long = "J-list", value_delimiter = ',', default_value = "20,40,60,80")]
        j_list: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Single-mode KPO under a linear pump ramp (shortcut none, tanh or coherent).
    ClosedKpo {
        mode: ShortcutMode,
        #[arg(long, default_value_t = 30)]
        cutoff: usize,
        #[arg(long, default_value_t = 10.0)]
        ramp_time: f64,
        #[arg(long, default_value_t = 2.0)]
        p_final: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value = "out/closed-kpo")]
        out_dir: PathBuf,
    },
    /// Internal-loss bound kappa_in I_t and quality factors.
    LossEstimate {
        /// KPO frequency, same unit as the rates (e.g. MHz).
        #[arg(long, default_value_t = 1e4)]
        omega: f64,
        #[arg(long, default_value_t = 10.0)]
        kerr: f64,
        /// External decay rate in units of K.
        #[arg(long = "kappa-ex", default_value_t = 0.2)]
        kappa_ex: f64,
        /// K I_t (dimensionless).
        #[arg(long = "K-I-t", default_value_t = 10.0)]
        k_it: f64,
        #[arg(long = "kappa-in", conflicts_with_all = ["q_in", "loss_budget"])]
        kappa_in: Option<f64>,
        #[arg(long = "Q-in", conflicts_with = "loss_budget")]
        q_in: Option<f64>,
        #[arg(long = "loss-budget")]
        loss_budget: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config replacing the built-in defaults of the variant.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "J")]
    bins: Option<usize>,
    /// Output-photon truncation.
    #[arg(long = "L")]
    max_out_photons: Option<usize>,
    #[arg(long = "A-p")]
    amplitude: Option<f64>,
    #[arg(long = "B")]
    bandwidth: Option<f64>,
    #[arg(long = "kappa-ex")]
    kappa_ex: Option<f64>,
    #[arg(long = "T")]
    final_time: Option<f64>,
    #[arg(long)]
    shortcut: Option<ShortcutMode>,
    #[arg(long = "out-dir", default_value = "out")]
    out_dir: PathBuf,
    /// Output photons truncated at 6 (needs tens of GiB at J = 80).
    #[arg(long = "paper-faithful")]
    paper_faithful: bool,
    /// Memory budget in GiB for the state and its RK4 buffers.
    #[arg(long = "memory-budget")]
    memory_budget: Option<f64>,
}

impl RunArgs {
    fn config(&self, variant: Variant) -> Result<Table1Config> {
        let mut cfg = match &self.config {
            Some(path) => Table1Config::from_json_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => Table1Config::defaults(variant),
        };
        if self.paper_faithful {
            cfg.set_max_out_photons(PAPER_KPO_CUTOFFS.len() - 1)?;
        }
        if let Some(l) = self.max_out_photons {
            cfg.set_max_out_photons(l)?;
        }
        if let Some(j) = self.bins {
            cfg.bins = j;
        }
        if let Some(a) = self.amplitude {
            cfg.amplitude = a;
        }
        if let Some(b) = self.bandwidth {
            cfg.bandwidth = b;
        }
        if let Some(k) = self.kappa_ex {
            cfg.kappa_ex = k;
        }
        if let Some(t) = self.final_time {
            cfg.final_time = t;
        }
        if let Some(s) = self.shortcut {
            cfg.shortcut = s;
        }
        if let Some(gib) = self.memory_budget {
            anyhow::ensure!(gib > 0.0, "memory budget must be positive");
            cfg.memory_budget = (gib * (1u64 << 30) as f64) as u64;
        }
        let lay = layout(&cfg.system_params().sector_spec());
        let need = lay.memory_bytes * WORKING_COPIES;
        eprintln!(
            "J = {}, L = {}: {} amplitudes, {:.2} GiB with RK4 buffers (budget {:.2} GiB)",
            cfg.bins,
            cfg.max_out_photons(),
            lay.total,
            need as f64 / (1u64 << 30) as f64,
            cfg.memory_budget as f64 / (1u64 << 30) as f64
        );
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Table1 { variant, run } => {
            let cfg = run.config(variant)?;
            let result = run_table1(&cfg)?;
            let dir = run.out_dir.join(format!("table1_{}", cfg.variant));
            write_table1(&result, &dir)?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
            eprintln!("wrote {}", dir.display());
        }
        Command::Jsweep { variant, j_list, run } => {
            let cfg = run.config(variant)?;
            let fit = run_j_sweep(&cfg, &j_list)?;
            fs::create_dir_all(&run.out_dir)?;
            let path = run.out_dir.join(format!("jsweep_{}.json", cfg.variant));
            serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &fit)?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
            eprintln!("wrote {}", path.display());
        }
        Command::ClosedKpo { mode, cutoff, ramp_time, p_final, dt, out_dir } => {
            let cfg = ClosedKpoConfig { cutoff, ramp_time, final_time: ramp_time, p_final, dt, ..ClosedKpoConfig::new(mode) };
            let res = run_closed_kpo(&cfg)?;
            fs::create_dir_all(&out_dir)?;
            let path = out_dir.join(format!("closed_kpo_{}.csv", mode.token()));
            res.write_csv(BufWriter::new(File::create(&path)?))?;
            println!(
                "mode {}: final fidelity {:.6}, final <a^dag a> {:.5}, largest drawdown {:.3e}",
                mode.token(),
                res.final_fidelity,
                res.final_photons,
                res.max_drawdown
            );
            eprintln!("wrote {}", path.display());
        }
        Command::LossEstimate { omega, kerr, kappa_ex, k_it, kappa_in, q_in, loss_budget } => {
            let loss = match (kappa_in, q_in, loss_budget) {
                (Some(k), _, _) => InternalLoss::Rate(k * kerr),
                (_, Some(q), _) => InternalLoss::QualityFactor(q),
                (_, _, Some(p)) => InternalLoss::LossBudget(p),
                _ => InternalLoss::LossBudget(0.1),
            };
            let est = estimate_loss(omega, kerr, kappa_ex * kerr, k_it / kerr, loss)?;
            println!("{}", serde_json::to_string_pretty(&est)?);
        }
    }
    Ok(())
}
