//! Command-line front end for twin experiments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use lpf::experiment::{self, snapshot, Config, SignalRecord};
use lpf::metrics::{write_metrics, METRICS_HEADER};
use lpf::{Error, Result};

#[derive(Parser)]
#[command(name = "lpf", version, about = "Localized particle filtering twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a signal trajectory only.
    Simulate(Common),
    /// Run one twin experiment.
    Run(Common),
    /// PF against LPF over square observation grids.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Observation grid sides; defaults to every power of two up to d.
        #[arg(long, value_delimiter = ',')]
        grids: Vec<usize>,
    },
    /// Recompute metrics from the snapshots of a finished run.
    Metrics {
        /// Run directory holding `observations.csv` and `snapshots/`.
        #[arg(long)]
        run: PathBuf,
        /// Output CSV; defaults to `<run>/metrics_recomputed.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a key, e.g. `--set observations.d_obs=16`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Config::with_overrides(&text, &self.overrides)?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.run.output_dir = o.clone();
        }
        if let Some(n) = self.workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        Ok(cfg)
    }
}

fn simulate(cfg: &Config) -> Result<()> {
    let t0 = Instant::now();
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    let model = experiment::stochastic_model(cfg)?;
    let spun = experiment::deterministic_spinup(cfg)?;
    let start = experiment::burn_in_member(cfg, &model, &spun, experiment::signal_index(cfg))?;
    let traj = experiment::simulate_signal(cfg, &model, &start, cfg.run.assimilations)?;

    let mut w = csv::Writer::from_path(dir.join("signal.csv"))?;
    w.serialize(SignalRecord::of(0, &start))?;
    for (k, s) in traj.iter().enumerate().map(|(i, s)| (i + 1, s)) {
        w.serialize(SignalRecord::of(k, s))?;
    }
    w.flush()?;
    let every = cfg.run.snapshot_every;
    if every > 0 {
        let sd = dir.join("snapshots");
        fs::create_dir_all(&sd)?;
        for (k, s) in traj.iter().enumerate().map(|(i, s)| (i + 1, s)).filter(|(k, _)| k % every == 0) {
            snapshot::save(&sd.join(experiment::snapshot_name(k, None)), s)?;
        }
    }
    experiment::write_manifest(dir, cfg, "simulate", t0.elapsed().as_secs_f64())?;
    println!("simulated {} windows into {}", traj.len(), dir.display());
    Ok(())
}

fn run(cfg: &Config) -> Result<()> {
    let rec = experiment::run_twin_experiment(cfg)?;
    rec.write(&cfg.run.output_dir, cfg)?;
    if let Some(last) = rec.metrics.last() {
        println!(
            "k={} emre_eta={:.4} rmse_eta={:.4} in {:.1}s -> {}",
            last.k,
            last.emre_eta,
            last.rmse_eta,
            rec.seconds,
            cfg.run.output_dir.display()
        );
    }
    Ok(())
}

fn compare(cfg: &Config, grids: &[usize]) -> Result<()> {
    let t0 = Instant::now();
    let d = cfg.model.d;
    let grids: Vec<usize> = if grids.is_empty() {
        std::iter::successors(Some(2usize), |g| Some(g * 2)).take_while(|&g| g <= d).collect()
    } else {
        grids.to_vec()
    };
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    let model = experiment::stochastic_model(cfg)?;
    let ic = experiment::burn_in_pipeline(cfg, &model)?;
    let loc = cfg.localization.clone().unwrap_or_default();

    let mut out = fs::File::create(dir.join("compare.csv"))?;
    writeln!(out, "filter,d_obs,{METRICS_HEADER}")?;
    for &g in &grids {
        for (name, l) in [("pf", None), ("lpf", Some(loc.clone()))] {
            let mut c = cfg.clone();
            c.observations.kind = experiment::config::ObservationChoice::Grid;
            c.observations.d_obs = g;
            c.localization = l;
            c.validate()?;
            let rec = experiment::run_from(&c, &model, ic.clone())?;
            let mut buf = Vec::new();
            write_metrics(&mut buf, &rec.metrics)?;
            for line in String::from_utf8_lossy(&buf).lines().skip(1) {
                writeln!(out, "{name},{g},{line}")?;
            }
            let last = rec.metrics.last().expect("at least one assimilation");
            println!("{name:>3} {g:>3}x{g:<3} emre_eta={:.4} rmse_eta={:.4}", last.emre_eta, last.rmse_eta);
        }
    }
    experiment::write_manifest(dir, cfg, "compare", t0.elapsed().as_secs_f64())?;
    Ok(())
}

fn metrics(run: &Path, out: Option<PathBuf>) -> Result<()> {
    let records = experiment::recompute_metrics(run)?;
    let out = out.unwrap_or_else(|| run.join("metrics_recomputed.csv"));
    write_metrics(fs::File::create(&out)?, &records)?;
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => simulate(&c.load()?),
        Command::Run(c) => run(&c.load()?),
        Command::Compare { common, grids } => compare(&common.load()?, &grids),
        Command::Metrics { run, out } => metrics(&run, out),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
