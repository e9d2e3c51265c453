//! Experiment runner behind the `floco` binary.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use floco_core::config::{parse_config, FederationConfig, Strategy};
use floco_core::federation::{loss_surfaces, run_experiment, synthesize_parts, FederatedData};
use floco_core::metrics::{tta_improvement, RoundMetrics, TtaFlag};
use floco_core::partition::write_partition_stats;
use floco_core::report::{format_sig9, read_metrics_csv, write_metrics_csv, write_surface_csv};

#[derive(Debug, Parser)]
#[command(name = "floco", version, about = "Federated simplex learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train for each seed and write metrics CSVs plus a manifest.
    Run(CommonArgs),
    /// Train, then write loss surfaces over the simplex.
    Surface {
        #[command(flatten)]
        common: CommonArgs,
        /// Uniform simplex samples per surface.
        #[arg(long, default_value_t = 500)]
        points: usize,
    },
    /// Write the client/class histogram of the partition.
    PartitionStats(CommonArgs),
    /// Compare a method's metrics CSV against a baseline's.
    Compare {
        baseline: PathBuf,
        method: PathBuf,
        /// Write the comparison here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML config; defaults apply when absent.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Manifest of an earlier run; reuses its resolved config and seeds.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of seeds, starting at the configured master seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    /// Simplex dimension M.
    #[arg(long)]
    m: Option<usize>,
}

/// Everything needed to repeat a `run`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: FederationConfig,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<SeedOutput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutput {
    pub seed: u64,
    pub metrics: PathBuf,
}

impl CommonArgs {
    /// Resolved config and the seeds to run.
    fn resolve(&self) -> Result<(FederationConfig, Vec<u64>)> {
        let (mut cfg, manifest_seeds) = if let Some(path) = &self.manifest {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let m: RunManifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing manifest {}", path.display()))?;
            (m.config, Some(m.seeds))
        } else if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let parsed = parse_config(&text).with_context(|| format!("in config {}", path.display()))?;
            (parsed.config, None)
        } else {
            (FederationConfig::default(), None)
        };
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(tau) = self.tau {
            cfg.tau = tau;
        }
        if let Some(rho) = self.rho {
            cfg.rho = rho;
        }
        if let Some(m) = self.m {
            cfg.simplex_dim = m;
        }
        cfg.validate()?;
        let seeds = match (self.seeds, manifest_seeds) {
            (Some(n), _) => seed_list(cfg.master_seed, n)?,
            (None, Some(seeds)) => seeds,
            (None, None) => vec![cfg.master_seed],
        };
        Ok((cfg, seeds))
    }
}

fn seed_list(base: u64, n: usize) -> Result<Vec<u64>> {
    if n == 0 {
        bail!("--seeds must be at least 1");
    }
    (0..n as u64)
        .map(|i| base.checked_add(i).context("seed overflows u64"))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn with_seed(cfg: &FederationConfig, seed: u64) -> FederationConfig {
    FederationConfig {
        master_seed: seed,
        ..cfg.clone()
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn metrics_file_name(strategy: Strategy, seed: u64) -> String {
    format!("metrics_{strategy}_seed{seed}.csv")
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let (cfg, seeds) = args.resolve()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let started_at = now();
    let mut outputs = Vec::new();
    for &seed in &seeds {
        let run_cfg = with_seed(&cfg, seed);
        log::info!("running {} with seed {seed}", cfg.strategy);
        let data = FederatedData::synthesize(&run_cfg)?;
        let outcome = run_experiment(&run_cfg, &data)?;
        let path = args.out.join(metrics_file_name(cfg.strategy, seed));
        let mut w = create(&path)?;
        write_metrics_csv(&mut w, &outcome.metrics)?;
        w.flush()?;
        outputs.push(SeedOutput { seed, metrics: path });
    }
    let manifest = RunManifest {
        master_seed: cfg.master_seed,
        config: cfg,
        seeds,
        started_at,
        finished_at: now(),
        outputs,
    };
    let path = args
        .out
        .join(format!("manifest_{}.json", manifest.config.strategy));
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "wrote {} metrics files and {}",
        manifest.outputs.len(),
        path.display()
    );
    Ok(())
}

fn cmd_surface(args: &CommonArgs, points: usize) -> Result<()> {
    let (cfg, seeds) = args.resolve()?;
    fs::create_dir_all(&args.out)?;
    for seed in seeds {
        let run_cfg = with_seed(&cfg, seed);
        let data = FederatedData::synthesize(&run_cfg)?;
        let outcome = run_experiment(&run_cfg, &data)?;
        let (global, local) = loss_surfaces(&outcome, &data.global_test, points, seed)?;
        let prefix = format!("surface_{}_seed{seed}", cfg.strategy);
        let mut w = create(&args.out.join(format!("{prefix}_global.csv")))?;
        write_surface_csv(&mut w, &global)?;
        w.flush()?;
        for (k, surface) in local.iter().enumerate() {
            let mut w = create(&args.out.join(format!("{prefix}_client{k}.csv")))?;
            write_surface_csv(&mut w, surface)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn cmd_partition_stats(args: &CommonArgs) -> Result<()> {
    let (cfg, seeds) = args.resolve()?;
    fs::create_dir_all(&args.out)?;
    for seed in seeds {
        let (data, partition, _) = synthesize_parts(&with_seed(&cfg, seed))?;
        let path = args.out.join(format!("partition_seed{seed}.csv"));
        let mut w = create(&path)?;
        write_partition_stats(&mut w, &partition.histogram(&data))?;
        w.flush()?;
    }
    Ok(())
}

type Column = (&'static str, fn(&RoundMetrics) -> f64);

const COLUMNS: [Column; 6] = [
    ("global_acc", |r| r.global_acc),
    ("mean_local_acc", |r| r.mean_local_acc),
    ("global_ece", |r| r.global_ece),
    ("mean_local_ece", |r| r.mean_local_ece),
    ("total_grad_variance", |r| r.total_grad_variance),
    ("worst5_local_acc", |r| r.worst5_local_acc),
];

/// Accuracy columns get a time-to-accuracy ratio; every column gets the
/// difference of final values (method minus baseline).
pub fn compare_metrics<W: Write>(baseline: &[RoundMetrics], method: &[RoundMetrics], out: W) -> Result<()> {
    let (Some(last_b), Some(last_m)) = (baseline.last(), method.last()) else {
        bail!("metrics file has no rows");
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record([
        "metric",
        "tta_improvement",
        "tta_flag",
        "final_baseline",
        "final_method",
        "final_delta",
    ])?;
    for (name, get) in COLUMNS {
        let (tta, flag) = if name.ends_with("_acc") {
            let curve = |rows: &[RoundMetrics]| rows.iter().map(|r| (r.round, get(r))).collect::<Vec<_>>();
            let t = tta_improvement(&curve(baseline), &curve(method))?;
            let flag = match t.flag {
                TtaFlag::Reached => "reached",
                TtaFlag::Underlined => "underlined",
                TtaFlag::DidNotReach => "did_not_reach",
            };
            (format_sig9(t.improvement), flag.to_string())
        } else {
            (String::new(), String::new())
        };
        let (b, m) = (get(last_b), get(last_m));
        w.write_record([
            name.to_string(),
            tta,
            flag,
            format_sig9(b),
            format_sig9(m),
            format_sig9(m - b),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_compare(baseline: &Path, method: &Path, out: Option<&Path>) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<RoundMetrics>> {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        read_metrics_csv(f).with_context(|| format!("reading {}", p.display()))
    };
    let (b, m) = (read(baseline)?, read(method)?);
    match out {
        Some(path) => compare_metrics(&b, &m, create(path)?),
        None => compare_metrics(&b, &m, std::io::stdout().lock()),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Surface { common, points } => cmd_surface(&common, points),
        Command::PartitionStats(args) => cmd_partition_stats(&args),
        Command::Compare {
            baseline,
            method,
            out,
        } => cmd_compare(&baseline, &method, out.as_deref()),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
