use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use losstomo::harness::{self, EstimatorKind, ExperimentConfig, LossSpec};
use losstomo::likelihood::{self, OracleConfig};
use losstomo::path::{estimate_all_paths, PathEstimatorConfig, RootStrategy};
use losstomo::pipeline::run_pipeline;
use losstomo::report;
use losstomo::sim::{equal_counts, simulate, LossModel, ObservationSet};
use losstomo::stats::{build_stats, StatTable};
use losstomo::{fixtures, Topology};

#[derive(Parser)]
#[command(
    name = "losstomo",
    version,
    about = "Multicast loss tomography over multi-source topologies"
)]
struct Cli {
    /// Seed for simulations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (JSON); supplies defaults for the other commands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a topology and list every broken rule.
    Validate {
        #[arg(long)]
        topology: Option<String>,
    },
    /// Send probes through a topology and record what the receivers saw.
    Simulate {
        #[arg(long)]
        topology: Option<String>,
        /// Loss model as JSON: {"default": 0.01, "links": {"8": 0.1}}.
        #[arg(long)]
        loss: Option<PathBuf>,
        /// Probes per source.
        #[arg(long)]
        probes: Option<u64>,
    },
    /// Reduce observations to statistics.
    Stats {
        #[arg(long)]
        topology: Option<String>,
        /// Observation file written by `simulate` (.bin or .csv).
        #[arg(long)]
        obs: PathBuf,
    },
    /// Estimate loss rates from statistics or observations.
    Estimate {
        #[arg(long)]
        topology: Option<String>,
        #[arg(long, conflicts_with = "obs")]
        stats: Option<PathBuf>,
        #[arg(long)]
        obs: Option<PathBuf>,
        /// `path` or `decompose`.
        #[arg(long, default_value = "path")]
        estimator: String,
        /// Solve each node through the two-child closed form.
        #[arg(long)]
        binary_merge: bool,
        /// Loss model to report next to the estimates.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Maximize the link likelihood numerically.
    Oracle {
        #[arg(long)]
        topology: Option<String>,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = 16)]
        max_links: usize,
    },
    /// Run a replicated experiment and write relative errors.
    Experiment {
        #[arg(long)]
        estimator: Option<String>,
    },
}

struct Ctx {
    seed: Option<u64>,
    config: Option<ExperimentConfig>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn topology_name(&self, arg: Option<String>) -> Result<String> {
        arg.or_else(|| self.config.as_ref().map(|c| c.topology.clone()))
            .context("no topology given (use --topology or --config)")
    }

    fn topology(&self, arg: Option<String>) -> Result<(String, Topology)> {
        let name = self.topology_name(arg)?;
        let t = match fixtures::builtin(&name) {
            Some(t) => t,
            None => Topology::load(&name).with_context(|| format!("reading topology {name}"))?,
        };
        Ok((name, t))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| self.config.as_ref().and_then(|c| c.out.clone()))
            .unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn seed(&self) -> u64 {
        self.seed
            .or_else(|| {
                self.config
                    .as_ref()
                    .map(|c| c.seeds().first().copied().unwrap_or(c.base_seed))
            })
            .unwrap_or(0)
    }
}

fn load_loss(path: &Path, topology: &Topology) -> Result<LossModel> {
    let spec: LossSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(LossModel::with_overrides(topology, spec.default, &spec.links)?)
}

fn resolve_loss(ctx: &Ctx, name: &str, topology: &Topology, arg: Option<&Path>) -> Result<LossModel> {
    if let Some(p) = arg {
        return load_loss(p, topology);
    }
    if let Some(c) = &ctx.config {
        if c.topology == name {
            return Ok(c.resolve_loss(topology)?);
        }
    }
    fixtures::builtin_loss(name).context("no loss model given (use --loss)")
}

fn load_obs(path: &Path, topology: &Topology, seed: u64) -> Result<ObservationSet> {
    let obs = if path.extension().is_some_and(|e| e == "csv") {
        ObservationSet::read_csv(topology, seed, File::open(path)?)?
    } else {
        ObservationSet::load_binary(path)?
    };
    Ok(obs)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn run(cli: Cli) -> Result<bool> {
    let config = match &cli.config {
        Some(p) => {
            Some(ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?)
        }
        None => None,
    };
    let ctx = Ctx {
        seed: cli.seed,
        config,
        out: cli.out,
    };

    match cli.command {
        Command::Validate { topology } => {
            let (name, t) = ctx.topology(topology)?;
            let violations = t.validate();
            if violations.is_empty() {
                println!(
                    "{name}: valid ({} nodes, {} links)",
                    t.nodes().count(),
                    t.num_links()
                );
                return Ok(true);
            }
            for v in &violations {
                println!("{v}");
            }
            Ok(false)
        }
        Command::Simulate {
            topology,
            loss,
            probes,
        } => {
            let (name, t) = ctx.topology(topology)?;
            let loss = resolve_loss(&ctx, &name, &t, loss.as_deref())?;
            let n = probes
                .or_else(|| ctx.config.as_ref().and_then(|c| c.probes_per_source))
                .or_else(|| ctx.config.as_ref().map(|c| c.group_sizes.iter().sum()))
                .context("no probe count given (use --probes)")?;
            let seed = ctx.seed();
            let (obs, truth) = simulate(&t, &loss, &equal_counts(&t, n), seed)?;
            let dir = ctx.out_dir()?;
            obs.save_binary(dir.join("observations.bin"))?;
            obs.write_csv(create(&dir, "observations.csv")?)?;
            truth.write_csv(create(&dir, "ground_truth.csv")?)?;
            println!(
                "simulated {n} probes per source with seed {seed} into {}",
                dir.display()
            );
            Ok(true)
        }
        Command::Stats { topology, obs } => {
            let (_, t) = ctx.topology(topology)?;
            let obs = load_obs(&obs, &t, ctx.seed())?;
            let stats = build_stats(&t, &obs)?;
            let dir = ctx.out_dir()?;
            stats.write_csv(&t, create(&dir, "stats.csv")?)?;
            println!("wrote {}", dir.join("stats.csv").display());
            Ok(true)
        }
        Command::Estimate {
            topology,
            stats,
            obs,
            estimator,
            binary_merge,
            truth,
        } => {
            let (_, t) = ctx.topology(topology)?;
            let stats = match (stats, obs) {
                (Some(p), _) => StatTable::read_csv(&t, File::open(&p)?)?,
                (None, Some(p)) => build_stats(&t, &load_obs(&p, &t, ctx.seed())?)?,
                (None, None) => bail!("give --stats or --obs"),
            };
            let cfg = PathEstimatorConfig {
                strategy: if binary_merge {
                    RootStrategy::BinaryMerge
                } else {
                    RootStrategy::Polynomial
                },
                ..Default::default()
            };
            let r = match estimator.parse::<EstimatorKind>()? {
                EstimatorKind::Path => estimate_all_paths(&t, &stats, &cfg)?,
                EstimatorKind::Decompose => run_pipeline(&t, &stats, &cfg)?.estimate,
                EstimatorKind::Oracle => bail!("use the `oracle` command"),
            };
            let truth = truth.map(|p| load_loss(&p, &t)).transpose()?;
            let dir = ctx.out_dir()?;
            report::write_estimates(create(&dir, "estimates.csv")?, &r, truth.as_ref())?;
            report::write_path_rates(create(&dir, "path_rates.csv")?, &r.path_rates)?;
            for (flag, n) in r.consistency.summary() {
                println!("{flag}: {n}");
            }
            println!("wrote {}", dir.join("estimates.csv").display());
            Ok(true)
        }
        Command::Oracle {
            topology,
            stats,
            max_links,
        } => {
            let (_, t) = ctx.topology(topology)?;
            let stats = StatTable::read_csv(&t, File::open(&stats)?)?;
            let cfg = OracleConfig {
                max_links,
                ..Default::default()
            };
            let r = likelihood::maximize(&t, &stats, None, &cfg)?;
            let dir = ctx.out_dir()?;
            report::write_oracle(create(&dir, "oracle.csv")?, &r)?;
            fs::write(dir.join("loglik.txt"), format!("{}\n", r.loglik))?;
            println!("loglik {}", r.loglik);
            Ok(true)
        }
        Command::Experiment { estimator } => {
            let mut config = ctx.config.clone().context("experiment needs --config")?;
            if let Some(e) = estimator {
                config.estimator = e.parse()?;
            }
            if let Some(seed) = ctx.seed {
                config.base_seed = seed;
                config.seeds = None;
            }
            let report = harness::run_experiment(&config)?;
            let dir = ctx.out_dir()?;
            harness::write_report(&dir, &config, &report)?;
            println!(
                "{} runs, {} failed; wrote {}",
                config.seeds().len() * config.group_sizes.len(),
                report.failures.len(),
                dir.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
