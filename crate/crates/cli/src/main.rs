//! `reinforce-lab` command-line entry point.
//!
//! Exit codes: 0 success, 1 statistical rejection in `verify`, 2 usage or
//! infrastructure error.

mod experiment;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use reinforce_lab::graph::{GraphSpec, LatticeBox, LatticeSpec};
use reinforce_lab::mcmc::McmcSettings;
use reinforce_lab::phase::{Conductance, DecayConfig, ResistanceConfig};
use reinforce_lab::process::ProcessKind;
use reinforce_lab::verify::{Suite, SuiteConfig};

use experiment::{
    execute, load_config, primary, write_outputs, ConstantsTask, DensityTarget, DensityTask, ExperimentConfig,
    Format, SimulateTask, Task, VerifyTask,
};

#[derive(Parser, Debug)]
#[command(name = "reinforce-lab", version, about = "Reinforced random walks: simulation, densities and checks")]
struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory (artefacts plus manifest.json); stdout if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads; falls back to REINFORCE_LAB_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GraphArgs {
    /// Graph description file (JSON).
    #[arg(long, conflicts_with = "lattice")]
    graph: Option<PathBuf>,
    /// Lattice box shorthand, e.g. `d=2,n=3[,w=1]`.
    #[arg(long)]
    lattice: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct McmcArgs {
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 10_000)]
    burn_in: usize,
    /// Fixed thinning; chosen from a pilot run when absent.
    #[arg(long)]
    thinning: Option<usize>,
}

impl McmcArgs {
    fn settings(&self, seed: u64) -> McmcSettings {
        let mut s = McmcSettings::new(self.samples, seed);
        s.burn_in = self.burn_in;
        s.thinning = self.thinning;
        s
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one of the processes.
    Simulate {
        #[arg(value_parser = parse_process)]
        process: ProcessKind,
        #[command(flatten)]
        graph: GraphArgs,
        /// Start vertex (default: lattice origin or vertex 0).
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        /// Native-clock horizon.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<f64>,
        /// Field U for the Z process, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        field: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        replicas: u64,
    },
    /// MCMC samples of the limiting or pinned sigma-model density.
    SampleDensity {
        #[command(flatten)]
        graph: GraphArgs,
        /// Pinning vertex (lattice default: origin).
        #[arg(long)]
        i0: Option<usize>,
        /// Pin through an extra vertex with this strength instead.
        #[arg(long)]
        eta: Option<f64>,
        #[command(flatten)]
        mcmc: McmcArgs,
        #[arg(long, default_value_t = 1)]
        chains: usize,
    },
    /// Phase constants for dimension d.
    Constants {
        #[arg(long)]
        d: usize,
        #[arg(long, conflicts_with = "beta")]
        a: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Decay diagnostic along a lattice axis.
    ScanDecay {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, conflicts_with = "a", required_unless_present = "a")]
        beta: Option<f64>,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        /// Conductance draws (Gamma case).
        #[arg(long, default_value_t = 16)]
        draws: usize,
        #[command(flatten)]
        mcmc: McmcArgs,
    },
    /// Effective-resistance diagnostic on a lattice box.
    ResistanceCheck {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        beta: f64,
        #[command(flatten)]
        mcmc: McmcArgs,
    },
    /// Run a verification suite.
    Verify {
        #[arg(value_parser = parse_suite)]
        suite: Suite,
        /// Suite parameters (JSON); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_delimiter = ',')]
        a: Option<Vec<f64>>,
        #[arg(long)]
        replicas: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        repeats: Option<u64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Re-run an experiment from a config or manifest file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_process(s: &str) -> Result<ProcessKind, String> {
    ProcessKind::parse(s).map_err(|e| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    Suite::parse(s).map_err(|e| e.to_string())
}

fn parse_lattice(s: &str) -> Result<LatticeSpec> {
    let (mut d, mut n, mut weight) = (None, None, 1.0);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("lattice entry '{part}' is not key=value"))?;
        match k {
            "d" => d = Some(v.parse().context("lattice d")?),
            "n" => n = Some(v.parse().context("lattice n")?),
            "w" | "weight" => weight = v.parse().context("lattice weight")?,
            other => bail!("unknown lattice key '{other}'"),
        }
    }
    Ok(LatticeSpec {
        d: d.ok_or_else(|| anyhow!("lattice needs d"))?,
        n: n.ok_or_else(|| anyhow!("lattice needs n"))?,
        weight,
    })
}

/// Graph spec plus the default distinguished vertex (lattice origin).
fn resolve_graph(args: &GraphArgs) -> Result<Option<(GraphSpec, usize)>> {
    if let Some(l) = &args.lattice {
        let spec = parse_lattice(l)?;
        let origin = LatticeBox::<f64>::new(spec.d, spec.n, spec.weight)?.origin();
        return Ok(Some((GraphSpec::Lattice { lattice: spec }, origin)));
    }
    if let Some(p) = &args.graph {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let spec = GraphSpec::from_json(&text).with_context(|| format!("invalid graph file {}", p.display()))?;
        return Ok(Some((spec, 0)));
    }
    Ok(None)
}

fn require_graph(args: &GraphArgs) -> Result<(GraphSpec, usize)> {
    resolve_graph(args)?.ok_or_else(|| anyhow!("give --graph FILE or --lattice d=D,n=N"))
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let seed = cli.seed;
    let task = match &cli.command {
        Command::Run { config } => {
            // the stored seed and format win over flags
            return load_config(config);
        }
        Command::Simulate {
            process,
            graph,
            start,
            steps,
            horizon,
            checkpoints,
            field,
            replicas,
        } => {
            let (spec, origin) = require_graph(graph)?;
            Task::Simulate(SimulateTask {
                process: *process,
                graph: spec,
                start: start.unwrap_or(origin),
                steps: *steps,
                horizon: *horizon,
                checkpoints: checkpoints.clone(),
                field: field.clone(),
                replicas: *replicas,
            })
        }
        Command::SampleDensity {
            graph,
            i0,
            eta,
            mcmc,
            chains,
        } => {
            let (spec, origin) = require_graph(graph)?;
            let vertex = i0.unwrap_or(origin);
            let target = match (eta, spec.pinning::<f64>()?) {
                (Some(eta), _) => {
                    let n = spec.build::<f64>()?.n_vertices();
                    if vertex >= n {
                        bail!("pinning vertex {vertex} out of range");
                    }
                    let mut eps = vec![0.0; n];
                    eps[vertex] = *eta;
                    DensityTarget::Pinned { eps }
                }
                (None, Some(eps)) => DensityTarget::Pinned { eps },
                (None, None) => DensityTarget::Vertex { i0: vertex },
            };
            Task::SampleDensity(DensityTask {
                graph: spec,
                target,
                mcmc: mcmc.settings(seed),
                chains: *chains,
            })
        }
        Command::Constants { d, a, beta } => Task::Constants(ConstantsTask {
            d: *d,
            a: *a,
            beta: *beta,
        }),
        Command::ScanDecay {
            d,
            n,
            beta,
            a,
            eta,
            draws,
            mcmc,
        } => {
            let conductance = match (beta, a) {
                (Some(b), None) => Conductance::Beta(*b),
                (None, Some(a)) => Conductance::Gamma(*a),
                _ => bail!("give exactly one of --beta and --a"),
            };
            Task::ScanDecay(DecayConfig {
                d: *d,
                n: *n,
                conductance,
                eta: *eta,
                draws: *draws,
                mcmc: mcmc.settings(seed),
            })
        }
        Command::ResistanceCheck { d, n, beta, mcmc } => Task::ResistanceCheck(ResistanceConfig {
            d: *d,
            n: *n,
            beta: *beta,
            mcmc: mcmc.settings(seed),
        }),
        Command::Verify {
            suite,
            config,
            graph,
            a,
            replicas,
            steps,
            repeats,
            horizon,
            samples,
        } => {
            let mut sc: SuiteConfig = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("invalid suite config {}", p.display()))?
                }
                None => SuiteConfig::default(),
            };
            if let Some((spec, _)) = resolve_graph(graph)? {
                sc.graph = Some(spec);
            }
            sc.a = a.clone().or(sc.a);
            sc.replicas = replicas.or(sc.replicas);
            sc.steps = steps.or(sc.steps);
            sc.repeats = repeats.or(sc.repeats);
            sc.horizon = horizon.or(sc.horizon);
            sc.samples = samples.or(sc.samples);
            Task::Verify(VerifyTask {
                suite: *suite,
                config: sc.resolved(*suite),
            })
        }
    };
    Ok(ExperimentConfig {
        seed,
        format: cli.format,
        task,
    })
}

fn thread_count(cli: &Cli) -> Result<Option<usize>> {
    if let Some(t) = cli.threads {
        return Ok(Some(t));
    }
    match std::env::var("REINFORCE_LAB_THREADS") {
        Ok(v) if !v.trim().is_empty() => Ok(Some(
            v.trim().parse().with_context(|| format!("REINFORCE_LAB_THREADS = '{v}'"))?,
        )),
        _ => Ok(None),
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = thread_count(cli)? {
        if n == 0 {
            bail!("thread count must be ≥ 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = build_config(cli)?;
    let outcome = execute(&cfg)?;
    match &cli.out {
        Some(dir) => {
            for p in write_outputs(dir, &cfg, &outcome)? {
                eprintln!("wrote {}", p.display());
            }
        }
        None => {
            let bytes = primary(&outcome, cfg.format).ok_or_else(|| anyhow!("{} produced no output", cfg.task.name()))?;
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
        }
    }
    if outcome.rejected {
        eprintln!("{}: statistical check rejected", cfg.task.name());
    }
    Ok(!outcome.rejected)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_shorthand() {
        let l = parse_lattice("d=2,n=3").unwrap();
        assert_eq!((l.d, l.n, l.weight), (2, 3, 1.0));
        assert_eq!(parse_lattice("d=1, n=2, w=0.5").unwrap().weight, 0.5);
        assert!(parse_lattice("d=1").is_err());
        assert!(parse_lattice("d=1,n=2,q=3").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn lattice_start_defaults_to_origin() {
        let cli = Cli::try_parse_from(["reinforce-lab", "simulate", "errw", "--lattice", "d=1,n=2", "--steps", "5"]).unwrap();
        let cfg = build_config(&cli).unwrap();
        match cfg.task {
            Task::Simulate(t) => assert_eq!(t.start, 2),
            _ => unreachable!(),
        }
    }
}
