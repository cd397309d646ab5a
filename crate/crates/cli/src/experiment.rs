//! Resolved, serialisable experiment descriptions and their execution.
//!
//! Every command line is turned into an [`ExperimentConfig`] before any
//! computation; the same struct is written to the manifest and accepted
//! back by `run --config`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use reinforce_lab::graph::{GraphSpec, PinnedGraph};
use reinforce_lab::mcmc::{sample_chains, McmcSettings};
use reinforce_lab::measure::MeasureParams;
use reinforce_lab::phase::{
    a_c, beta_c, c0, decay_scan, i_beta, i_hat, j_hat, resistance_bound_check, Conductance, DecayConfig,
    PhasePoint, ResistanceConfig,
};
use reinforce_lab::process::{run_until_with, stream_rng, Budget, ProcessKind, RunConfig, Trajectory};
use reinforce_lab::verify::{verify_suite, Suite, SuiteConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub format: Format,
    pub task: Task,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    Simulate(SimulateTask),
    SampleDensity(DensityTask),
    Constants(ConstantsTask),
    ScanDecay(DecayConfig),
    ResistanceCheck(ResistanceConfig),
    Verify(VerifyTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Simulate(_) => "simulate",
            Task::SampleDensity(_) => "sample-density",
            Task::Constants(_) => "constants",
            Task::ScanDecay(_) => "scan-decay",
            Task::ResistanceCheck(_) => "resistance-check",
            Task::Verify(_) => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateTask {
    pub process: ProcessKind,
    pub graph: GraphSpec,
    pub start: usize,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default)]
    pub field: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub replicas: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensityTarget {
    /// Limiting measure on the zero-sum hyperplane, pinned at a vertex.
    Vertex { i0: usize },
    /// Sigma-model measure with pinning strengths per vertex.
    Pinned { eps: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityTask {
    pub graph: GraphSpec,
    pub target: DensityTarget,
    pub mcmc: McmcSettings,
    #[serde(default = "one_chain")]
    pub chains: usize,
}

fn one_chain() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsTask {
    pub d: usize,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyTask {
    pub suite: Suite,
    #[serde(default)]
    pub config: SuiteConfig,
}

/// Written next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub experiment: ExperimentConfig,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

/// Accepts a bare config or a manifest from an earlier run.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    let invalid = || format!("invalid config {}", path.display());
    if value.get("experiment").is_some() {
        Ok(serde_json::from_value::<Manifest>(value).with_context(invalid)?.experiment)
    } else {
        serde_json::from_value(value).with_context(invalid)
    }
}

/// What a run produced: named artefacts plus whether a statistical
/// check rejected.
pub struct Outcome {
    pub artefacts: Vec<(String, Vec<u8>)>,
    pub rejected: bool,
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Infinite constants are reported as the string `"inf"`.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x > 0.0 {
        json!("inf")
    } else if x < 0.0 {
        json!("-inf")
    } else {
        json!("nan")
    }
}

fn key_value_csv(rows: &[(String, Value)]) -> Vec<u8> {
    let mut out = String::from("quantity,value\n");
    for (k, v) in rows {
        let v = match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push_str(&format!("{k},{v}\n"));
    }
    out.into_bytes()
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    match &cfg.task {
        Task::Simulate(t) => simulate(t, cfg.seed, cfg.format),
        Task::SampleDensity(t) => sample_density(t, cfg.format),
        Task::Constants(t) => constants(t, cfg.format),
        Task::ScanDecay(t) => scan(t, cfg.format),
        Task::ResistanceCheck(t) => resistance(t, cfg.format),
        Task::Verify(t) => {
            let report = verify_suite(t.suite, &t.config, cfg.seed)?;
            Ok(Outcome {
                rejected: !report.pass,
                artefacts: vec![("report.json".into(), json_bytes(&report)?)],
            })
        }
    }
}

fn simulate(t: &SimulateTask, seed: u64, format: Format) -> Result<Outcome> {
    if t.steps.is_none() && t.horizon.is_none() {
        bail!("simulate needs --steps or --horizon");
    }
    if t.replicas == 0 {
        bail!("replicas must be ≥ 1");
    }
    let g = t.graph.build::<f64>()?;
    let mut run = RunConfig::new(
        t.process,
        Budget {
            horizon: t.horizon,
            max_steps: t.steps,
        },
    );
    run.start = t.start;
    run.checkpoints = t.checkpoints.clone();
    run.field = t.field.clone();
    // one stream per replica: independent of the thread count
    let trajectories: Vec<Trajectory> = (0..t.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            run_until_with(&g, &run, &mut rng)
        })
        .collect::<reinforce_lab::Result<_>>()?;

    let artefacts = match format {
        Format::Json => vec![("trajectories.json".to_string(), json_bytes(&trajectories)?)],
        Format::Csv => {
            let n = g.n_vertices();
            let mut jumps = b"replica,step,t,from,to\n".to_vec();
            let mut fin = format!(
                "replica,clock,steps,complete,{}\n",
                (0..n).map(|i| format!("L_{i}")).collect::<Vec<_>>().join(",")
            )
            .into_bytes();
            let mut cps = format!(
                "replica,t,{}\n",
                (0..n).map(|i| format!("T_{i}")).collect::<Vec<_>>().join(",")
            )
            .into_bytes();
            for (r, tr) in trajectories.iter().enumerate() {
                for (k, j) in tr.jumps.iter().enumerate() {
                    writeln!(jumps, "{r},{},{},{},{}", k + 1, j.t, j.from, j.to)?;
                }
                let s = &tr.final_state;
                let lt: Vec<String> = s.local_time.iter().map(|x| x.to_string()).collect();
                writeln!(fin, "{r},{},{},{},{}", s.clock, s.step_count, tr.complete, lt.join(","))?;
                for c in &tr.checkpoints {
                    let v: Vec<String> = c.local_time.iter().map(|x| x.to_string()).collect();
                    writeln!(cps, "{r},{},{}", c.t, v.join(","))?;
                }
            }
            let mut a = vec![("jumps.csv".to_string(), jumps), ("final.csv".to_string(), fin)];
            if !t.checkpoints.is_empty() {
                a.push(("checkpoints.csv".to_string(), cps));
            }
            a
        }
    };
    Ok(Outcome {
        artefacts,
        rejected: false,
    })
}

fn sample_density(t: &DensityTask, format: Format) -> Result<Outcome> {
    let g = t.graph.build::<f64>()?;
    let target = match &t.target {
        DensityTarget::Vertex { i0 } => {
            if *i0 >= g.n_vertices() {
                bail!("pinning vertex {i0} out of range");
            }
            MeasureParams::Vertex { graph: g, i0: *i0 }
        }
        DensityTarget::Pinned { eps } => MeasureParams::Pinned(PinnedGraph::new(g, eps.clone())?),
    };
    let out = sample_chains(&target, &t.mcmc, t.chains.max(1))?;
    let prefix = match t.target {
        DensityTarget::Vertex { .. } => "u",
        DensityTarget::Pinned { .. } => "t",
    };
    let samples = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            out.write_csv(&mut buf, prefix)?;
            ("samples.csv".to_string(), buf)
        }
        Format::Json => ("samples.json".to_string(), json_bytes(&out.samples)?),
    };
    Ok(Outcome {
        artefacts: vec![samples, ("diagnostics.json".into(), json_bytes(&out.diagnostics)?)],
        rejected: false,
    })
}

fn constants(t: &ConstantsTask, format: Format) -> Result<Outcome> {
    if t.a.is_some() && t.beta.is_some() {
        bail!("give at most one of --a and --beta");
    }
    let d = t.d;
    let mut rows: Vec<(String, Value)> = vec![
        ("d".into(), json!(d)),
        ("beta_c".into(), num(beta_c::<f64>(d)?)),
        ("a_c".into(), num(a_c::<f64>(d)?)),
        ("c0".into(), num(c0::<f64>(d))),
    ];
    if let Some(b) = t.beta {
        let p = PhasePoint::new(d, Conductance::Beta(b))?;
        rows.push(("beta".into(), num(b)));
        rows.push(("i_beta".into(), num(i_beta(b)?)));
        rows.push(("bound_base".into(), num(p.bound_base)));
    }
    if let Some(a) = t.a {
        let p = PhasePoint::new(d, Conductance::Gamma(a))?;
        rows.push(("a".into(), num(a)));
        rows.push(("i_hat".into(), num(i_hat(a)?)));
        rows.push(("j_hat".into(), num(j_hat(a)?)));
        rows.push(("bound_base".into(), num(p.bound_base)));
    }
    let artefact = match format {
        Format::Csv => ("constants.csv".to_string(), key_value_csv(&rows)),
        Format::Json => {
            let obj: serde_json::Map<String, Value> = rows.into_iter().collect();
            ("constants.json".to_string(), json_bytes(&obj)?)
        }
    };
    Ok(Outcome {
        artefacts: vec![artefact],
        rejected: false,
    })
}

fn scan(cfg: &DecayConfig, format: Format) -> Result<Outcome> {
    let table = decay_scan(cfg)?;
    let artefact = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            ("decay.csv".to_string(), buf)
        }
        Format::Json => ("decay.json".to_string(), json_bytes(&table)?),
    };
    Ok(Outcome {
        artefacts: vec![artefact],
        rejected: false,
    })
}

fn resistance(cfg: &ResistanceConfig, format: Format) -> Result<Outcome> {
    let r = resistance_bound_check(cfg)?;
    let artefacts = match format {
        Format::Json => vec![("resistance.json".to_string(), json_bytes(&r)?)],
        Format::Csv => {
            let rows: Vec<(String, Value)> = vec![
                ("lhs".into(), num(r.lhs)),
                ("lhs_stderr".into(), num(r.lhs_stderr)),
                ("rhs".into(), num(r.rhs)),
                ("unit_resistance".into(), num(r.unit_resistance)),
                ("flow_energy_residual".into(), num(r.flow_energy_residual)),
                ("flow_bound_violations".into(), json!(r.flow_bound_violations)),
                ("samples".into(), json!(r.samples)),
                ("holds".into(), json!(r.holds)),
                ("flagged".into(), json!(r.flagged)),
            ];
            let mut per = b"sample,c0_resistance,c0_flow_energy\n".to_vec();
            for (k, (a, b)) in r.per_sample.iter().enumerate() {
                writeln!(per, "{k},{a},{b}")?;
            }
            vec![
                ("resistance.csv".to_string(), key_value_csv(&rows)),
                ("per_sample.csv".to_string(), per),
            ]
        }
    };
    Ok(Outcome {
        artefacts,
        rejected: false,
    })
}

/// Writes artefacts and the manifest into `dir`; returns the written paths.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, bytes) in &outcome.artefacts {
        let p = dir.join(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        written.push(p);
    }
    let manifest = Manifest {
        experiment: cfg.clone(),
        versions: BTreeMap::from([
            ("reinforce-lab".to_string(), reinforce_lab::VERSION.to_string()),
            ("reinforce-lab-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]),
        outputs: outcome.artefacts.iter().map(|(n, _)| n.clone()).collect(),
    };
    let p = dir.join("manifest.json");
    fs::write(&p, json_bytes(&manifest)?)?;
    written.push(p);
    Ok(written)
}

/// Primary artefact for stdout when no output directory is given.
pub fn primary(outcome: &Outcome, format: Format) -> Option<&[u8]> {
    outcome
        .artefacts
        .iter()
        .find(|(n, _)| n.ends_with(format.ext()) || n.ends_with(".json"))
        .map(|(_, b)| b.as_slice())
}
