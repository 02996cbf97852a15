use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use passivnet::certification::{verify, VerificationReport, VerifyOptions, DEFAULT_SAMPLES};
use passivnet::config::{from_json, Definition};
use passivnet::conic::InteriorPointSolver;
use passivnet::discretization::{rmse_compare, InputClass, ModelSet};
use passivnet::lqr::{solve_dare_identity, LqrSolution};
use passivnet::microgrid::MicrogridPlant;
use passivnet::simulation::{
    eps0_sweep, lqr_baseline, monte_carlo, simulate, Controllers, MonteCarloOptions, MonteCarloReport, SweepOptions, SweepReport, DEFAULT_HORIZON,
};
use passivnet::synthesis::{synthesize_all, synthesize_network, CertificateSet, CostKind, SynthesisOptions};
use passivnet::Error;

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "passivnet", version, about = "Decentralized passivity-based controller synthesis for coupled LTI networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the local programs and write certificates with a verification report.
    Synthesize(SynthesizeArgs),
    /// RMSE of the structured discretizations against the exact model.
    CompareDiscretizations(CompareArgs),
    /// Suboptimality of every cost against the centralized LQR.
    Montecarlo(MonteCarloArgs),
    /// Re-check a certificate file against its network.
    Verify(VerifyArgs),
    /// Feasibility and step response over a range of eps0.
    SweepEps0(SweepArgs),
    /// Closed-loop trajectory of one controller on the exact model.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// Microgrid or network JSON; the bundled six-DGU microgrid when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthesisArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub eps0: f64,
    /// Lower bound on every E_i.
    #[arg(long, default_value_t = 1e-6)]
    pub epsi: f64,
}

impl SynthesisArgs {
    fn options(&self) -> SynthesisOptions {
        SynthesisOptions {
            eps0: self.eps0,
            eps_i: self.epsi,
            ..SynthesisOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostArg {
    /// Feasibility only.
    A,
    /// Maximize the dissipation rate.
    B,
    /// Mimic the centralized LQR.
    C,
}

impl From<CostArg> for CostKind {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::A => CostKind::Feasibility,
            CostArg::B => CostKind::MaxDissipation,
            CostArg::C => CostKind::MimicLqr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    A,
    B,
    C,
    Lqr,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum, default_value_t = CostArg::A)]
    pub cost: CostArg,
    #[command(flatten)]
    pub synthesis: SynthesisArgs,
    /// Samples for the dissipation-inequality check.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Certificate JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 1000)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Steps per run.
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: usize,
    #[command(flatten)]
    pub synthesis: SynthesisArgs,
    /// Summary CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full report with per-run records.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Certificate file written by `synthesize`.
    #[arg(long)]
    pub certs: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Comma-separated eps0 values in ascending order.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-4, 1e-3, 1e-2, 3e-2, 1e-1, 3e-1])]
    pub values: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [CostArg::A, CostArg::B, CostArg::C])]
    pub costs: Vec<CostArg>,
    #[arg(long, default_value_t = 1e-6)]
    pub epsi: f64,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: usize,
    /// Reference step applied to every DGU (V).
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_enum, default_value_t = ControllerArg::C)]
    pub controller: ControllerArg,
    #[command(flatten)]
    pub synthesis: SynthesisArgs,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub steps: usize,
    /// Write every `stride`-th step.
    #[arg(long, default_value_t = 100)]
    pub stride: usize,
    /// The run starts at the equilibrium for this voltage on every DGU and
    /// then tracks the configured references.
    #[arg(long, default_value_t = 50.0)]
    pub start_voltage: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Certificate file written by `synthesize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<RunManifest>,
    pub certificates: CertificateSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationDocument {
    pub manifest: RunManifest,
    pub passed: bool,
    pub report: VerificationReport,
}

#[derive(Debug, Serialize)]
struct Document<'a, T> {
    manifest: &'a RunManifest,
    report: &'a T,
}

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// Local programs without a certificate.
    Synthesis(Vec<Error>),
    /// Number of failed checks.
    Verification(usize),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(Error::Json(e))
    }
}

fn code_for(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } => 2,
        Error::SolverNumerical { .. } | Error::Solver(_) => 5,
        Error::Schema { .. } | Error::Io(_) | Error::Json(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Graph(_) | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => code_for(e),
            Failure::Synthesis(errs) => {
                if errs.iter().any(|e| matches!(e, Error::Infeasible { .. })) {
                    2
                } else {
                    errs.first().map_or(1, code_for)
                }
            }
            Failure::Verification(_) => 3,
            Failure::Usage(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Synthesis(errs) => {
                write!(f, "{} local program(s) without a certificate", errs.len())?;
                for e in errs {
                    write!(f, "\n  {e}")?;
                }
                Ok(())
            }
            Failure::Verification(n) => write!(f, "verification failed: {n} check(s) did not pass"),
            Failure::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

pub type Outcome = std::result::Result<(), Failure>;

/// Caps the global thread pool from `PASSIVNET_THREADS`.
pub fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("PASSIVNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("PASSIVNET_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::CompareDiscretizations(a) => compare_cmd(a),
        Command::Montecarlo(a) => montecarlo_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::SweepEps0(a) => sweep_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
    }
}

fn load(config: &ConfigArg) -> Result<Definition, Failure> {
    Ok(match &config.config {
        Some(p) => Definition::from_path(p)?,
        None => Definition::default_microgrid()?,
    })
}

fn require_plant<'a>(def: &'a Definition, command: &str) -> Result<&'a MicrogridPlant, Failure> {
    def.plant()
        .ok_or_else(|| Failure::Usage(format!("{command} needs a microgrid config (a document with `dgus`)")))
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn lqr_for(def: &Definition) -> Result<LqrSolution, Failure> {
    Ok(match def.plant() {
        Some(p) => lqr_baseline(p)?,
        None => {
            let (a, b) = def.lqr_model()?;
            solve_dare_identity(&a, &b)?
        }
    })
}

fn synthesize_cmd(args: SynthesizeArgs) -> Outcome {
    let def = load(&args.config)?;
    let network = def.network()?;
    let cost = CostKind::from(args.cost);
    let options = args.synthesis.options();
    let lqr = match cost {
        CostKind::MimicLqr => Some(lqr_for(&def)?),
        _ => None,
    };
    let mut certificates = Vec::new();
    let mut errors = Vec::new();
    for r in synthesize_all(&network, cost, lqr.as_ref(), &options)? {
        match r {
            Ok(c) => certificates.push(c),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(Failure::Synthesis(errors));
    }
    let verify_options = VerifyOptions {
        samples: args.samples,
        seed: args.seed,
        ..VerifyOptions::default()
    };
    let report = verify(&network, &certificates, &options, &verify_options)?;
    let manifest = RunManifest::new("synthesize", args.config.config.as_deref())
        .with("cost", cost.label())
        .with("synthesis", &options)
        .with("verification", &verify_options);
    let doc = CertificateDocument {
        manifest: Some(manifest),
        certificates: CertificateSet { cost, options, certificates },
        verification: Some(report.clone()),
    };
    write_output(args.out.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    eprintln!("{report}");
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Failure::Verification(failed));
    }
    Ok(())
}

fn compare_cmd(args: CompareArgs) -> Outcome {
    let def = load(&args.config)?;
    let plant = require_plant(&def, "compare-discretizations")?;
    let models = ModelSet::build(&plant.continuous, plant.config.sampling_time, &InteriorPointSolver::default())?;
    let report = rmse_compare(&plant.continuous, &models, args.horizon, &InputClass::ALL, args.seed)?;
    let manifest = RunManifest::new("compare-discretizations", args.config.config.as_deref())
        .with("horizon", args.horizon)
        .with("seed", args.seed);
    write_output(args.out.as_deref(), &(manifest.csv_comment() + &report.to_csv()))
}

fn montecarlo_cmd(args: MonteCarloArgs) -> Outcome {
    let def = load(&args.config)?;
    let plant = require_plant(&def, "montecarlo")?;
    let options = args.synthesis.options();
    let controllers = Controllers::synthesize(plant, &options)?;
    let mc = MonteCarloOptions {
        runs: args.runs,
        seed: args.seed,
        horizon: args.horizon,
        ..MonteCarloOptions::default()
    };
    let report: MonteCarloReport = monte_carlo(plant, &controllers, &mc)?;
    let manifest = RunManifest::new("montecarlo", args.config.config.as_deref())
        .with("synthesis", &options)
        .with("montecarlo", &mc);
    if let Some(path) = &args.json {
        let doc = Document { manifest: &manifest, report: &report };
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    write_output(args.out.as_deref(), &(manifest.csv_comment() + &report.to_csv()))
}

fn verify_cmd(args: VerifyArgs) -> Outcome {
    let def = load(&args.config)?;
    let network = def.network()?;
    let text = std::fs::read_to_string(&args.certs)?;
    let doc: CertificateDocument = from_json(&text)?;
    let set = &doc.certificates;
    let verify_options = VerifyOptions {
        samples: args.samples,
        seed: args.seed,
        ..VerifyOptions::default()
    };
    let report = verify(&network, &set.certificates, &set.options, &verify_options)?;
    let manifest = RunManifest::new("verify", args.config.config.as_deref())
        .with("certs", args.certs.display().to_string())
        .with("cost", set.cost.label())
        .with("synthesis", &set.options)
        .with("verification", &verify_options);
    let out = VerificationDocument {
        manifest,
        passed: report.passed(),
        report: report.clone(),
    };
    write_output(args.out.as_deref(), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    eprintln!("{report}");
    let failed = report.failures().count();
    if failed > 0 {
        return Err(Failure::Verification(failed));
    }
    Ok(())
}

fn sweep_cmd(args: SweepArgs) -> Outcome {
    let def = load(&args.config)?;
    let plant = require_plant(&def, "sweep-eps0")?;
    if args.values.is_empty() {
        return Err(Failure::Usage("--values needs at least one eps0".into()));
    }
    let base = SynthesisOptions {
        eps_i: args.epsi,
        ..SynthesisOptions::default()
    };
    let options = SweepOptions {
        costs: args.costs.iter().map(|&c| c.into()).collect(),
        horizon: args.horizon,
        step: args.step,
        ..SweepOptions::default()
    };
    let report: SweepReport = eps0_sweep(plant, &args.values, &base, &options)?;
    let manifest = RunManifest::new("sweep-eps0", args.config.config.as_deref())
        .with("values", &args.values)
        .with("synthesis", &base)
        .with("sweep", &options);
    if let Some(path) = &args.json {
        let doc = Document { manifest: &manifest, report: &report };
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    write_output(args.out.as_deref(), &(manifest.csv_comment() + &report.to_csv()))
}

fn simulate_cmd(args: SimulateArgs) -> Outcome {
    let def = load(&args.config)?;
    let plant = require_plant(&def, "simulate")?;
    let options = args.synthesis.options();
    let gain = match args.controller {
        ControllerArg::Lqr => lqr_baseline(plant)?.k,
        c => {
            let cost = CostKind::from(match c {
                ControllerArg::A => CostArg::A,
                ControllerArg::B => CostArg::B,
                _ => CostArg::C,
            });
            let lqr = match cost {
                CostKind::MimicLqr => Some(lqr_baseline(plant)?),
                _ => None,
            };
            synthesize_network(&plant.lm, cost, lqr.as_ref(), &options)?.gain_matrix()
        }
    };
    let loads = plant.config.loads();
    let start = vec![args.start_voltage; plant.dgu_count()];
    let x0 = plant.equilibrium(&gain, &start, &loads)?.x;
    let traj = simulate(plant, &gain, &x0, &plant.config.references(), &loads, args.steps)?;
    let manifest = RunManifest::new("simulate", args.config.config.as_deref())
        .with("controller", format!("{:?}", args.controller).to_lowercase())
        .with("synthesis", &options)
        .with("steps", args.steps)
        .with("stride", args.stride)
        .with("start_voltage", args.start_voltage);
    eprintln!("final max |V - V_r| = {:.3e} V", traj.final_voltage_error());
    write_output(args.out.as_deref(), &(manifest.csv_comment() + &traj.to_csv(plant, args.stride)))
}
