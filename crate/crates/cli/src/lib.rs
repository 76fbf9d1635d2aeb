//! Command-line front end: verification, certificate validation, simulation
//! and the initial-state assumption check, each producing a [`RunReport`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use opacert_core::augment::{
    build_product, build_reach_regions, build_safety_regions, check_initial_assumption, AssumptionReport,
    AugmentedSystem, RegionBundle,
};
use opacert_core::certvalidate::{
    canonical_json, check_policy_bounds, recheck_fixed_certificate, status_name, validate_certificate, Certificate,
    CertificateFile, CertificateKind, PolicyBoundsReport, RecheckOutcome, ValidationReport, Verdict,
};
use opacert_core::poly::Polynomial;
use opacert_core::simkit::{
    export_trajectories, monte_carlo_reach, monte_carlo_safety, Adversary, ReachSummary, SafetySummary,
    DEFAULT_GREEDY_LEVELS,
};
use opacert_core::soscompile::{
    build_lemma1_program, build_lemma2_program, compile_to_sdp, extract_certificate, Degrees, MultiplierDegree,
    PolicyMode, ProgramOptions,
};
use opacert_core::sysmodel::{load_spec, ControlSystem};
use opacert_core::Error;
use opacert_sdp::{solve_feasibility, write_sparse, SolveStatus, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "opacert", version, about = "Approximate initial-state opacity via augmented barrier certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for a safety certificate proving opacity.
    VerifyOpacity(VerifyArgs),
    /// Search for a reach certificate proving lack of opacity.
    VerifyLack(VerifyArgs),
    /// Validate a certificate file by sampling and a multiplier re-solve.
    ValidateCert(ValidateArgs),
    /// Monte-Carlo pair simulations with CSV export.
    Simulate(SimulateArgs),
    /// Check that every secret initial state has a close non-secret one.
    CheckAssumption(AssumptionArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// System description (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the spec's output threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the report and any certificate or CSV files.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Adds wall-clock timing to the report, which makes it run-dependent.
    #[arg(long)]
    #[serde(skip)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Certificate degree.
    #[arg(long = "deg-b", visible_alias = "deg-v", default_value_t = 2)]
    pub degree: u32,
    /// Try certificate degrees lo, lo+2, ... up to hi, written `lo..hi`.
    #[arg(long)]
    pub deg_sweep: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub deg_policy: u32,
    /// Multiplier degree: a number, or `auto`. Defaults to the certificate degree.
    #[arg(long)]
    pub deg_mult: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub eps_lo: f64,
    #[arg(long, default_value_t = 1.001)]
    pub eps_hi: f64,
    #[arg(long, default_value_t = 0.01)]
    pub slack: f64,
    /// Extra squared gap that separates the unsafe region from the δ-close pairs.
    #[arg(long, default_value_t = 0.01)]
    pub margin: f64,
    /// Known policy, one polynomial per input separated by `;`.
    #[arg(long)]
    pub fixed_policy: Option<String>,
    /// Constrains a synthesized policy to the input box.
    #[arg(long)]
    pub policy_in_box: bool,
    #[arg(long)]
    pub skip_assumption: bool,
    #[arg(long, default_value_t = 1000)]
    pub assumption_samples: usize,
    /// Solver feasibility tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Cap on the summed order of all PSD blocks.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Writes the compiled SDP in sparse text form.
    #[arg(long)]
    #[serde(skip)]
    pub dump_sdp: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub cert: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub margin: f64,
    #[arg(long)]
    pub deg_mult: Option<String>,
    /// Skips the multiplier re-solve; the run is then at best inconclusive.
    #[arg(long)]
    pub no_recheck: bool,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    Safety,
    Reach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryChoice {
    Random,
    Greedy,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = SimMode::Safety)]
    pub mode: SimMode,
    /// Safety certificate whose policy drives the partner (safety mode), or
    /// reach certificate whose policy drives the input (reach mode).
    #[arg(long)]
    pub cert: Option<PathBuf>,
    /// Input policy for reach mode, one polynomial per input separated by `;`.
    #[arg(long)]
    pub fixed_policy: Option<String>,
    #[arg(long, value_enum, default_value_t = AdversaryChoice::Both)]
    pub adversary: AdversaryChoice,
    /// Grid points per input dimension for the greedy adversary.
    #[arg(long, default_value_t = DEFAULT_GREEDY_LEVELS)]
    pub levels: usize,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.01)]
    pub margin: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AssumptionArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 1000)]
    pub assumption_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    CertifiedOpaque,
    CertifiedLack,
    Inconclusive,
    CandidateRejected,
    InputError,
    /// Simulation or assumption check finished; nothing is certified.
    Completed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::CertifiedOpaque | Outcome::CertifiedLack | Outcome::Completed => 0,
            Outcome::Inconclusive => 1,
            Outcome::InputError => 2,
            Outcome::CandidateRejected => 3,
        }
    }
}

/// One solve of a certificate program.
#[derive(Debug, Clone, Serialize)]
pub struct Attempt {
    pub certificate_degree: u32,
    pub policy_degree: u32,
    pub multiplier_degree: String,
    pub constraints: BTreeMap<String, usize>,
    pub block_rows: usize,
    pub largest_block: usize,
    pub equality_rows: usize,
    pub free_variables: usize,
    pub status: String,
    pub iterations: usize,
    pub primal_residual: Option<f64>,
    pub min_eigenvalue: Option<f64>,
    pub extraction_residual: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SimulationReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub safety: Option<SafetySummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reach: Vec<ReachSummary>,
    /// CSV files written, relative to the output directory.
    pub csv: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub task: String,
    pub inputs: serde_json::Value,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateFile>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub attempts: Vec<Attempt>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recheck: Option<RecheckOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumption: Option<AssumptionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_bounds: Option<PolicyBoundsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Seconds per phase; present only on request.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    fn new(task: &str, inputs: &impl Serialize) -> Self {
        Self {
            task: task.to_string(),
            inputs: serde_json::to_value(inputs).unwrap_or(serde_json::Value::Null),
            outcome: Outcome::Inconclusive,
            certificate: None,
            attempts: Vec::new(),
            validation: None,
            recheck: None,
            assumption: None,
            policy_bounds: None,
            simulation: None,
            notes: Vec::new(),
            error: None,
            timing: None,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.outcome.exit_code()
    }

    pub fn to_json(&self) -> opacert_core::Result<String> {
        canonical_json(self)
    }

    fn fail(&mut self, outcome: Outcome, err: &Error) {
        self.outcome = outcome;
        self.error = Some(err.to_string());
    }
}

/// Writes the canonical report to `path`.
pub fn write_report(report: &RunReport, path: impl AsRef<Path>) -> opacert_core::Result<()> {
    fs::write(path, report.to_json()?)?;
    Ok(())
}

struct Clock {
    enabled: bool,
    start: Instant,
    phases: BTreeMap<String, f64>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            start: Instant::now(),
            phases: BTreeMap::new(),
        }
    }

    fn lap(&mut self, name: impl Into<String>) {
        let now = Instant::now();
        *self.phases.entry(name.into()).or_default() += (now - self.start).as_secs_f64();
        self.start = now;
    }

    fn finish(self, report: &mut RunReport) {
        if self.enabled {
            report.timing = Some(self.phases);
        }
    }
}

/// Errors about the run's inputs end as `input-error`; solver trouble ends
/// as `inconclusive`.
fn classify(err: &Error) -> Outcome {
    match err {
        Error::Sdp(_) | Error::NoSolution(_) => Outcome::Inconclusive,
        _ => Outcome::InputError,
    }
}

fn parse_multiplier(text: Option<&str>, certificate_degree: u32) -> Result<MultiplierDegree, Error> {
    match text {
        None => Ok(MultiplierDegree::AtMost(certificate_degree)),
        Some("auto") => Ok(MultiplierDegree::Auto),
        Some(s) => s
            .parse()
            .map(MultiplierDegree::AtMost)
            .map_err(|_| Error::Invalid(format!("--deg-mult expects a number or `auto`, got `{s}`"))),
    }
}

fn multiplier_name(m: MultiplierDegree) -> String {
    match m {
        MultiplierDegree::Auto => "auto".into(),
        MultiplierDegree::AtMost(d) => d.to_string(),
    }
}

fn parse_sweep(text: &str) -> Result<Vec<u32>, Error> {
    let bad = || Error::Invalid(format!("--deg-sweep expects `lo..hi`, got `{text}`"));
    let (lo, hi) = text.split_once("..").ok_or_else(bad)?;
    let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo..=hi).step_by(2).collect())
}

/// Parses `p1;...;pm` over the product space.
pub fn parse_policy(text: &str, aug: &AugmentedSystem) -> Result<Vec<Polynomial>, Error> {
    let parts: Vec<&str> = text.split(';').map(str::trim).collect();
    if parts.len() != aug.m() {
        return Err(Error::Dimension(format!(
            "fixed policy has {} components for {} inputs",
            parts.len(),
            aug.m()
        )));
    }
    parts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Polynomial::parse(p, &aug.space).map_err(|source| Error::Field {
                field: format!("fixed-policy[{i}]"),
                source,
            })
        })
        .collect()
}

fn load_system(common: &CommonArgs) -> Result<ControlSystem, Error> {
    let sys = load_spec(&common.spec)?;
    match common.delta {
        Some(d) => sys.with_delta(d),
        None => Ok(sys),
    }
}

fn solver_config(tolerance: Option<f64>, budget: Option<usize>) -> SolverConfig {
    let mut cfg = SolverConfig::default();
    if let Some(t) = tolerance {
        cfg.tolerance = t;
        cfg.infeasibility_tolerance = t;
    }
    if let Some(b) = budget {
        cfg.max_block_rows = b;
    }
    cfg
}

fn certified_outcome(kind: CertificateKind) -> Outcome {
    match kind {
        CertificateKind::Safety => Outcome::CertifiedOpaque,
        CertificateKind::Reach => Outcome::CertifiedLack,
    }
}

fn regions_for(kind: CertificateKind, aug: &AugmentedSystem, margin: f64) -> Result<RegionBundle, Error> {
    match kind {
        CertificateKind::Safety => build_safety_regions(aug, margin),
        CertificateKind::Reach => build_reach_regions(aug, margin),
    }
}

fn verify(kind: CertificateKind, args: &VerifyArgs, report: &mut RunReport, clock: &mut Clock) -> Result<(), Error> {
    let sys = load_system(&args.common)?;
    if kind == CertificateKind::Safety && !args.skip_assumption {
        let a = check_initial_assumption(&sys, args.assumption_samples, args.common.seed)?;
        clock.lap("assumption");
        let holds = a.holds;
        report.assumption = Some(a);
        if !holds {
            report.outcome = Outcome::InputError;
            report.error = Some("initial-state assumption fails; see the assumption witness".into());
            return Ok(());
        }
    }
    let aug = build_product(&sys)?;
    let margin = args.margin;
    let regions = regions_for(kind, &aug, margin)?;
    report.notes.extend(regions.notes.iter().cloned());
    let fixed = args.fixed_policy.as_deref().map(|p| parse_policy(p, &aug)).transpose()?;
    let degrees = match &args.deg_sweep {
        Some(s) => parse_sweep(s)?,
        None => vec![args.degree],
    };
    let cfg = solver_config(args.tolerance, args.budget);

    for deg in degrees {
        let multiplier = parse_multiplier(args.deg_mult.as_deref(), deg)?;
        let policy = match (&fixed, kind) {
            (None, _) => PolicyMode::Synthesize,
            (Some(p), CertificateKind::Safety) => PolicyMode::Literal(p.clone()),
            (Some(p), CertificateKind::Reach) => PolicyMode::Substitute(p.clone()),
        };
        let policy_degree = if fixed.is_some() { 0 } else { args.deg_policy };
        let mut options = ProgramOptions::new(
            Degrees {
                certificate: deg,
                policy: policy_degree,
                multiplier,
            },
            policy,
        );
        options.policy_in_box = args.policy_in_box;
        let prog = match kind {
            CertificateKind::Safety => build_lemma1_program(&aug, &regions, &options, args.eps_lo, args.eps_hi)?,
            CertificateKind::Reach => build_lemma2_program(&aug, &regions, &options, args.slack)?,
        };
        for n in &prog.notes {
            if !report.notes.contains(n) {
                report.notes.push(n.clone());
            }
        }
        let compiled = compile_to_sdp(&prog)?;
        clock.lap(format!("compile[{deg}]"));
        if let Some(path) = &args.dump_sdp {
            write_sparse(&compiled.sdp, std::io::BufWriter::new(fs::File::create(path)?))?;
        }
        let mut attempt = Attempt {
            certificate_degree: deg,
            policy_degree,
            multiplier_degree: multiplier_name(multiplier),
            constraints: prog
                .groups()
                .into_iter()
                .map(|(g, k)| (format!("{g:?}").to_lowercase(), k))
                .collect(),
            block_rows: compiled.total_block_rows(),
            largest_block: compiled.sdp.block_dims.iter().copied().max().unwrap_or(0),
            equality_rows: compiled.sdp.num_rows(),
            free_variables: compiled.sdp.num_free,
            status: "not-run".into(),
            iterations: 0,
            primal_residual: None,
            min_eigenvalue: None,
            extraction_residual: None,
        };
        if let Err(e) = compiled.check_budget(cfg.max_block_rows) {
            attempt.status = "over-budget".into();
            report.attempts.push(attempt);
            report.notes.push(e.to_string());
            break;
        }
        let solution = match solve_feasibility(&compiled.sdp, &cfg) {
            Ok(s) => s,
            Err(e) => {
                attempt.status = "solver-error".into();
                report.attempts.push(attempt);
                report.notes.push(e.to_string());
                continue;
            }
        };
        clock.lap(format!("solve[{deg}]"));
        attempt.status = status_name(solution.status).into();
        attempt.iterations = solution.iterations;
        if solution.status != SolveStatus::Feasible {
            report.attempts.push(attempt);
            continue;
        }
        attempt.primal_residual = Some(solution.primal_residual);
        attempt.min_eigenvalue = Some(solution.min_eigenvalue);
        let ex = extract_certificate(&prog, &compiled, &solution)?;
        attempt.extraction_residual = Some(ex.max_residual);
        report.attempts.push(attempt);
        let cert = ex.certificate;
        report.certificate = Some(cert.to_file());

        let validation = validate_certificate(&cert, &aug, &regions, args.common.samples, args.common.seed)?;
        clock.lap("validate");
        let violated = validation.verdict == Verdict::Violated;
        report.validation = Some(validation);
        if kind == CertificateKind::Safety || fixed.is_none() {
            report.policy_bounds = Some(check_policy_bounds(
                &cert,
                &aug,
                args.common.samples.min(10_000),
                args.common.seed,
            )?);
        }
        if violated {
            report.outcome = Outcome::CandidateRejected;
            return Ok(());
        }
        let recheck = recheck_fixed_certificate(&cert, &aug, &regions, multiplier, &cfg)?;
        clock.lap("recheck");
        let certified = recheck.certified;
        report.recheck = Some(recheck);
        report.outcome = if certified {
            certified_outcome(kind)
        } else {
            Outcome::Inconclusive
        };
        return Ok(());
    }
    report.outcome = Outcome::Inconclusive;
    Ok(())
}

fn read_certificate(path: &Path, aug: &AugmentedSystem) -> Result<Certificate, Error> {
    Certificate::from_json(&fs::read_to_string(path)?, aug)
}

fn validate(args: &ValidateArgs, report: &mut RunReport, clock: &mut Clock) -> Result<(), Error> {
    let sys = load_system(&args.common)?;
    let aug = build_product(&sys)?;
    let cert = read_certificate(&args.cert, &aug)?;
    let regions = regions_for(cert.kind, &aug, args.margin)?;
    report.notes.extend(regions.notes.iter().cloned());
    report.certificate = Some(cert.to_file());
    let validation = validate_certificate(&cert, &aug, &regions, args.common.samples, args.common.seed)?;
    clock.lap("validate");
    let violated = validation.verdict == Verdict::Violated;
    report.validation = Some(validation);
    report.policy_bounds = Some(check_policy_bounds(
        &cert,
        &aug,
        args.common.samples.min(10_000),
        args.common.seed,
    )?);
    if violated {
        report.outcome = Outcome::CandidateRejected;
        return Ok(());
    }
    if args.no_recheck {
        report.outcome = Outcome::Inconclusive;
        report.notes.push("multiplier re-solve skipped".into());
        return Ok(());
    }
    let multiplier = parse_multiplier(args.deg_mult.as_deref(), cert.polynomial.degree())?;
    let cfg = solver_config(args.tolerance, args.budget);
    let recheck = recheck_fixed_certificate(&cert, &aug, &regions, multiplier, &cfg)?;
    clock.lap("recheck");
    report.outcome = if recheck.certified {
        certified_outcome(cert.kind)
    } else {
        Outcome::Inconclusive
    };
    report.recheck = Some(recheck);
    Ok(())
}

fn simulate(args: &SimulateArgs, report: &mut RunReport, clock: &mut Clock) -> Result<(), Error> {
    let sys = load_system(&args.common)?;
    let aug = build_product(&sys)?;
    let out = args.common.out.as_deref();
    let mut sim = SimulationReport::default();
    let seed = args.common.seed;
    match args.mode {
        SimMode::Safety => {
            let path = args
                .cert
                .as_deref()
                .ok_or_else(|| Error::Invalid("safety simulation needs --cert".into()))?;
            let cert = read_certificate(path, &aug)?;
            if cert.kind != CertificateKind::Safety {
                return Err(Error::Invalid("safety simulation needs a safety certificate".into()));
            }
            let regions = build_safety_regions(&aug, args.margin)?;
            let run = monte_carlo_safety(&aug, &regions, &cert, args.trials, args.horizon, seed)?;
            clock.lap("simulate");
            if let Some(dir) = out {
                export_trajectories(&aug, &run.trajectories, dir.join("trajectories_safety.csv"))?;
                sim.csv.push("trajectories_safety.csv".into());
            }
            sim.safety = Some(run.summary);
        }
        SimMode::Reach => {
            let policy = match (&args.fixed_policy, &args.cert) {
                (Some(p), _) => parse_policy(p, &aug)?,
                (None, Some(path)) => {
                    let cert = read_certificate(path, &aug)?;
                    if cert.kind != CertificateKind::Reach {
                        return Err(Error::Invalid("reach simulation needs a reach certificate".into()));
                    }
                    cert.policy
                }
                (None, None) => return Err(Error::Invalid("reach simulation needs --fixed-policy or --cert".into())),
            };
            let regions = build_reach_regions(&aug, args.margin)?;
            report.notes.extend(regions.notes.iter().cloned());
            let adversaries: Vec<(&str, Adversary)> = match args.adversary {
                AdversaryChoice::Random => vec![("random", Adversary::Random)],
                AdversaryChoice::Greedy => vec![("greedy", Adversary::Greedy { levels: args.levels })],
                AdversaryChoice::Both => vec![
                    ("random", Adversary::Random),
                    ("greedy", Adversary::Greedy { levels: args.levels }),
                ],
            };
            for (name, adv) in adversaries {
                let run = monte_carlo_reach(&aug, &regions, &policy, adv, args.trials, args.horizon, seed)?;
                clock.lap(format!("simulate[{name}]"));
                if let Some(dir) = out {
                    let file = format!("trajectories_reach_{name}.csv");
                    export_trajectories(&aug, &run.trajectories, dir.join(&file))?;
                    sim.csv.push(file);
                }
                sim.reach.push(run.summary);
            }
        }
    }
    report.simulation = Some(sim);
    report.outcome = Outcome::Completed;
    Ok(())
}

fn assumption(args: &AssumptionArgs, report: &mut RunReport, clock: &mut Clock) -> Result<(), Error> {
    let sys = load_system(&args.common)?;
    let a = check_initial_assumption(&sys, args.assumption_samples, args.common.seed)?;
    clock.lap("assumption");
    report.outcome = if a.holds {
        Outcome::Completed
    } else {
        Outcome::InputError
    };
    report.assumption = Some(a);
    Ok(())
}

/// Runs one parsed command. Output files are not written here.
pub fn execute(command: &Command) -> RunReport {
    let (task, common) = match command {
        Command::VerifyOpacity(a) => ("verify-opacity", &a.common),
        Command::VerifyLack(a) => ("verify-lack", &a.common),
        Command::ValidateCert(a) => ("validate-cert", &a.common),
        Command::Simulate(a) => ("simulate", &a.common),
        Command::CheckAssumption(a) => ("check-assumption", &a.common),
    };
    let mut clock = Clock::new(common.timing);
    let (mut report, result) = match command {
        Command::VerifyOpacity(a) => {
            let mut r = RunReport::new(task, a);
            let res = verify(CertificateKind::Safety, a, &mut r, &mut clock);
            (r, res)
        }
        Command::VerifyLack(a) => {
            let mut r = RunReport::new(task, a);
            let res = verify(CertificateKind::Reach, a, &mut r, &mut clock);
            (r, res)
        }
        Command::ValidateCert(a) => {
            let mut r = RunReport::new(task, a);
            let res = validate(a, &mut r, &mut clock);
            (r, res)
        }
        Command::Simulate(a) => {
            let mut r = RunReport::new(task, a);
            let res = simulate(a, &mut r, &mut clock);
            (r, res)
        }
        Command::CheckAssumption(a) => {
            let mut r = RunReport::new(task, a);
            let res = assumption(a, &mut r, &mut clock);
            (r, res)
        }
    };
    if let Err(e) = result {
        report.fail(classify(&e), &e);
    }
    clock.finish(&mut report);
    report
}

fn out_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::VerifyOpacity(a) | Command::VerifyLack(a) => a.common.out.as_deref(),
        Command::ValidateCert(a) => a.common.out.as_deref(),
        Command::Simulate(a) => a.common.out.as_deref(),
        Command::CheckAssumption(a) => a.common.out.as_deref(),
    }
}

fn summary_line(report: &RunReport) -> String {
    let outcome = serde_json::to_value(report.outcome)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    match &report.error {
        Some(e) => format!("{}: {outcome} ({e})", report.task),
        None => format!("{}: {outcome}", report.task),
    }
}

/// Parses `args` (program name first), runs the command, writes or prints the
/// report and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(dir) = out_dir(&cli.command) {
        if let Err(e) = fs::create_dir_all(dir) {
            eprintln!("cannot create {}: {e}", dir.display());
            return 2;
        }
    }
    let report = execute(&cli.command);
    let written = match out_dir(&cli.command) {
        Some(dir) => write_outputs(&report, dir),
        None => report.to_json().map(|s| print!("{s}")),
    };
    if let Err(e) = written {
        eprintln!("failed to write the report: {e}");
        return 2;
    }
    eprintln!("{}", summary_line(&report));
    report.exit_code()
}

fn write_outputs(report: &RunReport, dir: &Path) -> opacert_core::Result<()> {
    write_report(report, dir.join("report.json"))?;
    if let Some(cert) = &report.certificate {
        fs::write(dir.join("certificate.json"), canonical_json(cert)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Outcome::CertifiedOpaque.exit_code(), 0);
        assert_eq!(Outcome::CertifiedLack.exit_code(), 0);
        assert_eq!(Outcome::Inconclusive.exit_code(), 1);
        assert_eq!(Outcome::InputError.exit_code(), 2);
        assert_eq!(Outcome::CandidateRejected.exit_code(), 3);
    }

    #[test]
    fn sweeps_and_multipliers() {
        assert_eq!(parse_sweep("2..6").unwrap(), vec![2, 4, 6]);
        assert!(parse_sweep("6..2").is_err());
        assert!(parse_sweep("x").is_err());
        assert_eq!(parse_multiplier(None, 4).unwrap(), MultiplierDegree::AtMost(4));
        assert_eq!(parse_multiplier(Some("auto"), 4).unwrap(), MultiplierDegree::Auto);
        assert_eq!(parse_multiplier(Some("0"), 4).unwrap(), MultiplierDegree::AtMost(0));
        assert!(parse_multiplier(Some("two"), 4).is_err());
    }

    #[test]
    fn bad_flags_exit_two() {
        assert_eq!(run(["opacert", "verify-opacity"]), 2);
        assert_eq!(run(["opacert", "no-such-command"]), 2);
    }
}
