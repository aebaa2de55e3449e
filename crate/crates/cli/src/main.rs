use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rankshare::alloc::{allocate_cpu, AllocError, AllocationMode, WeightVector};
use rankshare::artifacts::{
    emit_decomposition_report, emit_manifest, emit_processor_weights, ingest_decomposition_report,
    ArtifactError, DecompositionReport,
};
use rankshare::metrics::{build_report, format_table, MetricsError};
use rankshare::scaling::{build_patch_plan, render_shell, ScalingError};
use rankshare::scenario::{self, ResolvedScenario, ScenarioError, ScenarioFile};
use rankshare::sim::output::{
    read_result_json, write_result_json, write_throttle_csv, write_usage_csv,
};
use rankshare::sim::SimError;
use rankshare::{Rational, SimResult};

const OUT_DIR_ENV: &str = "RANKSHARE_OUT_DIR";

/// Rank-aware CPU allocation, CFS simulation and resize planning for MPI
/// ranks in containers.
#[derive(Parser)]
#[command(name = "rankshare", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a CPU budget across ranks in proportion to their weights.
    Allocate(AllocateArgs),
    /// Run one or more scenarios and write results, usage and throttle CSVs.
    Simulate(SimulateArgs),
    /// Turn a scenario's phase schedule or patch plan into resize commands.
    Plan(PlanArgs),
    /// Compare simulation results against a baseline.
    Report(ReportArgs),
    /// Write manifests, weight fragments or decomposition reports.
    Emit(EmitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    RequestsOnly,
    HardLimits,
}

impl From<Mode> for AllocationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::RequestsOnly => AllocationMode::RequestsOnly,
            Mode::HardLimits => AllocationMode::HardLimits,
        }
    }
}

#[derive(Args)]
struct AllocateArgs {
    /// Comma-separated weights, e.g. `1,1,5,15` or `0.5,1.5`.
    #[arg(short, long, value_delimiter = ',', required = true)]
    weights: Vec<Rational>,
    /// Total budget in milli-cores.
    #[arg(short = 'C', long)]
    budget: u64,
    #[arg(long, value_enum, default_value = "requests-only")]
    mode: Mode,
    /// CFS period in microseconds.
    #[arg(long, default_value_t = rankshare::DEFAULT_PERIOD_USEC)]
    period: u64,
    /// Write pod manifests here.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write a processorWeights fragment here.
    #[arg(long)]
    weights_fragment: Option<PathBuf>,
    /// Pod name prefix for manifests.
    #[arg(long, default_value = "rank")]
    name_prefix: String,
    /// Print the plan as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Bundled scenario names or scenario file paths.
    #[arg(required = true)]
    scenarios: Vec<String>,
    /// Output directory; defaults to $RANKSHARE_OUT_DIR, then `out`.
    #[arg(short, long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    comm_rounds: Option<u32>,
    #[arg(long)]
    latency: Option<u64>,
    #[arg(long)]
    sample_interval: Option<u64>,
    /// Worker threads for independent scenarios (0 = all cores).
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanFormat {
    Json,
    Shell,
}

#[derive(Args)]
struct PlanArgs {
    scenario: String,
    #[arg(long, value_enum, default_value = "json")]
    format: PlanFormat,
    /// Write here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Baseline result JSON.
    #[arg(short, long)]
    baseline: PathBuf,
    /// Result JSON files to compare.
    configs: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EmitArgs {
    #[command(subcommand)]
    what: EmitWhat,
}

#[derive(Subcommand)]
enum EmitWhat {
    /// Pod manifests for a scenario's allocation.
    Manifest {
        scenario: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// processorWeights fragment from a scenario or a cell-count report.
    Weights {
        #[arg(required_unless_present = "from_report")]
        scenario: Option<String>,
        /// `rank,cells` CSV to derive weights from.
        #[arg(long, conflicts_with = "scenario")]
        from_report: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// `rank,cells` report of a scenario's decomposition.
    Decomposition {
        scenario: String,
        #[arg(long)]
        no_header: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Failure classes with their exit codes.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Simulation(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Validation(_) => 3,
            Failure::Simulation(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Simulation(e) | Failure::Io(e) => e,
        }
    }
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::InvalidScenario(_) | SimError::Alloc(_) => Failure::Validation(e.into()),
        _ => Failure::Simulation(e.into()),
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            e @ ScenarioError::Io { .. } => Failure::Io(e.into()),
            ScenarioError::Sim(s) => sim_failure(s),
            ScenarioError::Scaling(ScalingError::Sim(s)) => sim_failure(s),
            other => Failure::Validation(other.into()),
        }
    }
}

impl From<AllocError> for Failure {
    fn from(e: AllocError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<ArtifactError> for Failure {
    fn from(e: ArtifactError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<ScalingError> for Failure {
    fn from(e: ScalingError) -> Self {
        match e {
            ScalingError::Sim(s) => sim_failure(s),
            other => Failure::Validation(other.into()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::Validation(e.into())
    }
}

fn io<T>(r: std::io::Result<T>, what: impl FnOnce() -> String) -> Result<T, Failure> {
    r.with_context(what).map_err(Failure::Io)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => io(fs::write(p, text), || format!("writing {}", p.display())),
        None => io(std::io::stdout().write_all(text.as_bytes()), || {
            "writing stdout".into()
        }),
    }
}

fn load(name: &str) -> Result<ResolvedScenario, Failure> {
    let file = scenario::load(name)?;
    Ok(file.resolve()?)
}

fn allocate(args: AllocateArgs) -> Result<(), Failure> {
    let weights = WeightVector::new(args.weights)?;
    let plan = allocate_cpu(&weights, args.budget, args.mode.into())?;
    let params = plan.cgroup_params(args.period)?;
    if args.json {
        let text = serde_json::to_string_pretty(&plan).map_err(|e| Failure::Io(e.into()))?;
        write_out(None, &(text + "\n"))?;
    } else {
        let mut out = format!(
            "{:>4} {:>8} {:>12} {:>10} {:>10} {:>12} {:>10}\n",
            "rank", "weight", "fraction", "request", "limit", "cpu.max", "cpu.weight"
        );
        for (i, p) in params.iter().enumerate() {
            let limit = plan.limit(i).map_or("-".to_string(), |l| format!("{l}m"));
            out += &format!(
                "{:>4} {:>8} {:>12} {:>9}m {:>10} {:>12} {:>10}\n",
                i,
                weights.as_slice()[i].to_string(),
                plan.fractions[i].to_string(),
                plan.requests_millicores[i],
                limit,
                format!("{} {}", p.quota_usec, p.period_usec),
                p.cpu_weight
            );
        }
        out += &format!(
            "total {}m of {}m\n",
            plan.total_requests(),
            plan.budget_millicores
        );
        write_out(None, &out)?;
    }
    if let Some(path) = &args.manifest {
        let names: Vec<String> = (0..plan.len())
            .map(|i| format!("{}-{i}", args.name_prefix))
            .collect();
        write_out(Some(path), &emit_manifest(&plan, &names)?)?;
    }
    if let Some(path) = &args.weights_fragment {
        write_out(Some(path), &emit_processor_weights(&weights)?)?;
    }
    Ok(())
}

fn out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn apply_overrides(file: &mut ScenarioFile, args: &SimulateArgs) {
    if let Some(n) = args.iterations {
        file.iterations = n;
    }
    if let Some(k) = args.comm_rounds {
        file.comm_rounds_per_iter = k;
    }
    if let Some(l) = args.latency {
        file.barrier_latency_usec = l;
    }
    if let Some(s) = args.sample_interval {
        file.sample_interval_usec = s;
    }
}

fn write_result(dir: &Path, result: &SimResult) -> Result<(), Failure> {
    io(fs::create_dir_all(dir), || {
        format!("creating {}", dir.display())
    })?;
    let open = |name: &str| {
        let p = dir.join(name);
        io(fs::File::create(&p), || format!("creating {}", p.display()))
    };
    write_result_json(result, open("result.json")?).map_err(|e| Failure::Io(e.into()))?;
    write_usage_csv(result, open("usage.csv")?).map_err(|e| Failure::Io(e.into()))?;
    write_throttle_csv(result, open("throttle.csv")?).map_err(|e| Failure::Io(e.into()))?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut resolved = Vec::new();
    for name in &args.scenarios {
        let mut file = scenario::load(name).map_err(Failure::from)?;
        apply_overrides(&mut file, &args);
        if file.name.is_empty() {
            file.name = Path::new(name)
                .file_stem()
                .map_or_else(|| name.clone(), |s| s.to_string_lossy().into_owned());
        }
        resolved.push(file.resolve()?);
    }
    let outcomes = rankshare::sweep::with_jobs(args.jobs, || {
        rankshare::sweep::map_all(&resolved, |r| r.run_with_plan())
    });
    let root = out_dir(args.out_dir.clone());
    let mut summary = String::new();
    for (r, outcome) in resolved.iter().zip(outcomes) {
        let outcome = outcome?;
        let result = &outcome.result;
        write_result(&root.join(&r.name), result)?;
        summary += &format!(
            "{}: wall {}us, {} iterations, {} throttle events\n",
            r.name,
            result.wall_clock_usec,
            result.iterations_completed,
            result.total_throttle_events()
        );
        for (rank, x) in result.per_rank.iter().enumerate() {
            summary += &format!(
                "  rank {rank}: nr_throttled {} throttled_usec {} ({:.1}%)\n",
                x.nr_throttled,
                x.throttled_usec,
                100.0 * x.throttled_fraction(result.wall_clock_usec)
            );
        }
        for e in &result.resizes {
            let status = match (&e.failure, e.applied_at_usec) {
                (Some(f), _) => format!("failed: {f}"),
                (None, Some(t)) => format!("applied at {t}us"),
                (None, None) => "pending at end of run".into(),
            };
            summary += &format!(
                "  resize rank {} to {}m requested at {}us: {status}\n",
                e.rank, e.request_millicores, e.requested_at_usec
            );
        }
    }
    write_out(None, &summary)
}

fn plan(args: PlanArgs) -> Result<(), Failure> {
    let r = load(&args.scenario)?;
    let plan = match (&r.patch_plan, &r.scenario.phase_schedule) {
        (Some(p), _) => p.clone(),
        (None, Some(schedule)) => build_patch_plan(schedule)?,
        (None, None) => {
            return Err(Failure::Validation(anyhow!(
                "scenario `{}` has neither a phase schedule nor a patch plan",
                r.name
            )))
        }
    };
    let text = match args.format {
        PlanFormat::Json => {
            serde_json::to_string_pretty(&plan).map_err(|e| Failure::Io(e.into()))? + "\n"
        }
        PlanFormat::Shell => render_shell(&plan, &r.pod_names),
    };
    write_out(args.output.as_deref(), &text)
}

fn read_result(path: &Path) -> Result<SimResult, Failure> {
    let f = io(fs::File::open(path), || {
        format!("opening {}", path.display())
    })?;
    read_result_json(std::io::BufReader::new(f))
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Validation)
}

fn label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .filter(|_| path.file_name().is_some_and(|n| n == "result.json"))
        .or_else(|| path.file_stem())
        .map_or_else(
            || path.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        )
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let baseline = read_result(&args.baseline)?;
    let mut reports = vec![build_report(&label(&args.baseline), &baseline, None)?];
    for path in &args.configs {
        let result = read_result(path)?;
        reports.push(build_report(&label(path), &result, Some(&baseline))?);
    }
    let text = if args.json {
        serde_json::to_string_pretty(&reports).map_err(|e| Failure::Io(e.into()))? + "\n"
    } else {
        format_table(&reports)
    };
    write_out(None, &text)
}

fn emit(args: EmitArgs) -> Result<(), Failure> {
    match args.what {
        EmitWhat::Manifest { scenario, output } => {
            let r = load(&scenario)?;
            write_out(output.as_deref(), &emit_manifest(&r.plan, &r.pod_names)?)
        }
        EmitWhat::Weights {
            scenario,
            from_report,
            output,
        } => {
            let weights = match (scenario, from_report) {
                (_, Some(path)) => {
                    let text = io(fs::read_to_string(&path), || {
                        format!("reading {}", path.display())
                    })?;
                    ingest_decomposition_report(&text)?.1
                }
                (Some(name), None) => WeightVector::from_integers(&load(&name)?.cells)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            write_out(output.as_deref(), &emit_processor_weights(&weights)?)
        }
        EmitWhat::Decomposition {
            scenario,
            no_header,
            output,
        } => {
            let r = load(&scenario)?;
            let report = DecompositionReport::new(r.cells.clone());
            write_out(
                output.as_deref(),
                &emit_decomposition_report(&report, !no_header),
            )
        }
    }
}

/// The error chain on one line, skipping causes already in the message.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Allocate(a) => allocate(a),
        Command::Simulate(a) => simulate(a),
        Command::Plan(a) => plan(a),
        Command::Report(a) => report(a),
        Command::Emit(a) => emit(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(f.error()));
            ExitCode::from(f.code())
        }
    }
}
