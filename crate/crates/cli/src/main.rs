//! Command-line driver: assumption checks, solves, relation checks and
//! reports, all written under one output directory.

mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fbcontrol::adjoint::{self, AdjointPath, LocalAdjointPath};
use fbcontrol::assumptions::{self, AssumptionReport};
use fbcontrol::fbsde::{self, FieldPolicy, TrajectoryBundle};
use fbcontrol::hjb::{self, ValueField};
use fbcontrol::problem::{Regime, Scenario};
use fbcontrol::verify::{self, Artifacts, RelationReport};

use manifest::{RunManifest, Seeds};

const ASSUMPTIONS: &str = "assumptions.json";
const VALUE_FIELD: &str = "value_field.csv";
const TRAJECTORIES: &str = "trajectories.csv";
const ADJOINT: &str = "adjoint.csv";
const LOCAL_ADJOINT: &str = "local_adjoint.csv";
const RELATIONS_JSON: &str = "relations.json";
const RELATIONS_CSV: &str = "relations.csv";
const RELATIONS_TXT: &str = "relations.txt";
const REPORT: &str = "report.txt";

#[derive(Parser)]
#[command(
    name = "fbcontrol",
    version,
    about = "Maximum principle and dynamic programming checks for coupled FBSDE control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the standing assumptions of a scenario.
    Check(Common),
    /// Solve the HJB equation, simulate the optimal FBSDE and integrate the adjoints.
    Solve(Common),
    /// Run the relation checks between the adjoints and the value function.
    Verify(VerifyArgs),
    /// Summarize the assumption and relation reports found in an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; outputs do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the Monte Carlo seed of the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue even when the assumption gates fail.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated relation names; defaults to every relation that applies.
    #[arg(long)]
    relations: Option<String>,
    /// Machine-readable relation report format.
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
    /// Load the solve outputs from the output directory instead of recomputing them.
    #[arg(long)]
    reuse: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of earlier check, solve or verify runs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

/// Why a run stopped early, mapped onto the exit-code contract.
#[derive(Debug)]
enum Failure {
    Input(String),
    Numerical(String),
    Gate(String),
}

impl Failure {
    fn stage(stage: &str, e: fbcontrol::Error) -> Self {
        let message = format!("stage {stage}: {e}");
        if e.is_numerical() {
            Failure::Numerical(message)
        } else {
            Failure::Input(message)
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Gate(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Numerical(m) | Failure::Gate(m) => m,
        }
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FBCONTROL_LOG", "warn")).init();
    let cli = Cli::parse();
    let (name, out, threads) = match &cli.command {
        Command::Check(c) => ("check", c.out.clone(), c.threads),
        Command::Solve(c) => ("solve", c.out.clone(), c.threads),
        Command::Verify(v) => ("verify", v.common.out.clone(), v.common.threads),
        Command::Report(r) => ("report", r.out.clone(), None),
    };
    let mut manifest = RunManifest::new(name, threads);
    let outcome = configure_threads(threads).and_then(|()| match &cli.command {
        Command::Check(c) => check(c, &mut manifest),
        Command::Solve(c) => solve(c, &mut manifest),
        Command::Verify(v) => run_verify(v, &mut manifest),
        Command::Report(r) => report(&r.out),
    });
    let code = match &outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(f) => {
            eprintln!("error: {}", f.message());
            manifest.error = Some(f.message().to_string());
            f.code()
        }
    };
    manifest.exit_code = i32::from(code);
    if let Err(e) = manifest.write(&out) {
        eprintln!("error: cannot write manifest to {}: {e}", out.display());
        return ExitCode::from(2);
    }
    ExitCode::from(code)
}

fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    match threads {
        Some(0) => Err(Failure::Input("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Input(format!("thread pool: {e}"))),
        None => Ok(()),
    }
}

fn load(c: &Common, manifest: &mut RunManifest) -> Result<Scenario, Failure> {
    let bytes = std::fs::read(&c.scenario)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", c.scenario.display())))?;
    manifest.hash_scenario(&c.scenario, &bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| Failure::Input(format!("{} is not UTF-8", c.scenario.display())))?;
    let mut scenario = Scenario::from_toml_str(&text).map_err(|e| Failure::stage("load", e))?;
    if let Some(seed) = c.seed {
        scenario.montecarlo.seed = seed;
    }
    manifest.seeds = Some(Seeds {
        montecarlo: scenario.montecarlo.seed,
        assumptions: scenario.assumptions.seed,
    });
    Ok(scenario)
}

fn write_file(out: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let io = |e: std::io::Error| {
        Failure::Input(format!("cannot write {}: {e}", out.join(name).display()))
    };
    std::fs::create_dir_all(out).map_err(io)?;
    std::fs::write(out.join(name), contents).map_err(io)
}

fn write(
    out: &Path,
    name: &str,
    contents: &str,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    write_file(out, name, contents)?;
    manifest.output(name);
    Ok(())
}

fn read(out: &Path, name: &str) -> Result<String, Failure> {
    std::fs::read_to_string(out.join(name)).map_err(|e| {
        Failure::Input(format!(
            "missing artifact {}: {e}",
            out.join(name).display()
        ))
    })
}

/// Assess the assumptions and write `assumptions.json`.
fn assess(
    s: &Scenario,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<AssumptionReport, Failure> {
    let report = manifest.stage("assumptions", || assumptions::assess(s));
    let json = serde_json::to_string_pretty(&report).expect("assumption report is plain data");
    write(out, ASSUMPTIONS, &(json + "\n"), manifest)?;
    if !report.assumption3.pass {
        log::warn!(
            "contraction margin of the bounding ODEs fails: {:?}",
            report.assumption3
        );
    }
    Ok(report)
}

fn check(c: &Common, manifest: &mut RunManifest) -> Outcome {
    let s = load(c, manifest)?;
    let report = assess(&s, &c.out, manifest)?;
    println!("assumption gates: {}", verdict(report.gates_pass));
    Ok(report.gates_pass)
}

fn gate(c: &Common, s: &Scenario, manifest: &mut RunManifest) -> Result<(), Failure> {
    let report = assess(s, &c.out, manifest)?;
    if report.gates_pass || c.force {
        if !report.gates_pass {
            log::warn!("assumption gates fail; continuing because of --force");
        }
        Ok(())
    } else {
        Err(Failure::Gate(format!(
            "assumption gates fail; see {ASSUMPTIONS} or rerun with --force"
        )))
    }
}

/// HJB solve, feedback simulation and adjoints, each timed as a stage.
fn compute(s: &Scenario, manifest: &mut RunManifest) -> Result<Artifacts, Failure> {
    let field = manifest
        .stage("hjb", || hjb::solve_hjb(s))
        .map_err(|e| Failure::stage("hjb", e))?;
    let bundle = manifest
        .stage("simulate", || {
            fbsde::simulate_feedback(s, &field, &FieldPolicy::new(&field, s))
        })
        .map_err(|e| Failure::stage("simulate", e))?;
    let first = manifest
        .stage("first_adjoint", || adjoint::solve_first_adjoint(s, &bundle))
        .map_err(|e| Failure::stage("first_adjoint", e))?;
    let second = manifest
        .stage("second_adjoint", || {
            adjoint::solve_second_adjoint(s, &bundle, &first)
        })
        .map_err(|e| Failure::stage("second_adjoint", e))?;
    let local = if s.regime == Regime::LocalConvex {
        let local = manifest
            .stage("local_adjoint", || adjoint::solve_local_adjoint(s, &bundle))
            .map_err(|e| Failure::stage("local_adjoint", e))?;
        Some(local)
    } else {
        None
    };
    Ok(Artifacts {
        field,
        bundle,
        first,
        second,
        local,
    })
}

fn export(art: &Artifacts, out: &Path, manifest: &mut RunManifest) -> Result<(), Failure> {
    let written = manifest.stage("export", || {
        let mut files = vec![
            (VALUE_FIELD, art.field.to_csv()),
            (TRAJECTORIES, art.bundle.to_csv()),
            (ADJOINT, art.second.to_csv()),
        ];
        if let Some(local) = &art.local {
            files.push((LOCAL_ADJOINT, local.to_csv()));
        }
        files
            .into_iter()
            .map(|(name, text)| write_file(out, name, &text).map(|()| name))
            .collect::<Result<Vec<_>, _>>()
    })?;
    written.into_iter().for_each(|name| manifest.output(name));
    Ok(())
}

fn solve(c: &Common, manifest: &mut RunManifest) -> Outcome {
    let s = load(c, manifest)?;
    gate(c, &s, manifest)?;
    let art = compute(&s, manifest)?;
    export(&art, &c.out, manifest)?;
    println!("W(t0, x0) = {}", art.field.value(s.t0, s.x0));
    Ok(true)
}

/// Rebuild the artifacts from the exports of an earlier solve.
fn reload(s: &Scenario, out: &Path) -> Result<Artifacts, Failure> {
    fn parse(name: &'static str) -> impl Fn(fbcontrol::Error) -> Failure {
        move |e| Failure::Input(format!("{name}: {e}"))
    }
    let field = ValueField::from_csv(&read(out, VALUE_FIELD)?, s.controls.points())
        .map_err(parse(VALUE_FIELD))?;
    let bundle =
        TrajectoryBundle::from_csv(s, &read(out, TRAJECTORIES)?).map_err(parse(TRAJECTORIES))?;
    let second = AdjointPath::from_csv(&read(out, ADJOINT)?).map_err(parse(ADJOINT))?;
    let local = if s.regime == Regime::LocalConvex {
        Some(LocalAdjointPath::from_csv(&read(out, LOCAL_ADJOINT)?).map_err(parse(LOCAL_ADJOINT))?)
    } else {
        None
    };
    if second.times != bundle.times || second.paths != bundle.paths() {
        return Err(Failure::Input(format!(
            "{ADJOINT} does not match {TRAJECTORIES}"
        )));
    }
    Ok(Artifacts {
        field,
        bundle,
        first: second.clone(),
        second,
        local,
    })
}

fn run_verify(v: &VerifyArgs, manifest: &mut RunManifest) -> Outcome {
    let c = &v.common;
    let s = load(c, manifest)?;
    let selection = match &v.relations {
        Some(list) => verify::parse_relations(list).map_err(|e| Failure::Input(e.to_string()))?,
        None => verify::default_relations(&s),
    };
    let art = if v.reuse {
        manifest.stage("load_artifacts", || reload(&s, &c.out))?
    } else {
        gate(c, &s, manifest)?;
        let art = compute(&s, manifest)?;
        export(&art, &c.out, manifest)?;
        art
    };
    let reports = manifest
        .stage("relations", || verify::run_relations(&s, &art, &selection))
        .map_err(|e| Failure::stage("relations", e))?;
    if v.format != Format::Csv {
        write(
            &c.out,
            RELATIONS_JSON,
            &(verify::to_json(&reports) + "\n"),
            manifest,
        )?;
    }
    if v.format != Format::Json {
        write(&c.out, RELATIONS_CSV, &relations_csv(&reports), manifest)?;
    }
    let table = verify::to_table(&reports);
    write(&c.out, RELATIONS_TXT, &table, manifest)?;
    print!("{table}");
    Ok(reports.iter().all(|r| r.passed))
}

/// One row per check; skipped relations get a single row without a quantity.
fn relations_csv(reports: &[RelationReport]) -> String {
    let mut out = String::from("relation,quantity,rule,statistic,threshold,passed\n");
    for r in reports {
        if r.checks.is_empty() {
            writeln!(out, "{},,,,,{}", r.relation, r.passed).expect("string write");
        }
        for c in &r.checks {
            let rule = serde_json::to_value(c.rule).expect("rule serializes");
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.relation,
                c.quantity,
                rule.as_str().unwrap_or_default(),
                c.statistic,
                c.threshold,
                c.passed
            )
            .expect("string write");
        }
    }
    out
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn report(out: &Path) -> Outcome {
    let assumptions = std::fs::read_to_string(out.join(ASSUMPTIONS)).ok();
    let relations = std::fs::read_to_string(out.join(RELATIONS_JSON)).ok();
    if assumptions.is_none() && relations.is_none() {
        return Err(Failure::Input(format!(
            "no {ASSUMPTIONS} or {RELATIONS_JSON} in {}",
            out.display()
        )));
    }
    let mut text = String::new();
    let mut pass = true;
    if let Some(a) = assumptions {
        let a: serde_json::Value =
            serde_json::from_str(&a).map_err(|e| Failure::Input(format!("{ASSUMPTIONS}: {e}")))?;
        let field = |path: &str| {
            a.pointer(path)
                .and_then(serde_json::Value::as_bool)
                .unwrap_or(false)
        };
        let gates = field("/gates_pass");
        pass &= gates;
        writeln!(text, "assumption gates      {}", verdict(gates)).expect("string write");
        writeln!(
            text,
            "  assumption 3        {}",
            verdict(field("/assumption3/pass"))
        )
        .expect("string write");
        writeln!(
            text,
            "  monotonicity        {}",
            verdict(field("/monotonicity/pass"))
        )
        .expect("string write");
        if let Some(s0) = a
            .pointer("/ode/s")
            .and_then(|s| s.get(0))
            .and_then(serde_json::Value::as_f64)
        {
            writeln!(text, "  s(0)                {s0:.6}").expect("string write");
        }
    }
    if let Some(r) = relations {
        let reports: Vec<RelationReport> = serde_json::from_str(&r)
            .map_err(|e| Failure::Input(format!("{RELATIONS_JSON}: {e}")))?;
        for r in &reports {
            pass &= r.passed;
            let note = r
                .note
                .as_deref()
                .map(|n| format!(" ({n})"))
                .unwrap_or_default();
            writeln!(
                text,
                "{:<22}{}{note}",
                r.relation.as_str(),
                verdict(r.passed)
            )
            .expect("string write");
        }
    }
    print!("{text}");
    std::fs::write(out.join(REPORT), &text)
        .map_err(|e| Failure::Input(format!("cannot write {REPORT}: {e}")))?;
    Ok(pass)
}
