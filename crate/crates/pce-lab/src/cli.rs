//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 parse error (flags or config), 3 validation failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::acceptance;
use crate::config::{ConfigError, ConfigFile};
use crate::engine::solve_pce;
use crate::limit::{classify_t1, run_study, write_study_csv, Divergence, StudyRow};
use crate::output::{coefficient_rows, summary, write_coefficients};
use crate::sim::{simulate, write_outputs, SimConfig};
use crate::PceError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "pce-lab",
    version,
    about = "Partial communication equilibrium engine"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a scenario and write pce_coefficients.csv and summary.txt.
    Solve(RunArgs),
    /// Simulate paths of a solved scenario into paths.csv and jumps.csv.
    Simulate(RunArgs),
    /// Run a large-insider convergence study into limit_study.csv.
    Limit(RunArgs),
    /// Run the acceptance suite; exit 0 iff every criterion passes.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Accepted for uniformity; the suite uses built-in scenarios.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Root seed (simulate default 42; limit overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Paths (simulate, default 100) or Monte Carlo samples (limit).
    #[arg(long)]
    pub paths: Option<usize>,
    /// Points per period (simulate, default 500), coefficient intervals per
    /// stage (solve, default 20) or noise-grid level (limit).
    #[arg(long)]
    pub grid: Option<usize>,
    /// Print a single summary line.
    #[arg(long)]
    pub quiet: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Parse(_) => EXIT_PARSE,
            ConfigError::Validation(_) => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<PceError> for Failure {
    fn from(e: PceError) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        PceError::from(e).into()
    }
}

fn flag_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_PARSE,
        message: msg.into(),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("pce-lab: {}", f.message);
            f.code
        }
    }
}

fn say(quiet: bool, line: &str) {
    if !quiet {
        println!("{line}");
    }
}

pub fn execute(cmd: &Command) -> Result<i32, Failure> {
    match cmd {
        Command::Solve(a) => run_solve(&a.config, &a.common),
        Command::Simulate(a) => run_simulate(&a.config, &a.common),
        Command::Limit(a) => run_limit(&a.config, &a.common),
        Command::Verify(a) => run_verify(&a.common),
    }
}

pub fn run_solve(config: &Path, c: &CommonArgs) -> Result<i32, Failure> {
    let scenario = ConfigFile::load(config)?.scenario()?;
    let grid = c.grid.unwrap_or(20);
    if grid == 0 {
        return Err(flag_error("--grid must be positive"));
    }
    let sol = solve_pce(&scenario)?;
    sol.check_structure()?;
    let rows = coefficient_rows(&sol, grid)?;
    fs::create_dir_all(&c.out)?;
    write_coefficients(&rows, fs::File::create(c.out.join("pce_coefficients.csv"))?)?;
    let text = summary(&sol);
    fs::write(c.out.join("summary.txt"), &text)?;
    if c.quiet {
        println!(
            "solved {} stages; {} coefficients",
            sol.n_stages(),
            rows.len()
        );
    } else {
        print!("{text}");
    }
    Ok(EXIT_OK)
}

pub fn run_simulate(config: &Path, c: &CommonArgs) -> Result<i32, Failure> {
    let scenario = ConfigFile::load(config)?.scenario()?;
    let cfg = SimConfig {
        seed: c.seed.unwrap_or(42),
        n_paths: c.paths.unwrap_or(100),
        grid: c.grid.unwrap_or(500),
        threads: None,
    };
    if cfg.grid < 2 {
        return Err(flag_error("--grid must be at least 2 for simulation"));
    }
    let sol = solve_pce(&scenario)?;
    let samples = simulate(&sol, &cfg)?;
    write_outputs(&samples, sol.dim(), scenario.agents.len(), &c.out)?;
    let worst = samples
        .iter()
        .flat_map(|s| s.rows.iter().map(|r| r.residual))
        .fold(0.0, f64::max);
    say(
        c.quiet,
        &format!("paths.csv and jumps.csv written to {}", c.out.display()),
    );
    println!(
        "simulated {} paths x {} stages x {} points; max clearing residual {worst:.2e}",
        cfg.n_paths,
        sol.n_stages(),
        cfg.grid
    );
    Ok(EXIT_OK)
}

pub fn run_limit(config: &Path, c: &CommonArgs) -> Result<i32, Failure> {
    let (spec, mut study_cfg) = ConfigFile::load(config)?.limit()?;
    if let Some(s) = c.seed {
        study_cfg.seed = s;
    }
    if let Some(p) = c.paths {
        study_cfg.samples = p;
        study_cfg.energy_samples = study_cfg.energy_samples.min(p);
    }
    if let Some(g) = c.grid {
        let g = u32::try_from(g).map_err(|_| flag_error("--grid out of range"))?;
        study_cfg.grid_level = g;
    }
    if study_cfg.samples < 2 {
        return Err(flag_error("a study needs at least 2 samples"));
    }
    let study = run_study(&spec, &study_cfg)?;
    let mut rows = study.rows();
    let class = classify_t1(&spec)?;
    let q = match class.q.verdict {
        Divergence::Finite(v) => v,
        Divergence::Infinite => f64::INFINITY,
        Divergence::Inconclusive => f64::NAN,
    };
    let flag = |b: Option<bool>| b.map_or(f64::NAN, |b| if b { 1.0 } else { 0.0 });
    for (metric, value) in [
        ("q", q),
        ("q_finite", flag(class.q_finite())),
        ("reveals_factor", flag(class.reveals_factor())),
    ] {
        rows.push(StudyRow {
            spec_id: spec.id.clone(),
            n: 0,
            t: 1.0,
            metric: metric.into(),
            value,
        });
    }
    fs::create_dir_all(&c.out)?;
    write_study_csv(&rows, fs::File::create(c.out.join("limit_study.csv"))?)?;
    println!("{}: {class}", spec.id);
    if !c.quiet {
        println!("{}", acceptance::assess_study(&study).1);
        println!("limit_study.csv written to {}", c.out.display());
    }
    Ok(EXIT_OK)
}

pub fn run_verify(c: &CommonArgs) -> Result<i32, Failure> {
    let mut lines = Vec::new();
    let results = acceptance::run_all(None, |r| {
        if !c.quiet {
            println!("{r}");
        }
        lines.push(r.to_string());
    });
    let passed = results.iter().filter(|r| r.passed).count();
    let total = results.len();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    let line = if failed.is_empty() {
        format!("{passed}/{total} acceptance criteria pass")
    } else {
        format!(
            "{passed}/{total} acceptance criteria pass; failing: {}",
            failed.join(", ")
        )
    };
    println!("{line}");
    if c.out != Path::new(".") {
        fs::create_dir_all(&c.out)?;
        let mut f = fs::File::create(c.out.join("acceptance.txt"))?;
        for l in &lines {
            writeln!(f, "{l}")?;
        }
        writeln!(f, "{line}")?;
    }
    Ok(if failed.is_empty() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}
