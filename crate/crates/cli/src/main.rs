mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use slutsky_forge::demand_model::{reference_sample, DemandFamily};
use slutsky_forge::elliptic::convergence_check;
use slutsky_forge::error::{Error, Result};
use slutsky_forge::identification::{estimate_functionals, marginal_distance, nonid_demo, system_report};
use slutsky_forge::rotation::RotationBuilder;
use slutsky_forge::seed;
use slutsky_forge::symmetry::{grid_test, moments_ingest, GridSource};
use slutsky_forge::transport::CompositeFlow;

use config::{parse_point, RunConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "slutsky-forge", version, about = "Observationally equivalent stochastic demand systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Manufactured-solution convergence of the Neumann solver.
    PoissonCheck,
    /// Push reference draws through the flow at one point and dump them.
    Synth,
    /// Marginal distances of the pushforward at each test point.
    VerifyMarginals,
    /// Average Slutsky matrix, T and marginal checks at each test point.
    Slutsky,
    /// Symmetric and asymmetric systems with identical marginals.
    NonidDemo,
    /// Asymmetry intervals under income-elasticity bounds.
    SymTest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::PoissonCheck => "poisson-check",
            Command::Synth => "synth",
            Command::VerifyMarginals => "verify-marginals",
            Command::Slutsky => "slutsky",
            Command::NonidDemo => "nonid-demo",
            Command::SymTest => "sym-test",
        }
    }
}

/// Overrides on top of the JSON config; flags win.
#[derive(Debug, clap::Args)]
struct Flags {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    family: Option<String>,
    /// Test point, e.g. `p1=1.5,p2=1.2,y=1.4`. Repeatable.
    #[arg(long, global = true)]
    x: Vec<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    n_marginal: Option<usize>,
    #[arg(long, global = true)]
    n_coeffs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Finite-difference step for prices and income.
    #[arg(long, global = true)]
    h: Option<f64>,
    #[arg(long, global = true)]
    grid_n: Option<usize>,
    #[arg(long, global = true)]
    knots: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Constant antisymmetric target entry C_12.
    #[arg(long, global = true, allow_negative_numbers = true)]
    target_c: Option<f64>,
    /// Lattice of target values: `p1..pd,y,c12[,c13,..]`.
    #[arg(long, global = true)]
    target_file: Option<PathBuf>,
    /// Shift C_12 for `nonid-demo`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    c: Option<f64>,
    /// Drop the income leg (negative control).
    #[arg(long, global = true)]
    skip_final: bool,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lower: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    upper: Option<f64>,
    /// Moment CSV for `sym-test`.
    #[arg(long, global = true)]
    moments: Option<PathBuf>,
    #[arg(long, global = true)]
    lattice_nodes: Option<usize>,
    #[arg(long, global = true)]
    slack: Option<f64>,
    /// Grid sizes for `poisson-check`.
    #[arg(long, global = true, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// CG tolerance for `poisson-check`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Sample CSV written by `synth`.
    #[arg(long, global = true)]
    samples: Option<PathBuf>,
    /// Interval CSV written by `sym-test`.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
}

fn resolve(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = &flags.$flag { cfg.$field = v.clone(); })*
        };
    }
    set!(family => family, n => n, n_coeffs => n_coeffs, seed => seed, grid_n => grid_n, knots => knots, steps => steps,
         c => c, lower => lower, upper => upper, lattice_nodes => lattice_nodes, slack => slack, sizes => sizes, tol => poisson_tol);
    if let Some(v) = flags.n_marginal {
        cfg.n_marginal = Some(v);
    }
    if let Some(h) = flags.h {
        cfg.h_p = h;
        cfg.h_y = h;
    }
    if flags.target_c.is_some() || flags.target_file.is_some() {
        cfg.target_c = flags.target_c;
        cfg.target_file = flags.target_file.clone();
    }
    if flags.skip_final {
        cfg.skip_final = true;
    }
    for (slot, v) in [(&mut cfg.moments, &flags.moments), (&mut cfg.samples, &flags.samples), (&mut cfg.csv, &flags.csv), (&mut cfg.report, &flags.report)] {
        if v.is_some() {
            *slot = v.clone();
        }
    }
    if !flags.x.is_empty() {
        cfg.x = flags.x.iter().map(|s| parse_point(s)).collect::<Result<_>>()?;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    pass: bool,
    result: T,
}

/// Files produced by a command, written only after every computation
/// has finished and removed again if a later write fails.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: &Path, bytes: Vec<u8>) {
        self.files.push((path.to_path_buf(), bytes));
    }

    fn commit(self) -> Result<()> {
        let mut written: Vec<PathBuf> = Vec::new();
        for (path, bytes) in &self.files {
            if let Err(e) = std::fs::write(path, bytes) {
                for p in written.iter().chain(std::iter::once(path)) {
                    let _ = std::fs::remove_file(p);
                }
                return Err(e.into());
            }
            written.push(path.clone());
        }
        Ok(())
    }
}

struct Outcome {
    result: Value,
    pass: bool,
    outputs: Outputs,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Numeric(format!("report serialization: {e}")))
}

fn build_flow(cfg: &RunConfig, f: &Arc<dyn DemandFamily>) -> Result<CompositeFlow> {
    let flow = CompositeFlow::new(f.clone(), cfg.flow())?;
    Ok(match cfg.target(f.as_ref())? {
        Some(target) => {
            let builder = RotationBuilder::new(f.as_ref(), target, cfg.n_coeffs, seed::derive(cfg.seed, "rotation"))?;
            flow.with_correction(Arc::new(builder))
        }
        None => flow,
    })
}

/// Per-point record shared by `verify-marginals` and `slutsky`.
#[derive(Serialize)]
struct PointRecord {
    x: Vec<f64>,
    family: String,
    n: usize,
    seed: u64,
    #[serde(rename = "T")]
    t: Option<Value>,
    #[serde(rename = "S_hat")]
    s_hat: Option<Value>,
    #[serde(rename = "S_se")]
    s_se: Option<Value>,
    ks: Vec<f64>,
    energy: f64,
    pass: bool,
    detail: Value,
}

fn poisson_check(cfg: &RunConfig) -> Result<Outcome> {
    if !(cfg.poisson_tol.is_finite() && cfg.poisson_tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", cfg.poisson_tol)));
    }
    if cfg.problems.is_empty() {
        return Err(Error::Config("no manufactured problems selected".into()));
    }
    // The solver accepts at most 1e-3; looser requests run at that cap and
    // are flagged.
    let effective = cfg.poisson_tol.min(1e-3);
    let mut runs = Vec::new();
    let mut pass = true;
    for &p in &cfg.problems {
        let rep = convergence_check(p, &cfg.sizes, effective)?;
        let ok = match rep.order {
            Some(o) => (1.8..=2.2).contains(&o),
            None => rep.errors.iter().all(|e| *e == 0.0),
        };
        pass &= ok;
        runs.push(json!({ "problem": p, "order_label": rep.order_label(), "report": rep, "pass": ok }));
    }
    let loose = cfg.poisson_tol > 1e-6;
    Ok(Outcome {
        result: json!({ "runs": runs, "tolerance": cfg.poisson_tol, "effective_tolerance": effective, "loose_tolerance": loose }),
        pass,
        outputs: Outputs::default(),
    })
}

fn synth(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_common()?;
    let f = cfg.family()?;
    let pts = cfg.points(f.as_ref())?;
    let x = match pts.as_slice() {
        [x] if !cfg.x.is_empty() => x.clone(),
        _ => return Err(Error::Config("synth needs exactly one --x".into())),
    };
    let path = cfg.samples.clone().unwrap_or_else(|| PathBuf::from("samples.csv"));
    let flow = build_flow(cfg, &f)?;
    let omegas = reference_sample(f.as_ref(), cfg.n, seed::derive(cfg.seed, "push"))?;
    let (pushed, clamp) = flow.push_samples(&x, &omegas, cfg.skip_final)?;
    let marginals = marginal_distance(&flow, &x, cfg.n, cfg.seed, cfg.skip_final, cfg.thresholds(cfg.n))?;
    let d = f.dim();
    let mut text = (1..=d).map(|i| format!("q{i}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for q in &pushed {
        text.push_str(&q.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    let mut outputs = Outputs::default();
    outputs.add(&path, text.into_bytes());
    let pass = marginals.pass;
    Ok(Outcome {
        result: json!({
            "x": x.coords(),
            "family": f.name(),
            "n": cfg.n,
            "seed": cfg.seed,
            "samples": path,
            "corrected": flow.prepare(&x)?.is_corrected(),
            "clamped": clamp.clamped,
            "escaped": clamp.escaped,
            "marginals": marginals,
        }),
        pass,
        outputs,
    })
}

fn verify_marginals(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_common()?;
    let f = cfg.family()?;
    let pts = cfg.points(f.as_ref())?;
    let flow = build_flow(cfg, &f)?;
    let n = cfg.n_marginal();
    let mut records = Vec::new();
    for x in &pts {
        let rep = marginal_distance(&flow, x, n, cfg.seed, cfg.skip_final, cfg.thresholds(n))?;
        records.push(PointRecord {
            x: x.coords().to_vec(),
            family: f.name().to_string(),
            n,
            seed: cfg.seed,
            t: None,
            s_hat: None,
            s_se: None,
            ks: rep.ks.clone(),
            energy: rep.energy,
            pass: rep.pass,
            detail: to_value(&rep)?,
        });
    }
    let pass = records.iter().all(|r| r.pass);
    Ok(Outcome { result: json!({ "points": records }), pass, outputs: Outputs::default() })
}

fn slutsky(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_common()?;
    if cfg.n < 1000 {
        return Err(Error::Config(format!("slutsky needs n >= 1000, got {}", cfg.n)));
    }
    let f = cfg.family()?;
    let pts = cfg.points(f.as_ref())?;
    let target = cfg.target(f.as_ref())?;
    let flow = build_flow(cfg, &f)?;
    let ncfg = cfg.nonid();
    let mut records = Vec::new();
    for x in &pts {
        let fun = estimate_functionals(f.as_ref(), x, cfg.n_functionals, cfg.h_p, cfg.seed, true)?;
        let c = match (&target, f.dim()) {
            (Some(t), 2) => t.c(x.coords())[(0, 1)],
            _ => 0.0,
        };
        let rep = system_report(&flow, x, c, &fun, &ncfg)?;
        records.push(PointRecord {
            x: x.coords().to_vec(),
            family: f.name().to_string(),
            n: cfg.n,
            seed: cfg.seed,
            t: Some(to_value(&fun)?["T"].clone()),
            s_hat: Some(to_value(&rep.slutsky)?["S_hat"].clone()),
            s_se: Some(to_value(&rep.slutsky)?["S_se"].clone()),
            ks: rep.marginals.ks.clone(),
            energy: rep.marginals.energy,
            pass: rep.pass,
            detail: json!({ "functionals": fun, "system": rep }),
        });
    }
    let pass = records.iter().all(|r| r.pass);
    Ok(Outcome { result: json!({ "points": records }), pass, outputs: Outputs::default() })
}

fn nonid(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_common()?;
    if cfg.target_c.is_some() || cfg.target_file.is_some() {
        return Err(Error::Config("nonid-demo takes --c, not a target".into()));
    }
    let f = cfg.family()?;
    let pts = cfg.points(f.as_ref())?;
    let rep = nonid_demo(f, cfg.c, &pts, &cfg.nonid())?;
    let pass = rep.pass;
    Ok(Outcome { result: to_value(&rep)?, pass, outputs: Outputs::default() })
}

fn sym_test(cfg: &RunConfig) -> Result<Outcome> {
    let (source, d) = match &cfg.moments {
        Some(path) => {
            let grid = moments_ingest(path)?;
            let d = grid.nodes.first().map_or(0, |n| n.m.len());
            (GridSource::Moments(grid), d)
        }
        None => {
            let f = cfg.family()?;
            let d = f.dim();
            (GridSource::Family(f, cfg.lattice()), d)
        }
    };
    let bounds = cfg.bounds(d)?;
    if !(cfg.slack.is_finite() && cfg.slack >= 0.0) {
        return Err(Error::Config(format!("slack must be non-negative, got {}", cfg.slack)));
    }
    let rep = grid_test(source, &bounds, cfg.slack, cfg.seed)?;
    let mut outputs = Outputs::default();
    if let Some(path) = &cfg.csv {
        let mut buf = Vec::new();
        rep.write_csv(&mut buf)?;
        outputs.add(path, buf);
    }
    let pass = !rep.rejects();
    Ok(Outcome { result: to_value(&rep)?, pass, outputs })
}

fn usage_or_numeric(e: &Error) -> u8 {
    if e.is_usage() {
        2
    } else {
        3
    }
}

fn error_record(command: &str, cfg: Option<&RunConfig>, e: &Error, code: u8) -> String {
    let kind = if code == 2 { "usage" } else { "numeric" };
    let rec = json!({
        "command": command,
        "version": VERSION,
        "config": cfg,
        "error": { "kind": kind, "message": e.to_string() },
        "exit_code": code,
    });
    serde_json::to_string_pretty(&rec).unwrap_or_default()
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SLUTSKY_FORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("SLUTSKY_FORGE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let fail = |cfg: Option<&RunConfig>, e: Error| {
        let code = usage_or_numeric(&e);
        eprintln!("error: {e}");
        println!("{}", error_record(name, cfg, &e, code));
        ExitCode::from(code)
    };
    if let Err(e) = init_threads() {
        return fail(None, e);
    }
    let cfg = match resolve(&cli.flags) {
        Ok(c) => c,
        Err(e) => return fail(None, e),
    };
    let run = match cli.command {
        Command::PoissonCheck => poisson_check(&cfg),
        Command::Synth => synth(&cfg),
        Command::VerifyMarginals => verify_marginals(&cfg),
        Command::Slutsky => slutsky(&cfg),
        Command::NonidDemo => nonid(&cfg),
        Command::SymTest => sym_test(&cfg),
    };
    let Outcome { result, pass, mut outputs } = match run {
        Ok(o) => o,
        Err(e) => return fail(Some(&cfg), e),
    };
    let env = Envelope { command: name, version: VERSION, config: &cfg, pass, result };
    let text = match serde_json::to_string_pretty(&env) {
        Ok(t) => t + "\n",
        Err(e) => return fail(Some(&cfg), Error::Numeric(format!("report serialization: {e}"))),
    };
    if let Some(path) = &cfg.report {
        outputs.add(path, text.clone().into_bytes());
    }
    if let Err(e) = outputs.commit() {
        return fail(Some(&cfg), e);
    }
    print!("{text}");
    ExitCode::from(if pass { 0 } else { 1 })
}
