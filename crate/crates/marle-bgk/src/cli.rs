//! Batch front end: a command name picks the experiment, a JSON config or
//! a named preset supplies every parameter, and the results land in an
//! output directory as `trace.csv` / `macro.csv` / `report.json` (plus a
//! command-specific table where one applies).
//!
//! All floating-point CSV fields are printed with a fixed 17-digit
//! scientific format, so identical config and seed reproduce the output
//! files byte for byte. Environment variables are deliberately ignored;
//! the config file is the single source of truth.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::dist::global_equilibrium;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, MomentumRule, PhaseGrid};
use crate::juttner;
use crate::linear::{build_basis, spectral_gap, LowRankOperator};
use crate::rng::SplitMix64;
use crate::solver::{
    initial_condition, run_simulation, slab_norm, EnergyTrace, InitialCondition, ProfileShape,
    RunConfig, Scheme, SlabField, Stepper,
};

const USAGE: &str = "\
usage: marle-bgk <command> [--config <path>] [--out <dir>] [--seed <u64>] [--quiet]

commands:
  gamma-table        tabulate the equilibrium normalizer family on the grid
  analyze-operator   kernel projection residuals, self-adjointness check, and
                     the spectral gap of the linearized collision operator
  relax0d            space-homogeneous relaxation from a seeded perturbation
  decay1d            periodic-slab decay run with the full energy trace
  convergence        splitting self-convergence study at dt, dt/2, dt/4

flags:
  --config <path>    JSON run configuration; defaults to the command's preset
  --out <dir>        output directory, created if missing (default: .)
  --seed <u64>       overrides the seed field of the config
  --quiet            suppress progress output

exit codes: 0 success, 1 monitor failure or run error, 2 configuration error";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Command {
    GammaTable,
    AnalyzeOperator,
    Relax0d,
    Decay1d,
    Convergence,
}

impl Command {
    fn parse(name: &str) -> Option<Command> {
        match name {
            "gamma-table" => Some(Command::GammaTable),
            "analyze-operator" => Some(Command::AnalyzeOperator),
            "relax0d" => Some(Command::Relax0d),
            "decay1d" => Some(Command::Decay1d),
            "convergence" => Some(Command::Convergence),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Command::GammaTable => "gamma-table",
            Command::AnalyzeOperator => "analyze-operator",
            Command::Relax0d => "relax0d",
            Command::Decay1d => "decay1d",
            Command::Convergence => "convergence",
        }
    }
}

struct Options {
    command: Command,
    config_path: Option<PathBuf>,
    out_dir: PathBuf,
    seed: Option<u64>,
    quiet: bool,
}

/// Entry point behind the binary; expects the arguments after the program
/// name and returns the process exit code.
pub fn cli_main(args: &[String]) -> i32 {
    if args.iter().any(|a| a == "--help" || a == "-h") {
        emit(USAGE);
        return 0;
    }
    let opts = match parse_args(args) {
        Ok(o) => o,
        Err(message) => {
            eprintln!("error: {message}\n\n{USAGE}");
            return 2;
        }
    };
    let config = match load_config(&opts) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 2;
        }
    };
    match execute(&opts, &config) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("run error: {e}");
            1
        }
    }
}

fn parse_args(args: &[String]) -> std::result::Result<Options, String> {
    let mut iter = args.iter();
    let first = iter.next().ok_or("missing command")?;
    let command = Command::parse(first).ok_or_else(|| format!("unknown command '{first}'"))?;
    let mut config_path = None;
    let mut out_dir = PathBuf::from(".");
    let mut seed = None;
    let mut quiet = false;
    while let Some(flag) = iter.next() {
        match flag.as_str() {
            "--config" => {
                let v = iter.next().ok_or("--config requires a path")?;
                config_path = Some(PathBuf::from(v));
            }
            "--out" => {
                let v = iter.next().ok_or("--out requires a directory")?;
                out_dir = PathBuf::from(v);
            }
            "--seed" => {
                let v = iter.next().ok_or("--seed requires an integer")?;
                let parsed: u64 = v
                    .parse()
                    .map_err(|_| format!("--seed expects an unsigned integer, got '{v}'"))?;
                seed = Some(parsed);
            }
            "--quiet" => quiet = true,
            other => return Err(format!("unknown flag '{other}'")),
        }
    }
    Ok(Options {
        command,
        config_path,
        out_dir,
        seed,
        quiet,
    })
}

/// Desk-scale defaults per command. Every preset is a complete `RunConfig`
/// and validates against the same schema as a user-supplied file.
pub fn preset(name: &str) -> Result<RunConfig> {
    let base = RunConfig::default();
    match name {
        "decay1d" => Ok(base),
        "relax0d" => Ok(RunConfig {
            grid: GridSpec {
                n_x: 1,
                n_p: 10,
                p_max: 10.0,
                i_max: 8.0,
                n_i: 8,
                tail_tol: 1e-3,
                ..base.grid
            },
            t_end: 4.0,
            dt: 0.02,
            energy_order: 0,
            ic: InitialCondition {
                epsilon: 1e-2,
                mode: 0,
                shape: ProfileShape::Random,
            },
            macro_every: 20,
            ..base
        }),
        "convergence" => Ok(RunConfig {
            grid: GridSpec {
                n_x: 8,
                n_p: 8,
                p_max: 8.0,
                p_rule: MomentumRule::Lobatto,
                i_max: 8.0,
                n_i: 4,
                tail_tol: 1e-3,
                ..base.grid
            },
            t_end: 0.4,
            dt: 0.1,
            ic: InitialCondition {
                epsilon: 1e-2,
                mode: 1,
                shape: ProfileShape::Sine,
            },
            ..base
        }),
        "gamma-table" => Ok(RunConfig {
            grid: GridSpec {
                n_x: 1,
                ..base.grid
            },
            t_end: 1.0,
            dt: 0.1,
            ..base
        }),
        "analyze-operator" => Ok(RunConfig {
            grid: GridSpec {
                n_x: 1,
                n_p: 10,
                p_max: 10.0,
                p_rule: MomentumRule::Lobatto,
                i_max: 8.0,
                n_i: 8,
                tail_tol: 1e-3,
                ..base.grid
            },
            t_end: 1.0,
            dt: 0.1,
            ..base
        }),
        other => Err(Error::Config {
            message: format!("unknown preset '{other}'"),
        }),
    }
}

fn load_config(opts: &Options) -> Result<RunConfig> {
    let mut config = match &opts.config_path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config {
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Config {
                message: format!("{}: {e}", path.display()),
            })?
        }
        None => preset(opts.command.name())?,
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn execute(opts: &Options, config: &RunConfig) -> Result<bool> {
    fs::create_dir_all(&opts.out_dir)?;
    match opts.command {
        Command::GammaTable => gamma_table(opts, config),
        Command::AnalyzeOperator => analyze_operator(opts, config),
        Command::Relax0d | Command::Decay1d => run_and_trace(opts, config),
        Command::Convergence => convergence(opts, config),
    }
}

/// Progress and usage text must survive a closed stdout (`marle-bgk ... |
/// head`); the default `println!` aborts on the broken pipe.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn say(opts: &Options, line: &str) {
    if !opts.quiet {
        emit(line);
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn write_report(
    opts: &Options,
    config: &RunConfig,
    results: serde_json::Value,
    passed: bool,
    failures: &[String],
) -> Result<()> {
    let report = serde_json::json!({
        "version": 1,
        "command": opts.command.name(),
        "config": config,
        "results": results,
        "monitors": { "passed": passed, "failures": failures },
    });
    let path = opts.out_dir.join("report.json");
    let file = fs::File::create(&path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, &report).map_err(|e| Error::Config {
        message: format!("cannot serialize report: {e}"),
    })?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

fn write_trace_csv(path: &Path, trace: &EnergyTrace) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "t,energy,mass,e0,e1,e2,e3,entropy,d_mass,d_e0,d_p1,d_p2,d_p3,min_f"
    )?;
    for i in 0..trace.times.len() {
        let mut row = vec![
            fmt(trace.times[i]),
            fmt(trace.energy[i]),
            fmt(trace.mass[i]),
        ];
        for mu in 0..4 {
            row.push(fmt(trace.four_momentum[mu][i]));
        }
        row.push(fmt(trace.entropy[i]));
        for a in 0..5 {
            row.push(fmt(trace.pert_totals[a][i]));
        }
        row.push(fmt(trace.min_f[i]));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn write_macro_csv(path: &Path, trace: &EnergyTrace) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "t,cell,x,n,u1,u2,u3,gamma,eta")?;
    for row in &trace.macro_rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            fmt(row.t),
            row.cell,
            fmt(row.x),
            fmt(row.state.n),
            fmt(row.state.u[0]),
            fmt(row.state.u[1]),
            fmt(row.state.u[2]),
            fmt(row.state.gamma),
            fmt(row.state.eta),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn run_and_trace(opts: &Options, config: &RunConfig) -> Result<bool> {
    let trace = run_simulation(config)?;
    write_trace_csv(&opts.out_dir.join("trace.csv"), &trace)?;
    write_macro_csv(&opts.out_dir.join("macro.csv"), &trace)?;
    let results = serde_json::json!({
        "samples": trace.times.len(),
        "t_final": trace.times.last(),
        "energy_first": trace.energy.first(),
        "energy_last": trace.energy.last(),
        "entropy_first": trace.entropy.first(),
        "entropy_last": trace.entropy.last(),
        "lambda0": trace.lambda0,
        "fit_residual": trace.fit_residual,
        "iterate_diffs": trace.iterate_diffs,
    });
    write_report(
        opts,
        config,
        results,
        trace.monitors.passed,
        &trace.monitors.failures,
    )?;
    say(
        opts,
        &format!(
            "{}: {} samples to t = {:.3}, energy {:.6e} -> {:.6e}",
            opts.command.name(),
            trace.times.len(),
            trace.times.last().copied().unwrap_or(0.0),
            trace.energy.first().copied().unwrap_or(0.0),
            trace.energy.last().copied().unwrap_or(0.0),
        ),
    );
    match trace.lambda0 {
        Some(l) => say(opts, &format!("fitted decay rate lambda0 = {l:.6e}")),
        None => say(opts, "decay fit not available on this trace"),
    }
    if trace.monitors.passed {
        say(
            opts,
            &format!("monitors passed; wrote {}", opts.out_dir.display()),
        );
    } else {
        for f in &trace.monitors.failures {
            eprintln!("monitor failure: {f}");
        }
    }
    Ok(trace.monitors.passed)
}

/// Number of rows in the gamma table and its log-spaced range.
const GAMMA_TABLE_POINTS: usize = 61;
const GAMMA_TABLE_RANGE: (f64, f64) = (0.1, 10.0);

fn gamma_table(opts: &Options, config: &RunConfig) -> Result<bool> {
    let grid = PhaseGrid::build(config.grid.clone())?;
    let path = opts.out_dir.join("gamma_table.csv");
    let file = fs::File::create(&path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "gamma,m,mtilde,eta,eta_slope,delta,kappa")?;
    let (lo, hi) = GAMMA_TABLE_RANGE;
    let step = (hi / lo).ln() / (GAMMA_TABLE_POINTS - 1) as f64;
    for i in 0..GAMMA_TABLE_POINTS {
        let gamma = lo * (step * i as f64).exp();
        let m = juttner::eval_m(&grid, gamma, 0)?;
        let mtilde = juttner::eval_mtilde(&grid, gamma, 0)?;
        let eta = juttner::eta_of_gamma(&grid, gamma)?;
        let slope = juttner::eta_slope(&grid, gamma)?;
        let consts = juttner::equilibrium_constants(&grid, gamma)?;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            fmt(gamma),
            fmt(m),
            fmt(mtilde),
            fmt(eta),
            fmt(slope),
            fmt(consts.delta),
            fmt(consts.kappa),
        )?;
    }
    w.flush()?;
    let results = serde_json::json!({
        "rows": GAMMA_TABLE_POINTS,
        "gamma_min": lo,
        "gamma_max": hi,
        "table": "gamma_table.csv",
    });
    write_report(opts, config, results, true, &[])?;
    say(
        opts,
        &format!(
            "gamma-table: {GAMMA_TABLE_POINTS} rows -> {}",
            path.display()
        ),
    );
    Ok(true)
}

/// Residual budgets mirrored by the operator analysis monitors.
const KERNEL_RESIDUAL_TOL: f64 = 1e-10;
const SELF_ADJOINT_TOL: f64 = 1e-12;

fn analyze_operator(opts: &Options, config: &RunConfig) -> Result<bool> {
    let grid = PhaseGrid::build(config.grid.clone())?;
    let eq = global_equilibrium(&grid, grid.spec.gamma0)?;
    let basis = build_basis(&grid, &eq);
    let op = LowRankOperator::build(&grid, &eq);

    let mut gram_residual = 0.0f64;
    for a in 0..5 {
        for b in 0..5 {
            let g = grid.inner(&basis.e[a], &basis.e[b]);
            let target = if a == b { 1.0 } else { 0.0 };
            gram_residual = gram_residual.max((g - target).abs());
        }
    }

    let mut kernel_residuals = [0.0f64; 5];
    for a in 0..5 {
        let projected = op.apply_p0(&grid, &basis.e[a]);
        let mut diff = 0.0;
        for k in 0..grid.n_nodes {
            let d = projected[k] - basis.e[a][k];
            diff += d * d * grid.weight[k];
        }
        kernel_residuals[a] = diff.sqrt();
    }

    let mut rng = SplitMix64::stream(config.seed, 0x6f70_6572);
    let mut self_adjoint = 0.0f64;
    let mut coercive = true;
    for _ in 0..100 {
        let mut f = vec![0.0; grid.n_nodes];
        let mut g = vec![0.0; grid.n_nodes];
        rng.fill_sym(&mut f);
        rng.fill_sym(&mut g);
        let lf = op.apply_l(&grid, &f);
        let lg = op.apply_l(&grid, &g);
        let asym = (grid.inner(&lf, &g) - grid.inner(&f, &lg)).abs();
        self_adjoint = self_adjoint.max(asym / (grid.norm(&f) * grid.norm(&g)));
        if grid.inner(&lf, &f) > 0.0 {
            coercive = false;
        }
    }

    let gap = spectral_gap(&grid, &op, &basis, config.seed)?;

    let mut failures = Vec::new();
    if !(gap.lambda > 0.0) {
        failures.push(format!("spectral gap {} is not positive", gap.lambda));
    }
    if !coercive {
        failures.push("found f with <Lf, f> > 0".into());
    }
    for (a, r) in kernel_residuals.iter().enumerate() {
        if *r > KERNEL_RESIDUAL_TOL {
            failures.push(format!("kernel field {a} residual {r:.3e} over budget"));
        }
    }
    if self_adjoint > SELF_ADJOINT_TOL {
        failures.push(format!(
            "self-adjointness residual {self_adjoint:.3e} over budget"
        ));
    }
    let passed = failures.is_empty();

    let results = serde_json::json!({
        "lambda": gap.lambda,
        "eigensolver_iterations": gap.iterations,
        "eigenpair_residual": gap.residual,
        "gram_residual": gram_residual,
        "kernel_residuals": kernel_residuals,
        "self_adjoint_residual": self_adjoint,
        "nodes": grid.n_nodes,
    });
    write_report(opts, config, results, passed, &failures)?;
    say(
        opts,
        &format!(
            "analyze-operator: lambda = {:.8e} after {} iterations (residual {:.3e})",
            gap.lambda, gap.iterations, gap.residual
        ),
    );
    say(
        opts,
        &format!(
            "kernel residual max {:.3e}, self-adjointness {:.3e}, gram {:.3e}",
            kernel_residuals.iter().fold(0.0f64, |m, v| m.max(*v)),
            self_adjoint,
            gram_residual
        ),
    );
    for f in &failures {
        eprintln!("monitor failure: {f}");
    }
    Ok(passed)
}

/// Acceptance band around the nominal self-convergence order.
const ORDER_BAND: f64 = 0.3;

fn convergence(opts: &Options, config: &RunConfig) -> Result<bool> {
    let nominal = match config.scheme {
        Scheme::Strang => 2.0,
        Scheme::Lie => 1.0,
        Scheme::Duhamel { .. } => {
            return Err(Error::Config {
                message: "scheme: the convergence study compares split steps; \
                          use strang or lie"
                    .into(),
            })
        }
    };
    let grid = PhaseGrid::build(config.grid.clone())?;
    let eq = global_equilibrium(&grid, grid.spec.gamma0)?;
    let field0 = initial_condition(&grid, &eq, &config.ic, config.seed)?;
    let n0 = (config.t_end / config.dt).round().max(1.0) as usize;
    let mut finals = Vec::with_capacity(3);
    let mut dts = Vec::with_capacity(3);
    for level in 0..3 {
        let n = n0 << level;
        let dt = config.t_end / n as f64;
        let mut field = field0.clone();
        let mut stepper = Stepper::new(
            &grid,
            &eq,
            config.scheme,
            config.collision,
            config.conservative,
        )?;
        for _ in 0..n {
            stepper.step(&mut field, dt)?;
        }
        dts.push(dt);
        finals.push(field);
    }
    let diff = |a: &SlabField, b: &SlabField| {
        let mut d = a.clone();
        for (x, y) in d.values.iter_mut().zip(&b.values) {
            *x -= y;
        }
        slab_norm(&grid, &d)
    };
    let errors = [diff(&finals[0], &finals[1]), diff(&finals[1], &finals[2])];
    let slope = (errors[0] / errors[1]).log2();

    let path = opts.out_dir.join("convergence.csv");
    let file = fs::File::create(&path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "dt,error_vs_half_dt")?;
    for i in 0..2 {
        writeln!(w, "{},{}", fmt(dts[i]), fmt(errors[i]))?;
    }
    w.flush()?;

    let mut failures = Vec::new();
    if (slope - nominal).abs() > ORDER_BAND {
        failures.push(format!(
            "observed order {slope:.3} outside {nominal} +- {ORDER_BAND}"
        ));
    }
    let passed = failures.is_empty();
    let results = serde_json::json!({
        "dts": dts,
        "errors": errors,
        "observed_order": slope,
        "nominal_order": nominal,
    });
    write_report(opts, config, results, passed, &failures)?;
    say(
        opts,
        &format!(
            "convergence: errors {:.3e} / {:.3e}, order {slope:.3}",
            errors[0], errors[1]
        ),
    );
    for f in &failures {
        eprintln!("monitor failure: {f}");
    }
    Ok(passed)
}
