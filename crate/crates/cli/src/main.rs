use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lipcenter::config::RunConfig;
use lipcenter::export::{self, MANIFEST_NAME};
use lipcenter::families::{lemma4_bound, lemma4_integral_detailed, sample_lemma4_tuples};
use lipcenter::hypotheses::{assemble_report, HypothesisReport};
use lipcenter::lab::{growth_samples, invariance_residual, invariance_samples, lipschitz_growth_check};
use lipcenter::sampling;
use lipcenter::solver::Discretization;
use lipcenter::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_HYPOTHESIS: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "lipcenter", version, about = "Global Lipschitz center manifolds for nonautonomous ODEs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute sigma, omega, M, N and q and write hypotheses.json.
    Hypotheses(Common),
    /// Solve for the manifold and write manifold.csv and manifest.json.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Run even if the hypotheses fail.
        #[arg(long)]
        force: bool,
    },
    /// Check a solved manifold and write validation.json and validation.csv.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Manifest of the run to check; defaults to `<out>/manifest.json`.
        #[arg(long)]
        manifold: Option<PathBuf>,
    },
    /// Compare the closed-form integral bound with quadrature.
    Lemma4 {
        #[arg(long, allow_hyphen_values = true, requires_all = ["nu", "eps", "p"])]
        lambda: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        nu: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        eps: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        p: Option<f64>,
        /// Draw this many admissible tuples instead.
        #[arg(long, conflicts_with = "lambda")]
        sweep: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::HypothesisViolated(_)) => EXIT_HYPOTHESIS,
        Some(Error::NonConvergence { .. }) => EXIT_NONCONVERGENCE,
        Some(Error::ArtifactMismatch(_)) => EXIT_MISMATCH,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Hypotheses(c) => cmd_hypotheses(&c),
        Cmd::Solve { common, force } => cmd_solve(&common, force),
        Cmd::Validate { common, manifold } => cmd_validate(&common, manifold),
        Cmd::Lemma4 {
            lambda,
            nu,
            eps,
            p,
            sweep,
            seed,
            out,
        } => cmd_lemma4(lambda.zip(nu).zip(eps.zip(p)), sweep, seed, out),
    }
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn certify(cfg: &RunConfig) -> Result<HypothesisReport> {
    let bounds = cfg.bounds()?;
    let budget = cfg.budget()?;
    Ok(assemble_report(&bounds, &budget, &cfg.hypotheses)?)
}

fn cmd_hypotheses(c: &Common) -> Result<u8> {
    let (cfg, out) = load(c)?;
    let report = certify(&cfg)?;
    write_json(&out.join("hypotheses.json"), &report)?;
    println!(
        "sigma = {:.9}  omega = {:.9}  M = {:.9}  N = {:.9}  q = {:.9}",
        report.sigma, report.omega, report.m, report.n, report.contraction_factor
    );
    if report.pass {
        println!("hypotheses hold");
        Ok(0)
    } else {
        for r in &report.reasons {
            eprintln!("hypothesis failure: {r}");
        }
        Ok(EXIT_HYPOTHESIS)
    }
}

fn cmd_solve(c: &Common, force: bool) -> Result<u8> {
    let (cfg, out) = load(c)?;
    let report = certify(&cfg)?;
    if !report.pass {
        for r in &report.reasons {
            eprintln!("hypothesis failure: {r}");
        }
        if !force {
            return Ok(EXIT_HYPOTHESIS);
        }
        log::warn!("--force: solving although the hypotheses fail");
    }
    let mut settings = cfg.solver_settings();
    settings.force |= force;
    let problem = cfg.problem()?;
    let disc = Discretization::with_execution(problem, cfg.grid, settings.execution)?;
    let state = disc.iterate(Some(&report), &settings)?;
    for w in &state.warnings {
        log::warn!("{w}");
    }
    let manifest = export::write_run(&out, &cfg, &disc, &state, Some(&report))?;
    println!(
        "converged in {} iterations, error bound {:.3e}; wrote {} rows to {}",
        state.iterations,
        state.error_bound,
        manifest.rows,
        out.display()
    );
    Ok(0)
}

fn cmd_validate(c: &Common, manifold: Option<PathBuf>) -> Result<u8> {
    let (cfg, out) = load(c)?;
    let manifest_path = match manifold {
        Some(p) if p.is_dir() => p.join(MANIFEST_NAME),
        Some(p) => p,
        None => out.join(MANIFEST_NAME),
    };
    if !manifest_path.exists() {
        return Err(Error::ArtifactMismatch(format!("{} does not exist", manifest_path.display())).into());
    }
    let (manifest, csv) = export::verify_run(&manifest_path, &cfg)?;
    let problem = cfg.problem()?;
    let zero = problem.perturbation.is_zero();
    let disc = Discretization::new(problem, cfg.grid)?;
    let state = export::load_state(&disc, &manifest, &csv)?;
    let st = cfg.validation_settings();

    let samples = invariance_samples(&disc, &st);
    let inv = invariance_residual(&disc, &state, &samples, None, &st)?;
    let growth = if zero {
        None
    } else {
        let report = certify(&cfg)?;
        Some(lipschitz_growth_check(&disc, &state, &report, &growth_samples(&disc, &st), &st)?)
    };
    let transport = disc.verify_graph_transport_detailed(&state, &disc.transport_samples(200, st.seed))?;

    let k = disc.grid.k;
    let mut table = String::from("tau,s");
    for i in 1..=k {
        table.push_str(&format!(",xi_{i}"));
    }
    table.push_str(",residual\n");
    for s in &inv.per_sample {
        let mut row = vec![s.tau, s.s];
        row.extend(&s.xi);
        row.push(s.residual.unwrap_or(f64::NAN));
        table.push_str(&row.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(","));
        table.push('\n');
    }
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("validation.csv"), table)?;
    write_json(
        &out.join("validation.json"),
        &json!({
            "config_sha256": manifest.config_sha256,
            "csv_sha256": manifest.csv_sha256,
            "settings": st,
            "invariance": inv,
            "lipschitz_growth": growth,
            "graph_transport": transport,
        }),
    )?;
    println!(
        "invariance residual {:.3e} over {} samples ({} skipped)",
        inv.worst, inv.evaluated, inv.skipped
    );
    match &growth {
        Some(g) => println!(
            "Lipschitz growth ratio {:.6} (bound 1 + {}), N/omega = {:.6}",
            g.worst_ratio, g.tolerance, g.growth_factor
        ),
        None => println!("Lipschitz growth check skipped: zero perturbation"),
    }
    println!("graph transport residual {:.3e}", transport.worst);
    Ok(0)
}

fn cmd_lemma4(
    single: Option<((f64, f64), (f64, f64))>,
    sweep: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<u8> {
    let tuples = match (single, sweep) {
        (Some(((l, nu), (e, p))), None) => vec![(l, nu, e, p)],
        (None, Some(n)) => sample_lemma4_tuples(&mut sampling::rng(seed.unwrap_or(sampling::DEFAULT_SEED)), n),
        _ => return Err(Error::Config("give either --lambda --nu --eps --p or --sweep".into()).into()),
    };
    let mut rows = Vec::with_capacity(tuples.len());
    println!("{:>10} {:>10} {:>10} {:>10} {:>20} {:>20} {:>12}", "lambda", "nu", "eps", "p", "bound", "integral", "margin");
    let mut worst = f64::INFINITY;
    for (l, nu, e, p) in tuples {
        let bound = lemma4_bound(l, nu, e, p)?;
        let integral = lemma4_integral_detailed(l, nu, e, p, 1e-12)?;
        let margin = (bound - integral.value) / bound;
        worst = worst.min(margin);
        println!(
            "{l:>10.5} {nu:>10.5} {e:>10.5} {p:>10.5} {bound:>20.15} {:>20.15} {margin:>12.3e}",
            integral.value
        );
        rows.push(json!({
            "lambda": l, "nu": nu, "eps": e, "p": p,
            "bound": bound, "integral": integral.value, "margin": margin,
            "truncated_at": integral.truncated_at, "tail_bound": integral.tail_bound,
        }));
    }
    if let Some(dir) = out {
        write_json(&dir.join("lemma4.json"), &rows)?;
    }
    if worst < -1e-9 {
        return Err(anyhow!("integral exceeds the bound: relative margin {worst:.3e}"));
    }
    Ok(0)
}
