use clap::Parser;
use std::path::PathBuf;
use std::process::ExitCode;
use vpb_cli::{compare, parse_config, run, CliError, ExperimentKind, RunRecord, Tolerances};

/// Runs one experiment of the Vlasov-Poisson-Boltzmann lab and writes CSV
/// series plus a JSON summary. Exit status 0 iff all declared checks pass.
#[derive(Debug, Parser)]
#[command(name = "vpb-lab", version)]
struct Args {
    /// TOML experiment configuration; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed of the randomized suites in [0, 2^63) (overrides `seed`).
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    seed: Option<u64>,
    /// Experiment kind (overrides `kind`).
    #[arg(long, value_name = "NAME")]
    kind: Option<String>,
    /// Print the experiment kinds and exit.
    #[arg(long)]
    list_kinds: bool,
    /// Record JSON to compare the new run against.
    #[arg(long, value_name = "RECORD")]
    baseline: Option<PathBuf>,
    /// Absolute tolerance for the baseline comparison.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    /// Per-metric tolerance FIELD=TOL; repeatable.
    #[arg(long = "field-tolerance", value_name = "FIELD=TOL")]
    field_tolerance: Vec<String>,
}

fn tolerances(args: &Args) -> Result<Tolerances, CliError> {
    let mut tol = Tolerances::uniform(args.tolerance);
    for spec in &args.field_tolerance {
        let (field, value) = spec.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--field-tolerance `{spec}`: expected FIELD=TOL"))
        })?;
        let value: f64 = value
            .parse()
            .map_err(|_| CliError::Config(format!("--field-tolerance `{spec}`: bad number")))?;
        tol = tol.with(field, value);
    }
    Ok(tol)
}

fn main_inner(args: Args) -> Result<bool, CliError> {
    if args.list_kinds {
        for k in ExperimentKind::ALL {
            println!("{:<11} {}", k.name(), k.description());
        }
        return Ok(true);
    }
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(k) = &args.kind {
        cfg.kind = k.parse()?;
    }
    if let Some(dir) = &args.out {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let tol = tolerances(&args)?;
    let record = run(&cfg)?;
    for c in &record.summary.checks {
        eprintln!(
            "{} {} = {:e} {} {:e}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.value,
            c.relation,
            c.bound
        );
    }
    for n in &record.summary.notes {
        eprintln!("note: {n}");
    }
    let mut ok = record.summary.passed;
    if let Some(path) = &args.baseline {
        let base = RunRecord::load(path)?;
        let diff = compare(&base, &record, &tol)?;
        for e in &diff.entries {
            eprintln!(
                "{} {}: {:?} -> {:?} (delta {:?}, tolerance {:e})",
                if e.within { "drift" } else { "REGRESSION" },
                e.field,
                e.a,
                e.b,
                e.delta,
                e.tolerance
            );
        }
        ok &= diff.passed;
    }
    println!(
        "{}: {} ({:.2} s, outputs in {})",
        cfg.kind,
        if ok { "passed" } else { "failed" },
        record.wall_time_s,
        cfg.out_dir.display()
    );
    Ok(ok)
}

fn main() -> ExitCode {
    match main_inner(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
