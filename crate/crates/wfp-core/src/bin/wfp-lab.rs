use clap::Parser;
use std::path::PathBuf;
use std::process::ExitCode;
use wfp_core::cli_io::{exit_code, run, RunConfig, Scenario, EXIT_CONFIG};
use wfp_core::WfpError;

/// Wigner-Fokker-Planck numerical laboratory.
#[derive(Debug, Parser)]
#[command(name = "wfp-lab", version)]
struct Args {
    /// Configuration file (`key = value`, `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// relax, steady, spectrum, constants or selftest.
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; falls back to WFP_LAB_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn threads(args: &Args) -> Result<Option<usize>, WfpError> {
    let (n, source) = match (args.threads, std::env::var("WFP_LAB_THREADS")) {
        (Some(n), _) => (n, "--threads".to_string()),
        (None, Ok(v)) => {
            let n = v
                .trim()
                .parse()
                .map_err(|e| WfpError::Config { line: 0, message: format!("WFP_LAB_THREADS = '{v}': {e}") })?;
            (n, "WFP_LAB_THREADS".to_string())
        }
        (None, Err(_)) => return Ok(None),
    };
    if n == 0 {
        return Err(WfpError::Config { line: 0, message: format!("{source} must be at least 1") });
    }
    Ok(Some(n))
}

fn main_inner(args: Args) -> Result<i32, WfpError> {
    if let Some(n) = threads(&args)? {
        if n == 0 {
            return Err(WfpError::Config { line: 0, message: "thread count must be at least 1".into() });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| WfpError::Config { line: 0, message: e.to_string() })?;
    }
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.scenario {
        overrides.push(format!("scenario={s}"));
    }
    if let Some(d) = &args.output_dir {
        overrides.push(format!("output_dir={}", d.display()));
    }
    let config = RunConfig::load(args.config.as_deref(), &overrides)?;
    let outcome = run(&config)?;
    println!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(outcome.code)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match main_inner(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("wfp-lab: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
