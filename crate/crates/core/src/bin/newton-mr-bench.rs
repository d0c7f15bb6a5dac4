use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use newton_mr::bench::{
    performance_profile, plot_traces, run_experiment, summaries_from_dir, ExperimentConfig, Metric, Trace, XAxis,
    YAxis,
};
use newton_mr::Error;

#[derive(Parser)]
#[command(name = "newton-mr-bench", version, about = "Run Newton-MR experiments, profiles and plots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML file.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config and `$NEWTON_MR_OUT/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Performance profile of the final metric over a directory of traces.
    Profile {
        trace_dir: PathBuf,
        #[arg(long, default_value = "f")]
        metric: String,
        /// Write the profile CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot traces as SVG.
    Plot {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value = "iteration")]
        x: String,
        #[arg(long, default_value = "grad_norm")]
        y: String,
        #[arg(long)]
        log_y: bool,
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
    },
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let report = run_experiment(cfg)?;
            let failed = report.errors().count();
            println!(
                "{} runs ({} failed) written to {}; manifest {}",
                report.runs.len(),
                failed,
                report.dir.display(),
                report.manifest_path.display()
            );
            for r in report.errors() {
                eprintln!("run {} seed {} failed: {}", r.method, r.seed, r.error.as_deref().unwrap_or_default());
            }
        }
        Command::Profile { trace_dir, metric, out } => {
            let metric: Metric = metric.parse()?;
            let table = performance_profile(&summaries_from_dir(&trace_dir)?, metric)?;
            for run in &table.excluded {
                eprintln!("run {run} excluded: no method has a finite {}", metric.name());
            }
            match out {
                Some(path) => table.write_csv(fs::File::create(&path).map_err(|e| Error::Io { path, source: e })?)?,
                None => table.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Plot { traces, x, y, log_y, out } => {
            let (x, y): (XAxis, YAxis) = (x.parse()?, y.parse()?);
            let traces = traces.iter().map(|p| Trace::read_csv(p)).collect::<Result<Vec<_>, _>>()?;
            let plot = plot_traces(&traces, x, y, log_y)?;
            for w in &plot.warnings {
                eprintln!("warning: {w}");
            }
            fs::write(&out, plot.svg).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
