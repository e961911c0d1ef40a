use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spotmix_core::harness::{
    run_adapt_phases, run_oracle, run_select, run_simulate, run_sweep, write_jsonl, write_oracle_csv,
    write_simulation_csv, write_sweep_csv, TraceSource,
};
use spotmix_core::{synthesize_trace, Error, ExperimentConfig, ExperimentKind, Result, TraceSynthSpec};

#[derive(Parser)]
#[command(name = "spotmix", version, about = "Deadline-aware spot/on-demand GPU allocation simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; defaults to the configured output, then stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Deadline,
    Overhead,
    Avail,
    Price,
}

impl SweepParam {
    fn kind(self) -> ExperimentKind {
        match self {
            SweepParam::Deadline => ExperimentKind::SweepDeadline,
            SweepParam::Overhead => ExperimentKind::SweepOverhead,
            SweepParam::Avail => ExperimentKind::SweepAvail,
            SweepParam::Price => ExperimentKind::SweepPrice,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy on seeded job draws.
    Simulate,
    /// Average normalized utility over a parameter grid.
    Sweep {
        /// Swept parameter; defaults to the configured sweep kind.
        #[arg(long, value_enum)]
        param: Option<SweepParam>,
        /// Comma-separated sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Online policy selection over a job sequence.
    Select,
    /// Selection with forecast noise switched between phases.
    Adapt,
    /// Compare policies against the offline optimum.
    Oracle,
    /// Write a synthetic spot trace.
    SynthTrace {
        #[arg(long)]
        length: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_config(global: &Global, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::new(kind.unwrap_or_default()),
    };
    if let Some(kind) = kind {
        cfg.kind = kind;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn open_output(global: &Global, cfg: &ExperimentConfig) -> Result<Box<dyn Write>> {
    match global.out.as_ref().or(cfg.output.as_ref()) {
        Some(path) => Ok(Box::new(BufWriter::new(File::create(path)?))),
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Simulate => {
            let cfg = load_config(g, Some(ExperimentKind::Simulate))?;
            let records = run_simulate(&cfg)?;
            let mut out = open_output(g, &cfg)?;
            match g.format {
                Format::Csv => write_simulation_csv(&records, &mut out)?,
                Format::Jsonl => write_jsonl(&records, &mut out)?,
            }
            out.flush()?;
        }
        Command::Sweep { param, values } => {
            let mut cfg = load_config(g, param.map(SweepParam::kind))?;
            if cfg.kind.sweep_param().is_none() {
                return Err(Error::Config("sweep needs --param or a sweep kind in the config".into()));
            }
            if !values.is_empty() {
                cfg.sweep_values = values;
            }
            let rows = run_sweep(&cfg)?;
            let mut out = open_output(g, &cfg)?;
            match g.format {
                Format::Csv => write_sweep_csv(&rows, &mut out)?,
                Format::Jsonl => write_jsonl(&rows, &mut out)?,
            }
            out.flush()?;
        }
        Command::Select => {
            let cfg = load_config(g, Some(ExperimentKind::Select))?;
            let run = run_select(&cfg)?;
            let pool = cfg.selection_pool()?;
            let best = run.best_in_hindsight();
            eprintln!("best in hindsight: {} ({})", pool[best], best);
            let mut out = open_output(g, &cfg)?;
            match g.format {
                Format::Csv => run.write_weights_csv(&mut out)?,
                Format::Jsonl => run.write_jsonl(&mut out)?,
            }
            out.flush()?;
        }
        Command::Adapt => {
            let cfg = load_config(g, Some(ExperimentKind::AdaptPhases))?;
            let result = run_adapt_phases(&cfg)?;
            for p in &result.phases {
                eprintln!("phase {}..{}: {} (weight {:.3})", p.start, p.end, p.policy, p.weight);
            }
            let mut out = open_output(g, &cfg)?;
            match g.format {
                Format::Csv => result.write_heatmap_csv(&mut out)?,
                Format::Jsonl => result.run.write_jsonl(&mut out)?,
            }
            out.flush()?;
        }
        Command::Oracle => {
            let cfg = load_config(g, Some(ExperimentKind::Oracle))?;
            let rows = run_oracle(&cfg)?;
            let mut out = open_output(g, &cfg)?;
            match g.format {
                Format::Csv => write_oracle_csv(&rows, &mut out)?,
                Format::Jsonl => write_jsonl(&rows, &mut out)?,
            }
            out.flush()?;
        }
        Command::SynthTrace { length } => {
            let cfg = load_config(g, None)?;
            let mut spec = match &cfg.trace {
                TraceSource::Synth(spec) => spec.clone(),
                TraceSource::File { .. } => TraceSynthSpec::default(),
            };
            if let Some(seed) = g.seed {
                spec.seed = seed;
            }
            if let Some(length) = length {
                spec.length = length;
            }
            let trace = synthesize_trace(&spec).map_err(|e| Error::Config(e.to_string()))?;
            let mut out = open_output(g, &cfg)?;
            match g.format {
                Format::Csv => trace.write_csv(&mut out)?,
                Format::Jsonl => write_jsonl(trace.slots(), &mut out)?,
            }
            out.flush()?;
        }
    }
    Ok(())
}
