use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resa_core::harness::{
    cmd_bench, cmd_drift, cmd_generate, cmd_memaccess, cmd_verify, io as results, ExitStatus, RunSpec,
};
use resa_core::{DecodeMode, ResaError};

#[derive(Parser, Debug)]
#[command(
    name = "resa",
    version,
    about = "Rectified sparse attention experiments on a toy GQA decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant suite; exits 1 if any check fails.
    Verify(RunFlags),
    /// Key-cache drift of sparse-only vs rectified decoding, as CSV.
    Drift(RunFlags),
    /// Measured vs predicted element reads per decode step.
    Memaccess(RunFlags),
    /// Per-step wall time of dense vs rectified decoding, as CSV.
    Bench(RunFlags),
    /// Decode and print the emitted tokens.
    Generate(RunFlags),
}

/// Flags override values from `--config`, which override built-in defaults.
#[derive(Args, Debug, Default)]
struct RunFlags {
    /// Flat JSON run spec.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat weight file (RESAW1); otherwise weights are generated from the seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Fraction of the context skipped, in [0, 1).
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    rectify_freq: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    n_min: Option<usize>,
    #[arg(long)]
    n_local: Option<usize>,
    /// Leading layers decoded with dense attention.
    #[arg(long)]
    dense_layers: Option<usize>,
    /// Length of the seeded random prompt.
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    prompt_hex: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// dense, sparse or resa.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated drift probe steps.
    #[arg(long, value_delimiter = ',')]
    probes: Option<Vec<usize>>,
    /// Sweep drift over f in {16,32,64,128} and s in {0.9,0.95,0.98}.
    #[arg(long)]
    sweep: bool,
    /// Comma-separated benchmark prefix lengths.
    #[arg(long, value_delimiter = ',')]
    bench_prefixes: Option<Vec<usize>>,
    #[arg(long)]
    bench_steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(self) -> Result<RunSpec, ResaError> {
        let mut spec = match &self.config {
            Some(path) => RunSpec::from_json_file(path)?,
            None => RunSpec::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    spec.$field = v;
                }
            )*};
        }
        set!(
            seed,
            sparsity,
            rectify_freq,
            block_size,
            n_min,
            n_local,
            dense_layers,
            prefix_len,
            max_steps,
            bench_prefixes,
            bench_steps
        );
        if self.weights.is_some() {
            spec.weights = self.weights;
        }
        if self.prompt_hex.is_some() {
            spec.prompt_hex = self.prompt_hex;
        }
        if self.prompt_file.is_some() {
            spec.prompt_file = self.prompt_file;
        }
        if self.probes.is_some() {
            spec.probes = self.probes;
        }
        if self.out.is_some() {
            spec.out = self.out;
        }
        if let Some(mode) = self.mode {
            spec.mode = mode.parse::<DecodeMode>()?;
        }
        spec.sweep |= self.sweep;
        spec.validate()?;
        Ok(spec)
    }
}

fn output(spec: &RunSpec) -> io::Result<Box<dyn Write>> {
    Ok(match &spec.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(command: Command) -> Result<ExitStatus, ResaError> {
    match command {
        Command::Verify(flags) => {
            let spec = flags.resolve()?;
            let report = cmd_verify(&spec)?;
            for c in &report.checks {
                println!(
                    "[{}] {}: observed {:.3e}, allowed {:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.allowed
                );
            }
            if let Some(path) = &spec.out {
                results::write_jsonl(&report.checks, BufWriter::new(File::create(path)?))?;
            }
            Ok(if report.all_passed() {
                ExitStatus::Success
            } else {
                ExitStatus::InvariantFailure
            })
        }
        Command::Drift(flags) => {
            let spec = flags.resolve()?;
            let rows = cmd_drift(&spec)?;
            results::write_csv(&rows, output(&spec)?)?;
            Ok(ExitStatus::Success)
        }
        Command::Memaccess(flags) => {
            let spec = flags.resolve()?;
            let result = cmd_memaccess(&spec)?;
            let r = &result.report;
            eprintln!(
                "steps {}  cache {}  measured {:.5}  predicted {:.5}",
                r.steps, r.cache_len, r.measured_ratio, r.predicted_ratio
            );
            eprintln!(
                "  selection {:.5}  attention {:.5}  rectification {:.5}  (rectification share {:.4}, predicted {:.4})",
                r.selection_ratio,
                r.attention_ratio,
                r.rectification_ratio,
                r.rectification_share,
                r.predicted_rectification_share
            );
            results::write_jsonl(&[result], output(&spec)?)?;
            Ok(ExitStatus::Success)
        }
        Command::Bench(flags) => {
            let spec = flags.resolve()?;
            let rows = cmd_bench(&spec)?;
            results::write_csv(&rows, output(&spec)?)?;
            Ok(ExitStatus::Success)
        }
        Command::Generate(flags) => {
            let spec = flags.resolve()?;
            let (tokens, row) = cmd_generate(&spec)?;
            let bytes: Vec<String> = tokens.iter().map(|t| format!("{t:02x}")).collect();
            eprintln!("{}", bytes.join(" "));
            results::write_jsonl(&[row], output(&spec)?)?;
            Ok(ExitStatus::Success)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match run(cli.command) {
        Ok(status) => status,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_status()
        }
    };
    ExitCode::from(status.code() as u8)
}
