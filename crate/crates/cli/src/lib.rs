//! Command-line front end: model container, PNG I/O, run configuration and
//! the `derain`, `rde`, `train`, `synth`, `eval` and `bench` commands.

pub mod commands;
pub mod config;
pub mod container;
pub mod imageio;

use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use config::{resolve_iterations, BenchSection, RunConfig};
use container::{load_model, ContainerError};

/// Exit status for configuration and validation failures.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("model container: {0}")]
    Container(#[from] ContainerError),
    #[error("{0}")]
    Core(#[from] codenet::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Container(ContainerError::Io(_)) => EXIT_RUNTIME,
            CliError::Container(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "codenet", version, about = "Sparse-coding rain removal and rain density estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model container.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Output directory (derain, synth, train) or CSV file (eval, bench).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Iteration count; `bench` takes a comma-separated list.
    #[arg(long = "T", global = true)]
    pub t: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Also write the rescaled rain layer as `{stem}_rain.png`.
    #[arg(long, global = true)]
    pub emit_rain_layer: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Remove rain from PNG images or directories of them.
    Derain {
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Print the rain density estimate of each image.
    Rde {
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Two-stage training on a synthetic corpus.
    Train {
        #[command(flatten)]
        opts: Opts,
    },
    /// Generate a synthetic rainy/clean corpus.
    Synth {
        #[command(flatten)]
        opts: Opts,
    },
    /// PSNR/SSIM table over a corpus directory.
    Eval {
        corpus: Option<PathBuf>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Runtime and PSNR as a function of T.
    Bench {
        corpus: Option<PathBuf>,
        #[command(flatten)]
        opts: Opts,
    },
}

fn parse_t_list(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Config(format!("bad T value {p:?}")))
        })
        .collect()
}

struct Resolved {
    cfg: RunConfig,
    opts: Opts,
}

impl Resolved {
    fn new(opts: Opts) -> Result<Self, CliError> {
        let cfg = match &opts.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(Self { cfg, opts })
    }

    fn model(&self) -> Result<codenet::net::Model, CliError> {
        let path = self
            .opts
            .model
            .as_ref()
            .or(self.cfg.model.as_ref())
            .ok_or_else(|| CliError::Config("no model given (--model)".into()))?;
        let mut m = load_model(path)?;
        if let Some(o) = &self.cfg.toggles {
            o.apply(&mut m)?;
        }
        Ok(m)
    }

    fn single_t(&self) -> Result<Option<usize>, CliError> {
        match &self.opts.t {
            Some(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("bad T value {s:?}"))),
            None => Ok(self.cfg.t),
        }
    }

    fn out(&self) -> Option<PathBuf> {
        self.opts.out.clone().or(self.cfg.output.clone())
    }

    fn jobs(&self) -> usize {
        self.opts.jobs.or(self.cfg.jobs).unwrap_or(1)
    }

    fn seed(&self) -> Option<u64> {
        self.opts.seed.or(self.cfg.seed)
    }

    fn inputs(&self, given: Vec<PathBuf>) -> Vec<PathBuf> {
        if given.is_empty() {
            self.cfg.input.clone().unwrap_or_default()
        } else {
            given
        }
    }

    fn corpus(&self, given: Option<PathBuf>) -> Result<PathBuf, CliError> {
        given
            .or_else(|| self.cfg.input.as_ref().and_then(|v| v.first().cloned()))
            .ok_or_else(|| CliError::Config("no corpus directory given".into()))
    }
}

fn table_sink<'a>(out: Option<&Path>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>, CliError> {
    Ok(match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(stdout),
    })
}

/// Runs one parsed command, writing reports and tables to `stdout`.
pub fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Derain { inputs, opts } => {
            let r = Resolved::new(opts)?;
            let model = r.model()?;
            let iterations = resolve_iterations(&model, r.single_t()?)?;
            let out = r
                .out()
                .ok_or_else(|| CliError::Config("no output directory given (--out)".into()))?;
            let emit = r.opts.emit_rain_layer || r.cfg.emit_rain_layer.unwrap_or(false);
            let dopts = commands::DerainOptions {
                iterations,
                out: Some(&out),
                jobs: r.jobs(),
                emit_rain_layer: emit,
            };
            commands::derain(&model, &r.inputs(inputs), &dopts, stdout)?;
        }
        Command::Rde { inputs, opts } => {
            let r = Resolved::new(opts)?;
            let model = r.model()?;
            let iterations = resolve_iterations(&model, r.single_t()?)?;
            commands::rde(&model, &r.inputs(inputs), iterations, r.jobs(), stdout)?;
        }
        Command::Train { opts } => {
            let r = Resolved::new(opts)?;
            let mut section = r
                .cfg
                .train
                .clone()
                .ok_or_else(|| CliError::Config("config has no [train] section".into()))?;
            if let Some(s) = r.seed() {
                section.schedule.seed = s;
            }
            if let Some(j) = r.opts.jobs.or(r.cfg.jobs) {
                section.schedule.threads = j;
            }
            let out = r
                .out()
                .ok_or_else(|| CliError::Config("no output directory given (--out)".into()))?;
            let res = commands::train(&section, &out)?;
            writeln!(
                stdout,
                "stage1 {}\nstage2 {}\nlog {}\nfinal loss {:.6}",
                res.stage1.display(),
                res.stage2.display(),
                res.log.display(),
                res.final_loss
            )?;
        }
        Command::Synth { opts } => {
            let r = Resolved::new(opts)?;
            let section = r.cfg.synth.clone().unwrap_or_default();
            let out = r
                .out()
                .ok_or_else(|| CliError::Config("no output directory given (--out)".into()))?;
            let rows = commands::synth(&out, r.seed().unwrap_or(0), &section)?;
            writeln!(stdout, "wrote {} pairs to {}", rows.len(), out.display())?;
        }
        Command::Eval { corpus, opts } => {
            let r = Resolved::new(opts)?;
            let model = r.model()?;
            let iterations = resolve_iterations(&model, r.single_t()?)?;
            let pairs = commands::load_corpus(&r.corpus(corpus)?)?;
            let out = r.out();
            let mut sink = table_sink(out.as_deref(), stdout)?;
            commands::eval(&model, &pairs, iterations, r.jobs(), &mut sink)?;
        }
        Command::Bench { corpus, opts } => {
            let r = Resolved::new(opts)?;
            let model = r.model()?;
            let mut section: BenchSection = r.cfg.bench.clone().unwrap_or_default();
            if let Some(s) = &r.opts.t {
                section.t_values = parse_t_list(s)?;
            } else if let Some(t) = r.cfg.t {
                section.t_values = vec![t];
            }
            let pairs = commands::load_corpus(&r.corpus(corpus)?)?;
            let out = r.out();
            let mut sink = table_sink(out.as_deref(), stdout)?;
            commands::bench(&model, &pairs, &section, &mut sink)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return e.exit_code();
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
