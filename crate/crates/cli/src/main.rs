use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use debias::lm::GenerationMode;
use debias::pipeline::{validate_config, ExperimentConfig, GenerateOptions, Run, Stage};

/// Decoding-time political debiasing on a planted-bias corpus.
#[derive(Debug, Parser)]
#[command(name = "debias", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the run directory's stored
    /// config, or the built-in defaults for a new run.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory. Falls back to DEBIAS_OUT_DIR, then the config's out_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Generation worker threads.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Vanilla,
    Emb,
    Cls,
    Naive,
}

impl From<Mode> for GenerationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Vanilla => GenerationMode::Vanilla,
            Mode::Emb => GenerationMode::Emb,
            Mode::Cls => GenerationMode::Cls,
            Mode::Naive => GenerationMode::Naive,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the planted-bias corpus and its vocabulary.
    SynthCorpus(Common),
    /// Train the language model.
    TrainLm(Common),
    /// Train the judge classifier.
    TrainJudge(Common),
    /// Train the debias head on language-model states.
    TrainDebiasHead(Common),
    /// Extract the two bias-word lexicons.
    ExtractBiasWords(Common),
    /// Generate continuations for every prompt in one mode.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Starting calibration strength.
        #[arg(long, value_name = "F")]
        lambda: Option<f64>,
        /// KL threshold; the mode's default when absent.
        #[arg(long, value_name = "F")]
        sigma: Option<f64>,
    },
    /// Word-swap baseline over the vanilla generations.
    BaselineNaive(Common),
    /// Indirect and direct bias plus perplexity of every generated mode.
    EvaluateBias(Common),
    /// Bias and perplexity across the strength grid.
    EvaluateTradeoff(Common),
    /// Render the report tables and score histograms.
    Report(Common),
    /// Every stage in order, skipping those already complete.
    Run(Common),
    /// Check a config file and list every problem.
    ValidateConfig {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<debias::DebiasError> for Failure {
    fn from(e: debias::DebiasError) -> Self {
        Failure::Run(e.to_string())
    }
}

fn out_dir(common: &Common, config: Option<&ExperimentConfig>) -> Result<PathBuf, Failure> {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("DEBIAS_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| config.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set DEBIAS_OUT_DIR".into()))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    validate_config(path).map_err(|errs| Failure::Run(errs.join("; ")))
}

fn open_run(common: &Common) -> Result<Run, Failure> {
    let mut run = match &common.config {
        Some(path) => {
            let mut config = load_config(path)?;
            if let Some(s) = common.seed {
                config.seed = s;
            }
            let dir = out_dir(common, Some(&config))?;
            let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            Run::open(&dir, &config, base)?
        }
        None => {
            let dir = out_dir(common, None)?;
            if dir.join(debias::pipeline::files::CONFIG).exists() && common.seed.is_none() {
                Run::resume(&dir)?
            } else {
                let config = ExperimentConfig {
                    seed: common.seed.unwrap_or(ExperimentConfig::default().seed),
                    ..Default::default()
                };
                Run::open(&dir, &config, Path::new("."))?
            }
        }
    };
    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be >= 1".into()));
        }
        run.set_jobs(j);
    }
    Ok(run)
}

fn stage(common: &Common, stage: Stage, generate: Option<GenerateOptions>) -> Result<(), Failure> {
    let mut run = open_run(common)?;
    run.execute(stage, generate)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthCorpus(c) => stage(&c, Stage::SynthCorpus, None),
        Command::TrainLm(c) => stage(&c, Stage::TrainLm, None),
        Command::TrainJudge(c) => stage(&c, Stage::TrainJudge, None),
        Command::TrainDebiasHead(c) => stage(&c, Stage::TrainDebiasHead, None),
        Command::ExtractBiasWords(c) => stage(&c, Stage::ExtractBiasWords, None),
        Command::Generate {
            common,
            mode,
            lambda,
            sigma,
        } => {
            let mode = GenerationMode::from(mode);
            let calibrated = matches!(mode, GenerationMode::Emb | GenerationMode::Cls);
            if !calibrated && (lambda.is_some() || sigma.is_some()) {
                eprintln!("warning: --lambda and --sigma are ignored in {mode} mode");
            }
            let opts = GenerateOptions {
                mode,
                lambda: lambda.filter(|_| calibrated),
                sigma: sigma.filter(|_| calibrated),
            };
            stage(&common, Stage::Generate, Some(opts))
        }
        Command::BaselineNaive(c) => stage(&c, Stage::Generate, Some(GenerateOptions::mode(GenerationMode::Naive))),
        Command::EvaluateBias(c) => stage(&c, Stage::EvaluateBias, None),
        Command::EvaluateTradeoff(c) => stage(&c, Stage::EvaluateTradeoff, None),
        Command::Report(c) => stage(&c, Stage::Report, None),
        Command::Run(c) => {
            let mut run = open_run(&c)?;
            let id = run.run_all()?.run_id.clone();
            println!("run {id} complete in {}", run.dir().display());
            Ok(())
        }
        Command::ValidateConfig { config } => match validate_config(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                Ok(())
            }
            Err(errs) => {
                for e in &errs {
                    eprintln!("{e}");
                }
                Err(Failure::Run(format!("{} problem(s) in {}", errs.len(), config.display())))
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
