//! `satp`: data generation, training, evaluation and reporting for
//! self-aware trajectory prediction.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use satp_core::data::{generate, write_csv};
use satp_core::pipeline::{
    comparison_table, eval_autoencoder, eval_ensemble, eval_maneuver, eval_mc_dropout, eval_selfaware,
    generator_config, run_ablations, train_autoencoder, train_ensemble, train_maneuver, train_mc_dropout, train_stage1,
    train_stage2, write_method_outputs, Checkpoint, Dataset, EpochLog, MethodEval, RunConfig, StageOutcome,
};
use satp_core::Error;

#[derive(Parser, Debug)]
#[command(name = "satp", version, about = "Self-aware trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Load checkpoints even when they were written under another configuration.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus as records.csv.
    GenData,
    /// Stage 1: train the trajectory predictor.
    TrainPredictor,
    /// Stage 2: train the self-awareness module on the frozen predictor.
    TrainSelfaware,
    /// Train comparison models.
    TrainBaseline {
        #[arg(long, value_enum, default_value_t = Baseline::All)]
        kind: Baseline,
    },
    /// Score the test split and write metrics and cutoff curves.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Method::Selfaware)]
        method: Method,
    },
    /// Run the ablation matrix against the stage-1 predictor.
    Ablate,
    /// Merge every metrics_*.json in the output directory into one table.
    Report,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Maneuver,
    Dropout,
    Ensemble,
    Autoencoder,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Selfaware,
    Maneuver,
    Dropout,
    Ensemble,
    Autoencoder,
    All,
}

const PREDICTOR_FILE: &str = "predictor.ckpt";
const SELFAWARE_FILE: &str = "selfaware.ckpt";
const MANEUVER_FILE: &str = "maneuver.ckpt";
const DROPOUT_FILE: &str = "dropout.ckpt";
const AUTOENCODER_FILE: &str = "autoencoder.ckpt";

fn ensemble_file(i: usize) -> String {
    format!("ensemble_{i}.ckpt")
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn at(stage: &str, e: Error) -> Failure {
        let code = if e.is_divergence() {
            3
        } else if e.is_data_error() {
            2
        } else {
            1
        };
        Failure {
            code,
            message: format!("{stage}: {e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::usage(format!("config: {e}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate().map_err(|e| Failure::usage(format!("config: {e}")))?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    strict: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn prepare_out(&self, stage: &str) -> Result<(), Failure> {
        let dir = &self.cfg.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Failure::at(stage, io_error(dir, e)))
    }

    fn data(&self, stage: &str) -> Result<Dataset, Failure> {
        Dataset::load(&self.cfg).map_err(|e| Failure::at(stage, e))
    }

    fn load(&self, stage: &str, file: &str, digest: String, kind: &str) -> Result<Checkpoint, Failure> {
        let path = self.out(file);
        let expected = self.strict.then_some(digest.as_str());
        let ck = Checkpoint::load(&path, expected).map_err(|e| Failure::at(stage, e))?;
        if !ck.meta.stage.starts_with(kind) {
            return Err(Failure::at(
                stage,
                Error::Checkpoint {
                    path: path.display().to_string(),
                    message: format!("holds a `{}` model, expected `{kind}`", ck.meta.stage),
                },
            ));
        }
        Ok(ck)
    }

    fn save(&self, stage: &str, file: &str, outcome: &StageOutcome) -> Result<(), Failure> {
        outcome
            .checkpoint
            .save(self.out(file))
            .map_err(|e| Failure::at(stage, e))?;
        let log = self.out(&format!("{}.log.csv", file.trim_end_matches(".ckpt")));
        std::fs::write(&log, log_csv(&outcome.log)).map_err(|e| Failure::at(stage, io_error(&log, e)))?;
        eprintln!(
            "{stage}: wrote {} (best epoch {})",
            self.out(file).display(),
            outcome.checkpoint.meta.epoch
        );
        Ok(())
    }

    fn write_eval(&self, stage: &str, eval: &MethodEval) -> Result<(), Failure> {
        let files = write_method_outputs(&self.cfg, eval, &self.cfg.out_dir).map_err(|e| Failure::at(stage, e))?;
        for f in files {
            eprintln!("{stage}: wrote {}", f.display());
        }
        Ok(())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for l in log {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", l.epoch, l.lr, l.train_loss, l.val_loss));
    }
    s
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli)?;
    let ctx = Ctx {
        cfg,
        strict: !cli.allow_config_mismatch,
    };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
        }
        Command::GenData => {
            let stage = "gen-data";
            ctx.prepare_out(stage)?;
            let records = generate(&generator_config(cfg)).map_err(|e| Failure::at(stage, e))?;
            let path = ctx.out("records.csv");
            write_csv(&records, &path).map_err(|e| Failure::at(stage, e))?;
            eprintln!("{stage}: wrote {} records to {}", records.len(), path.display());
        }
        Command::TrainPredictor => {
            let stage = "train-predictor";
            ctx.prepare_out(stage)?;
            let data = ctx.data(stage)?;
            let out = train_stage1(cfg, &data).map_err(|e| Failure::at(stage, e))?;
            ctx.save(stage, PREDICTOR_FILE, &out)?;
        }
        Command::TrainSelfaware => {
            let stage = "train-selfaware";
            let predictor = ctx.load(stage, PREDICTOR_FILE, cfg.predictor_digest(), "stage1")?;
            let data = ctx.data(stage)?;
            let out = train_stage2(cfg, &data, &predictor).map_err(|e| Failure::at(stage, e))?;
            ctx.save(stage, SELFAWARE_FILE, &out)?;
        }
        Command::TrainBaseline { kind } => {
            let stage = "train-baseline";
            ctx.prepare_out(stage)?;
            let all = kind == Baseline::All;
            let predictor = if all || kind == Baseline::Autoencoder {
                Some(ctx.load(stage, PREDICTOR_FILE, cfg.predictor_digest(), "stage1")?)
            } else {
                None
            };
            let data = ctx.data(stage)?;
            let fail = |e| Failure::at(stage, e);
            if all || kind == Baseline::Maneuver {
                ctx.save(stage, MANEUVER_FILE, &train_maneuver(cfg, &data).map_err(fail)?)?;
            }
            if all || kind == Baseline::Dropout {
                ctx.save(stage, DROPOUT_FILE, &train_mc_dropout(cfg, &data).map_err(fail)?)?;
            }
            if all || kind == Baseline::Ensemble {
                for (i, m) in train_ensemble(cfg, &data).map_err(fail)?.iter().enumerate() {
                    ctx.save(stage, &ensemble_file(i), m)?;
                }
            }
            if let Some(p) = predictor {
                ctx.save(
                    stage,
                    AUTOENCODER_FILE,
                    &train_autoencoder(cfg, &data, &p).map_err(fail)?,
                )?;
            }
        }
        Command::Evaluate { method } => {
            let stage = "evaluate";
            let all = method == Method::All;
            let pd = cfg.predictor_digest();
            let needs_predictor = all || matches!(method, Method::Selfaware | Method::Autoencoder);
            let predictor = needs_predictor
                .then(|| ctx.load(stage, PREDICTOR_FILE, pd.clone(), "stage1"))
                .transpose()?;
            let sa = (all || method == Method::Selfaware)
                .then(|| ctx.load(stage, SELFAWARE_FILE, cfg.selfaware_digest(), "stage2"))
                .transpose()?;
            let mu = (all || method == Method::Maneuver)
                .then(|| ctx.load(stage, MANEUVER_FILE, pd.clone(), "maneuver"))
                .transpose()?;
            let dropout = (all || method == Method::Dropout)
                .then(|| ctx.load(stage, DROPOUT_FILE, pd.clone(), "dropout"))
                .transpose()?;
            let ensemble = (all || method == Method::Ensemble)
                .then(|| {
                    (0..cfg.baselines.ensemble_members)
                        .map(|i| ctx.load(stage, &ensemble_file(i), pd.clone(), "ensemble"))
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?;
            let ae = (all || method == Method::Autoencoder)
                .then(|| ctx.load(stage, AUTOENCODER_FILE, pd.clone(), "autoencoder"))
                .transpose()?;
            let data = ctx.data(stage)?;
            let test = &data.test;
            let fail = |e| Failure::at(stage, e);
            ctx.prepare_out(stage)?;
            if let (Some(p), Some(s)) = (&predictor, &sa) {
                let ev = eval_selfaware(cfg, "selfaware", test, (&p.params, &p.buffers), &s.params).map_err(fail)?;
                ctx.write_eval(stage, &ev)?;
            }
            if let Some(m) = &mu {
                for ev in eval_maneuver(cfg, test, m).map_err(fail)? {
                    ctx.write_eval(stage, &ev)?;
                }
            }
            if let Some(d) = &dropout {
                ctx.write_eval(stage, &eval_mc_dropout(cfg, test, d).map_err(fail)?)?;
            }
            if let Some(members) = &ensemble {
                ctx.write_eval(stage, &eval_ensemble(cfg, test, members).map_err(fail)?)?;
            }
            if let (Some(p), Some(a)) = (&predictor, &ae) {
                ctx.write_eval(stage, &eval_autoencoder(cfg, test, p, &a.params).map_err(fail)?)?;
            }
        }
        Command::Ablate => {
            let stage = "ablate";
            let predictor = ctx.load(stage, PREDICTOR_FILE, cfg.predictor_digest(), "stage1")?;
            let data = ctx.data(stage)?;
            let report = run_ablations(cfg, &data, &predictor).map_err(|e| Failure::at(stage, e))?;
            for f in report.write(cfg, &cfg.out_dir).map_err(|e| Failure::at(stage, e))? {
                eprintln!("{stage}: wrote {}", f.display());
            }
        }
        Command::Report => {
            let stage = "report";
            let table = comparison_table(&cfg.out_dir).map_err(|e| Failure::at(stage, e))?;
            let path = ctx.out("comparison.md");
            std::fs::write(&path, &table).map_err(|e| Failure::at(stage, io_error(&path, e)))?;
            print!("{table}");
        }
    }
    Ok(())
}
