//! `tsvforge` command line: pretraining, encoding, forecasting, ablations,
//! synthetic data generation, and report rendering.
//!
//! Every subcommand accepts `--config <json>` with `ExperimentConfig` keys;
//! individual flags override the file. Exit code is 0 on success and the
//! error's category code otherwise.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsvforge::data::SeriesDataset;
use tsvforge::encoder::EncoderParams;
use tsvforge::harness::{
    run_ablation, series_to_csv, synth_series, ExperimentConfig, Method, Report, SynthSpec,
};
use tsvforge::pretrain::pretrain;
use tsvforge::{Result, TsvError};

#[derive(Parser)]
#[command(name = "tsvforge", version, about = "Time-series forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with ExperimentConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// ETT-style CSV dataset (overrides the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Forecast horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    /// Training/selection seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(data) = &self.data {
            cfg.dataset = Some(data.clone());
            cfg.synth = None;
        }
        if let Some(h) = &self.horizons {
            cfg.horizons = h.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON-lines training log path.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode a series with a pretrained checkpoint.
    Encode {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint produced by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Representations output path (JSON tensor).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full ensemble pipeline and write a report.
    Forecast {
        #[command(flatten)]
        common: ConfigArgs,
        /// Report output path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured ablation methods and write a report.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
        /// One of baseline|msm|hybrid|ensemble|all (overrides config).
        #[arg(long)]
        method: Option<String>,
        /// Report output path (JSON); a sibling .csv is written too.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic series CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        t: usize,
        #[arg(long, default_value_t = 1.0)]
        daily_amp: f64,
        #[arg(long, default_value_t = 0.0)]
        weekly_amp: f64,
        #[arg(long, default_value_t = 0.0)]
        trend: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_sd: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a JSON report as CSV on stdout.
    Report {
        /// Report JSON produced by `forecast` or `ablate`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, out, log } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let ds = cfg.load_dataset()?;
            let enc_cfg = cfg.resolved_encoder(ds.input_values()?.shape()[0]);
            let mut pre = cfg.pretrain.clone().unwrap_or_default();
            pre.seed = cfg.seeds[0];
            let result = pretrain(&ds, &enc_cfg, &pre)?;
            result.params.to_checkpoint(&enc_cfg)?.save(&out)?;
            if let Some(log_path) = log {
                let lines: Vec<String> = result
                    .log
                    .iter()
                    .map(serde_json::to_string)
                    .collect::<std::result::Result<_, _>>()?;
                fs::write(log_path, lines.join("\n") + "\n")?;
            }
            println!(
                "pretrained {} steps, final loss {:.6}",
                result.log.len(),
                result.log.last().map_or(f64::NAN, |e| e.loss)
            );
            Ok(())
        }
        Command::Encode {
            common,
            checkpoint,
            out,
        } => {
            let cfg = common.resolve()?;
            let ds = match &cfg.dataset {
                Some(path) => SeriesDataset::load_csv(path)?.with_target_mode(cfg.mode)?,
                None => return Err(TsvError::Config("encode requires --data".into())),
            };
            let ckpt = tsvforge::checkpoint::Checkpoint::load(&checkpoint)?;
            let (params, enc_cfg) = EncoderParams::from_checkpoint(&ckpt)?;
            let reps = tsvforge::encoder::encode_causal_padded(
                &ds.input_values()?,
                &params,
                &enc_cfg,
                tsvforge::ensemble::ENCODE_PAD,
            )?;
            fs::write(&out, serde_json::to_string(&reps)?)?;
            println!("wrote representations {:?} to {}", reps.shape(), out.display());
            Ok(())
        }
        Command::Forecast { common, out } => {
            let mut cfg = common.resolve()?;
            cfg.method = Method::Ensemble;
            let report = run_ablation(&cfg)?;
            fs::write(&out, report.to_json()?)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Ablate {
            common,
            method,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = method {
                cfg.method = m.parse()?;
            }
            let report = run_ablation(&cfg)?;
            fs::write(&out, report.to_json()?)?;
            fs::write(out.with_extension("csv"), report.to_csv())?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Synth {
            t,
            daily_amp,
            weekly_amp,
            trend,
            noise_sd,
            seed,
            out,
        } => {
            let ds = synth_series(&SynthSpec {
                t,
                daily_amp,
                weekly_amp,
                trend,
                noise_sd,
                seed,
            })?;
            fs::write(&out, series_to_csv(&ds))?;
            println!("wrote {} rows to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Report { input } => {
            let report = Report::from_json(&fs::read_to_string(input)?)?;
            print!("{}", report.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
