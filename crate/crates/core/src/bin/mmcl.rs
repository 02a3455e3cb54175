use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use mmcl::config::{ExperimentConfig, PredictorKind};
use mmcl::data::{import_features, Dataset, FeatureFormat};
use mmcl::eval::{evaluate, RetrievalSplit};
use mmcl::experiment::{curve_csv, metrics_csv, run, sweep, sweep_csv, synthetic_data, SweepParam};
use mmcl::io::write_atomic;
use mmcl::labels::write_labels;
use mmcl::loss::{gradient_sweep, score_grid, sweep_to_csv, SweepCurve};
use mmcl::{EmbeddingModel, Error, MemoryBank, Result};

#[derive(Parser)]
#[command(name = "mmcl", version, about = "Memory-bank multi-label training on feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file, or `default` for the built-in one.
    #[arg(long, default_value = "default")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "MMCL_OUT_DIR", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test pair as train.csv and test.csv.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full training loop and write model, bank, labels and logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.csv and test.csv; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict multi-class labels from a memory bank snapshot.
    PredictLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: PathBuf,
        /// Defaults to the config predictor.
        #[arg(long, value_enum)]
        predictor: Option<PredictorArg>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Retrieval metrics on a labelled feature file, optionally embedded by a model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Feature file (CSV or JSON lines) with identities.
        #[arg(long)]
        features: PathBuf,
        /// Separate gallery file; otherwise queries are split off `--features`.
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Gradient magnitude against positive-class score for MCL-tau and MMCL.
    GradSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
    },
    /// One training run per grid value and seed.
    ParamSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: ParamArg,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Mplp,
    Ss,
    Knn,
    Single,
}

impl From<PredictorArg> for PredictorKind {
    fn from(p: PredictorArg) -> Self {
        match p {
            PredictorArg::Mplp => PredictorKind::Mplp,
            PredictorArg::Ss => PredictorKind::Ss,
            PredictorArg::Knn => PredictorKind::Knn,
            PredictorArg::Single => PredictorKind::Single,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    T,
    Delta,
    R,
    #[value(name = "K", alias = "k")]
    K,
}

impl From<ParamArg> for SweepParam {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::T => SweepParam::T,
            ParamArg::Delta => SweepParam::Delta,
            ParamArg::R => SweepParam::R,
            ParamArg::K => SweepParam::K,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    write_atomic(&p, contents.as_bytes())?;
    info!("wrote {}", p.display());
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    import_features(path, FeatureFormat::from_path(path))
}

fn embed(model: Option<&EmbeddingModel>, data: &Dataset) -> Result<ndarray::Array2<f64>> {
    match model {
        Some(m) => m.forward_batch(data.observations().view()),
        None => Ok(data.observations()),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { common } => {
            let cfg = common.load()?;
            let data = synthetic_data(&cfg)?;
            let dir = common.out_dir()?;
            write(dir, "train.csv", &data.train.to_csv())?;
            write(dir, "test.csv", &data.test.to_csv())?;
            write(dir, "config.toml", &cfg.to_toml())
        }
        Command::Train { common, data } => {
            let cfg = common.load()?;
            let data = match data {
                Some(d) => mmcl::data::SyntheticData {
                    train: load_dataset(&d.join("train.csv"))?,
                    test: load_dataset(&d.join("test.csv"))?,
                },
                None => synthetic_data(&cfg)?,
            };
            let out = run(&cfg, &data)?;
            let dir = common.out_dir()?;
            out.trainer.model().save_json(&dir.join("model.json"))?;
            out.trainer.bank().write_csv(&dir.join("bank.csv"))?;
            write_labels(&dir.join("labels.csv"), out.trainer.labels())?;
            write(dir, "metrics.csv", &metrics_csv(&out.epochs))?;
            write(dir, "label_curve.csv", &curve_csv(&out.curve))?;
            write(dir, "summary.json", &json(&out.trained))?;
            write(dir, "untrained_summary.json", &json(&out.untrained))?;
            write(dir, "config.toml", &cfg.to_toml())?;
            match out.collapse {
                Some(c) => Err(Error::Degenerate(format!(
                    "training stopped in epoch {}, artifacts describe the last completed epoch: {}",
                    c.epoch, c.msg
                ))),
                None => Ok(()),
            }
        }
        Command::PredictLabels {
            common,
            bank,
            predictor,
            threshold,
            k,
        } => {
            let mut cfg = common.load()?;
            if let Some(p) = predictor {
                cfg.labels.predictor = p.into();
            }
            if let Some(t) = threshold {
                cfg.labels.threshold = t;
            }
            if let Some(k) = k {
                cfg.labels.knn_k = k;
            }
            cfg.validate()?;
            let bank = MemoryBank::read_csv(&bank)?;
            let labels = cfg.labels.predictor().predict_all(&bank)?;
            write_labels(&common.out_dir()?.join("labels.csv"), &labels)
        }
        Command::Eval {
            common,
            features,
            gallery,
            model,
        } => {
            let cfg = common.load()?;
            let model = model.as_deref().map(EmbeddingModel::load_json).transpose()?;
            let query = load_dataset(&features)?;
            let split = match gallery {
                Some(g) => {
                    let g = load_dataset(&g)?;
                    RetrievalSplit::from_pair(embed(model.as_ref(), &query)?, &query, embed(model.as_ref(), &g)?, &g)?
                }
                None => RetrievalSplit::from_dataset(
                    &embed(model.as_ref(), &query)?,
                    &query,
                    cfg.eval.queries_per_identity,
                )?,
            };
            let report = evaluate(&split)?;
            let dir = common.out_dir()?;
            let mut cmc = String::from("rank,accuracy\n");
            for (k, v) in report.cmc.iter().enumerate() {
                cmc.push_str(&format!("{},{:.10}\n", k + 1, v));
            }
            write(dir, "cmc.csv", &cmc)?;
            write(dir, "summary.json", &json(&report.summary()))
        }
        Command::GradSweep { common, step } => {
            let scores = score_grid(-1.0, 1.0, step)?;
            let rows = gradient_sweep(&SweepCurve::default_set(), &scores)?;
            write(common.out_dir()?, "grad_sweep.csv", &sweep_to_csv(&rows))
        }
        Command::ParamSweep {
            common,
            param,
            grid,
            seeds,
        } => {
            let cfg = common.load()?;
            let param: SweepParam = param.into();
            let cells = sweep(param, &grid, &cfg, &seeds)?;
            write(common.out_dir()?, &format!("sweep_{}.csv", param.name()), &sweep_csv(&cells))
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            eprintln!("error kind=usage msg={:?}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
