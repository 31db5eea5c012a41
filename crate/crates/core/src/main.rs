use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use span_diffusion::config::RunConfig;
use span_diffusion::corpus::{
    load_dataset, make_synthetic_corpus, write_span_json, Dataset, DatasetFormat, LabelVocab,
    SyntheticSpec,
};
use span_diffusion::denoiser::{load_checkpoint, Denoiser, EncoderAdapter, FeatureStore};
use span_diffusion::error::{Error, Result};
use span_diffusion::eval::{
    ablate, check_aligned, compute_prf, sweep_gamma, sweep_keval, AblateBudget, AblationAxis,
    EvalReport, Report,
};
use span_diffusion::sampler::{predict_file, SamplerConfig};
use span_diffusion::schedule::VarianceSchedule;
use span_diffusion::trainer;

#[derive(Parser)]
#[command(
    name = "span-diffusion",
    about = "Named entity recognition by denoising diffusion over span boundaries",
    version
)]
struct Cli {
    /// Cap the rayon thread pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand: a config file plus per-field overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "k-eval")]
    k_eval: Option<usize>,
    #[arg(long)]
    gamma: Option<usize>,
    /// Filtering threshold phi.
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    epoch: Option<usize>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "hidden-size")]
    hidden_size: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    expansion: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.k_eval {
            cfg.k_eval = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.phi {
            cfg.threshold = v;
        }
        if let Some(v) = self.epoch {
            cfg.epoch = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.hidden_size {
            cfg.hidden_size = v;
        }
        if let Some(v) = self.timesteps {
            cfg.timesteps = v;
        }
        if let Some(v) = &self.scheduler {
            cfg.scheduler = FromStr::from_str(v)?;
        }
        if let Some(v) = &self.expansion {
            cfg.expansion = FromStr::from_str(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and select the best checkpoint by dev F1.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// span_json or conll_bio.
        #[arg(long, default_value = "span_json")]
        format: String,
        #[arg(long = "out-dir", default_value = "runs/latest")]
        out_dir: PathBuf,
        /// Precomputed feature file; switches to the external encoder adapter.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Score predictions: either run a model over gold data, or compare a
    /// prediction file against a gold file.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Gold dataset.
        #[arg(long)]
        data: PathBuf,
        /// Prediction file (file-vs-file mode; no model needed).
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long, default_value = "span_json")]
        format: String,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Write span_json predictions (with scores) for a dataset.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "span_json")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Timing and quality sweeps over gamma and/or k_eval.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "span_json")]
        format: String,
        /// Comma-separated gamma values for the timing sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        gammas: Vec<usize>,
        /// Comma-separated k_eval values (empty = skip the k_eval sweep).
        #[arg(long, value_delimiter = ',')]
        kevals: Vec<usize>,
        /// Sampling seeds averaged in the k_eval sweep.
        #[arg(long, default_value_t = 3)]
        sweep_seeds: usize,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Train small synthetic models per variant and tabulate dev F1.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// scheduler | expansion
        #[arg(long)]
        axis: String,
        /// Required: each variant trains a model from scratch.
        #[arg(long = "acknowledge-budget")]
        acknowledge_budget: bool,
        #[arg(long, default_value_t = 300)]
        train_sentences: usize,
        #[arg(long, default_value_t = 60)]
        dev_sentences: usize,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long = "json-out")]
        json_out: Option<PathBuf>,
    },
    /// Generate a synthetic train/dev corpus as span_json files.
    MakeSynthetic {
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        sentences: usize,
        #[arg(long, default_value_t = 300)]
        dev_sentences: usize,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 2.0)]
        avg_entities: f64,
        #[arg(long, default_value_t = 0.2)]
        nesting: f64,
        #[arg(long, default_value_t = 13)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn parse_format(s: &str) -> Result<DatasetFormat> {
    DatasetFormat::from_str(s)
}

fn load_model(path: &PathBuf, features: &Option<PathBuf>) -> Result<(Denoiser, RunConfig)> {
    let (mut model, extra) = load_checkpoint(path)?;
    let stored: RunConfig = serde_json::from_value(extra).unwrap_or_default();
    if let Some(f) = features {
        model.set_adapter(EncoderAdapter::External(FeatureStore::load(f)?));
    }
    Ok((model, stored))
}

fn print_report(report: &EvalReport) {
    println!("precision  recall     f1         gold  pred  correct");
    println!(
        "{:<10.4} {:<10.4} {:<10.4} {:<5} {:<5} {:<7}",
        report.precision, report.recall, report.f1, report.gold, report.predicted, report.correct
    );
    for (name, t) in &report.per_type {
        println!(
            "  {name:<12} P {:<8.4} R {:<8.4} F1 {:<8.4} ({} gold)",
            t.precision, t.recall, t.f1, t.gold
        );
    }
}

fn write_json(path: &Option<PathBuf>, json: String) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, json).map_err(|e| Error::io(p.display().to_string(), e))?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, train, dev, format, out_dir, features } => {
            let cfg = cfg.resolve()?;
            let format = parse_format(&format)?;
            let train_ds = load_dataset(&train, format, LabelVocab::new())?;
            let dev_ds = load_dataset(&dev, format, train_ds.labels.clone())?;
            // dev may introduce labels the model cannot emit; refuse early
            if dev_ds.labels.len() != train_ds.labels.len() {
                return Err(Error::Validation(format!(
                    "dev set introduces {} label(s) unseen in training data",
                    dev_ds.labels.len() - train_ds.labels.len()
                )));
            }
            let adapter = match &features {
                Some(f) => EncoderAdapter::External(FeatureStore::load(f)?),
                None => EncoderAdapter::Toy,
            };
            let report = trainer::train(&cfg, &train_ds, &dev_ds, adapter, &out_dir)?;
            println!(
                "best dev F1 {:.4}; checkpoints: {} (best), {} (last); log: {}",
                report.best_dev_f1,
                report.best_path.display(),
                report.last_path.display(),
                report.log_path.display()
            );
            Ok(())
        }
        Command::Eval { cfg, model, data, pred, format, json_out, features } => {
            let cfg = cfg.resolve()?;
            let format = parse_format(&format)?;
            let gold_ds = load_dataset(&data, format, LabelVocab::new())?;
            let report = match (&pred, &model) {
                (Some(pred_path), _) => {
                    let pred_ds = load_dataset(pred_path, format, gold_ds.labels.clone())?;
                    check_aligned(&pred_ds, &gold_ds)?;
                    let pred: Vec<_> =
                        pred_ds.items.iter().map(|(_, e)| e.entities.clone()).collect();
                    let gold: Vec<_> =
                        gold_ds.items.iter().map(|(_, e)| e.entities.clone()).collect();
                    compute_prf(&pred, &gold, &pred_ds.labels)?
                }
                (None, Some(model_path)) => {
                    let (model, stored) = load_model(model_path, &features)?;
                    let sched = VarianceSchedule::new(stored.scheduler, stored.timesteps)?;
                    let sampler = SamplerConfig {
                        k_eval: cfg.k_eval,
                        gamma: cfg.gamma,
                        phi: cfg.threshold,
                        seed: cfg.seed,
                    };
                    span_diffusion::eval::evaluate_model(
                        &model,
                        &gold_ds,
                        &sampler,
                        &sched,
                        stored.scale_factor,
                    )?
                }
                (None, None) => {
                    return Err(Error::Validation(
                        "eval needs either --model (run inference) or --pred (score a file)"
                            .into(),
                    ))
                }
            };
            print_report(&report);
            write_json(&json_out, Report::new(&cfg, &report).to_json()?)?;
            Ok(())
        }
        Command::Predict { cfg, model, data, format, out, features } => {
            let cfg = cfg.resolve()?;
            let format = parse_format(&format)?;
            let (model, stored) = load_model(&model, &features)?;
            let ds = load_dataset(&data, format, model.label_vocab.clone())?;
            let sched = VarianceSchedule::new(stored.scheduler, stored.timesteps)?;
            let sampler = SamplerConfig {
                k_eval: cfg.k_eval,
                gamma: cfg.gamma,
                phi: cfg.threshold,
                seed: cfg.seed,
            };
            predict_file(
                &model,
                &ds.items,
                &model.label_vocab,
                &sampler,
                &sched,
                stored.scale_factor,
                &out,
            )?;
            println!("predictions written to {}", out.display());
            Ok(())
        }
        Command::Benchmark {
            cfg,
            model,
            data,
            format,
            gammas,
            kevals,
            sweep_seeds,
            json_out,
            features,
        } => {
            let cfg = cfg.resolve()?;
            let format = parse_format(&format)?;
            let (model, stored) = load_model(&model, &features)?;
            let ds = load_dataset(&data, format, model.label_vocab.clone())?;
            let sched = VarianceSchedule::new(stored.scheduler, stored.timesteps)?;
            let base = SamplerConfig {
                k_eval: cfg.k_eval,
                gamma: cfg.gamma,
                phi: cfg.threshold,
                seed: cfg.seed,
            };

            let mut payload = serde_json::Map::new();
            if !gammas.is_empty() {
                let rows = sweep_gamma(&model, &ds, &gammas, &base, &sched, stored.scale_factor)?;
                println!(
                    "gamma  f1      sents/s  wall_s   ({})",
                    span_diffusion::eval::TIMED_REGION
                );
                for r in &rows {
                    println!(
                        "{:<6} {:<7.4} {:<8.2} {:<8.3}",
                        r.gamma, r.f1, r.sentences_per_sec, r.wall_seconds
                    );
                }
                payload.insert("gamma_sweep".into(), serde_json::to_value(&rows).unwrap());
            }
            if !kevals.is_empty() {
                let seeds: Vec<u64> =
                    (0..sweep_seeds.max(1) as u64).map(|i| cfg.seed + i).collect();
                let rows = sweep_keval(
                    &model,
                    &ds,
                    &kevals,
                    &base,
                    &sched,
                    stored.scale_factor,
                    &seeds,
                )?;
                println!("k_eval  precision  recall   f1   (avg over {} seeds)", seeds.len());
                for r in &rows {
                    println!(
                        "{:<7} {:<10.4} {:<8.4} {:<7.4}",
                        r.k_eval, r.precision, r.recall, r.f1
                    );
                }
                payload.insert("k_eval_sweep".into(), serde_json::to_value(&rows).unwrap());
            }
            write_json(
                &json_out,
                Report::new(&cfg, serde_json::Value::Object(payload)).with_timing().to_json()?,
            )?;
            Ok(())
        }
        Command::Ablate {
            cfg,
            axis,
            acknowledge_budget,
            train_sentences,
            dev_sentences,
            epochs,
            json_out,
        } => {
            if !acknowledge_budget {
                return Err(Error::Validation(
                    "ablation trains one model per variant; pass --acknowledge-budget to proceed"
                        .into(),
                ));
            }
            let cfg = cfg.resolve()?;
            let axis = AblationAxis::from_str(&axis)?;
            let budget = AblateBudget { train_sentences, dev_sentences, epochs };
            let rows = ablate(axis, &cfg, &budget)?;
            println!("variant              dev_f1");
            for r in &rows {
                println!("{:<20} {:.4}", r.variant, r.dev_f1);
            }
            write_json(&json_out, Report::new(&cfg, &rows).to_json()?)?;
            Ok(())
        }
        Command::MakeSynthetic {
            out_dir,
            sentences,
            dev_sentences,
            vocab,
            avg_entities,
            nesting,
            seed,
        } => {
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            let write = |ds: &Dataset, name: &str| -> Result<PathBuf> {
                let path = out_dir.join(name);
                write_span_json(&ds.items, &ds.labels, None, &path)?;
                Ok(path)
            };
            let train = make_synthetic_corpus(&SyntheticSpec {
                sentences,
                vocab_size: vocab,
                avg_entities,
                nesting_rate: nesting,
                seed,
            })?;
            let dev = make_synthetic_corpus(&SyntheticSpec {
                sentences: dev_sentences,
                vocab_size: vocab,
                avg_entities,
                nesting_rate: nesting,
                seed: seed + 1,
            })?;
            let train_path = write(&train, "train.jsonl")?;
            let dev_path = write(&dev, "dev.jsonl")?;
            println!(
                "wrote {} ({} sentences) and {} ({} sentences)",
                train_path.display(),
                train.len(),
                dev_path.display(),
                dev.len()
            );
            Ok(())
        }
    }
}
