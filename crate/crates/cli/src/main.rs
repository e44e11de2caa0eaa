//! `unimatch` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 training divergence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use unimatch::harness::serve::{self, ServeState};
use unimatch::harness::{ablate, dump_representations, evaluate, EvalConfig};
use unimatch::retrieval::{build_index, retrieve, HnswConfig, HnswIndex, RetrievalQuery, Scorer};
use unimatch::synthdata::{generate, GeneratorConfig, SplitData, UserContext};
use unimatch::trainer::{train, write_metrics, TrainConfig};
use unimatch::{Error, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "unimatch", version, about = "Unified multi-entity, multi-domain matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and split it into train and test.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes `checkpoint.bin` and `metrics.csv` into `--out`.
    Train {
        /// JSON with optional `model` and `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall-all (and optionally recall-retrieval) sweep over N.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Sweep CSV, one row per N.
        #[arg(long)]
        out: PathBuf,
        /// Full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the graph index over the model's entity vectors.
    BuildIndex {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve the top-k entities for one user; prints one JSON line.
    Retrieve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// User context as JSON, or `@path` to read it from a file.
        #[arg(long)]
        user: String,
        #[arg(long)]
        domain: usize,
        #[arg(long)]
        topk: usize,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Serve line-delimited JSON requests over TCP.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, default_value_t = 200)]
        beam: usize,
        #[arg(long, default_value_t = serve::DEFAULT_MAX_REQUEST_BYTES)]
        max_request_bytes: usize,
    },
    /// Train and evaluate the five ablation rows for each seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional `model`, `train` and `eval` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump shared representations and their projections for test samples.
    DumpRepr {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 500)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Combined configuration file for `train` and `ablate`.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalConfig,
}

const CHECKPOINT_FILE: &str = "checkpoint.bin";

enum Failure {
    Config(String),
    Diverged(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Schema(_) | Error::Json(_) => Failure::Config(e.to_string()),
            e if e.is_non_finite() => Failure::Diverged(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<SplitData, Failure> {
    SplitData::load(dir).map_err(|e| Failure::Config(format!("dataset {}: {e}", dir.display())))
}

/// Loads a checkpoint file, or `checkpoint.bin` inside a training output directory.
fn load_model(path: &Path) -> Result<Model, Failure> {
    let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
    Model::load(&file).map_err(|e| Failure::Config(format!("checkpoint {}: {e}", path.display())))
}

fn load_index(path: &Path) -> Result<HnswIndex, Failure> {
    HnswIndex::load(path).map_err(|e| Failure::Config(format!("index {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg: GeneratorConfig = read_config(config.as_deref())?;
            let (data, report) = SplitData::from_dataset(generate(&cfg)?, &cfg)?;
            data.save(&out, &cfg)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Train { config, data, out } => {
            let cfg: RunConfig = read_config(config.as_deref())?;
            cfg.train.validate()?;
            let data = load_data(&data)?;
            let model = Model::new(cfg.model)?;
            let result = train(model, &data.catalog, &data.train, &cfg.train)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            result.model.save(&out.join(CHECKPOINT_FILE))?;
            write_metrics(&out.join("metrics.csv"), &result.metrics)?;
            if let Some(step) = result.diverged_at {
                return Err(Failure::Diverged(format!(
                    "loss became non-finite at step {step}; saved the last finite parameters"
                )));
            }
        }
        Command::Eval {
            data,
            checkpoint,
            config,
            index,
            out,
            report,
        } => {
            let cfg: EvalConfig = read_config(config.as_deref())?;
            let data = load_data(&data)?;
            let model = load_model(&checkpoint)?;
            let index = index.as_deref().map(load_index).transpose()?;
            let rep = evaluate(&model, &data, &cfg, index.as_ref())?;
            rep.write_sweep_csv(&out)?;
            if let Some(path) = report {
                std::fs::write(path, serde_json::to_string_pretty(&rep).expect("report serializes"))
                    .map_err(|e| Failure::Runtime(e.to_string()))?;
            }
        }
        Command::BuildIndex {
            data,
            checkpoint,
            config,
            out,
        } => {
            let cfg: HnswConfig = read_config(config.as_deref())?;
            let data = load_data(&data)?;
            let model = load_model(&checkpoint)?;
            let index = build_index(&Scorer::new(&model, &data.catalog), cfg)?;
            index.save(&out)?;
        }
        Command::Retrieve {
            data,
            checkpoint,
            index,
            user,
            domain,
            topk,
            beam,
        } => {
            let text = match user.strip_prefix('@') {
                Some(path) => std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{path}: {e}")))?,
                None => user,
            };
            let user: UserContext =
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("user context: {e}")))?;
            let data = load_data(&data)?;
            let model = load_model(&checkpoint)?;
            let index = load_index(&index)?;
            let scorer = Scorer::new(&model, &data.catalog);
            let query = RetrievalQuery {
                user,
                domain,
                k_top: topk,
                beam: beam.unwrap_or(topk.max(200)),
                ef_search: None,
            };
            let result = retrieve(&index, &scorer, &query)?;
            println!("{}", serde_json::to_string(&result).expect("result serializes"));
        }
        Command::Serve {
            data,
            checkpoint,
            index,
            addr,
            beam,
            max_request_bytes,
        } => {
            let data = load_data(&data)?;
            let model = load_model(&checkpoint)?;
            let index = load_index(&index)?;
            let mut state = ServeState::new(model, data.catalog, index)?;
            state.default_beam = beam;
            state.max_request_bytes = max_request_bytes;
            let listener = std::net::TcpListener::bind(&addr).map_err(|e| Failure::Config(format!("{addr}: {e}")))?;
            log::info!("serving on {}", listener.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?);
            serve::run(Arc::new(state), listener)?;
        }
        Command::Ablate {
            data,
            config,
            seeds,
            out,
        } => {
            let cfg: RunConfig = read_config(config.as_deref())?;
            let data = load_data(&data)?;
            let report = ablate(&data, &cfg.model, &cfg.train, &cfg.eval, &seeds, |_, _, _| {})?;
            report.write_csv(&out)?;
            let mut stdout = std::io::stdout();
            for (row, _) in unimatch::harness::ablation_rows().into_iter().skip(1) {
                if let Some((mean, floor)) = report.paired_summary(row, "backbone") {
                    let _ = writeln!(stdout, "{row}: mean paired difference {mean:+.4} (noise floor {floor:.4})");
                }
            }
        }
        Command::DumpRepr {
            data,
            checkpoint,
            sample,
            out,
        } => {
            let data = load_data(&data)?;
            let model = load_model(&checkpoint)?;
            let records: Vec<_> = data.test.iter().take(sample).cloned().collect();
            let rows = dump_representations(&model, &data, &records, &out)?;
            println!("{rows} rows written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(m)) => {
            eprintln!("training diverged: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
