mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use matchseg::data::{load_dataset, save_dataset, save_tensor, split_stratified, synth_generate, Dataset};
use matchseg::losses::{binarize, format_report};
use matchseg::retrieval::{build_index, EmbeddingIndex, Provider};
use matchseg::segnet::{predict_probs, ModelParams};
use matchseg::trainer::{
    ablation_table, build_episode, evaluate, format_ablation, rank_supports, rng_stream, train_with, EvalConfig,
    Strategy,
};

use config::CliConfig;

/// Fraction of each domain placed in the training split by `synth`.
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Parser)]
#[command(name = "matchseg", version, about = "Reference-image segmentation with similarity-guided support selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset with a stratified split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 120)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        domains: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build an embedding index for every dataset item.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `desk` or `file:PATH`.
        #[arg(long, default_value = "desk")]
        provider: String,
    },
    /// Print the top-K training items most similar to a query.
    Select {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Train a model and print the per-step loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Embedding index; built with the configured provider when absent.
        #[arg(long)]
        emb: Option<PathBuf>,
        /// Extra `key=value` settings, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the binary mask predicted for one query.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value = "clip")]
        strategy: Strategy,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every test query and print the metric report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long, default_value = "clip")]
        strategy: Strategy,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        ensemble: bool,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare random, ensembled random and similarity selection per K.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    EmbeddingIndex::load(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn load_model(path: &Path) -> Result<(ModelParams, matchseg::segnet::NetworkConfig)> {
    ModelParams::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn optional_index(path: Option<&Path>, strategy: Strategy) -> Result<Option<EmbeddingIndex>> {
    match (path, strategy) {
        (Some(p), _) => Ok(Some(load_index(p)?)),
        (None, Strategy::Clip) => bail!("--emb is required for the clip strategy"),
        (None, Strategy::Random) => Ok(None),
    }
}

/// Side length of the dataset's images, used when no size is given.
fn native_size(ds: &Dataset, size: Option<usize>) -> Result<usize> {
    if let Some(s) = size {
        return Ok(s);
    }
    let first = ds.items.first().ok_or_else(|| anyhow!("dataset is empty"))?;
    Ok(first.image.shape()[1])
}

/// Builds the dataset in a sibling directory and renames it into place.
fn synth(out: &Path, n: usize, domains: usize, size: usize, seed: u64) -> Result<()> {
    if out.exists() && fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        bail!("{} already exists and is not an empty directory", out.display());
    }
    let ds = synth_generate(n, domains, size, seed)?;
    let split = split_stratified(&ds.manifest(), TRAIN_FRACTION, seed)?;
    let ds = ds.with_manifest(&split)?;
    let name = out
        .file_name()
        .ok_or_else(|| anyhow!("bad output path {}", out.display()))?
        .to_string_lossy()
        .to_string();
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("clearing {}", tmp.display()))?;
    }
    let result = save_dataset(&tmp, &ds).map_err(anyhow::Error::from).and_then(|_| {
        if out.exists() {
            fs::remove_dir(out)?;
        }
        fs::rename(&tmp, out).with_context(|| format!("moving dataset to {}", out.display()))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth {
            out: dir,
            n,
            domains,
            size,
            seed,
        } => synth(&dir, n, domains, size, seed)?,
        Command::Embed { data, out: path, provider } => {
            let provider: Provider = provider.parse()?;
            let ds = load_data(&data)?;
            build_index(&ds, &provider)?.save(&path)?;
        }
        Command::Select { emb, data, query, k } => {
            let ds = load_data(&data)?;
            let index = load_index(&emb)?;
            for (rank, hit) in rank_supports(&ds, &query, &index, k)?.iter().enumerate() {
                writeln!(out, "{}\t{}\t{:.4}", rank + 1, hit.id, hit.score)?;
            }
        }
        Command::Train {
            data,
            config,
            strategy,
            emb,
            set,
            out: path,
        } => {
            let mut cfg = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                    CliConfig::parse(&text).with_context(|| format!("config {}", p.display()))?
                }
                None => CliConfig::default(),
            };
            for pair in &set {
                cfg.set_pair(pair)?;
            }
            if let Some(s) = strategy {
                cfg.train.strategy = s;
            }
            let ds = load_data(&data)?;
            let index = match (&emb, cfg.train.strategy) {
                (Some(p), _) => Some(load_index(p)?),
                (None, Strategy::Clip) => Some(build_index(&ds, &cfg.provider)?),
                (None, Strategy::Random) => None,
            };
            let mut write_err = None;
            let outcome = train_with(&ds, index.as_ref(), &cfg.train, |step, loss| {
                if write_err.is_none() {
                    if let Err(e) = writeln!(out, "{step}\t{loss:.6}") {
                        write_err = Some(e);
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            outcome.params.save(&path, &cfg.train.network)?;
        }
        Command::Predict {
            model,
            data,
            query,
            emb,
            k,
            strategy,
            image_size,
            seed,
            out: path,
        } => {
            let (params, net) = load_model(&model)?;
            let ds = load_data(&data)?;
            let index = optional_index(emb.as_deref(), strategy)?;
            let size = native_size(&ds, image_size)?;
            let mut rng = rng_stream(seed, 0);
            let ep = build_episode(&ds, &query, index.as_ref(), strategy, k, size, &mut rng)?;
            let probs = predict_probs(&ep, &params, &net)?;
            save_tensor(&path, &binarize(&probs, 0.5))?;
        }
        Command::Eval {
            model,
            data,
            emb,
            strategy,
            repeats,
            ensemble,
            k,
            image_size,
            seed,
        } => {
            let (params, net) = load_model(&model)?;
            let ds = load_data(&data)?;
            let index = optional_index(emb.as_deref(), strategy)?;
            let config = EvalConfig {
                strategy,
                support_k: k,
                repeats,
                ensemble,
                image_size: native_size(&ds, image_size)?,
                seed,
            };
            let report = evaluate(&params, &net, &ds, index.as_ref(), &config)?;
            out.write_all(format_report(&report.rows).as_bytes())?;
        }
        Command::Ablate {
            model,
            data,
            emb,
            k_list,
            repeats,
            image_size,
            seed,
        } => {
            let (params, net) = load_model(&model)?;
            let ds = load_data(&data)?;
            let index = load_index(&emb)?;
            let size = native_size(&ds, image_size)?;
            let rows = ablation_table(&params, &net, &ds, &index, &k_list, repeats, size, seed)?;
            out.write_all(format_ablation(&rows).as_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.ends_with(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
