//! `qbprf`: data preparation, both training stages, indexing, evaluation,
//! ablations and the top-k sweep.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use qbprf_core::data::{read_jsonl, CorpusFiles, Dataset, QqPair};
use qbprf_core::index::EmbeddingIndex;
use qbprf_core::metrics::MetricsReport;
use qbprf_core::pipeline::{self, Ablation, Stage2Data, Stage2Model};
use qbprf_core::{Error, Real, RunConfig, Stage1Checkpoint};

#[derive(Parser)]
#[command(name = "qbprf", version, about = "Query-bag pseudo-relevance feedback for question matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take the desk defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Start from a named preset (desk or published) instead of desk.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Master seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Split a duplicate-pair TSV into bags and train/valid/test pairs.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// TSV with columns qid1, qid2, question1, question2, is_duplicate.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Generate and split a synthetic paraphrase corpus.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
    },
    /// Train the variational encoder on the retrievable pool.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Prepared dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Embed the pool with a stage-1 checkpoint.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        /// Prepared dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long, value_name = "PATH")]
        stage1: PathBuf,
    },
    /// Jointly train selection, fusion and matching.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Prepared dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long, value_name = "PATH")]
        stage1: PathBuf,
        /// Pool index.
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
    },
    /// Score test groups with a stage-2 checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Stage-2 checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Prepared dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Test pairs (JSON lines); defaults to the dataset's test split.
        #[arg(long, value_name = "PATH")]
        test: Option<PathBuf>,
        /// Defaults to stage1.json next to the checkpoint.
        #[arg(long, value_name = "PATH")]
        stage1: Option<PathBuf>,
        /// Defaults to index.json next to the checkpoint.
        #[arg(long, value_name = "PATH")]
        index: Option<PathBuf>,
    },
    /// Train and test the full model and its ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Prepared dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long, value_name = "PATH")]
        stage1: PathBuf,
        /// Pool index.
        #[arg(long, value_name = "PATH")]
        index: PathBuf,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "none,no_qbs,no_qbf,baseline")]
        modes: Vec<Ablation>,
    },
    /// Evaluate one stage-2 checkpoint with different retrieval depths.
    SweepTopk {
        #[command(flatten)]
        common: Common,
        /// Stage-2 checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Prepared dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Defaults to stage1.json next to the checkpoint.
        #[arg(long, value_name = "PATH")]
        stage1: Option<PathBuf>,
        /// Defaults to index.json next to the checkpoint.
        #[arg(long, value_name = "PATH")]
        index: Option<PathBuf>,
        /// Comma-separated retrieval depths.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        k: Vec<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PrepareData { common, .. }
            | Command::GenSynthetic { common }
            | Command::TrainStage1 { common, .. }
            | Command::BuildIndex { common, .. }
            | Command::TrainStage2 { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common, .. }
            | Command::SweepTopk { common, .. } => common,
        }
    }

    /// Config sections searched for bare override keys.
    fn sections(&self) -> &'static [&'static str] {
        match self {
            Command::PrepareData { .. } => &["data", "data.split"],
            Command::GenSynthetic { .. } => &["data", "data.synthetic", "data.split"],
            Command::TrainStage1 { .. } | Command::BuildIndex { .. } => &["stage1", "data"],
            Command::TrainStage2 { .. }
            | Command::Evaluate { .. }
            | Command::Ablate { .. }
            | Command::SweepTopk { .. } => &["stage2", "qbs", "qbf", "matcher"],
        }
    }
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn user(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_user_error() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Attach the flag a failing path came from.
fn flag<T>(name: &str, r: qbprf_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("--{name}: {}", f.message);
        f
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Config overrides as (key, value) pairs.
type Overrides = Vec<(String, String)>;

/// Split `--key value` / `--key=value` pairs that are not declared flags
/// of the chosen subcommand off as config overrides.
fn split_overrides(argv: Vec<String>) -> CliResult<(Vec<String>, Overrides)> {
    let cmd = Cli::command();
    let Some(sub) = argv.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return Ok((argv, Vec::new()));
    };
    let mut known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .collect();
    known.extend(["help".to_string(), "version".to_string()]);
    let mut keep = argv[..2].to_vec();
    let mut overrides = Vec::new();
    let mut it = argv.into_iter().skip(2).peekable();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            keep.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if known.contains(&name) {
            keep.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Failure::user(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((keep, overrides))
}

fn run(argv: Vec<String>) -> CliResult<()> {
    let (argv, overrides) = split_overrides(argv)?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Failure::user(e.to_string().trim_end().to_string())),
    };
    let common = cli.command.common().clone();
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => flag("config", RunConfig::load(path))?,
        (None, Some(name)) => flag("preset", RunConfig::preset(name))?,
        (None, None) => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (key, value) in &overrides {
        cfg.set(key, value, cli.command.sections())
            .map_err(|e| Failure::user(format!("--{key}: {e}")))?;
    }
    let cfg = cfg.resolved();
    let out = &common.out;
    fs::create_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
    write(&out.join("config.echo"), &cfg.to_toml())?;

    match &cli.command {
        Command::PrepareData { input, .. } => {
            let data = flag(
                "input",
                pipeline::prepare_tsv(input, cfg.data.max_pairs, &cfg.data.split, cfg.seed),
            )?;
            save_dataset(out, &data)
        }
        Command::GenSynthetic { .. } => {
            let data = pipeline::prepare_synthetic(&cfg.data.synthetic, &cfg.data.split, cfg.seed)?;
            save_dataset(out, &data)
        }
        Command::TrainStage1 { data, .. } => {
            let dataset = load_dataset(data)?;
            let ck = pipeline::train_stage1_on_pool::<Real>(&dataset, &cfg.stage1, cfg.data.min_count)?;
            ck.save(&out.join("checkpoints").join("stage1"))?;
            let mut tsv = String::from("epoch\tloss\trecon\tkl\tinfonce\n");
            for e in &ck.history {
                tsv.push_str(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                    e.epoch, e.loss, e.recon, e.kl, e.infonce
                ));
            }
            write(&out.join("reports").join("stage1.tsv"), &tsv)
        }
        Command::BuildIndex { data, stage1, .. } => {
            let dataset = load_dataset(data)?;
            let ck = flag("stage1", Stage1Checkpoint::<Real>::load(stage1))?;
            let index = pipeline::build_pool_index(&dataset, &ck)?;
            index.save(&out.join("checkpoints").join("index"))?;
            let diag = index.retrieval_diagnostics(&dataset.corpus.bags, cfg.stage2.k)?;
            log::info!(
                "indexed {} queries; mean gold members in top-{}: {:.3}, candidate accuracy {:.4}",
                index.len(),
                diag.k,
                diag.mean_bag_recall_count,
                diag.candidate_accuracy
            );
            write(
                &out.join("reports").join("retrieval.tsv"),
                &format!(
                    "k\tn_anchors\tmean_bag_recall_count\tcandidate_accuracy\n{}\t{}\t{:.6}\t{:.6}\n",
                    diag.k, diag.n_anchors, diag.mean_bag_recall_count, diag.candidate_accuracy
                ),
            )
        }
        Command::TrainStage2 { data, stage1, index, .. } => {
            let dataset = load_dataset(data)?;
            let (ck, idx) = load_retrieval(stage1, index)?;
            let mut sd = Stage2Data::new(&dataset, &ck, idx, cfg.stage2.k)?;
            let path = out.join("checkpoints").join("stage2");
            let outcome = pipeline::train_stage2(&mut sd, &cfg.stage2, &cfg.architecture(), Some(&path))?;
            outcome.model.save(&path)?;
            outcome.log.write_jsonl(&out.join("logs").join("metrics.jsonl"))?;
            let report = outcome.model.evaluate(&sd, &dataset.test, cfg.stage2.k, cfg.seed)?;
            emit_report(out, "test", cfg.stage2.ablation.name(), &report)
        }
        Command::Evaluate {
            checkpoint,
            data,
            test,
            stage1,
            index,
            ..
        } => {
            let dataset = load_dataset(data)?;
            let pairs: Vec<QqPair> = match test {
                Some(p) => flag("test", read_jsonl(p))?,
                None => dataset.test.clone(),
            };
            let (model, ck, idx) = load_stage2(checkpoint, stage1.as_deref(), index.as_deref())?;
            let sd = Stage2Data::new(&dataset, &ck, idx, model.config.k)?;
            let report = model.evaluate(&sd, &pairs, model.config.k, cfg.seed)?;
            emit_report(out, "metrics", model.config.ablation.name(), &report)
        }
        Command::Ablate {
            data, stage1, index, modes, ..
        } => {
            let dataset = load_dataset(data)?;
            let (ck, idx) = load_retrieval(stage1, index)?;
            let mut sd = Stage2Data::new(&dataset, &ck, idx, cfg.stage2.k)?;
            let mut rows = Vec::new();
            for &mode in modes {
                let path = pipeline::stage2_checkpoint_path(out, mode);
                let (outcome, report) =
                    pipeline::run_ablation(&mut sd, &cfg.stage2, &cfg.architecture(), mode, Some(&path))?;
                outcome.model.save(&path)?;
                outcome
                    .log
                    .write_jsonl(&out.join("logs").join(format!("metrics_{}.jsonl", mode.name())))?;
                log::info!("{}: {}", mode.name(), report.to_tsv().trim_end());
                rows.push((mode.name().to_string(), report));
            }
            write_table(out, "ablation", "model", &rows)
        }
        Command::SweepTopk {
            checkpoint,
            data,
            stage1,
            index,
            k,
            ..
        } => {
            if k.is_empty() {
                return Err(Failure::user("--k: give at least one value"));
            }
            let dataset = load_dataset(data)?;
            let (model, ck, idx) = load_stage2(checkpoint, stage1.as_deref(), index.as_deref())?;
            let k_max = k.iter().copied().max().unwrap_or(1);
            let sd = Stage2Data::new(&dataset, &ck, idx, k_max)?;
            let rows: Vec<(String, MetricsReport)> =
                flag("k", pipeline::sweep_topk(&model, &sd, &dataset.test, k, cfg.seed))?
                    .into_iter()
                    .map(|(k, r)| (k.to_string(), r))
                    .collect();
            write_table(out, "sweep_topk", "k", &rows)
        }
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))?;
    }
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn save_dataset(out: &Path, data: &Dataset) -> CliResult<()> {
    CorpusFiles::new(out.join("data")).save(data)?;
    let summary = format!(
        "queries\tbags\ttrain_pairs\tvalid_pairs\ttest_pairs\n{}\t{}\t{}\t{}\t{}\n",
        data.corpus.queries.len(),
        data.corpus.bags.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    write(&out.join("reports").join("data.tsv"), &summary)
}

/// Accepts either a dataset directory or a run directory containing `data/`.
fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let nested = dir.join("data");
    let dir = if nested.join("queries.jsonl").exists() { nested } else { dir.to_path_buf() };
    flag("data", CorpusFiles::new(dir).load())
}

fn load_retrieval(stage1: &Path, index: &Path) -> CliResult<(Stage1Checkpoint<Real>, EmbeddingIndex<Real>)> {
    let ck = flag("stage1", Stage1Checkpoint::<Real>::load(stage1))?;
    let idx = flag("index", EmbeddingIndex::<Real>::load(index))?;
    if idx.checkpoint_hash != ck.hash() {
        log::warn!("index was built from a different stage-1 checkpoint");
    }
    Ok((ck, idx))
}

fn load_stage2(
    checkpoint: &Path,
    stage1: Option<&Path>,
    index: Option<&Path>,
) -> CliResult<(Stage2Model<Real>, Stage1Checkpoint<Real>, EmbeddingIndex<Real>)> {
    let model = flag("checkpoint", Stage2Model::<Real>::load(checkpoint))?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let stage1 = stage1.map_or_else(|| dir.join("stage1.json"), Path::to_path_buf);
    let index = index.map_or_else(|| dir.join("index.json"), Path::to_path_buf);
    let (ck, idx) = load_retrieval(&stage1, &index)?;
    Ok((model, ck, idx))
}

fn emit_report(out: &Path, name: &str, label: &str, report: &MetricsReport) -> CliResult<()> {
    println!("{}", MetricsReport::pretty_table("model", &[(label.to_string(), report.clone())]));
    write(
        &out.join("reports").join(format!("{name}.tsv")),
        &MetricsReport::table_tsv("model", &[(label.to_string(), report.clone())]),
    )
}

fn write_table(out: &Path, name: &str, label: &str, rows: &[(String, MetricsReport)]) -> CliResult<()> {
    println!("{}", MetricsReport::pretty_table(label, rows));
    write(&out.join("reports").join(format!("{name}.tsv")), &MetricsReport::table_tsv(label, rows))
}
