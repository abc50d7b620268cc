//! `rptm`: synth data, relational matrix, triplet inspection, training and
//! ranking evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rptm_core::evalrank::{load_embeddings, load_split, save_embeddings, RerankConfig};
use rptm_core::learn::{train, write_history, EmbeddingModel};
use rptm_core::mining::{positive_choices, positive_choices_csv};
use rptm_core::pipeline::{check_split, embed_manifest, evaluate_split};
use rptm_core::relational::{build_relational_matrix, load_matrix, save_matrix, DatasetManifest, TauPolicy};
use rptm_core::synth::{generate_dataset, SynthSpec};
use rptm_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "rptm", version, about = "Relation-preserving triplet mining pipeline")]
struct Cli {
    /// Worker threads for matching, input preparation and embedding
    /// [default: all cores]
    #[arg(long, global = true, env = "RPTM_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic identity/pose dataset
    Synth(SynthArgs),
    /// Build the same-identity GMS match-count matrix
    Matrix(MatrixArgs),
    /// Dump each anchor's relational positive as CSV
    Mine(MineArgs),
    /// Train the embedding model
    Train(TrainArgs),
    /// Embed images and score a query/gallery split
    Eval(EvalArgs),
    /// Score precomputed embeddings with k-reciprocal re-ranking
    Rerank(RerankArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON dataset spec
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Manifest CSV (path,id)
    #[arg(long)]
    manifest: PathBuf,
    /// Output matrix file
    #[arg(long)]
    out: PathBuf,
    /// Run config JSON (features and gms sections are used)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    /// Manifest CSV the matrix was built from
    #[arg(long)]
    manifest: PathBuf,
    /// Relational matrix file
    #[arg(long)]
    matrix: PathBuf,
    /// Threshold policy
    #[arg(long, value_parser = ["min", "mean", "max"], default_value = "mean")]
    policy: String,
    /// Fixed threshold for the min policy
    #[arg(long, default_value_t = rptm_core::relational::DEFAULT_TAU_MIN)]
    tau_min: f64,
    /// Output CSV (anchor,positive,count,tau)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest CSV (path,id)
    #[arg(long)]
    manifest: PathBuf,
    /// Relational matrix built from the same manifest
    #[arg(long)]
    matrix: PathBuf,
    /// Run config JSON
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint file
    #[arg(long)]
    out: PathBuf,
    /// Output per-epoch loss CSV
    #[arg(long)]
    history: PathBuf,
    /// Overrides the config's training seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RerankFlags {
    /// Apply k-reciprocal re-ranking
    #[arg(long)]
    rerank: bool,
    /// Re-ranking neighbourhood size
    #[arg(long)]
    k1: Option<usize>,
    /// Query-expansion neighbourhood size
    #[arg(long)]
    k2: Option<usize>,
    /// Weight of the original distance
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest CSV (path,id)
    #[arg(long)]
    manifest: PathBuf,
    /// Split CSV (index,id,split)
    #[arg(long)]
    split: PathBuf,
    /// Run config JSON (input size and eval defaults)
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    rerank: RerankFlags,
    /// Also write the embeddings to this file
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output metrics CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RerankArgs {
    /// Embedding file written by `eval --embeddings`
    #[arg(long)]
    embeddings: PathBuf,
    /// Split CSV (index,id,split)
    #[arg(long)]
    split: PathBuf,
    /// Re-ranking neighbourhood size
    #[arg(long)]
    k1: Option<usize>,
    /// Query-expansion neighbourhood size
    #[arg(long)]
    k2: Option<usize>,
    /// Weight of the original distance
    #[arg(long)]
    eta: Option<f64>,
    /// Output metrics CSV
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CliResult = Result<(), Failure>;

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
        Err(Failure::Usage(msg)) => {
            eprintln!("rptm: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("rptm: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Matrix(a) => matrix(a),
        Command::Mine(a) => mine(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Rerank(a) => rerank(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn synth(a: SynthArgs) -> CliResult {
    let mut spec = SynthSpec::load(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let ds = generate_dataset(&spec, &a.out)?;
    println!("wrote {} images to {}", ds.manifest.len(), a.out.display());
    Ok(())
}

fn matrix(a: MatrixArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mx = build_relational_matrix(&manifest, &cfg.features, &cfg.gms)?;
    save_matrix(&mx, &a.out)?;
    let nonzero = mx.counts().iter().filter(|&&c| c > 0).count();
    println!("{}x{} matrix, {nonzero} nonzero entries", mx.m(), mx.m());
    Ok(())
}

fn mine(a: MineArgs) -> CliResult {
    let policy: TauPolicy = a.policy.parse()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mx = load_matrix(&a.matrix)?;
    mx.check_against(&manifest)?;
    let choices = positive_choices(&mx, policy, a.tau_min)?;
    write_text(&a.out, &positive_choices_csv(&choices))?;
    println!("{} of {} anchors have a positive", choices.len(), mx.m());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mx = load_matrix(&a.matrix)?;
    let out = train(&manifest, &mx, &cfg.mining, &cfg.train, |r| {
        println!(
            "epoch {} lr {:.3e} e_tri {:.6} e_ent {:.6} total {:.6} active {}",
            r.epoch, r.lr, r.report.e_tri, r.report.e_ent, r.report.total, r.report.active_triplets
        );
    })?;
    out.model.save(&a.out)?;
    write_history(&out.history, &a.history)?;
    Ok(())
}

fn rerank_from(cfg: &RunConfig, k1: Option<usize>, k2: Option<usize>, eta: Option<f64>) -> Result<RerankConfig, Error> {
    let mut r = cfg.eval.rerank_config();
    r.k1 = k1.unwrap_or(r.k1);
    r.k2 = k2.unwrap_or(r.k2);
    r.eta = eta.unwrap_or(r.eta);
    r.validate()?;
    Ok(r)
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let f = &a.rerank;
    let rerank = if f.rerank || cfg.eval.rerank {
        Some(rerank_from(&cfg, f.k1, f.k2, f.eta)?)
    } else if f.k1.is_some() || f.k2.is_some() || f.eta.is_some() {
        return Err(Failure::Usage("--k1/--k2/--eta need --rerank".into()));
    } else {
        None
    };
    let model = EmbeddingModel::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let split = load_split(&a.split)?;
    check_split(&manifest, &split)?;
    let vectors = embed_manifest(&model, &manifest, cfg.train.input_size)?;
    if let Some(path) = &a.embeddings {
        save_embeddings(&vectors, path)?;
    }
    let metrics = evaluate_split(&vectors, &split, rerank.as_ref())?;
    metrics.write_csv(&a.out)?;
    print!("{}", metrics.to_csv());
    Ok(())
}

fn rerank(a: RerankArgs) -> CliResult {
    let r = rerank_from(&RunConfig::default(), a.k1, a.k2, a.eta)?;
    let vectors = load_embeddings(&a.embeddings)?;
    let split = load_split(&a.split)?;
    let metrics = evaluate_split(&vectors, &split, Some(&r))?;
    metrics.write_csv(&a.out)?;
    print!("{}", metrics.to_csv());
    Ok(())
}
