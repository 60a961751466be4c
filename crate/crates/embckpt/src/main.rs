use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use embckpt::engine::restore;
use embckpt::sim::corpus::{bench_csv, mixed_corpus, quant_bench, skewed_corpus};
use embckpt::sim::report::model_digest;
use embckpt::sim::{run_with, ExperimentConfig};
use embckpt::store::{CheckpointStore, LocalDirStore};
use embckpt::Error;

#[derive(Parser)]
#[command(name = "embckpt", version, about = "Incremental, quantized checkpoints for embedding tables")]
struct Cli {
    /// Overrides the seed of the workload or corpus.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports; created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a simulated training experiment and writes metrics.csv and
    /// metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint store root. Defaults to <out>/store.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Verifies the newest valid checkpoint chain of a run and restores it.
    RestoreCheck {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        run: String,
        /// Fall back to older checkpoints if the newest is damaged.
        #[arg(long)]
        fallback: bool,
    },
    /// Mean l2 reconstruction loss of every codec and bit width on a
    /// synthetic corpus.
    QuantBench {
        #[arg(long, default_value_t = 1000)]
        vectors: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Block count for the block k-means codecs.
        #[arg(long, default_value_t = 100)]
        blocks: usize,
        #[arg(long, value_enum, default_value_t = CorpusKind::Skewed)]
        corpus: CorpusKind,
    },
    /// Deletes all but the newest checkpoints of a run and what they need.
    Gc {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        run: String,
        #[arg(long)]
        keep: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    Skewed,
    Mixed,
}

fn open_store(root: &Path) -> Result<CheckpointStore> {
    let local = LocalDirStore::open(root).with_context(|| format!("opening store {}", root.display()))?;
    Ok(CheckpointStore::new(Arc::new(local)))
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(cli: &Cli, config: &Path, store: Option<&Path>) -> Result<bool> {
    let mut exp = ExperimentConfig::load(config)?;
    if let Some(seed) = cli.seed {
        exp.workload.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let store_root = store.map(Path::to_path_buf).unwrap_or_else(|| out.join("store"));
    let store = open_store(&store_root)?;
    let outcome = run_with(&exp.workload, &exp.run, &exp.failures, store, exp.options)?;
    let report = &outcome.report;
    write_output(&out, "metrics.csv", &report.to_csv())?;
    write_output(&out, "metrics.json", &report.to_json())?;
    let s = &report.summary;
    println!(
        "run {}: {} checkpoints, {} resumes, bandwidth reduction {:.2}x, capacity reduction {:.2}x",
        exp.run.run_id, s.checkpoints_committed, s.resumes, s.bandwidth_reduction, s.capacity_reduction
    );
    println!("model digest {}", s.model_digest);
    if let Some(e) = &s.error {
        eprintln!("error: run stopped early: {e}");
        return Ok(false);
    }
    Ok(true)
}

fn cmd_restore_check(store: &Path, run: &str, fallback: bool) -> Result<bool> {
    let store = open_store(store)?;
    let Some(latest) = store.latest_valid(run)? else {
        println!("run {run}: no valid checkpoint");
        return Ok(false);
    };
    println!("run {run}: latest valid checkpoint {latest}");
    let orphans = store.orphans(run)?;
    if !orphans.is_empty() {
        println!("ignored {} objects from uncommitted checkpoints", orphans.len());
    }
    let restored = restore(&store, run, fallback)?;
    let chain = store.resolve_chain(run, restored.checkpoint_id)?;
    let links: Vec<String> =
        chain.iter().map(|m| format!("{} ({})", m.checkpoint_id, m.kind.as_str())).collect();
    println!("chain: {}", links.join(" -> "));
    let objects: usize = chain.iter().map(|m| m.objects().count()).sum();
    let bytes: u64 = chain.iter().map(|m| m.total_bytes()).sum();
    println!("verified {objects} objects, {bytes} bytes");
    println!(
        "restored checkpoint {} at batch {}, model digest {}",
        restored.checkpoint_id,
        restored.model.reader.batches_consumed,
        model_digest(&restored.model)
    );
    Ok(restored.checkpoint_id == latest)
}

fn cmd_quant_bench(cli: &Cli, vectors: usize, dim: usize, blocks: usize, corpus: CorpusKind) -> Result<bool> {
    if vectors == 0 || dim == 0 || blocks == 0 {
        return Err(Error::Config("vectors, dim and blocks must be positive".into()).into());
    }
    let seed = cli.seed.unwrap_or(1);
    let matrix = match corpus {
        CorpusKind::Skewed => skewed_corpus(vectors, dim, seed),
        CorpusKind::Mixed => mixed_corpus(vectors, dim, seed),
    };
    let csv = bench_csv(&quant_bench(&matrix, dim, blocks.min(vectors), seed)?);
    print!("{csv}");
    if let Some(out) = &cli.out {
        write_output(out, "quant_bench.csv", &csv)?;
    }
    Ok(true)
}

fn cmd_gc(store: &Path, run: &str, keep: usize) -> Result<bool> {
    let store = open_store(store)?;
    let deleted = store.gc(run, keep)?;
    let ids: Vec<String> = deleted.iter().map(u64::to_string).collect();
    println!("deleted {} checkpoints: [{}]", deleted.len(), ids.join(", "));
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, store } => cmd_run(&cli, config, store.as_deref()),
        Command::RestoreCheck { store, run, fallback } => cmd_restore_check(store, run, *fallback),
        Command::QuantBench { vectors, dim, blocks, corpus } => {
            cmd_quant_bench(&cli, *vectors, *dim, *blocks, *corpus)
        }
        Command::Gc { store, run, keep } => cmd_gc(store, run, *keep),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_) | Error::Core(embckpt::core::Error::Config(_))) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
