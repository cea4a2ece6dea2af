use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sos_core::experiment::{read_label_column, run_grid, AugmentMode, DataConfig, ExperimentConfig, ExperimentError, Setting};
use sos_core::ingest::{load_stream, save_stream, segment_runs};
use sos_core::labels::NUM_CLASSES;
use sos_core::metrics::{confusion_matrix, MetricsReport};
use sos_core::reorder::Strategy;

#[derive(Parser)]
#[command(name = "sos", version, about = "Shuffle-order augmentation experiments for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the setting grid described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated settings, e.g. AAE-RS,WDA.
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<Setting>>,
        #[arg(long)]
        mode: Option<AugmentMode>,
    },
    /// Synthesize worker streams from a data spec and write their combination.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reorder the segments of a stream file.
    Reorder {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file against a truth file, one operation id per line.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

const EXIT_CELL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out, seeds, settings, mode } => run(&config, out, seeds, settings, mode),
        Command::GenData { spec, out } => report(gen_data(&spec, &out)),
        Command::Reorder { input, strategy, seed, groups, out } => report(reorder(&input, strategy, seed, groups, &out)),
        Command::Eval { pred, truth } => report(eval(&pred, &truth)),
    }
}

fn report(r: Result<(), ExperimentError>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_CELL })
        }
    }
}

fn run(
    path: &Path,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    settings: Option<Vec<Setting>>,
    mode: Option<AugmentMode>,
) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(cfg) => cfg,
        Err(e) => return report(Err(e)),
    };
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds;
    }
    if let Some(settings) = settings {
        cfg.settings = settings;
    }
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    let outcome = match run_grid(cfg) {
        Ok(o) => o,
        Err(e) => return report(Err(e)),
    };
    print!("{}", outcome.table.render_text());
    println!("results written to {}", outcome.output_dir.display());
    for f in &outcome.failures {
        eprintln!("cell {} seed {} failed: {}", f.setting, f.seed, f.error);
    }
    if outcome.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CELL)
    }
}

fn gen_data(spec: &Path, out: &Path) -> Result<(), ExperimentError> {
    let text = std::fs::read_to_string(spec).map_err(|e| ExperimentError::Parse(format!("{}: {e}", spec.display())))?;
    let data: DataConfig = toml::from_str(&text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
    if !data.paths.is_empty() {
        return Err(ExperimentError::Invalid { field: "paths", message: "gen-data only synthesizes workers".into() });
    }
    data.validate()?;
    let pool = data.workers()?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("stream");
    for (i, w) in pool.iter().enumerate() {
        let path = out.with_file_name(format!("{stem}.worker{i}.csv"));
        save_stream(w, &path)?;
        println!("worker {i}: {} frames -> {}", w.len(), path.display());
    }
    let combined = data.combine(&pool)?;
    save_stream(&combined, out)?;
    println!("combined: {} frames -> {}", combined.len(), out.display());
    Ok(())
}

fn reorder(input: &Path, strategy: Strategy, seed: u64, groups: usize, out: &Path) -> Result<(), ExperimentError> {
    if groups == 0 {
        return Err(ExperimentError::Invalid { field: "groups", message: "must be at least 1".into() });
    }
    let stream = load_stream(input)?;
    let segs = segment_runs(&stream);
    let reordered = strategy.apply(&segs, seed, groups)?;
    save_stream(&reordered, out)?;
    println!("{} segments, {} frames -> {}", segs.len(), reordered.len(), out.display());
    Ok(())
}

fn eval(pred: &Path, truth: &Path) -> Result<(), ExperimentError> {
    let p = read_label_column(pred)?;
    let t = read_label_column(truth)?;
    let cm = confusion_matrix(&t, &p, NUM_CLASSES)?;
    let r = MetricsReport::from_confusion("eval", 0, &cm);
    println!("accuracy  {:.4}", r.accuracy);
    println!("precision {:.4}", r.precision);
    println!("recall    {:.4}", r.recall);
    println!("macro_f1  {:.4}", r.macro_f1);
    Ok(())
}
