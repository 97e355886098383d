//! Command surface: gen-data, train, eval, ablate, export-attention.
//! Every command is driven by one strict JSON config plus a few overrides,
//! and reproduces its outputs byte-for-byte under a fixed seed.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tapfm_core::ablate::{run_sweep, SweepKind};
use tapfm_core::checkpoint::{load_checkpoint, read_header};
use tapfm_core::config::RunConfig;
use tapfm_core::data::{read_bag_tiles, read_coords, Dataset, Split};
use tapfm_core::error::Error;
use tapfm_core::export::{compute_attention, write_attention_artifacts};
use tapfm_core::probe::CountingAlloc;
use tapfm_core::synth::{dataset_summary, make_dataset, TileBag};
use tapfm_core::trainer::{score_split, split_metric, train, train_resume, TrainMode};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "tapfm", version, about = "Task-adapt a small ViT under MIL on synthetic slides")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (strict JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// decoupled (default) or joint.
        #[arg(long)]
        mode: Option<String>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split with all tiles per bag.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long)]
        split: String,
    },
    /// Run a hyperparameter sweep (lambda, tiles or mode).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: String,
        /// Comma-separated values; defaults to the reference grid per sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Export per-tile attention for one bag as CSV plus a PGM heatmap.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bag file (.tpfm).
        #[arg(long)]
        bag: PathBuf,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::NoForeground | Error::EmptyBag => 3,
        Error::Numerical(_) | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn check_dataset_compat(cfg: &RunConfig, dataset: &Dataset) -> Result<(), Error> {
    if dataset.tile_size() != cfg.vit.tile_size || dataset.channels() != cfg.vit.channels {
        return Err(Error::Config(format!(
            "dataset tiles are {}x{}x{} but the model expects {}x{}x{}",
            dataset.tile_size(),
            dataset.tile_size(),
            dataset.channels(),
            cfg.vit.tile_size,
            cfg.vit.tile_size,
            cfg.vit.channels
        )));
    }
    if dataset.num_classes() != cfg.data.spec.classes.len() {
        return Err(Error::Config(format!(
            "dataset has {} classes, config defines {}",
            dataset.num_classes(),
            cfg.data.spec.classes.len()
        )));
    }
    Ok(())
}

fn cmd_gen_data(common: &Common) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.data.dataset_dir));
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !common.force
    {
        return Err(Error::Data(format!(
            "output directory {} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let dataset = make_dataset(&cfg.data.spec, cfg.train.seed, &out)?;
    print!("{}", dataset_summary(&dataset.records));
    println!("dataset written to {}", out.display());
    Ok(())
}

fn cmd_train(common: &Common, mode: Option<&str>, resume: bool) -> Result<(), Error> {
    let mut cfg = load_config(common)?;
    if let Some(m) = mode {
        cfg.train.mode = match m {
            "decoupled" => TrainMode::Decoupled,
            "joint" => TrainMode::Joint,
            other => return Err(Error::Config(format!("unknown mode '{other}'"))),
        };
    }
    let dataset = Dataset::load(&cfg.data.dataset_dir)?;
    check_dataset_compat(&cfg, &dataset)?;
    let run_dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.run_dir));
    let outcome = if resume {
        let last = run_dir.join("last.ckpt");
        let (mut state, _) = load_checkpoint(&last)?;
        if state.vit_cfg != cfg.vit {
            return Err(Error::Config(
                "checkpoint config does not match run config".into(),
            ));
        }
        train_resume(&dataset, &cfg.train, &mut state, Some(&run_dir))?
    } else {
        train(&dataset, &cfg.vit, &cfg.train, Some(&run_dir), |_, _| {})?.1
    };
    println!(
        "best validation metric {:.6} at epoch {} (run dir {})",
        outcome.best_metric,
        outcome.best_epoch,
        run_dir.display()
    );
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, split: &str) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let split = Split::parse(split)?;
    let dataset = Dataset::load(&cfg.data.dataset_dir)?;
    let header = read_header(checkpoint)?;
    if header.classes != dataset.num_classes() {
        return Err(Error::Data(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            header.classes,
            dataset.num_classes()
        )));
    }
    let (state, _) = load_checkpoint(checkpoint)?;
    check_dataset_compat(&cfg, &dataset)?;
    let (probs, labels) = score_split(
        &dataset,
        split,
        &state.backbone,
        &state.agg,
        &state.vit_cfg,
        cfg.train.eval_chunk,
    )?;
    let report = split_metric(&probs, &labels, cfg.train.task)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.run_dir));
    std::fs::create_dir_all(&out)?;
    let tag = split.as_str();
    let mut csv = String::from("class,auc\n");
    for (c, auc) in report.per_class.iter().enumerate() {
        match auc {
            Some(v) => csv.push_str(&format!("{c},{v}\n")),
            None => csv.push_str(&format!("{c},excluded\n")),
        }
    }
    csv.push_str(&format!("macro,{}\n", report.macro_auc));
    std::fs::write(out.join(format!("eval_{tag}.csv")), csv)?;
    std::fs::write(
        out.join(format!("eval_{tag}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("{tag} metric: {:.6} over {} bags", report.macro_auc, report.samples);
    Ok(())
}

fn cmd_ablate(common: &Common, sweep: &str, values: &[String]) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let kind = SweepKind::parse(sweep)?;
    let values: Vec<String> = if values.is_empty() {
        match kind {
            SweepKind::Lambda => ["0.25", "0.5", "0.75", "1.0"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            SweepKind::Tiles => ["25", "50", "75"].iter().map(|s| s.to_string()).collect(),
            SweepKind::Mode => ["decoupled", "joint"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    } else {
        values.to_vec()
    };
    let dataset = Dataset::load(&cfg.data.dataset_dir)?;
    check_dataset_compat(&cfg, &dataset)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.run_dir).join("sweep"));
    let outcome = run_sweep(&dataset, &cfg.vit, &cfg.train, kind, &values, Some(&out))?;
    print!("{}", outcome.summary_csv());
    if let Some(st) = outcome.stability_csv() {
        print!("{st}");
    }
    println!("sweep artifacts in {}", out.display());
    Ok(())
}

fn cmd_export_attention(common: &Common, checkpoint: &Path, bag_path: &Path) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let (state, _) = load_checkpoint(checkpoint)?;
    let tiles = read_bag_tiles(bag_path)?;
    if tiles.shape()[1] != state.vit_cfg.tile_size || tiles.shape()[3] != state.vit_cfg.channels {
        return Err(Error::Data(format!(
            "bag tiles {}x{}x{} incompatible with checkpoint ({}x{}x{})",
            tiles.shape()[1],
            tiles.shape()[2],
            tiles.shape()[3],
            state.vit_cfg.tile_size,
            state.vit_cfg.tile_size,
            state.vit_cfg.channels
        )));
    }
    let bag = TileBag {
        bag_id: bag_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tiles,
        labels: vec![],
        coords: read_coords(bag_path)?,
    };
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.run_dir).join("attention"));
    let export = compute_attention(
        &state.backbone,
        &state.agg,
        &state.vit_cfg,
        &bag,
        cfg.train.eval_chunk,
    )?;
    write_attention_artifacts(&out, &export)?;
    if export.coords_missing {
        println!("coordinate grid missing: wrote CSV only");
    }
    println!("attention artifacts in {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    tapfm_core::probe::tune_allocator();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Train {
            common,
            mode,
            resume,
        } => cmd_train(common, mode.as_deref(), *resume),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => cmd_eval(common, checkpoint, split),
        Command::Ablate {
            common,
            sweep,
            values,
        } => cmd_ablate(common, sweep, values),
        Command::ExportAttention {
            common,
            checkpoint,
            bag,
        } => cmd_export_attention(common, checkpoint, bag),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
