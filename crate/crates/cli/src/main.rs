use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use skd_core::checkpoint::Checkpoint;
use skd_core::descriptor::DescriptorModel;
use skd_core::detector::{SkdDetector, TrainConfig};
use skd_core::harness::*;
use skd_core::{Error, Result};

/// Saliency-based keypoint detection experiments on point clouds.
#[derive(Parser)]
#[command(name = "skd", version)]
struct Cli {
    /// `key = value` settings file, applied before any --set.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set pairs=20 --set k_values=128,256`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pairs into a directory with a pairs.txt index.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Cloud file format: ply or bin.
        #[arg(long, default_value = "ply")]
        format: String,
    },
    /// Train the keypoint detector and save its checkpoint.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch loss as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Detect keypoints in one cloud and write them as CSV.
    Detect {
        #[arg(long)]
        cloud: PathBuf,
        /// random, skd or elf3d.
        #[arg(long, default_value = "skd")]
        method: DetectorKind,
        #[arg(short, long, default_value_t = 256)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matching precision curves; writes matching.csv.
    EvalMatching,
    /// Keypoint repeatability; writes repeatability.csv.
    EvalRepeatability,
    /// RANSAC registration per pair; writes registration.csv.
    Register,
    /// Matching precision at 1 m per descriptor layer; writes layers.csv.
    Layers {
        /// Defaults to the first entry of k_values.
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Full evaluation; writes every table, summary.json and metadata.json.
    Report,
}

fn settings(cli: &Cli) -> Result<KeyValues> {
    let mut kv = match &cli.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let mut over = KeyValues::default();
    for s in &cli.overrides {
        over.insert_pair(s)?;
    }
    kv.merge(over);
    Ok(kv)
}

fn experiment(kv: KeyValues) -> Result<ExperimentConfig> {
    ExperimentConfig::from_kv(kv)
}

fn print_summary(report: &Report) {
    println!("{:<8} {:>6} {:>10} {:>10} {:>9} {:>9}", "method", "K", "prec@1m", "repeat", "success", "avg_iter");
    for r in &report.summary.rows {
        println!(
            "{:<8} {:>6} {:>10.4} {:>10.4} {:>9.3} {:>9.1}",
            r.method, r.k, r.precision_at_1m, r.repeatability, r.success_rate, r.avg_iterations
        );
    }
}

fn evaluated(kv: KeyValues) -> Result<(ExperimentConfig, Report)> {
    let cfg = experiment(kv)?;
    let models = load_models(&cfg)?;
    let pairs = load_pairs(&cfg)?;
    let report = evaluate(&cfg, &models, &pairs)?;
    write_metadata(&cfg, &cfg.output_dir)?;
    Ok((cfg, report))
}

fn written(path: &Path) {
    println!("wrote {}", path.display());
}

#[derive(Serialize)]
struct LossRow {
    stage: &'static str,
    epoch: usize,
    loss: f64,
}

/// Experiment keys choose the data and descriptor; `train.*` keys set the
/// optimiser, plus `train.pairs` and `train.scene_seed` for synthetic data.
fn train(mut kv: KeyValues, out: &Path, history: Option<&Path>) -> Result<()> {
    let mut tkv = kv.split_prefix("train");
    let train_pairs = tkv.take::<usize>("pairs")?.unwrap_or(4);
    let scene_seed = tkv.take::<u64>("scene_seed")?.unwrap_or(0);
    let own_tau = tkv.contains("tau");
    let mut cfg = TrainConfig::default();
    cfg.apply(&mut tkv)?;
    tkv.finish()?;
    kv.take::<String>("detectors")?;
    kv.insert("detectors", "random")?;
    let mut data = experiment(kv)?;
    data.scene.seed = scene_seed;
    data.pairs = train_pairs;
    if !own_tau {
        cfg.tau = data.tau;
    }

    let descriptor = match &data.descriptor_checkpoint {
        Some(p) => DescriptorModel::from_checkpoint(&Checkpoint::load(p)?)?,
        None => DescriptorModel::new(data.neighbors, data.descriptor_seed),
    };
    let pairs = load_pairs(&data)?;
    let (detector, report) = SkdDetector::fit(&descriptor, &pairs, &cfg)?;
    detector.to_checkpoint().save(out)?;
    if let (Some(first), Some(last)) = (report.loss.first(), report.loss.last()) {
        println!("trained on {} pairs, loss {first:.4} -> {last:.4}", pairs.len());
    }
    written(out);
    if let Some(h) = history {
        let rows: Vec<LossRow> = report
            .pretrain_loss
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| LossRow { stage: "pretrain", epoch, loss })
            .chain(report.loss.iter().enumerate().map(|(epoch, &loss)| LossRow { stage: "train", epoch, loss }))
            .collect();
        write_csv(&rows, h)?;
        written(h);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut kv = settings(&cli)?;
    if !matches!(cli.command, Command::Train { .. }) {
        kv.split_prefix("train");
    }
    match cli.command {
        Command::Synth { out, format } => {
            if format != "ply" && format != "bin" {
                return Err(Error::Config(format!("unknown format '{format}' (ply or bin)")));
            }
            let cfg = experiment(kv)?;
            let pairs = gen_synthetic_pairs(&cfg.scene, cfg.pairs)?;
            written(&save_pair_index(&out, &pairs, &format)?);
        }
        Command::Train { out, history } => train(kv, &out, history.as_deref())?,
        Command::Detect { cloud, method, k, out } => {
            kv.take::<String>("detectors")?;
            kv.insert("detectors", method.name())?;
            let cfg = experiment(kv)?;
            let models = load_models(&cfg)?;
            let points = load_cloud(&cloud)?;
            let keypoints = detect_keypoints(method, &cfg, &models, &points, k)?;
            write_csv(&keypoint_rows(&keypoints, &points), &out)?;
            written(&out);
        }
        Command::EvalMatching => {
            let (cfg, report) = evaluated(kv)?;
            let path = cfg.output_dir.join(MATCHING_CSV);
            write_csv(&report.matching, &path)?;
            print_summary(&report);
            written(&path);
        }
        Command::EvalRepeatability => {
            let (cfg, report) = evaluated(kv)?;
            let path = cfg.output_dir.join(REPEATABILITY_CSV);
            write_csv(&report.repeatability, &path)?;
            print_summary(&report);
            written(&path);
        }
        Command::Register => {
            let (cfg, report) = evaluated(kv)?;
            let path = cfg.output_dir.join(REGISTRATION_CSV);
            write_csv(&report.registration, &path)?;
            print_summary(&report);
            written(&path);
        }
        Command::Layers { k } => {
            if !kv.contains("detectors") {
                kv.insert("detectors", "random")?;
            }
            let cfg = experiment(kv)?;
            let models = load_models(&cfg)?;
            let pairs = load_pairs(&cfg)?;
            let rows = evaluate_layers(&models.descriptor, &pairs, k.unwrap_or(cfg.k_values[0]))?;
            for r in &rows {
                println!("layer {} K {} precision@1m {:.4}", r.layer, r.k, r.precision_at_1m);
            }
            let path = cfg.output_dir.join("layers.csv");
            write_csv(&rows, &path)?;
            written(&path);
        }
        Command::Report => {
            let cfg = experiment(kv)?;
            let report = run_pipeline(&cfg)?;
            print_summary(&report);
            println!("wrote report to {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
