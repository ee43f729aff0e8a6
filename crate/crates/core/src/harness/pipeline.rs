use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::descriptor::DescriptorModel;
use crate::detector::{elf3d_detect, random_detect, top_k, KeypointSet, SkdDetector, TrainingPair};
use crate::error::{Error, Result};
use crate::evaluation::{
    distance_grid, matching_score, ransac_register, repeatability, RansacConfig, RegistrationResult,
    DEFAULT_OVERLAP_RADIUS,
};
use crate::geom::{Matrix3, PointCloud, RigidTransform, Vector3};
use crate::saliency::cloud_saliency;

use super::config::{DataSource, DetectorKind, ExperimentConfig};
use super::io::{load_cloud, save_cloud, write_csv};
use super::synth::gen_synthetic_pairs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatabilityRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub epsilon: f64,
    pub repeatability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub pair: usize,
    pub rte: f64,
    pub rre: f64,
    pub success: bool,
    pub iterations: usize,
    pub inlier_ratio: f64,
}

/// One line of the summary table per method and K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub rte_mean: Option<f64>,
    pub rte_std: Option<f64>,
    pub rre_mean: Option<f64>,
    pub rre_std: Option<f64>,
    pub success_rate: f64,
    pub avg_iterations: f64,
    pub inlier_ratio: f64,
    pub precision_at_1m: f64,
    pub repeatability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParameters {
    pub pairs: usize,
    pub layer: usize,
    pub epsilon: f64,
    pub overlap_radius: f64,
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub nms_radius: f64,
    pub histogram_bins: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub parameters: MetricParameters,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub matching: Vec<MatchingRow>,
    pub repeatability: Vec<RepeatabilityRow>,
    pub registration: Vec<RegistrationRow>,
    pub summary: Summary,
}

impl Report {
    pub fn summary_row(&self, method: &str, k: usize) -> Option<&SummaryRow> {
        self.summary.rows.iter().find(|r| r.method == method && r.k == k)
    }
}

/// Descriptor used for matching by every method, plus the learned detector
/// when one is configured.
#[derive(Debug, Clone)]
pub struct Models {
    pub descriptor: DescriptorModel,
    pub detector: Option<SkdDetector>,
}

fn checked_load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Checkpoint::load(path)
}

pub fn load_models(cfg: &ExperimentConfig) -> Result<Models> {
    let detector = match &cfg.detector_checkpoint {
        Some(p) => Some(SkdDetector::from_checkpoint(&checked_load(p)?)?),
        None if cfg.detectors.contains(&DetectorKind::Skd) => {
            return Err(Error::Config("detector 'skd' needs a detector checkpoint (detector = <path>)".into()))
        }
        None => None,
    };
    let descriptor = match (&cfg.descriptor_checkpoint, &detector) {
        (Some(p), _) => DescriptorModel::from_checkpoint(&checked_load(p)?)?,
        (None, Some(d)) => d.descriptor.clone(),
        (None, None) => DescriptorModel::new(cfg.neighbors, cfg.descriptor_seed),
    };
    Ok(Models { descriptor, detector })
}

/// Reads `pairs.txt` from `dir`: one pair per line,
/// `<cloud_k> <cloud_l> r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz`,
/// the 3×4 matrix mapping `cloud_k` into the frame of `cloud_l`. Cloud paths
/// are relative to `dir`.
pub fn load_pair_index(dir: &Path) -> Result<Vec<TrainingPair>> {
    let index = dir.join("pairs.txt");
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::MalformedRecord { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 14 {
            return Err(bad(format!("expected 2 paths and 12 numbers, found {} fields", f.len())));
        }
        let v = f[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("'{s}' is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let truth = RigidTransform::new(rotation, Vector3::new(v[3], v[7], v[11])).map_err(|e| bad(e.to_string()))?;
        let name = format!("{}", pairs.len());
        let load = |p: &str| load_cloud(&dir.join(p)).map_err(|e| e.in_pair(name.clone()));
        pairs.push(TrainingPair {
            cloud_k: load(f[0])?,
            cloud_l: load(f[1])?,
            truth,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(pairs)
}

/// Writes `pairs` as `k_<i>.<extension>` / `l_<i>.<extension>` clouds plus a
/// `pairs.txt` index readable by [`load_pair_index`]. Returns the index path.
pub fn save_pair_index(dir: &Path, pairs: &[TrainingPair], extension: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::from("# cloud_k cloud_l r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz\n");
    for (i, pair) in pairs.iter().enumerate() {
        let (k, l) = (format!("k_{i}.{extension}"), format!("l_{i}.{extension}"));
        save_cloud(&pair.cloud_k, &dir.join(&k))?;
        save_cloud(&pair.cloud_l, &dir.join(&l))?;
        let (r, t) = (pair.truth.rotation(), pair.truth.translation());
        index.push_str(&format!("{k} {l}"));
        for row in 0..3 {
            index.push_str(&format!(" {} {} {} {}", r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]));
        }
        index.push('\n');
    }
    let path = dir.join("pairs.txt");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_pairs(cfg: &ExperimentConfig) -> Result<Vec<TrainingPair>> {
    match &cfg.source {
        DataSource::Synthetic => gen_synthetic_pairs(&cfg.scene, cfg.pairs),
        DataSource::Directory(dir) => load_pair_index(dir),
    }
}

/// Maps `f` over `items` on all cores; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

fn random_seed(base: u64, pair: usize, k: usize, side: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ ((pair as u64) << 32)
        ^ ((k as u64) << 2)
        ^ side
}

/// Per-cloud detector output from which any top-K is taken.
enum Ranking {
    Scored(KeypointSet),
    Random,
}

fn rank(kind: DetectorKind, cfg: &ExperimentConfig, models: &Models, cloud: &PointCloud) -> Result<Ranking> {
    Ok(match kind {
        DetectorKind::Random => Ranking::Random,
        DetectorKind::Skd => {
            let det = models.detector.as_ref().expect("checked by load_models");
            Ranking::Scored(top_k(&det.probabilities(cloud)?, cloud.len())?)
        }
        DetectorKind::Elf3d => {
            let grads = models.descriptor.input_gradient(cloud, cfg.layer)?;
            Ranking::Scored(elf3d_detect(&grads, cloud, cfg.nms_radius, cfg.histogram_bins)?)
        }
    })
}

fn take_k(r: &Ranking, k: usize, n: usize, seed: u64) -> Result<KeypointSet> {
    match r {
        Ranking::Random => random_detect(n, k, seed),
        Ranking::Scored(ks) => {
            if k > n {
                return Err(Error::KTooLarge { k, n });
            }
            if ks.is_empty() {
                return Err(Error::EmptyKeypointSet);
            }
            let m = k.min(ks.len());
            Ok(KeypointSet {
                indices: ks.indices[..m].to_vec(),
                scores: ks.scores[..m].to_vec(),
            })
        }
    }
}

/// Top-`k` keypoints of one cloud with a single detector. Random keypoints
/// are drawn with `cfg.seed`.
pub fn detect_keypoints(
    kind: DetectorKind,
    cfg: &ExperimentConfig,
    models: &Models,
    cloud: &PointCloud,
    k: usize,
) -> Result<KeypointSet> {
    if kind == DetectorKind::Skd && models.detector.is_none() {
        return Err(Error::Config("detector 'skd' needs a detector checkpoint (detector = <path>)".into()));
    }
    take_k(&rank(kind, cfg, models, cloud)?, k, cloud.len(), random_seed(cfg.seed, 0, k, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub rank: usize,
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub score: f64,
}

pub fn keypoint_rows(keypoints: &KeypointSet, cloud: &PointCloud) -> Vec<KeypointRow> {
    keypoints
        .indices
        .iter()
        .zip(&keypoints.scores)
        .enumerate()
        .map(|(rank, (&index, &score))| {
            let p = cloud.point(index);
            KeypointRow { rank, index, x: p.x, y: p.y, z: p.z, score }
        })
        .collect()
}

struct Cell {
    correct: Vec<usize>,
    evaluated: usize,
    repeatability: f64,
    registration: RegistrationResult,
}

fn evaluate_pair(
    cfg: &ExperimentConfig,
    models: &Models,
    index: usize,
    pair: &TrainingPair,
    grid: &[f64],
) -> Result<Vec<Cell>> {
    let desc_a = models.descriptor.describe(&pair.cloud_k)?;
    let desc_b = models.descriptor.describe(&pair.cloud_l)?;
    let (na, nb) = (pair.cloud_k.len(), pair.cloud_l.len());
    let mut cells = Vec::with_capacity(cfg.detectors.len() * cfg.k_values.len());
    for &kind in &cfg.detectors {
        let ra = rank(kind, cfg, models, &pair.cloud_k)?;
        let rb = rank(kind, cfg, models, &pair.cloud_l)?;
        for &k in &cfg.k_values {
            let kp_a = take_k(&ra, k, na, random_seed(cfg.seed, index, k, 0))?;
            let kp_b = take_k(&rb, k, nb, random_seed(cfg.seed, index, k, 1))?;
            let (da, db): (DMatrix<f64>, DMatrix<f64>) = (kp_a.gather_rows(&desc_a), kp_b.gather_rows(&desc_b));
            let curve = matching_score(
                &kp_a,
                &kp_b,
                &da,
                &db,
                &pair.cloud_k,
                &pair.cloud_l,
                &pair.truth,
                cfg.overlap_radius,
                grid,
            )?;
            let rep = repeatability(&kp_a, &kp_b, &pair.cloud_k, &pair.cloud_l, &pair.truth, cfg.epsilon)?;
            let ransac = RansacConfig {
                inlier_threshold: cfg.inlier_threshold,
                confidence: cfg.confidence,
                max_iterations: cfg.max_iterations,
                seed: cfg.seed.wrapping_add(index as u64),
            };
            let registration = match ransac_register(&kp_a.positions(&pair.cloud_k), &da, &kp_b.positions(&pair.cloud_l), &db, &ransac) {
                Ok(outcome) => RegistrationResult::new(&outcome, &pair.truth),
                Err(Error::TooFewMatches(_)) => RegistrationResult::failed(0),
                Err(e) => return Err(e),
            };
            cells.push(Cell {
                correct: curve.correct,
                evaluated: curve.n_evaluated,
                repeatability: rep.repeatability,
                registration,
            });
        }
    }
    Ok(cells)
}

/// Detects with every configured method on every pair and K, always
/// matching with `models.descriptor`. Matching precision is pooled over
/// pairs (total correct over total evaluated); repeatability is the mean of
/// the per-pair values.
pub fn evaluate(cfg: &ExperimentConfig, models: &Models, pairs: &[TrainingPair]) -> Result<Report> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grid = distance_grid();
    let per_pair = par_map(pairs, |i, p| evaluate_pair(cfg, models, i, p, &grid).map_err(|e| e.in_pair(i.to_string())));
    let per_pair = per_pair.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = Report {
        matching: Vec::new(),
        repeatability: Vec::new(),
        registration: Vec::new(),
        summary: Summary {
            parameters: MetricParameters {
                pairs: pairs.len(),
                layer: cfg.layer,
                epsilon: cfg.epsilon,
                overlap_radius: cfg.overlap_radius,
                inlier_threshold: cfg.inlier_threshold,
                confidence: cfg.confidence,
                max_iterations: cfg.max_iterations,
                nms_radius: cfg.nms_radius,
                histogram_bins: cfg.histogram_bins,
                seed: cfg.seed,
            },
            rows: Vec::new(),
        },
    };
    let mut cell = 0;
    for &kind in &cfg.detectors {
        let method = kind.name().to_string();
        for &k in &cfg.k_values {
            let cells: Vec<&Cell> = per_pair.iter().map(|c| &c[cell]).collect();
            cell += 1;
            let evaluated: usize = cells.iter().map(|c| c.evaluated).sum();
            let precision: Vec<f64> = (0..grid.len())
                .map(|g| {
                    let correct: usize = cells.iter().map(|c| c.correct[g]).sum();
                    if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 }
                })
                .collect();
            for (d, p) in grid.iter().zip(&precision) {
                report.matching.push(MatchingRow { method: method.clone(), k, d: *d, precision: *p });
            }
            let rep = cells.iter().map(|c| c.repeatability).sum::<f64>() / cells.len() as f64;
            report.repeatability.push(RepeatabilityRow { method: method.clone(), k, epsilon: cfg.epsilon, repeatability: rep });
            let regs: Vec<RegistrationResult> = cells.iter().map(|c| c.registration.clone()).collect();
            for (pair, r) in regs.iter().enumerate() {
                report.registration.push(RegistrationRow {
                    method: method.clone(),
                    k,
                    pair,
                    rte: r.rte,
                    rre: r.rre,
                    success: r.success,
                    iterations: r.iterations,
                    inlier_ratio: r.inlier_ratio,
                });
            }
            let agg = crate::evaluation::aggregate_registration(&regs)?;
            report.summary.rows.push(SummaryRow {
                method: method.clone(),
                k,
                rte_mean: agg.rte_mean,
                rte_std: agg.rte_std,
                rre_mean: agg.rre_mean,
                rre_std: agg.rre_std,
                success_rate: agg.success_rate,
                avg_iterations: agg.mean_iterations,
                inlier_ratio: agg.mean_inlier_ratio,
                precision_at_1m: *precision.last().expect("grid is non-empty"),
                repeatability: rep,
            });
        }
    }
    Ok(report)
}

pub const MATCHING_CSV: &str = "matching.csv";
pub const REPEATABILITY_CSV: &str = "repeatability.csv";
pub const REGISTRATION_CSV: &str = "registration.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const METADATA_JSON: &str = "metadata.json";

/// Writes the CSV tables and `summary.json`; all deterministic.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = [MATCHING_CSV, REPEATABILITY_CSV, REGISTRATION_CSV, SUMMARY_JSON]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_csv(&report.matching, &paths[0])?;
    write_csv(&report.repeatability, &paths[1])?;
    write_csv(&report.registration, &paths[2])?;
    let json = serde_json::to_string_pretty(&report.summary)? + "\n";
    fs::write(&paths[3], json).map_err(|e| Error::io(&paths[3], e))?;
    Ok(paths)
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    created_unix_s: u64,
    version: &'a str,
    seed: u64,
    scene_seed: u64,
    descriptor_seed: u64,
    config: String,
}

/// Run metadata (timestamp, version, config echo), kept apart from the
/// deterministic report files.
pub fn write_metadata(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Metadata {
        created_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        scene_seed: cfg.scene.seed,
        descriptor_seed: cfg.descriptor_seed,
        config: cfg.to_kv_text(),
    };
    let path = dir.join(METADATA_JSON);
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads models and data, evaluates, and writes every report file into
/// `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let models = load_models(cfg)?;
    let pairs = load_pairs(cfg)?;
    let report = evaluate(cfg, &models, &pairs)?;
    write_report(&report, &cfg.output_dir)?;
    write_metadata(cfg, &cfg.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub precision_at_1m: f64,
}

/// Matching precision at 1 m of the plain saliency top-K detector built on
/// each descriptor layer in turn, pooled over `pairs`. One row per layer.
pub fn evaluate_layers(model: &DescriptorModel, pairs: &[TrainingPair], k: usize) -> Result<Vec<LayerRow>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let grid = [1.0];
    let per_pair = par_map(pairs, |i, pair| {
        let run = || -> Result<Vec<(usize, usize)>> {
            let desc_a = model.describe(&pair.cloud_k)?;
            let desc_b = model.describe(&pair.cloud_l)?;
            (1..=model.layer_count())
                .map(|layer| {
                    let kp_a = top_k(&cloud_saliency(model, &pair.cloud_k, layer)?.values, k)?;
                    let kp_b = top_k(&cloud_saliency(model, &pair.cloud_l, layer)?.values, k)?;
                    let curve = matching_score(
                        &kp_a,
                        &kp_b,
                        &kp_a.gather_rows(&desc_a),
                        &kp_b.gather_rows(&desc_b),
                        &pair.cloud_k,
                        &pair.cloud_l,
                        &pair.truth,
                        DEFAULT_OVERLAP_RADIUS,
                        &grid,
                    )?;
                    Ok((curve.correct[0], curve.n_evaluated))
                })
                .collect()
        };
        run().map_err(|e| e.in_pair(i.to_string()))
    });
    let per_pair = per_pair.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..model.layer_count())
        .map(|l| {
            let correct: usize = per_pair.iter().map(|p| p[l].0).sum();
            let evaluated: usize = per_pair.iter().map(|p| p[l].1).sum();
            LayerRow {
                layer: l + 1,
                k,
                precision_at_1m: if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 },
            }
        })
        .collect())
}
