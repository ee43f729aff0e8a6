//! `key = value` configuration files.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored;
//! lists are comma separated. Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::descriptor::DEFAULT_NEIGHBORS;
use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    DEFAULT_CONFIDENCE, DEFAULT_EPSILON, DEFAULT_INLIER_THRESHOLD, DEFAULT_OVERLAP_RADIUS, MAX_RANSAC_ITERATIONS,
};

use super::synth::SceneConfig;

/// Parsed settings, consumed key by key.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            kv.insert(k.trim(), v.trim())?;
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::Config("empty key".into()));
        }
        if self.entries.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("key '{key}' given twice")));
        }
        Ok(())
    }

    /// Parses `key=value` (as given on a command line).
    pub fn insert_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("'{pair}' is not key=value")))?;
        self.insert(k.trim(), v.trim())
    }

    /// Later entries win over earlier ones.
    pub fn merge(&mut self, other: KeyValues) {
        self.entries.extend(other.entries);
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Moves every `<prefix>.<key>` entry out, returned as `<key>`.
    pub fn split_prefix(&mut self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        let mut out = KeyValues::default();
        for k in keys {
            let v = self.entries.remove(&k).expect("key listed above");
            out.entries.insert(k[dotted.len()..].to_string(), v);
        }
        out
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{s}'"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown key '{k}'"))),
        }
    }
}

impl SceneConfig {
    /// Reads `scene.*` keys.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("scene.seed", &mut self.seed)?;
        kv.set("scene.planes", &mut self.planes)?;
        kv.set("scene.boxes", &mut self.boxes)?;
        kv.set("scene.poles", &mut self.poles)?;
        kv.set("scene.points_per_primitive", &mut self.points_per_primitive)?;
        kv.set("scene.noise_sigma", &mut self.noise_sigma)?;
        kv.set("scene.max_rotation_deg", &mut self.max_rotation_deg)?;
        kv.set("scene.max_translation_m", &mut self.max_translation_m)?;
        kv.set("scene.extent_m", &mut self.extent_m)?;
        self.validate()
    }

    pub fn write_kv(&self, out: &mut String) {
        let _ = writeln!(out, "scene.seed = {}", self.seed);
        let _ = writeln!(out, "scene.planes = {}", self.planes);
        let _ = writeln!(out, "scene.boxes = {}", self.boxes);
        let _ = writeln!(out, "scene.poles = {}", self.poles);
        let _ = writeln!(out, "scene.points_per_primitive = {}", self.points_per_primitive);
        let _ = writeln!(out, "scene.noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(out, "scene.max_rotation_deg = {}", self.max_rotation_deg);
        let _ = writeln!(out, "scene.max_translation_m = {}", self.max_translation_m);
        let _ = writeln!(out, "scene.extent_m = {}", self.extent_m);
    }
}

impl TrainConfig {
    /// Keys: `k`, `tau`, `epochs`, `step_size`, `momentum`, `seed`,
    /// `pca_target`, `layer`, `pretrain_epochs`.
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        kv.set("k", &mut self.neighbors)?;
        kv.set("tau", &mut self.tau)?;
        kv.set("epochs", &mut self.epochs)?;
        kv.set("step_size", &mut self.step_size)?;
        kv.set("momentum", &mut self.momentum)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("pca_target", &mut self.pca_target)?;
        kv.set("layer", &mut self.layer)?;
        kv.set("pretrain_epochs", &mut self.pretrain_epochs)?;
        if self.neighbors == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(self.pca_target > 0.0 && self.pca_target <= 1.0) {
            return Err(Error::Config("pca_target must lie in (0, 1]".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Config("tau must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut cfg = Self::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "k = {}\ntau = {}\nepochs = {}\nstep_size = {}\nmomentum = {}\nseed = {}\npca_target = {}\nlayer = {}\npretrain_epochs = {}\n",
            self.neighbors,
            self.tau,
            self.epochs,
            self.step_size,
            self.momentum,
            self.seed,
            self.pca_target,
            self.layer,
            self.pretrain_epochs
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DetectorKind {
    Random,
    Skd,
    Elf3d,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Random => "random",
            DetectorKind::Skd => "skd",
            DetectorKind::Elf3d => "elf3d",
        }
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(DetectorKind::Random),
            "skd" => Ok(DetectorKind::Skd),
            "elf3d" => Ok(DetectorKind::Elf3d),
            other => Err(Error::Config(format!("unknown detector '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `pairs` generated pairs from `scene`, scene seeds counting up.
    Synthetic,
    /// A directory with a `pairs.txt` index; see [`super::load_pair_index`].
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub scene: SceneConfig,
    pub pairs: usize,
    pub detectors: Vec<DetectorKind>,
    pub k_values: Vec<usize>,
    pub layer: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub overlap_radius: f64,
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// Neighbourhood size of a freshly seeded descriptor.
    pub neighbors: usize,
    pub descriptor_seed: u64,
    /// Descriptor checkpoint; when absent the descriptor embedded in the
    /// detector checkpoint is used, or a seeded one.
    pub descriptor_checkpoint: Option<PathBuf>,
    pub detector_checkpoint: Option<PathBuf>,
    pub nms_radius: f64,
    pub histogram_bins: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            scene: SceneConfig {
                seed: 1000,
                ..SceneConfig::default()
            },
            pairs: 10,
            detectors: vec![DetectorKind::Random, DetectorKind::Skd],
            k_values: vec![128, 256],
            layer: 3,
            tau: 0.5,
            epsilon: DEFAULT_EPSILON,
            overlap_radius: DEFAULT_OVERLAP_RADIUS,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            confidence: DEFAULT_CONFIDENCE,
            max_iterations: MAX_RANSAC_ITERATIONS,
            seed: 0,
            neighbors: DEFAULT_NEIGHBORS,
            descriptor_seed: 0,
            descriptor_checkpoint: None,
            detector_checkpoint: None,
            nms_radius: 0.5,
            histogram_bins: 64,
            output_dir: PathBuf::from("report"),
        }
    }
}

fn path_or_none(s: Option<String>) -> Option<Option<PathBuf>> {
    s.map(|s| if s.is_empty() || s == "none" { None } else { Some(PathBuf::from(s)) })
}

impl ExperimentConfig {
    pub fn apply(&mut self, kv: &mut KeyValues) -> Result<()> {
        if let Some(src) = kv.take::<String>("source")? {
            self.source = if src == "synthetic" {
                DataSource::Synthetic
            } else {
                DataSource::Directory(PathBuf::from(src))
            };
        }
        self.scene.apply(kv)?;
        kv.set("pairs", &mut self.pairs)?;
        if let Some(d) = kv.take_list("detectors")? {
            self.detectors = d;
        }
        if let Some(k) = kv.take_list("k_values")? {
            self.k_values = k;
        }
        kv.set("layer", &mut self.layer)?;
        kv.set("tau", &mut self.tau)?;
        kv.set("epsilon", &mut self.epsilon)?;
        kv.set("overlap_radius", &mut self.overlap_radius)?;
        kv.set("inlier_threshold", &mut self.inlier_threshold)?;
        kv.set("confidence", &mut self.confidence)?;
        kv.set("max_iterations", &mut self.max_iterations)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("neighbors", &mut self.neighbors)?;
        kv.set("descriptor_seed", &mut self.descriptor_seed)?;
        if let Some(p) = path_or_none(kv.take("descriptor")?) {
            self.descriptor_checkpoint = p;
        }
        if let Some(p) = path_or_none(kv.take("detector")?) {
            self.detector_checkpoint = p;
        }
        kv.set("nms_radius", &mut self.nms_radius)?;
        kv.set("histogram_bins", &mut self.histogram_bins)?;
        if let Some(o) = kv.take::<String>("output")? {
            self.output_dir = PathBuf::from(o);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Config("k_values must be non-empty and each K ≥ 1".into()));
        }
        if self.detectors.is_empty() {
            return Err(Error::Config("no detectors configured".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("confidence must lie in (0, 1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("overlap_radius", self.overlap_radius),
            ("inlier_threshold", self.inlier_threshold),
            ("nms_radius", self.nms_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if matches!(self.source, DataSource::Synthetic) && self.pairs == 0 {
            return Err(Error::Config("pairs must be positive".into()));
        }
        self.scene.validate()
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let src = match &self.source {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Directory(p) => p.display().to_string(),
        };
        let join = |v: Vec<String>| v.join(",");
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "source = {src}");
        let _ = writeln!(s, "pairs = {}", self.pairs);
        self.scene.write_kv(&mut s);
        let _ = writeln!(s, "detectors = {}", join(self.detectors.iter().map(|d| d.name().to_string()).collect()));
        let _ = writeln!(s, "k_values = {}", join(self.k_values.iter().map(|k| k.to_string()).collect()));
        let _ = writeln!(s, "layer = {}", self.layer);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "overlap_radius = {}", self.overlap_radius);
        let _ = writeln!(s, "inlier_threshold = {}", self.inlier_threshold);
        let _ = writeln!(s, "confidence = {}", self.confidence);
        let _ = writeln!(s, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "neighbors = {}", self.neighbors);
        let _ = writeln!(s, "descriptor_seed = {}", self.descriptor_seed);
        let _ = writeln!(s, "descriptor = {}", opt(&self.descriptor_checkpoint));
        let _ = writeln!(s, "detector = {}", opt(&self.detector_checkpoint));
        let _ = writeln!(s, "nms_radius = {}", self.nms_radius);
        let _ = writeln!(s, "histogram_bins = {}", self.histogram_bins);
        let _ = writeln!(s, "output = {}", self.output_dir.display());
        s
    }
}
