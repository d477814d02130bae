//! Run configuration: typed settings, a `key = value` file format with
//! `[section]` headers, and the hash that tags every output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::aggregation::{DEFAULT_EPSILON, DEFAULT_OUT_DIM};
use crate::codebook::DEFAULT_CLUSTERS;
use crate::encoding::TripletConfig;
use crate::error::{Error, Result};

pub const DEFAULT_LINE_BUDGET: usize = 5000;
pub const DEFAULT_WORD_BUDGET: usize = 500;
pub const DEFAULT_SWEEP: [usize; 10] = [10, 50, 100, 250, 500, 1000, 1500, 2000, 3000, 5000];
pub const SEED_ENV: &str = "WR_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EncoderKind {
    Vlad,
    NetVlad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    Page,
    Line,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QueryMode {
    Full,
    OneLine,
    HalfPage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExperimentKind {
    Page,
    Line,
    LineMerge,
    ShortQuery,
    Word,
    WordSpecific,
    Sweep,
}

macro_rules! text_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)+
                    _ => Err(Error::InvalidConfig(format!(
                        concat!("unknown ", stringify!($ty), " {:?}; expected one of: ", $($s, " "),+),
                        s
                    ))),
                }
            }
        }
    };
}

text_enum!(EncoderKind { Vlad => "vlad", NetVlad => "netvlad" });
text_enum!(Granularity { Page => "page", Line => "line", Word => "word" });
text_enum!(QueryMode { Full => "full", OneLine => "one-line", HalfPage => "half-page" });
text_enum!(ExperimentKind {
    Page => "page",
    Line => "line",
    LineMerge => "line-merge",
    ShortQuery => "short-query",
    Word => "word",
    WordSpecific => "word-specific",
    Sweep => "sweep",
});

/// Everything that determines the fitted artifacts and the global
/// descriptors of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub seed: u64,
    pub line_budget: usize,
    pub word_budget: usize,
    pub n_clusters: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Upper bound on training descriptors fed to k-means.
    pub kmeans_sample: usize,
    pub encoder: EncoderKind,
    pub triplet: TripletConfig,
    /// Descriptors per training entity used for NetVLAD training.
    pub netvlad_descriptors: usize,
    pub whiten: bool,
    pub out_dim: usize,
    pub epsilon: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            line_budget: DEFAULT_LINE_BUDGET,
            word_budget: DEFAULT_WORD_BUDGET,
            n_clusters: DEFAULT_CLUSTERS,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-4,
            kmeans_sample: 500_000,
            encoder: EncoderKind::Vlad,
            triplet: TripletConfig::default(),
            netvlad_descriptors: 100,
            whiten: true,
            out_dim: DEFAULT_OUT_DIM,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("line_budget", self.line_budget),
            ("word_budget", self.word_budget),
            ("n_clusters", self.n_clusters),
            ("kmeans_sample", self.kmeans_sample),
            ("netvlad_descriptors", self.netvlad_descriptors),
            ("out_dim", self.out_dim),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{k} must be positive")));
            }
        }
        if !(self.epsilon >= 0.0) || !(self.kmeans_tol >= 0.0) {
            return Err(Error::InvalidConfig("epsilon and tolerance must be non-negative".into()));
        }
        self.triplet.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Entity level for sweeps (page or line); other kinds imply their own.
    pub granularity: Granularity,
    /// Overrides the per-line or per-word budget of the pipeline.
    pub features_per_unit: Option<usize>,
    pub merge_n: Option<usize>,
    pub query_mode: QueryMode,
    pub word_filter: Option<String>,
    pub sweep: Vec<usize>,
    /// Number of most common words evaluated when no word filter is given.
    pub top_words: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Page,
            granularity: Granularity::Page,
            features_per_unit: None,
            merge_n: None,
            query_mode: QueryMode::Full,
            word_filter: None,
            sweep: DEFAULT_SWEEP.to_vec(),
            top_words: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn of_kind(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.merge_n == Some(0) {
            return Err(Error::InvalidConfig("merge_n must be at least 1".into()));
        }
        if self.kind == ExperimentKind::LineMerge && self.merge_n.is_none() {
            return Err(Error::InvalidConfig("line-merge needs merge_n".into()));
        }
        if self.features_per_unit == Some(0) {
            return Err(Error::InvalidConfig("features_per_unit must be positive".into()));
        }
        if self.sweep.is_empty() || self.sweep.contains(&0) {
            return Err(Error::InvalidConfig("sweep values must be positive".into()));
        }
        if self.kind == ExperimentKind::Sweep && self.granularity == Granularity::Word {
            return Err(Error::InvalidConfig("sweeps run at page or line granularity".into()));
        }
        if self.top_words == 0 {
            return Err(Error::InvalidConfig("top_words must be positive".into()));
        }
        Ok(())
    }
}

/// Canonical `section.key = value` listing of the settings that influence
/// results. Paths and thread counts are left out.
pub fn canonical_text(p: &PipelineSettings, external: bool, e: &ExperimentConfig) -> String {
    let t = &p.triplet;
    let lines = [
        format!("run.seed = {}", p.seed),
        format!("corpus.descriptors = {}", if external { "external" } else { "native" }),
        format!("sampling.line_budget = {}", p.line_budget),
        format!("sampling.word_budget = {}", p.word_budget),
        format!("codebook.n_clusters = {}", p.n_clusters),
        format!("codebook.max_iters = {}", p.kmeans_max_iters),
        format!("codebook.tol = {:e}", p.kmeans_tol),
        format!("codebook.sample = {}", p.kmeans_sample),
        format!("encoding.encoder = {}", p.encoder),
        format!("encoding.alpha = {:e}", t.alpha),
        format!("encoding.margin = {:e}", t.margin),
        format!("encoding.learning_rate = {:e}", t.learning_rate),
        format!("encoding.epochs = {}", t.epochs),
        format!("encoding.batch_size = {}", t.batch_size.map_or("full".to_string(), |b| b.to_string())),
        format!("encoding.train_seed = {}", t.seed),
        format!("encoding.train_descriptors = {}", p.netvlad_descriptors),
        format!("aggregation.whiten = {}", p.whiten),
        format!("aggregation.out_dim = {}", p.out_dim),
        format!("aggregation.epsilon = {:e}", p.epsilon),
        format!("experiment.kind = {}", e.kind),
        format!("experiment.granularity = {}", e.granularity),
        format!("experiment.features_per_unit = {}", e.features_per_unit.map_or("default".into(), |v| v.to_string())),
        format!("experiment.merge_n = {}", e.merge_n.map_or("none".into(), |v| v.to_string())),
        format!("experiment.query_mode = {}", e.query_mode),
        format!("experiment.word_filter = {}", e.word_filter.as_deref().unwrap_or("")),
        format!("experiment.sweep = {}", join(&e.sweep)),
        format!("experiment.top_words = {}", e.top_words),
    ];
    lines.join("\n") + "\n"
}

/// First 16 hex digits of the SHA-256 of [`canonical_text`].
pub fn config_hash(p: &PipelineSettings, external: bool, e: &ExperimentConfig) -> String {
    let d = Sha256::digest(canonical_text(p, external, e).as_bytes());
    hex::encode(d)[..16].to_string()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Complete configuration of a command-line run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineSettings,
    pub experiment: ExperimentConfig,
    pub manifest: Option<PathBuf>,
    pub external_descriptors: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Whether `run.seed` was given explicitly.
    pub seed_explicit: bool,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Parses the `key = value` format. Keys may be written as `key` under a
    /// `[section]` header or as `section.key`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix('[') {
                let name = s
                    .strip_suffix(']')
                    .ok_or_else(|| Error::InvalidConfig(format!("line {}: unterminated section", n + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let full = if k.contains('.') || section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if seen.insert(full.clone(), n + 1).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key {full}", n + 1)));
            }
            cfg.set(&full, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one fully qualified key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let e = &mut self.experiment;
        match key {
            "run.seed" => {
                p.seed = parse_value(key, v)?;
                self.seed_explicit = true;
            }
            "run.threads" => self.threads = Some(parse_value(key, v)?),
            "run.output_dir" => self.output_dir = Some(PathBuf::from(v)),
            "corpus.manifest" => self.manifest = Some(PathBuf::from(v)),
            "corpus.external_descriptors" => self.external_descriptors = Some(PathBuf::from(v)),
            "sampling.line_budget" => p.line_budget = parse_value(key, v)?,
            "sampling.word_budget" => p.word_budget = parse_value(key, v)?,
            "codebook.n_clusters" => p.n_clusters = parse_value(key, v)?,
            "codebook.max_iters" => p.kmeans_max_iters = parse_value(key, v)?,
            "codebook.tol" => p.kmeans_tol = parse_value(key, v)?,
            "codebook.sample" => p.kmeans_sample = parse_value(key, v)?,
            "encoding.encoder" => p.encoder = v.parse()?,
            "encoding.alpha" => p.triplet.alpha = parse_value(key, v)?,
            "encoding.margin" => p.triplet.margin = parse_value(key, v)?,
            "encoding.learning_rate" => p.triplet.learning_rate = parse_value(key, v)?,
            "encoding.epochs" => p.triplet.epochs = parse_value(key, v)?,
            "encoding.batch_size" => {
                p.triplet.batch_size = if v == "full" { None } else { Some(parse_value(key, v)?) }
            }
            "encoding.train_seed" => p.triplet.seed = parse_value(key, v)?,
            "encoding.train_descriptors" => p.netvlad_descriptors = parse_value(key, v)?,
            "aggregation.whiten" => p.whiten = parse_bool(key, v)?,
            "aggregation.out_dim" => p.out_dim = parse_value(key, v)?,
            "aggregation.epsilon" => p.epsilon = parse_value(key, v)?,
            "experiment.kind" => e.kind = v.parse()?,
            "experiment.granularity" => e.granularity = v.parse()?,
            "experiment.features_per_unit" => e.features_per_unit = Some(parse_value(key, v)?),
            "experiment.merge_n" => e.merge_n = Some(parse_value(key, v)?),
            "experiment.query_mode" => e.query_mode = v.parse()?,
            "experiment.word_filter" => e.word_filter = Some(v.to_string()),
            "experiment.sweep" => {
                e.sweep = v
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "experiment.top_words" => e.top_words = parse_value(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.experiment.validate()?;
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(&self.pipeline, self.external_descriptors.is_some(), &self.experiment)
    }

    /// Seed from `WR_SEED` when the configuration does not set one.
    pub fn seed_from_env(&mut self) -> Result<()> {
        if self.seed_explicit {
            return Ok(());
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.pipeline.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(())
    }
}
