//! Flat key=value experiment configuration.
//!
//! The grammar is deliberately small: one `key = value` pair per line,
//! `#`-prefixed comment lines, blank lines ignored. Lists are
//! comma-separated. Unknown or duplicate keys are errors so typos fail fast
//! instead of silently running a default. `docs/config.md` documents every
//! key.

use std::collections::BTreeMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::data::DatasetName;
use crate::deletion::DeletionMethod;
use crate::error::{Error, Result};
use crate::nn::{ArchKind, OptimizerKind, TrainConfig};
use crate::spurious::PatternKind;

/// A fully resolved experiment: every field has a concrete value after
/// defaults are applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub arch: ArchKind,
    pub patterns: Vec<PatternKind>,
    pub target_classes: Vec<u8>,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Per-cell training settings; `seed` and `augment` are filled in per run.
    pub train: TrainConfig,
    pub augment: bool,
    pub pattern_seed: u64,
    pub score_threshold: f64,
    pub deletion_methods: Vec<DeletionMethod>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

/// Default spurious-example grid for a dataset.
pub fn default_n_grid(dataset: DatasetName) -> Vec<usize> {
    match dataset {
        DatasetName::Mnist | DatasetName::Fashion => vec![0, 3, 5, 10, 20, 100, 2000, 5000],
        DatasetName::Cifar10 => vec![0, 3, 5, 10, 20, 100, 500],
    }
}

/// Default learning rate for a dataset/optimizer pair.
pub fn default_lr(dataset: DatasetName, optimizer: OptimizerKind) -> f64 {
    match (dataset, optimizer) {
        (DatasetName::Cifar10, OptimizerKind::Sgd) => 0.1,
        _ => 0.01,
    }
}

fn parse_list<T, E>(raw: &str, what: &str, parse: impl Fn(&str) -> std::result::Result<T, E>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for item in raw.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        out.push(
            parse(item).map_err(|_| Error::Config(format!("bad {what} entry `{item}`")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Parses config text, applying defaults for absent keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim().to_ascii_lowercase();
            let value = value.trim().to_string();
            if kv.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }
        Self::from_pairs(kv)
    }

    /// Reads and parses a config file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn from_pairs(mut kv: BTreeMap<String, String>) -> Result<Self> {
        let mut take = |key: &str| kv.remove(key);

        let dataset = match take("dataset") {
            Some(v) => DatasetName::parse(&v)?,
            None => return Err(Error::Config("missing required key `dataset`".into())),
        };
        let arch = match take("arch") {
            Some(v) => ArchKind::parse(&v)?,
            None => return Err(Error::Config("missing required key `arch`".into())),
        };
        let patterns = match take("patterns") {
            Some(v) => parse_list(&v, "patterns", PatternKind::parse)?,
            None => PatternKind::ALL.to_vec(),
        };
        let target_classes = match take("target_classes") {
            Some(v) => {
                let classes = parse_list(&v, "target_classes", |s| s.parse::<u8>())?;
                for &c in &classes {
                    if c as usize >= dataset.num_classes() {
                        return Err(Error::Config(format!("target class {c} out of range")));
                    }
                }
                classes
            }
            None => vec![0],
        };
        let n_grid = match take("n_grid") {
            Some(v) => {
                let mut grid = parse_list(&v, "n_grid", |s| s.parse::<usize>())?;
                grid.dedup();
                grid
            }
            None => default_n_grid(dataset),
        };
        let seeds = match take("seeds") {
            Some(v) => parse_list(&v, "seeds", |s| s.parse::<u64>())?,
            None => vec![0, 1, 2, 3, 4],
        };
        let optimizer = match take("optimizer") {
            Some(v) => OptimizerKind::parse(&v)?,
            None => OptimizerKind::Adam,
        };
        let lr = match take("lr") {
            Some(v) => v.parse::<f64>().map_err(|_| Error::Config(format!("bad lr `{v}`")))?,
            None => default_lr(dataset, optimizer),
        };
        if !(lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        let momentum = match take("momentum") {
            Some(v) => v.parse::<f64>().map_err(|_| Error::Config(format!("bad momentum `{v}`")))?,
            None => 0.9,
        };
        let epochs = match take("epochs") {
            Some(v) => v.parse::<usize>().map_err(|_| Error::Config(format!("bad epochs `{v}`")))?,
            None => 70,
        };
        let batch_size = match take("batch_size") {
            Some(v) => {
                let b = v.parse::<usize>().map_err(|_| Error::Config(format!("bad batch_size `{v}`")))?;
                if b == 0 {
                    return Err(Error::Config("batch_size must be positive".into()));
                }
                b
            }
            None => 128,
        };
        let lr_decay_epochs = match take("decay_epochs") {
            Some(v) => {
                if v.trim().eq_ignore_ascii_case("none") {
                    Vec::new()
                } else {
                    parse_list(&v, "decay_epochs", |s| s.parse::<usize>())?
                }
            }
            None => vec![40, 50, 60],
        };
        let lr_decay_factor = match take("decay_factor") {
            Some(v) => v.parse::<f64>().map_err(|_| Error::Config(format!("bad decay_factor `{v}`")))?,
            None => 0.1,
        };
        let grad_clip = match take("clip_norm") {
            Some(v) if v.eq_ignore_ascii_case("none") => None,
            Some(v) => {
                let c = v.parse::<f64>().map_err(|_| Error::Config(format!("bad clip_norm `{v}`")))?;
                if !(c > 0.0) {
                    return Err(Error::Config("clip_norm must be positive or `none`".into()));
                }
                Some(c)
            }
            None => None,
        };
        let augment = match take("augment") {
            Some(v) => v
                .parse::<bool>()
                .map_err(|_| Error::Config(format!("bad augment `{v}` (true/false)")))?,
            None => dataset == DatasetName::Cifar10,
        };
        let pattern_seed = match take("pattern_seed") {
            Some(v) => v.parse::<u64>().map_err(|_| Error::Config(format!("bad pattern_seed `{v}`")))?,
            None => 0,
        };
        let score_threshold = match take("score_threshold") {
            Some(v) => {
                v.parse::<f64>().map_err(|_| Error::Config(format!("bad score_threshold `{v}`")))?
            }
            None => crate::metrics::SCORE_THRESHOLD,
        };
        let deletion_methods = match take("deletion_methods") {
            Some(v) if v.trim().eq_ignore_ascii_case("none") => Vec::new(),
            Some(v) => parse_list(&v, "deletion_methods", DeletionMethod::parse)?,
            None => Vec::new(),
        };
        let data_dir = PathBuf::from(take("data_dir").unwrap_or_else(|| "data".into()));
        let out_dir = PathBuf::from(take("out_dir").unwrap_or_else(|| "out".into()));
        let jobs = match take("jobs") {
            Some(v) => {
                let j = v.parse::<usize>().map_err(|_| Error::Config(format!("bad jobs `{v}`")))?;
                j.max(1)
            }
            None => 1,
        };

        if let Some(unknown) = kv.keys().next() {
            return Err(Error::Config(format!("unknown key `{unknown}`")));
        }

        let train = TrainConfig {
            optimizer,
            lr,
            momentum,
            epochs,
            batch_size,
            lr_decay_epochs,
            lr_decay_factor,
            grad_clip,
            augment,
            seed: 0,
        };
        Ok(ExperimentConfig {
            dataset,
            arch,
            patterns,
            target_classes,
            n_grid,
            seeds,
            train,
            augment,
            pattern_seed,
            score_threshold,
            deletion_methods,
            data_dir,
            out_dir,
            jobs,
        })
    }

    /// Canonical text form of the semantic fields: sorted `key = value`
    /// lines with normalized list formatting. Two configs that resolve to
    /// the same experiment produce identical canonical text regardless of
    /// how their files were written.
    ///
    /// Non-semantic fields (directories, job count, deletion methods) are
    /// excluded: they change where and how work happens, not what any cell
    /// computes.
    pub fn canonical(&self) -> String {
        fn list<T: std::fmt::Display>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut lines = vec![
            format!("arch = {}", self.arch),
            format!("augment = {}", self.augment),
            format!("batch_size = {}", self.train.batch_size),
            format!(
                "clip_norm = {}",
                self.train.grad_clip.map_or("none".to_string(), |c| format!("{c}"))
            ),
            format!("dataset = {}", self.dataset),
            format!("decay_epochs = {}", list(&self.train.lr_decay_epochs)),
            format!("decay_factor = {}", self.train.lr_decay_factor),
            format!("epochs = {}", self.train.epochs),
            format!("lr = {}", self.train.lr),
            format!("momentum = {}", self.train.momentum),
            format!("n_grid = {}", list(&self.n_grid)),
            format!("optimizer = {}", self.train.optimizer.name()),
            format!("pattern_seed = {}", self.pattern_seed),
            format!("patterns = {}", list(&self.patterns)),
            format!("score_threshold = {}", self.score_threshold),
            format!("seeds = {}", list(&self.seeds)),
            format!("target_classes = {}", list(&self.target_classes)),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Hex config hash; the first 12 characters key the output tree.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

/// Selection seed for the poisoned-example draw of one grid cell. Derived
/// from the cell coordinates (not the training seed), so all five training
/// seeds of a cell poison exactly the same examples.
pub fn selection_seed(pattern: PatternKind, target_class: u8, n: usize) -> u64 {
    let digest = Sha256::digest(format!("select/{}/{}/{}", pattern.name(), target_class, n));
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
