//! Grid execution: inject → train → score → persist, one directory per
//! cell, resumable and safe to re-run.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::checkpoint;
use crate::data::{load, ImageDataset, Split};
use crate::deletion::{apply_deletion, CgConfig, DeletionMethod};
use crate::error::{Error, Result};
use crate::harness::config::{selection_seed, ExperimentConfig};
use crate::harness::report::{DeletionRow, MetricsRow};
use crate::metrics::{accuracy, empirical_norm, spurious_score};
use crate::nn::{build_model, train, ArchSpec, TrainConfig};
use crate::spurious::{make_pattern, inject, Pattern, PatternKind, PoisonPlan};

/// One unit of work: a single (pattern, class, count, seed) combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub pattern: PatternKind,
    pub target_class: u8,
    pub n: usize,
    pub seed: u64,
}

/// Persisted result of one cell.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CellResult {
    pub pattern: String,
    pub target_class: u8,
    pub n: usize,
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_norm: Option<f64>,
    /// Checkpoint path relative to the experiment directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub finished_unix: u64,
    pub seconds: f64,
}

/// Everything one `run` produced, written as `record.json` next to the cells.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub dataset: String,
    pub arch: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub cells: Vec<CellResult>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// All grid cells of a config, in deterministic order.
pub fn cells_of(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &pattern in &cfg.patterns {
        for &target_class in &cfg.target_classes {
            for &n in &cfg.n_grid {
                for &seed in &cfg.seeds {
                    cells.push(Cell { pattern, target_class, n, seed });
                }
            }
        }
    }
    cells
}

/// Experiment root: `<out_dir>/<hash12>`.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join(cfg.short_hash())
}

/// Cell directory: `<out_dir>/<hash12>/<pattern>/<class>/<n>/<seed>`.
pub fn cell_dir(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    experiment_dir(cfg)
        .join(cell.pattern.name())
        .join(cell.target_class.to_string())
        .join(cell.n.to_string())
        .join(cell.seed.to_string())
}

/// A cell is done when its metrics row parses and its checkpoint exists.
pub fn cell_done(cfg: &ExperimentConfig, cell: &Cell) -> bool {
    let dir = cell_dir(cfg, cell);
    dir.join("model.ckpt").is_file()
        && MetricsRow::read_csv(&dir.join("metrics.csv")).is_ok()
}

/// The shared ingredients of a run, loaded once.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub train_set: ImageDataset,
    pub test_set: ImageDataset,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let train_set = load(&cfg.data_dir, cfg.dataset, Split::Train)?;
        let test_set = load(&cfg.data_dir, cfg.dataset, Split::Test)?;
        Ok(Workspace { cfg: cfg.clone(), train_set, test_set })
    }

    pub fn arch_spec(&self) -> Result<ArchSpec> {
        ArchSpec::new(self.cfg.arch, self.cfg.dataset.input_shape(), self.cfg.dataset.num_classes())
    }

    /// The experiment-wide pattern for a kind (sampled once, shared by
    /// every n and seed).
    pub fn pattern(&self, kind: PatternKind) -> Result<Pattern> {
        make_pattern(kind, self.cfg.dataset.input_shape(), self.cfg.pattern_seed)
    }

    /// The poisoned training set for a cell (identical for all seeds).
    pub fn poisoned(&self, cell: &Cell) -> Result<crate::spurious::PoisonedDataset> {
        let pattern = make_pattern(cell.pattern, self.cfg.dataset.input_shape(), self.cfg.pattern_seed)?;
        let plan = PoisonPlan {
            target_class: cell.target_class,
            n: cell.n,
            selection_seed: selection_seed(cell.pattern, cell.target_class, cell.n),
        };
        inject(&self.train_set, &pattern, &plan)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, augment: self.cfg.augment, ..self.cfg.train.clone() }
    }

    /// Trains and scores one cell, writing `model.ckpt`, `metrics.csv`, and
    /// `history.csv` into the cell directory.
    pub fn run_cell(&self, cell: &Cell) -> Result<MetricsRow> {
        let started = Instant::now();
        let dir = cell_dir(&self.cfg, cell);
        std::fs::create_dir_all(&dir)?;

        let pattern = self.pattern(cell.pattern)?;
        let poisoned = self.poisoned(cell)?;
        let spec = self.arch_spec()?;
        let mut model = build_model::<f32>(&spec, cell.seed)?;
        let history = train(&mut model, &poisoned.data, None, &self.train_config(cell.seed))?;

        let score =
            spurious_score(&model, &self.test_set, &pattern, cell.target_class, self.cfg.score_threshold)?;
        let acc = accuracy(&model, &self.test_set)?;
        let norm = empirical_norm(&self.test_set, &pattern)?;

        checkpoint::save(&dir.join("model.ckpt"), &model)?;
        let mut hist = String::from("# splab-csv v1\nepoch,lr,train_loss\n");
        for e in &history.epochs {
            hist.push_str(&format!("{},{},{}\n", e.epoch, e.lr, e.train_loss));
        }
        std::fs::write(dir.join("history.csv"), hist)?;

        let row = MetricsRow {
            experiment: self.cfg.short_hash(),
            dataset: self.cfg.dataset.name().to_string(),
            arch: self.cfg.arch.name().to_string(),
            pattern: cell.pattern.name().to_string(),
            target_class: cell.target_class,
            n: cell.n,
            seed: cell.seed,
            score,
            accuracy: acc,
            empirical_norm: norm,
        };
        // write via a temp file so a crash never leaves a parseable
        // half-result that the resume check would trust
        let tmp = dir.join("metrics.csv.tmp");
        row.write_csv(&tmp)?;
        std::fs::rename(&tmp, dir.join("metrics.csv"))?;
        eprintln!(
            "[{}] {}/{}/{}/{}: score {:.4}, accuracy {:.4} ({:.0}s)",
            self.cfg.short_hash(),
            cell.pattern.name(),
            cell.target_class,
            cell.n,
            cell.seed,
            score,
            acc,
            started.elapsed().as_secs_f64(),
        );
        Ok(row)
    }
}

/// Runs every cell of the experiment, skipping finished ones unless
/// `force`. Failures are recorded per cell and do not stop the run.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<RunRecord> {
    let started_unix = unix_now();
    let ws = Workspace::open(cfg)?;
    let root = experiment_dir(cfg);
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("config.txt"), cfg.canonical())?;

    let cells = cells_of(cfg);
    let queue: Mutex<std::collections::VecDeque<Cell>> = Mutex::new(cells.iter().copied().collect());
    let results: Mutex<Vec<(Cell, CellResult)>> = Mutex::new(Vec::new());

    let worker = |ws: &Workspace| loop {
        let cell = match queue.lock().expect("queue lock").pop_front() {
            Some(c) => c,
            None => return,
        };
        let started = Instant::now();
        let result = if !force && cell_done(&ws.cfg, &cell) {
            let row = MetricsRow::read_csv(&cell_dir(&ws.cfg, &cell).join("metrics.csv"))
                .expect("checked by cell_done");
            eprintln!(
                "[{}] {}/{}/{}/{}: cached (score {:.4})",
                ws.cfg.short_hash(),
                cell.pattern.name(),
                cell.target_class,
                cell.n,
                cell.seed,
                row.score
            );
            CellResult {
                pattern: cell.pattern.name().to_string(),
                target_class: cell.target_class,
                n: cell.n,
                seed: cell.seed,
                status: "done".into(),
                score: Some(row.score),
                accuracy: Some(row.accuracy),
                empirical_norm: Some(row.empirical_norm),
                checkpoint: Some(relative_checkpoint(&cell)),
                error: None,
                finished_unix: unix_now(),
                seconds: 0.0,
            }
        } else {
            match ws.run_cell(&cell) {
                Ok(row) => CellResult {
                    pattern: cell.pattern.name().to_string(),
                    target_class: cell.target_class,
                    n: cell.n,
                    seed: cell.seed,
                    status: "done".into(),
                    score: Some(row.score),
                    accuracy: Some(row.accuracy),
                    empirical_norm: Some(row.empirical_norm),
                    checkpoint: Some(relative_checkpoint(&cell)),
                    error: None,
                    finished_unix: unix_now(),
                    seconds: started.elapsed().as_secs_f64(),
                },
                Err(e) => {
                    eprintln!(
                        "[{}] {}/{}/{}/{}: FAILED: {e}",
                        ws.cfg.short_hash(),
                        cell.pattern.name(),
                        cell.target_class,
                        cell.n,
                        cell.seed
                    );
                    CellResult {
                        pattern: cell.pattern.name().to_string(),
                        target_class: cell.target_class,
                        n: cell.n,
                        seed: cell.seed,
                        status: "error".into(),
                        score: None,
                        accuracy: None,
                        empirical_norm: None,
                        checkpoint: None,
                        error: Some(e.to_string()),
                        finished_unix: unix_now(),
                        seconds: started.elapsed().as_secs_f64(),
                    }
                }
            }
        };
        results.lock().expect("results lock").push((cell, result));
    };

    let jobs = cfg.jobs.min(cells.len()).max(1);
    if jobs == 1 {
        worker(&ws);
    } else {
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| worker(&ws));
            }
        });
    }

    let mut results = results.into_inner().expect("results lock");
    // report in grid order regardless of scheduling
    results.sort_by_key(|(cell, _)| {
        cells.iter().position(|c| c == cell).expect("cell came from the grid")
    });

    let record = RunRecord {
        config_hash: cfg.hash(),
        dataset: cfg.dataset.name().to_string(),
        arch: cfg.arch.name().to_string(),
        started_unix,
        finished_unix: unix_now(),
        cells: results.into_iter().map(|(_, r)| r).collect(),
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| Error::format("record.json", e.to_string()))?;
    std::fs::write(root.join("record.json"), json)?;
    Ok(record)
}

fn relative_checkpoint(cell: &Cell) -> String {
    format!(
        "{}/{}/{}/{}/model.ckpt",
        cell.pattern.name(),
        cell.target_class,
        cell.n,
        cell.seed
    )
}

/// Runs the deletion audit for one grid cell across seeds: score the trained
/// model, apply each method, score again, and keep a from-scratch retrain as
/// the reference column. Rows are written to `deletion.csv` in each seed's
/// cell directory.
pub fn audit(
    cfg: &ExperimentConfig,
    pattern: PatternKind,
    target_class: u8,
    n: usize,
    seeds: &[u64],
    methods: &[DeletionMethod],
    force: bool,
) -> Result<Vec<DeletionRow>> {
    if n == 0 {
        return Err(Error::Config("nothing to delete in an n = 0 cell".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no deletion methods requested".into()));
    }
    let ws = Workspace::open(cfg)?;
    let pat = ws.pattern(pattern)?;
    let cg = CgConfig::default();
    let mut rows = Vec::new();

    for &seed in seeds {
        let cell = Cell { pattern, target_class, n, seed };
        let dir = cell_dir(cfg, &cell);
        let csv_path = dir.join("deletion.csv");
        if !force && csv_path.is_file() {
            if let Ok(cached) = DeletionRow::read_csv(&csv_path) {
                eprintln!("[{}] deletion {}/{}/{}/{}: cached", cfg.short_hash(), pattern.name(), target_class, n, seed);
                rows.extend(cached);
                continue;
            }
        }
        if !cell_done(cfg, &cell) {
            return Err(Error::Config(format!(
                "cell {}/{}/{}/{} has no trained model; run the experiment first",
                pattern.name(),
                target_class,
                n,
                seed
            )));
        }
        let model = checkpoint::load::<f32>(&dir.join("model.ckpt"))?;
        let poisoned = ws.poisoned(&cell)?;
        let score_before =
            spurious_score(&model, &ws.test_set, &pat, target_class, cfg.score_threshold)?;
        let accuracy_before = accuracy(&model, &ws.test_set)?;

        // the from-scratch reference every method is compared against
        let t0 = Instant::now();
        let reference = apply_deletion(
            DeletionMethod::FullRetrain,
            &model,
            &poisoned.data,
            &poisoned.poisoned_indices,
            None,
            &ws.train_config(seed),
            &cg,
        )?;
        let reference_seconds = t0.elapsed().as_secs_f64();
        let fullretrain_score =
            spurious_score(&reference.model, &ws.test_set, &pat, target_class, cfg.score_threshold)?;

        let mut seed_rows = Vec::new();
        for &method in methods {
            let (score_after, accuracy_after, residual, seconds) = match method {
                DeletionMethod::FullRetrain => (
                    fullretrain_score,
                    accuracy(&reference.model, &ws.test_set)?,
                    f64::NAN,
                    reference_seconds,
                ),
                _ => {
                    let t = Instant::now();
                    let outcome = apply_deletion(
                        method,
                        &model,
                        &poisoned.data,
                        &poisoned.poisoned_indices,
                        None,
                        &ws.train_config(seed),
                        &cg,
                    )?;
                    let secs = t.elapsed().as_secs_f64();
                    let after = spurious_score(
                        &outcome.model,
                        &ws.test_set,
                        &pat,
                        target_class,
                        cfg.score_threshold,
                    )?;
                    let acc_after = accuracy(&outcome.model, &ws.test_set)?;
                    (after, acc_after, outcome.ihvp.map_or(f64::NAN, |r| r.residual), secs)
                }
            };
            eprintln!(
                "[{}] deletion {}/{}/{}/{} {}: before {:.4} after {:.4} (retrain ref {:.4})",
                cfg.short_hash(),
                pattern.name(),
                target_class,
                n,
                seed,
                method.name(),
                score_before,
                score_after,
                fullretrain_score
            );
            seed_rows.push(DeletionRow {
                experiment: cfg.short_hash(),
                method: method.name().to_string(),
                pattern: pattern.name().to_string(),
                target_class,
                n,
                seed,
                score_before,
                score_after,
                fullretrain_score,
                accuracy_before,
                accuracy_after,
                residual,
                seconds,
            });
        }
        DeletionRow::write_csv(&csv_path, &seed_rows)?;
        rows.extend(seed_rows);
    }
    Ok(rows)
}
