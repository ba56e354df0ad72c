//! CSV persistence and report generation over the output tree.
//!
//! Every file starts with the version comment `# splab-csv v1` followed by
//! a header row. Fields never contain commas (names are short identifiers,
//! numbers are plain decimals), so rows are split on `,` directly; list-like
//! report fields use `;` separators.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::stats;

pub const CSV_VERSION: &str = "# splab-csv v1";

/// One trained cell's measurements; the per-cell `metrics.csv` holds
/// exactly one of these.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    pub dataset: String,
    pub arch: String,
    pub pattern: String,
    pub target_class: u8,
    pub n: usize,
    pub seed: u64,
    pub score: f64,
    pub accuracy: f64,
    pub empirical_norm: f64,
}

pub const METRICS_HEADER: &str =
    "experiment,dataset,arch,pattern,c_tar,n,seed,score,accuracy,empirical_norm";

impl MetricsRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.dataset,
            self.arch,
            self.pattern,
            self.target_class,
            self.n,
            self.seed,
            self.score,
            self.accuracy,
            self.empirical_norm
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::format("metrics row", format!("expected 10 fields, got {}", f.len())));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            f[i].parse::<f64>().map_err(|_| Error::format(what, format!("bad number `{}`", f[i])))
        };
        Ok(MetricsRow {
            experiment: f[0].to_string(),
            dataset: f[1].to_string(),
            arch: f[2].to_string(),
            pattern: f[3].to_string(),
            target_class: f[4]
                .parse()
                .map_err(|_| Error::format("c_tar", format!("bad class `{}`", f[4])))?,
            n: f[5].parse().map_err(|_| Error::format("n", format!("bad count `{}`", f[5])))?,
            seed: f[6].parse().map_err(|_| Error::format("seed", format!("bad seed `{}`", f[6])))?,
            score: num(7, "score")?,
            accuracy: num(8, "accuracy")?,
            empirical_norm: num(9, "empirical_norm")?,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{CSV_VERSION}\n{METRICS_HEADER}\n{}\n", self.to_line()))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(v) if v == CSV_VERSION => {}
            other => {
                return Err(Error::format(
                    "metrics.csv",
                    format!("missing version line, got {other:?}"),
                ))
            }
        }
        match lines.next() {
            Some(h) if h == METRICS_HEADER => {}
            other => {
                return Err(Error::format("metrics.csv", format!("bad header {other:?}")))
            }
        }
        let row = lines.next().ok_or_else(|| Error::format("metrics.csv", "no data row"))?;
        Self::from_line(row)
    }
}

/// One deletion outcome; each audited seed's `deletion.csv` holds one row
/// per method.
#[derive(Clone, Debug, PartialEq)]
pub struct DeletionRow {
    pub experiment: String,
    pub method: String,
    pub pattern: String,
    pub target_class: u8,
    pub n: usize,
    pub seed: u64,
    pub score_before: f64,
    pub score_after: f64,
    pub fullretrain_score: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    /// Final relative CG residual; NaN for retraining methods.
    pub residual: f64,
    pub seconds: f64,
}

pub const DELETION_HEADER: &str = "experiment,method,pattern,c_tar,n,seed,score_before,score_after,fullretrain_score,accuracy_before,accuracy_after,residual,seconds";

impl DeletionRow {
    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.method,
            self.pattern,
            self.target_class,
            self.n,
            self.seed,
            self.score_before,
            self.score_after,
            self.fullretrain_score,
            self.accuracy_before,
            self.accuracy_after,
            self.residual,
            self.seconds
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::format("deletion row", format!("expected 13 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::format("deletion row", format!("bad number `{}`", f[i])))
        };
        Ok(DeletionRow {
            experiment: f[0].to_string(),
            method: f[1].to_string(),
            pattern: f[2].to_string(),
            target_class: f[3]
                .parse()
                .map_err(|_| Error::format("c_tar", format!("bad class `{}`", f[3])))?,
            n: f[4].parse().map_err(|_| Error::format("n", format!("bad count `{}`", f[4])))?,
            seed: f[5].parse().map_err(|_| Error::format("seed", format!("bad seed `{}`", f[5])))?,
            score_before: num(6)?,
            score_after: num(7)?,
            fullretrain_score: num(8)?,
            accuracy_before: num(9)?,
            accuracy_after: num(10)?,
            residual: num(11)?,
            seconds: num(12)?,
        })
    }

    pub fn write_csv(path: &Path, rows: &[DeletionRow]) -> Result<()> {
        let mut text = format!("{CSV_VERSION}\n{DELETION_HEADER}\n");
        for row in rows {
            text.push_str(&row.to_line());
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<DeletionRow>> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(CSV_VERSION) {
            return Err(Error::format("deletion.csv", "missing version line"));
        }
        if lines.next() != Some(DELETION_HEADER) {
            return Err(Error::format("deletion.csv", "bad header"));
        }
        lines.map(Self::from_line).collect()
    }
}

fn walk_files(root: &Path, name: &str, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(root) else { return };
    let mut entries: Vec<_> = entries.flatten().map(|e| e.path()).collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            walk_files(&path, name, out);
        } else if path.file_name().is_some_and(|f| f == name) {
            out.push(path);
        }
    }
}

/// Every cell metrics row under `root`, in path order.
pub fn collect_rows(root: &Path) -> Result<Vec<MetricsRow>> {
    let mut files = Vec::new();
    walk_files(root, "metrics.csv", &mut files);
    let mut rows = Vec::new();
    for f in files {
        rows.push(MetricsRow::read_csv(&f)?);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no records under {}", root.display())));
    }
    Ok(rows)
}

/// Every deletion row under `root`, in path order.
pub fn collect_deletion_rows(root: &Path) -> Result<Vec<DeletionRow>> {
    let mut files = Vec::new();
    walk_files(root, "deletion.csv", &mut files);
    let mut rows = Vec::new();
    for f in files {
        rows.extend(DeletionRow::read_csv(&f)?);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no deletion records under {}", root.display())));
    }
    Ok(rows)
}

/// The experiment configs recorded under `root` (one `config.txt` per
/// experiment hash directory).
pub fn collect_configs(root: &Path) -> Vec<(PathBuf, ExperimentConfig)> {
    let mut files = Vec::new();
    walk_files(root, "config.txt", &mut files);
    files
        .into_iter()
        .filter_map(|p| {
            let cfg = ExperimentConfig::load(&p).ok()?;
            Some((p.parent().expect("config.txt has a parent").to_path_buf(), cfg))
        })
        .collect()
}

fn group_sorted<K: Ord + Clone, V>(items: Vec<(K, V)>) -> Vec<(K, Vec<V>)> {
    let mut map: std::collections::BTreeMap<K, Vec<V>> = std::collections::BTreeMap::new();
    for (k, v) in items {
        map.entry(k).or_default().push(v);
    }
    map.into_iter().collect()
}

/// Per-(dataset, pattern, class, n) score means with standard errors.
///
/// The `gaps` column lists seeds the recorded configs intended but that have
/// no row yet — missing data is named, never interpolated.
pub fn figure2(root: &Path) -> Result<String> {
    let rows = collect_rows(root)?;
    let configs = collect_configs(root);
    let grouped = group_sorted(
        rows.into_iter()
            .map(|r| {
                ((r.dataset.clone(), r.arch.clone(), r.pattern.clone(), r.target_class, r.n), r)
            })
            .collect(),
    );
    let mut out = format!("{CSV_VERSION}\ndataset,arch,pattern,c_tar,n,seeds,mean_score,stderr,gaps\n");
    for ((dataset, arch, pattern, c_tar, n), cell_rows) in grouped {
        let scores: Vec<f64> = cell_rows.iter().map(|r| r.score).collect();
        let (mean, stderr) = crate::metrics::aggregate_scores(&scores)?;
        let have: Vec<u64> = cell_rows.iter().map(|r| r.seed).collect();
        let mut gaps: Vec<String> = Vec::new();
        for (_, cfg) in &configs {
            if cfg.dataset.name() == dataset
                && cfg.arch.name() == arch
                && cfg.patterns.iter().any(|p| p.name() == pattern)
                && cfg.target_classes.contains(&c_tar)
                && cfg.n_grid.contains(&n)
            {
                for &s in &cfg.seeds {
                    if !have.contains(&s) && !gaps.contains(&s.to_string()) {
                        gaps.push(s.to_string());
                    }
                }
            }
        }
        out.push_str(&format!(
            "{dataset},{arch},{pattern},{c_tar},{n},{},{mean},{stderr},{}\n",
            scores.len(),
            gaps.join(";")
        ));
    }
    Ok(out)
}

/// Mean empirical pattern norm per (dataset, pattern).
pub fn table1(root: &Path) -> Result<String> {
    let rows = collect_rows(root)?;
    let grouped = group_sorted(
        rows.into_iter().map(|r| ((r.dataset.clone(), r.pattern.clone()), r.empirical_norm)).collect(),
    );
    let mut out = format!("{CSV_VERSION}\ndataset,pattern,empirical_norm\n");
    for ((dataset, pattern), norms) in grouped {
        out.push_str(&format!("{dataset},{pattern},{}\n", stats::mean(&norms)));
    }
    Ok(out)
}

/// Maximum spurious-example count included in the norm–score correlation:
/// pattern averages run over the trained grid up to 2000, excluding 0.
pub const CORRELATION_N_MAX: usize = 2000;

/// Pearson correlation between mean empirical norm and mean spurious score
/// across patterns, one row per (dataset, arch, c_tar).
///
/// Scores average over spurious counts `0 < n ≤ 2000`; the clean baseline
/// and the extreme 5000 point stay out of the correlate, which otherwise
/// swamps the per-pattern differences.
pub fn correlation(root: &Path) -> Result<String> {
    let rows = collect_rows(root)?;
    let grouped = group_sorted(
        rows.into_iter()
            .filter(|r| r.n > 0 && r.n <= CORRELATION_N_MAX)
            .map(|r| ((r.dataset.clone(), r.arch.clone(), r.target_class), r))
            .collect(),
    );
    let mut out = format!("{CSV_VERSION}\ndataset,arch,c_tar,patterns,r,p_value\n");
    for ((dataset, arch, c_tar), rows) in grouped {
        let by_pattern = group_sorted(
            rows.into_iter().map(|r| (r.pattern.clone(), (r.empirical_norm, r.score))).collect(),
        );
        if by_pattern.len() < 3 {
            return Err(Error::Degenerate(format!(
                "correlation for {dataset}/{arch} needs at least 3 patterns, found {}",
                by_pattern.len()
            )));
        }
        let mut norms = Vec::new();
        let mut scores = Vec::new();
        for (_, points) in &by_pattern {
            norms.push(stats::mean(&points.iter().map(|p| p.0).collect::<Vec<_>>()));
            scores.push(stats::mean(&points.iter().map(|p| p.1).collect::<Vec<_>>()));
        }
        let c = stats::pearson(&norms, &scores)?;
        out.push_str(&format!(
            "{dataset},{arch},{c_tar},{},{},{}\n",
            by_pattern.len(),
            c.r,
            c.p_value.map_or("".to_string(), |p| p.to_string())
        ));
    }
    Ok(out)
}

/// Optimizer/clipping comparison across experiments (one experiment per
/// optimizer × clip combination): mean scores per (pattern, n) cell.
pub fn ablation(root: &Path) -> Result<String> {
    let configs = collect_configs(root);
    if configs.is_empty() {
        return Err(Error::Config(format!("no experiment configs under {}", root.display())));
    }
    let mut out = format!("{CSV_VERSION}\ndataset,arch,optimizer,clip_norm,pattern,c_tar,n,seeds,mean_score,stderr\n");
    let mut emitted = 0usize;
    for (dir, cfg) in configs {
        let Ok(rows) = collect_rows(&dir) else { continue };
        let grouped = group_sorted(
            rows.into_iter()
                .map(|r| ((r.pattern.clone(), r.target_class, r.n), r.score))
                .collect(),
        );
        for ((pattern, c_tar, n), scores) in grouped {
            let (mean, stderr) = crate::metrics::aggregate_scores(&scores)?;
            out.push_str(&format!(
                "{},{},{},{},{pattern},{c_tar},{n},{},{mean},{stderr}\n",
                cfg.dataset.name(),
                cfg.arch.name(),
                cfg.train.optimizer.name(),
                cfg.train.grad_clip.map_or("none".to_string(), |c| c.to_string()),
                scores.len(),
            ));
            emitted += 1;
        }
    }
    if emitted == 0 {
        return Err(Error::Config(format!("no records under {}", root.display())));
    }
    Ok(out)
}

/// All deletion rows under `root` as one combined CSV.
pub fn deletion(root: &Path) -> Result<String> {
    let rows = collect_deletion_rows(root)?;
    let mut out = format!("{CSV_VERSION}\n{DELETION_HEADER}\n");
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    Ok(out)
}
