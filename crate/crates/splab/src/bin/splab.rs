//! Command-line front end: fetch data, run experiment grids, score and
//! probe checkpoints, audit deletion, and emit reports.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use splab::data::{self, DatasetName, Split};
use splab::deletion::DeletionMethod;
use splab::error::{Error, Result};
use splab::harness::config::ExperimentConfig;
use splab::harness::{report, runner};
use splab::spurious::{make_pattern, PatternKind};
use splab::{checkpoint, metrics, probes};

#[derive(Parser)]
#[command(name = "splab", version, about = "Rare spurious correlation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download datasets and verify their checksums.
    Fetch {
        /// Directory that holds one subdirectory per dataset.
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// mnist, fashion, cifar10, or all.
        #[arg(long, default_value = "all")]
        dataset: String,
    },
    /// Train and score every grid cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Retrain cells even when cached results exist.
        #[arg(long)]
        force: bool,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's dataset directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the config's worker count.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score one checkpoint against a pattern on a dataset's test split.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long, default_value = "R3")]
        pattern: String,
        #[arg(long, default_value_t = 0)]
        target_class: u8,
        #[arg(long, default_value_t = 0)]
        pattern_seed: u64,
        #[arg(long, default_value_t = metrics::SCORE_THRESHOLD)]
        threshold: f64,
    },
    /// Pixel-removal sensitivity curve of a checkpoint (CSV).
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Test images to probe (sampled without replacement).
        #[arg(long, default_value_t = 500)]
        num_images: usize,
        /// Seed for the image sample and removal orders.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit deletion methods against a from-scratch retrain.
    Delete {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pattern: String,
        #[arg(long, default_value_t = 0)]
        target_class: u8,
        /// Spurious-example count of the audited cell.
        #[arg(long)]
        n: usize,
        /// Seeds to audit; defaults to the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// retrain, incremental, influence; defaults to the config's list,
        /// or all three when the config names none.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Aggregate recorded results into a CSV report on stdout.
    Report {
        /// figure2, table1, correlation, ablation, or deletion.
        kind: String,
        /// Output tree to aggregate.
        #[arg(long = "in", default_value = "out")]
        input: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render patterns and first-layer weight importance as PGM images.
    Viz {
        #[command(subcommand)]
        what: VizCommand,
    },
}

#[derive(Subcommand)]
enum VizCommand {
    /// Seed-averaged first-layer importance maps for trained cells.
    Weights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "S3")]
        pattern: String,
        #[arg(long, default_value_t = 0)]
        target_class: u8,
        /// Spurious-example counts to render, one PGM each.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 10, 100, 2000])]
        n: Vec<usize>,
        /// Output directory; defaults to `viz/` inside the experiment dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// One pattern as a PGM image (channel mean for color shapes).
    Pattern {
        #[arg(long)]
        pattern: String,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        pattern_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fetch { data_dir, dataset } => fetch(&data_dir, &dataset),
        Command::Run { config, force, out, data_dir, jobs } => {
            let cfg = load_config(&config, out, data_dir, jobs)?;
            let record = runner::run_experiment(&cfg, force)?;
            let done = record.cells.iter().filter(|c| c.status == "done").count();
            let failed = record.cells.len() - done;
            println!(
                "experiment {}: {done} cells done, {failed} failed, results under {}",
                cfg.short_hash(),
                runner::experiment_dir(&cfg).display()
            );
            if done == 0 {
                return Err(Error::Numerical("every cell failed".into()));
            }
            Ok(())
        }
        Command::Score {
            checkpoint,
            dataset,
            data_dir,
            pattern,
            target_class,
            pattern_seed,
            threshold,
        } => {
            let name = DatasetName::parse(&dataset)?;
            let test = data::load(&data_dir, name, Split::Test)?;
            let model = checkpoint::load::<f32>(&checkpoint)?;
            let kind = PatternKind::parse(&pattern)?;
            let pat = make_pattern(kind, name.input_shape(), pattern_seed)?;
            let score = metrics::spurious_score(&model, &test, &pat, target_class, threshold)?;
            let acc = metrics::accuracy(&model, &test)?;
            let norm = metrics::empirical_norm(&test, &pat)?;
            println!("score={score}");
            println!("accuracy={acc}");
            println!("empirical_norm={norm}");
            Ok(())
        }
        Command::Probe { checkpoint, dataset, data_dir, num_images, seed, out } => {
            let name = DatasetName::parse(&dataset)?;
            let test = data::load(&data_dir, name, Split::Test)?;
            let model = checkpoint::load::<f32>(&checkpoint)?;
            let curve = probes::sensitivity_curve(&model, &test, num_images, seed)?;
            let mut csv = format!("{}\nfraction,mean_prob,stderr\n", report::CSV_VERSION);
            for i in 0..curve.fractions.len() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    curve.fractions[i], curve.mean_prob[i], curve.stderr[i]
                ));
            }
            emit(out.as_deref(), &csv)
        }
        Command::Delete {
            config,
            pattern,
            target_class,
            n,
            seeds,
            methods,
            force,
            out,
            data_dir,
        } => {
            let cfg = load_config(&config, out, data_dir, None)?;
            let kind = PatternKind::parse(&pattern)?;
            let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
            let methods: Vec<DeletionMethod> = if methods.is_empty() {
                if cfg.deletion_methods.is_empty() {
                    DeletionMethod::ALL.to_vec()
                } else {
                    cfg.deletion_methods.clone()
                }
            } else {
                methods.iter().map(|m| DeletionMethod::parse(m)).collect::<Result<_>>()?
            };
            let rows = runner::audit(&cfg, kind, target_class, n, &seeds, &methods, force)?;
            for method in &methods {
                let of: Vec<&report::DeletionRow> =
                    rows.iter().filter(|r| r.method == method.name()).collect();
                if of.is_empty() {
                    continue;
                }
                let mean = |f: fn(&report::DeletionRow) -> f64| {
                    of.iter().map(|r| f(r)).sum::<f64>() / of.len() as f64
                };
                println!(
                    "{}: mean score {:.4} -> {:.4} (retrain reference {:.4}, {} seeds)",
                    method.name(),
                    mean(|r| r.score_before),
                    mean(|r| r.score_after),
                    mean(|r| r.fullretrain_score),
                    of.len()
                );
            }
            Ok(())
        }
        Command::Report { kind, input, out } => {
            let csv = match kind.as_str() {
                "figure2" => report::figure2(&input)?,
                "table1" => report::table1(&input)?,
                "correlation" => report::correlation(&input)?,
                "ablation" => report::ablation(&input)?,
                "deletion" => report::deletion(&input)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown report `{other}` (figure2, table1, correlation, ablation, deletion)"
                    )))
                }
            };
            emit(out.as_deref(), &csv)
        }
        Command::Viz { what } => match what {
            VizCommand::Weights { config, pattern, target_class, n, out, data_dir } => {
                viz_weights(&config, &pattern, target_class, &n, out, data_dir)
            }
            VizCommand::Pattern { pattern, dataset, pattern_seed, out } => {
                let kind = PatternKind::parse(&pattern)?;
                let name = DatasetName::parse(&dataset)?;
                let pat = make_pattern(kind, name.input_shape(), pattern_seed)?;
                probes::write_image_pgm(&out, &pat.values)?;
                println!("wrote {}", out.display());
                Ok(())
            }
        },
    }
}

fn load_config(
    path: &Path,
    out: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    jobs: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(data_dir) = data_dir {
        cfg.data_dir = data_dir;
    }
    if let Some(jobs) = jobs {
        cfg.jobs = jobs.max(1);
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Averages first-layer importance over every trained seed of each requested
/// grid point and writes one PGM per point.
fn viz_weights(
    config: &Path,
    pattern: &str,
    target_class: u8,
    grid: &[usize],
    out: Option<PathBuf>,
    data_dir: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config, None, data_dir, None)?;
    let kind = PatternKind::parse(pattern)?;
    let out_dir = out.unwrap_or_else(|| runner::experiment_dir(&cfg).join("viz"));
    std::fs::create_dir_all(&out_dir)?;
    for &n in grid {
        let mut mean: Option<ndarray::Array2<f64>> = None;
        let mut seeds_used = Vec::new();
        for &seed in &cfg.seeds {
            let cell = runner::Cell { pattern: kind, target_class, n, seed };
            let path = runner::cell_dir(&cfg, &cell).join("model.ckpt");
            if !path.is_file() {
                continue;
            }
            let model = checkpoint::load::<f32>(&path)?;
            let map = probes::weight_importance(&model)?;
            mean = Some(match mean {
                Some(acc) => acc + &map,
                None => map,
            });
            seeds_used.push(seed);
        }
        let Some(mut mean) = mean else {
            return Err(Error::Config(format!(
                "no checkpoints for {}/{target_class}/{n} under {}; run the experiment first",
                kind.name(),
                runner::experiment_dir(&cfg).display()
            )));
        };
        mean /= seeds_used.len() as f64;
        let path = out_dir.join(format!("weights_{}_{}_{n}.pgm", kind.name(), target_class));
        probes::write_pgm(&path, &mean)?;
        println!("wrote {} ({} seeds)", path.display(), seeds_used.len());
    }
    Ok(())
}

/// Candidate download URLs for one dataset file, tried in order.
fn urls_for(dataset: DatasetName, file: &str) -> Vec<String> {
    match dataset {
        DatasetName::Mnist => vec![
            format!("https://ossci-datasets.s3.amazonaws.com/mnist/{file}.gz"),
            format!("https://storage.googleapis.com/cvdf-datasets/mnist/{file}.gz"),
        ],
        DatasetName::Fashion => vec![
            format!("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/{file}.gz"),
            format!("https://github.com/zalandoresearch/fashion-mnist/raw/master/data/fashion/{file}.gz"),
        ],
        DatasetName::Cifar10 => {
            vec!["https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz".to_string()]
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn verify(path: &Path, want: &str) -> Result<bool> {
    if !path.is_file() {
        return Ok(false);
    }
    let got = sha256_hex(&std::fs::read(path)?);
    if got == want {
        Ok(true)
    } else {
        Err(Error::format(
            path.display().to_string(),
            format!("checksum mismatch: expected {want}, found {got}"),
        ))
    }
}

fn download(url: &str) -> Result<Vec<u8>> {
    let response = reqwest::blocking::get(url)
        .and_then(|r| r.error_for_status())
        .map_err(|e| Error::Numerical(format!("download {url}: {e}")))?;
    let bytes =
        response.bytes().map_err(|e| Error::Numerical(format!("download {url}: {e}")))?;
    Ok(bytes.to_vec())
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    use std::io::Read;
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::format("gzip", e.to_string()))?;
    Ok(out)
}

/// Fetches one IDX-format dataset: each file ships as a standalone gzip.
fn fetch_idx(dataset: DatasetName, dir: &Path) -> Result<()> {
    for (file, sha) in dataset.files() {
        let path = dir.join(file);
        if verify(&path, sha)? {
            println!("{}: ok (cached)", path.display());
            continue;
        }
        let mut last_err = Error::Config("no download URLs".into());
        let mut done = false;
        for url in urls_for(dataset, file) {
            match download(&url).and_then(|raw| gunzip(&raw)) {
                Ok(bytes) => {
                    std::fs::write(&path, bytes)?;
                    verify(&path, sha)?;
                    println!("{}: downloaded and verified", path.display());
                    done = true;
                    break;
                }
                Err(e) => last_err = e,
            }
        }
        if !done {
            return Err(last_err);
        }
    }
    Ok(())
}

/// Fetches CIFAR-10: one tarball holding all six binary batches.
fn fetch_cifar(dir: &Path) -> Result<()> {
    let files = DatasetName::Cifar10.files();
    let all_cached = files.iter().all(|(f, sha)| verify(&dir.join(f), sha).unwrap_or(false));
    if all_cached {
        for (f, _) in files {
            println!("{}: ok (cached)", dir.join(f).display());
        }
        return Ok(());
    }
    let url = &urls_for(DatasetName::Cifar10, "")[0];
    let tarball = gunzip(&download(url)?)?;
    let mut archive = tar::Archive::new(tarball.as_slice());
    for entry in archive.entries().map_err(|e| Error::format("tar", e.to_string()))? {
        use std::io::Read;
        let mut entry = entry.map_err(|e| Error::format("tar", e.to_string()))?;
        let entry_path = entry.path().map_err(|e| Error::format("tar", e.to_string()))?;
        let Some(name) = entry_path.file_name().and_then(|n| n.to_str()).map(String::from) else {
            continue;
        };
        if files.iter().any(|(f, _)| *f == name) {
            let mut bytes = Vec::new();
            entry.read_to_end(&mut bytes)?;
            std::fs::write(dir.join(&name), bytes)?;
        }
    }
    for (file, sha) in files {
        let path = dir.join(file);
        verify(&path, sha)?;
        println!("{}: downloaded and verified", path.display());
    }
    Ok(())
}

fn fetch(data_dir: &Path, dataset: &str) -> Result<()> {
    let requested: Vec<DatasetName> = if dataset == "all" {
        DatasetName::ALL.to_vec()
    } else {
        vec![DatasetName::parse(dataset)?]
    };
    for name in requested {
        let dir = data_dir.join(name.name());
        std::fs::create_dir_all(&dir)?;
        match name {
            DatasetName::Mnist | DatasetName::Fashion => fetch_idx(name, &dir)?,
            DatasetName::Cifar10 => fetch_cifar(&dir)?,
        }
        // a quick structural load proves the files are usable, not just present
        let test = data::load(data_dir, name, Split::Test)?;
        println!("{name}: {} test examples ready", test.len());
    }
    Ok(())
}
