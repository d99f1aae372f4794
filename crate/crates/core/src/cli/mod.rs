//! Command-line front end: data generation, training, evaluation, sweeps,
//! reports and plots.

pub mod config;
pub mod plot;
pub mod report;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baselines::Variant;
use crate::data;
use crate::error::{Error, Result};
use crate::trainer::{self, TrainedModel};
use config::ExperimentConfig;
use report::{ReportTable, RunInfo, METRICS_FILE, RUN_FILE};

pub const RUNS_DIR_ENV: &str = "GVIDA_RUNS_DIR";

#[derive(Debug, Parser)]
#[command(name = "gvida", version, about = "Global variational inference for domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write source and target dataset CSVs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: <runs>/<name>/data).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one variant for each configured seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Print the accuracy of a checkpoint on a dataset CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train variants × seeds and write a manifest and report.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Concurrent training processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate the metric logs below a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Where to write report.csv and report.txt (default: --runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write loss and accuracy curves as SVG files.
    Plot {
        #[arg(long)]
        runs: PathBuf,
    },
}

/// Options shared by the commands that read an experiment config.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl Common {
    /// Config file values with flags and the runs-dir variable applied on top.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Ok(dir) = std::env::var(RUNS_DIR_ENV) {
            cfg.output.runs_dir = PathBuf::from(dir);
        }
        if let Some(d) = &self.runs_dir {
            cfg.output.runs_dir = d.clone();
        }
        if let Some(n) = &self.name {
            cfg.output.name = n.clone();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Version string baked in at build time.
pub fn version_string() -> String {
    match option_env!("GVIDA_BUILD_VERSION") {
        Some(v) => format!("gvida {} {v}", env!("CARGO_PKG_VERSION")),
        None => format!("gvida {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Git-style content hash (`blob <len>\0<content>`) of the version string.
pub fn version_hash() -> String {
    let v = version_string();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", v.len()));
    h.update(v.as_bytes());
    hex::encode(h.finalize())
}

pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.runs_dir.join(&cfg.output.name)
}

pub fn run_dir(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> PathBuf {
    experiment_dir(cfg).join(variant.to_string()).join(format!("seed-{seed}"))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Serialize)]
struct SeedRecord {
    run_seed: u64,
    data_seed: u64,
    train_seed: u64,
}

/// Trains one (variant, seed) and writes a self-describing run directory.
/// Returns the final target accuracy.
pub fn train_one(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<(PathBuf, f64)> {
    let mut resolved = cfg.clone();
    resolved.variant.name = variant.to_string();
    resolved.variant.sweep.clear();
    resolved.variant.seeds = vec![seed];
    resolved.train.seed = seed;

    let (source, target) = resolved.data.load(seed)?;
    let out = trainer::fit(&resolved.train, &resolved.model, variant, &source, &target)?;

    let dir = run_dir(cfg, variant, seed);
    create_dir(&dir)?;
    write(&dir.join("config.json"), resolved.to_json() + "\n")?;
    let seeds = SeedRecord {
        run_seed: seed,
        data_seed: resolved.data.shift.seed.wrapping_add(seed),
        train_seed: seed,
    };
    write(&dir.join("seeds.json"), json(&seeds))?;
    write(&dir.join("version.txt"), format!("{}\n{}\n", version_string(), version_hash()))?;
    let info = RunInfo {
        variant: variant.to_string(),
        task: resolved.data.task.clone(),
        seed,
        version: version_hash(),
    };
    write(&dir.join(RUN_FILE), json(&info))?;
    write(&dir.join("pseudo_labels.json"), json(&out.pseudo_labels))?;
    trainer::write_metrics_csv(&dir.join(METRICS_FILE), &out.metrics)?;
    out.trained.save(&dir.join("model.json"))?;
    let acc = out.metrics.last().map_or(f64::NAN, |m| m.acc_target);
    Ok((dir, acc))
}

fn gen_data(common: &Common, out: Option<PathBuf>, seed: u64) -> Result<()> {
    let cfg = common.resolve()?;
    let dir = out.unwrap_or_else(|| experiment_dir(&cfg).join("data"));
    create_dir(&dir)?;
    let (source, target) = cfg.data.load(seed)?;
    data::save_dataset(&source, &dir.join("source.csv"))?;
    data::save_dataset(&target, &dir.join("target.csv"))?;
    println!("wrote {} source and {} target rows to {}", source.len(), target.len(), dir.display());
    Ok(())
}

fn train(common: &Common, variant: Option<String>, seeds: Vec<u64>) -> Result<()> {
    let mut cfg = common.resolve()?;
    if let Some(v) = variant {
        cfg.variant.name = v;
    }
    if !seeds.is_empty() {
        cfg.variant.seeds = seeds;
    }
    cfg.validate()?;
    let variant = cfg.variant.variant()?;
    for &seed in &cfg.variant.seeds {
        let (dir, acc) = train_one(&cfg, variant, seed)?;
        println!("{variant} seed {seed}: target accuracy {acc:.4} ({})", dir.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data_path: &Path) -> Result<()> {
    let trained = TrainedModel::load(checkpoint)?;
    let ds = data::load_dataset(data_path, Some(trained.model.spec.class_count))?;
    let acc = trainer::evaluate(&trained.model, &ds)?;
    println!("{acc:.6}");
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config: PathBuf,
    pub runs: Vec<ManifestEntry>,
}

fn sweep(common: &Common, variants: Vec<String>, seeds: Vec<u64>, jobs: usize) -> Result<()> {
    let mut cfg = common.resolve()?;
    if !variants.is_empty() {
        cfg.variant.sweep = variants;
    }
    if !seeds.is_empty() {
        cfg.variant.seeds = seeds;
    }
    cfg.validate()?;
    let root = experiment_dir(&cfg);
    create_dir(&root)?;
    let config_path = root.join("sweep_config.json");
    write(&config_path, cfg.to_json() + "\n")?;

    let mut todo = Vec::new();
    for v in cfg.variant.sweep_variants()? {
        for &s in &cfg.variant.seeds {
            todo.push((v, s));
        }
    }
    let mut runs = Vec::with_capacity(todo.len());
    if jobs <= 1 {
        for &(v, s) in &todo {
            let (dir, acc) = train_one(&cfg, v, s)?;
            println!("{v} seed {s}: target accuracy {acc:.4}");
            runs.push(ManifestEntry { variant: v.to_string(), seed: s, dir, ok: true });
        }
    } else {
        let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
        for chunk in todo.chunks(jobs) {
            let children: Vec<_> = chunk
                .iter()
                .map(|&(v, s)| {
                    let child = Command::new(&exe)
                        .arg("train")
                        .arg("--config")
                        .arg(&config_path)
                        .args(["--variant", &v.to_string(), "--seeds", &s.to_string()])
                        .arg("--runs-dir")
                        .arg(&cfg.output.runs_dir)
                        .args(["--name", &cfg.output.name])
                        .spawn()
                        .map_err(|e| Error::io(&exe, e))?;
                    Ok((v, s, child))
                })
                .collect::<Result<_>>()?;
            for (v, s, mut child) in children {
                let status = child.wait().map_err(|e| Error::io(&exe, e))?;
                runs.push(ManifestEntry {
                    variant: v.to_string(),
                    seed: s,
                    dir: run_dir(&cfg, v, s),
                    ok: status.success(),
                });
            }
        }
    }
    let manifest = Manifest {
        version: version_hash(),
        config: config_path,
        runs,
    };
    write(&root.join("manifest.json"), json(&manifest))?;
    let failed = manifest.runs.iter().filter(|r| !r.ok).count();
    let table = report::collect(&root)?;
    write_report(&table, &root)?;
    print!("{}", table.render());
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} sweep runs failed; see {}", root.join("manifest.json").display())));
    }
    Ok(())
}

fn write_report(table: &ReportTable, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    table.write_csv(&dir.join("report.csv"))?;
    write(&dir.join("report.txt"), table.render())
}

fn report_cmd(runs: &Path, out: Option<PathBuf>) -> Result<()> {
    let table = report::collect(runs)?;
    write_report(&table, out.as_deref().unwrap_or(runs))?;
    print!("{}", table.render());
    Ok(())
}

fn plot_cmd(runs: &Path) -> Result<()> {
    let dirs = report::find_runs(runs)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no metric logs found under {}", runs.display())));
    }
    for dir in &dirs {
        let (info, metrics) = report::read_run(dir)?;
        let title = format!("{} seed {} ({})", info.variant, info.seed, info.task);
        write(&dir.join("loss.svg"), plot::loss_chart(&title, &metrics))?;
        write(&dir.join("accuracy.svg"), plot::accuracy_chart(&title, &metrics))?;
    }
    println!("wrote plots for {} runs", dirs.len());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenData { common, out, seed } => gen_data(&common, out, seed),
        Cmd::Train { common, variant, seeds } => train(&common, variant, seeds),
        Cmd::Eval { checkpoint, data } => eval(&checkpoint, &data),
        Cmd::Sweep { common, variants, seeds, jobs } => sweep(&common, variants, seeds, jobs),
        Cmd::Report { runs, out } => report_cmd(&runs, out),
        Cmd::Plot { runs } => plot_cmd(&runs),
    }
}

/// Exit code 2 for configuration errors, 3 for runtime failures.
pub fn exit_code(result: &Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => ExitCode::from(2),
        Err(_) => ExitCode::from(3),
    }
}

pub fn main() -> ExitCode {
    let result = run(Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_hash_is_stable_hex() {
        let h = version_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, version_hash());
        let v = version_string();
        let mut d = Sha256::new();
        d.update([format!("blob {}", v.len()).as_bytes(), &[0u8], v.as_bytes()].concat());
        assert_eq!(h, hex::encode(d.finalize()));
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epochs": 7, "batch_size": 16}, "output": {"name": "fromfile"}}"#).unwrap();
        let common = Common {
            config: Some(path),
            epochs: Some(2),
            runs_dir: Some(dir.path().join("r")),
            ..Default::default()
        };
        let cfg = common.resolve().unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.output.name, "fromfile");
        assert_eq!(cfg.output.runs_dir, dir.path().join("r"));
        assert_eq!(cfg.train.learning_rate, trainer::TrainConfig::default().learning_rate);
    }
}
