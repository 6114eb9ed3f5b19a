//! Front end for the `psi` binary: run configs, the property suite, sweeps.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | unreadable or invalid config, I/O error |
//! | 2 | training diverged (partial CSV still written) |
//! | 3 | `verify`: at least one property failed |
//! | 4 | `sweep`: at least one run failed or diverged |
//!
//! `PSI_LOG_LEVEL` (`error`, `info`, `debug`) controls stderr logging and
//! nothing else.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{make_unbalanced_init, run_training, write_csv, DataSpec, RunRecord, TrainOptions};
use crate::linalg::Rng;
use crate::manifold::Rescale;
use crate::network::{ArchSpec, BnMlp};
use crate::optim::OptConfig;
use crate::verify::{self, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_VERIFY_FAILED: i32 = 3;
pub const EXIT_SWEEP_FAILED: i32 = 4;

pub const LOG_ENV: &str = "PSI_LOG_LEVEL";

pub const SUMMARY_HEADER: &str = "run,status,final_loss,final_grad_norm";

/// One training run. Every seed lives in the file; nothing falls back to the
/// clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSpec,
    /// Defaults to the data set's standard architecture with `bn_epsilon = 1e-5`.
    #[serde(default)]
    pub network: Option<ArchSpec>,
    pub optimizer: OptConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub shuffle_seed: u64,
    /// Per-group rescale applied after initialization, cycled over groups.
    #[serde(default)]
    pub unbalanced_pattern: Option<Vec<f64>>,
    #[serde(default)]
    pub record_wall_time: bool,
    /// Used when no output path is given on the command line.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_log_every() -> usize {
    1
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn arch(&self) -> ArchSpec {
        self.network.clone().unwrap_or_else(|| self.data.default_arch(1e-5))
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.arch();
        arch.validate()?;
        let default = self.data.default_arch(arch.bn_epsilon);
        let (din, dout) = (default.layers[0].in_dim, default.layers.last().map_or(0, |l| l.out_dim));
        if arch.layers[0].in_dim != din || arch.layers.last().map_or(0, |l| l.out_dim) != dout {
            return Err(Error::Config(format!(
                "network maps {} -> {}, data needs {din} -> {dout}",
                arch.layers[0].in_dim,
                arch.layers.last().map_or(0, |l| l.out_dim)
            )));
        }
        if arch.loss != default.loss {
            return Err(Error::Config("network loss does not match the data set".into()));
        }
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if let Some(p) = &self.unbalanced_pattern {
            Rescale::new(p.clone().into())?;
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            record_wall_time: self.record_wall_time,
            ..TrainOptions::new(self.epochs, self.batch_size, self.log_every, self.shuffle_seed)
        }
    }

    /// Freshly initialized network, rescaled by `unbalanced_pattern` if set.
    pub fn init_network(&self) -> Result<BnMlp> {
        let arch = self.arch();
        let seed = self.data.init_seed();
        match &self.unbalanced_pattern {
            None => BnMlp::init(&arch, &mut Rng::new(seed)),
            Some(p) => {
                let m = BnMlp::init(&arch, &mut Rng::new(seed))?.num_groups();
                make_unbalanced_init(&arch, seed, &Rescale::from_pattern(p, m)?)
            }
        }
    }
}

/// Outcome of a single run: records plus whether it finished.
#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    pub diverged_at: Option<usize>,
}

/// Trains from `cfg` and writes the CSV to `out`.
pub fn execute_run(cfg: &RunConfigFile, out: &Path) -> Result<RunOutcome> {
    let data = cfg.data.generate();
    let mut net = cfg.init_network()?;
    let (records, diverged_at) = match run_training(&mut net, &data, &cfg.optimizer, &cfg.train_options()) {
        Ok(r) => (r, None),
        Err(Error::Diverged { step, records }) => (*records, Some(step)),
        Err(e) => return Err(e),
    };
    let meta = serde_json::to_value(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_csv(&mut buf, &meta, &records)?;
    fs::write(out, buf)?;
    Ok(RunOutcome { records, diverged_at })
}

/// `psi train -c cfg.json -o out.csv`.
pub fn cmd_train(config_path: &Path, out_path: Option<&Path>) -> i32 {
    let cfg = match RunConfigFile::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let out = match out_path.map(Path::to_path_buf).or_else(|| cfg.output.clone()) {
        Some(p) => p,
        None => {
            eprintln!("error: no output path given for {}", config_path.display());
            return EXIT_CONFIG;
        }
    };
    info!("training {} -> {}", config_path.display(), out.display());
    match execute_run(&cfg, &out) {
        Ok(RunOutcome { diverged_at: Some(step), .. }) => {
            eprintln!("error: run diverged at step {step}; partial log in {}", out.display());
            EXIT_DIVERGED
        }
        Ok(RunOutcome { records, .. }) => {
            if let Some(r) = records.last() {
                info!("final loss {:e}, grad norm {:e}", r.loss, r.grad_norm);
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

/// `psi verify --seed N -o report.txt`.
pub fn cmd_verify(seed: u64, report_path: &Path, opts: VerifyOptions) -> i32 {
    let opts = VerifyOptions { seed, ..opts };
    let results = match verify::run_all(opts) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VERIFY_FAILED;
        }
    };
    let report = verify::format_report(seed, &results);
    for r in &results {
        debug!("{} observed {:e} tolerance {:e}", r.name, r.observed, r.tolerance);
    }
    if let Err(e) = fs::write(report_path, &report) {
        eprintln!("error: cannot write {}: {e}", report_path.display());
        return EXIT_CONFIG;
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        info!("all {} checks passed", results.len());
        EXIT_OK
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        EXIT_VERIFY_FAILED
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub run: String,
    pub status: &'static str,
    pub final_loss: Option<f64>,
    pub final_grad_norm: Option<f64>,
}

fn sweep_one(path: &Path, out_dir: &Path) -> SweepRow {
    let run = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let outcome = RunConfigFile::load(path).and_then(|cfg| execute_run(&cfg, &out_dir.join(format!("{run}.csv"))));
    let (status, last) = match &outcome {
        Ok(o) if o.diverged_at.is_some() => ("diverged", o.records.last()),
        Ok(o) => ("ok", o.records.last()),
        Err(e) => {
            error!("{run}: {e}");
            ("error", None)
        }
    };
    SweepRow {
        run,
        status,
        final_loss: last.map(|r| r.loss),
        final_grad_norm: last.map(|r| r.grad_norm),
    }
}

/// Runs every `*.json` in `config_dir` (sorted by name) on `parallel` workers.
/// Rows come back in file-name order regardless of scheduling.
pub fn run_sweep(config_dir: &Path, out_dir: &Path, parallel: usize) -> Result<Vec<SweepRow>> {
    let mut configs: Vec<PathBuf> = fs::read_dir(config_dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(|| configs.par_iter().map(|p| sweep_one(p, out_dir)).collect()))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:e}")).unwrap_or_default()
}

/// `psi sweep -d cfgs/ -o outs/ -j K`.
pub fn cmd_sweep(config_dir: &Path, out_dir: &Path, parallel: usize) -> i32 {
    let rows = match run_sweep(config_dir, out_dir, parallel) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        summary.push_str(&format!(
            "{},{},{},{}\n",
            r.run,
            r.status,
            fmt_opt(r.final_loss),
            fmt_opt(r.final_grad_norm)
        ));
    }
    if let Err(e) = fs::write(out_dir.join("summary.csv"), summary) {
        eprintln!("error: {e}");
        return EXIT_CONFIG;
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    info!("{} runs, {} failed", rows.len(), failed);
    if failed == 0 {
        EXIT_OK
    } else {
        eprintln!("{failed} of {} runs failed", rows.len());
        EXIT_SWEEP_FAILED
    }
}

/// Installs the stderr logger. Unset or unrecognized values mean `error`.
pub fn init_logging() {
    let level = match std::env::var(LOG_ENV).as_deref() {
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") => log::LevelFilter::Info,
        _ => log::LevelFilter::Error,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .try_init();
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"{
        "data": {"kind": "toy_regression", "n_samples": 64, "in_dim": 4, "hidden": 8,
                 "mu_seed": 1, "data_seed": 2, "init_seed": 3},
        "optimizer": {"kind": "psi_sgd", "lr_w": 0.1, "lr_g": 0.01},
        "epochs": 2, "batch_size": 16, "shuffle_seed": 4
    }"#;

    #[test]
    fn parses_minimal_config() {
        let cfg: RunConfigFile = serde_json::from_str(TOY).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.log_every, 1);
        assert_eq!(cfg.arch().layers[0].in_dim, 4);
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = TOY.replacen("\"epochs\"", "\"epoch_count\": 1, \"epochs\"", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&bad).is_err());
        let bad = TOY.replacen("\"in_dim\"", "\"seed\": 1, \"in_dim\"", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&bad).is_err());
    }

    #[test]
    fn seeds_are_required() {
        let bad = TOY.replacen(", \"shuffle_seed\": 4", "", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&bad).is_err());
        let bad = TOY.replacen("\"init_seed\": 3", "\"noise_std\": 1.0", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&bad).is_err());
    }

    #[test]
    fn mismatched_network_rejected() {
        let mut cfg: RunConfigFile = serde_json::from_str(TOY).unwrap();
        cfg.network = Some(ArchSpec::toy(5, 8, 1e-5));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unbalanced_pattern_keeps_loss() {
        let mut cfg: RunConfigFile = serde_json::from_str(TOY).unwrap();
        let data = cfg.data.generate();
        let plain = crate::network::loss(&cfg.init_network().unwrap(), &data).unwrap();
        cfg.unbalanced_pattern = Some(vec![1e4, 1e-4]);
        cfg.network = Some(cfg.data.default_arch(0.0));
        let skewed = crate::network::loss(&cfg.init_network().unwrap(), &data).unwrap();
        cfg.unbalanced_pattern = None;
        let balanced = crate::network::loss(&cfg.init_network().unwrap(), &data).unwrap();
        assert!((skewed - balanced).abs() <= 1e-10 * balanced);
        assert!((plain - balanced).abs() < 1e-3 * balanced);
    }
}
