//! The four commands. Each writes its primary outputs under the configured
//! output directory and returns a short human-readable summary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ddnn::data::{
    class_distribution, load_dataset, split, synth_generate, write_dataset, write_distribution_csv, Dataset,
    SplitTag,
};
use ddnn::experiments::{
    measure, measure_with, run_aggregation_sweep, run_device_scaling, run_fault_tolerance, run_filter_sweep,
    run_threshold_sweep, single_failure_sets, unix_now, Manifest, SweepResult,
};
use ddnn::model::{fit, load_checkpoint, save_checkpoint, DdnnModel};
use ddnn::policy::write_traces;
use ddnn::{Error, Result};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Aggregation,
    Threshold,
    Devices,
    Filters,
    Fault,
}

impl SweepKind {
    pub const ALL: [SweepKind; 5] = [Self::Aggregation, Self::Threshold, Self::Devices, Self::Filters, Self::Fault];

    pub fn name(self) -> &'static str {
        match self {
            Self::Aggregation => "aggregation",
            Self::Threshold => "threshold",
            Self::Devices => "devices",
            Self::Filters => "filters",
            Self::Fault => "fault",
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown sweep kind {:?} (expected aggregation, threshold, devices, filters or fault)",
                s
            ))
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::InvalidArgument(format!("cannot create output directory {}: {}", dir.display(), e)))
}

/// The configured dataset: loaded from `data.path`, or synthesized.
pub fn dataset(config: &RunConfig) -> Result<Dataset> {
    let data = if config.data.path.is_empty() {
        synth_generate(&config.synth_params())?
    } else {
        load_dataset(Path::new(&config.data.path))?
    };
    if data.num_devices() != config.model.devices {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} devices, model.devices is {}",
            data.num_devices(),
            config.model.devices
        )));
    }
    Ok(data)
}

pub fn train_test(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    split(&dataset(config)?, config.data.train_fraction, config.run.seed)
}

fn load_model(path: &Path) -> Result<DdnnModel<f32>> {
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} not found; run `ddnn train` first",
            path.display()
        )));
    }
    load_checkpoint(path)
}

/// Writes the dataset directory and prints its per-device class table.
pub fn gen_data(config: &RunConfig, out: &mut impl Write) -> Result<PathBuf> {
    let dir = config.out_dir();
    create_dir(&dir)?;
    let data = synth_generate(&config.synth_params())?;
    write_dataset(&data, &dir)?;
    writeln!(out, "wrote {} samples to {}", data.len(), dir.display())?;
    write_distribution_csv(&class_distribution(&data), &mut *out)?;
    Ok(dir)
}

/// Trains on the training split; writes the checkpoint, the per-epoch
/// history, and the effective configuration.
pub fn train(config: &RunConfig, out: &mut impl Write) -> Result<PathBuf> {
    let dir = config.out_dir();
    create_dir(&dir)?;
    let (train_set, test_set) = train_test(config)?;
    let (model, history) = fit::<f32>(&train_set, (0..config.model.devices).collect(), &config.train_config())?;
    let checkpoint = config.checkpoint_path();
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(&model, &checkpoint)?;
    history.write_csv(&dir.join("history.csv"))?;
    std::fs::write(dir.join("config.ini"), config.to_ini())?;
    let report = measure(&model, &test_set, config.policy.threshold)?;
    writeln!(
        out,
        "trained {} epochs on {} samples; test ({} samples, T={}): local {:.2}% cloud {:.2}% overall {:.2}%, local exits {:.2}%, {:.2} bytes/sample",
        history.len(),
        train_set.len(),
        test_set.len(),
        config.policy.threshold,
        report.local_acc,
        report.cloud_acc,
        report.overall_acc,
        report.local_exit_pct,
        report.avg_comm_bytes
    )?;
    writeln!(out, "checkpoint: {}", checkpoint.display())?;
    Ok(checkpoint)
}

/// What `infer` classifies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InferTarget {
    /// The test split of the configured dataset.
    TestSplit,
    /// Every sample of a dataset directory.
    Directory(PathBuf),
}

/// Routes samples through the checkpointed model and writes one trace row
/// per sample to `traces.csv`.
pub fn infer(config: &RunConfig, target: &InferTarget, sample: Option<&str>, out: &mut impl Write) -> Result<PathBuf> {
    let model = load_model(&config.checkpoint_path())?;
    let mut data = match target {
        InferTarget::TestSplit => train_test(config)?.1,
        InferTarget::Directory(dir) => load_dataset(dir)?,
    };
    let needed = model.device_ids.iter().max().map_or(0, |d| d + 1);
    if data.num_devices() < needed {
        return Err(Error::InvalidArgument(format!(
            "checkpoint reads device {} but the samples have {} views",
            needed - 1,
            data.num_devices()
        )));
    }
    if let Some(id) = sample {
        let s = data
            .find(id)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no sample with id {:?}", id)))?;
        data = Dataset::new(vec![s], SplitTag::Test);
    }
    let (report, traces) = measure_with(&model, &data, config.policy.threshold, &vec![true; model.num_devices()])?;
    let dir = config.out_dir();
    create_dir(&dir)?;
    let path = dir.join("traces.csv");
    write_traces(&traces, &path)?;
    writeln!(
        out,
        "{} samples at T={}: accuracy {:.2}%, local exits {:.2}%, average {:.4} bytes/sample",
        report.samples, report.threshold, report.overall_acc, report.local_exit_pct, report.avg_comm_bytes
    )?;
    Ok(path)
}

fn run_sweep(kind: SweepKind, config: &RunConfig) -> Result<SweepResult> {
    let sweep = config.sweep_config();
    match kind {
        SweepKind::Aggregation => {
            let (train_set, test_set) = train_test(config)?;
            run_aggregation_sweep(&train_set, &test_set, &sweep)
        }
        SweepKind::Devices => {
            let (train_set, test_set) = train_test(config)?;
            Ok(run_device_scaling(&train_set, &test_set, &sweep)?.result)
        }
        SweepKind::Filters => {
            let (train_set, test_set) = train_test(config)?;
            run_filter_sweep(&train_set, &test_set, &config.model.filter_grid, &sweep)
        }
        SweepKind::Threshold => {
            let model = load_model(&config.checkpoint_path())?;
            run_threshold_sweep(&model, &train_test(config)?.1, &config.policy.grid)
        }
        SweepKind::Fault => {
            let model = load_model(&config.checkpoint_path())?;
            let failures = single_failure_sets(model.num_devices());
            run_fault_tolerance(&model, &train_test(config)?.1, config.policy.threshold, &failures)
        }
    }
}

/// Runs one sweep and writes `sweep_<kind>.csv` plus its JSON manifest.
pub fn sweep(kind: SweepKind, config: &RunConfig, out: &mut impl Write) -> Result<PathBuf> {
    let started = unix_now();
    let dir = config.out_dir();
    create_dir(&dir)?;
    let result = run_sweep(kind, config)?;
    let csv = dir.join(format!("sweep_{}.csv", kind.name()));
    result.write_csv(&csv)?;
    let mut manifest = Manifest::new(kind.name(), config.run.seed, config.to_map(), started);
    manifest.rows = result.rows.len();
    manifest.outputs = vec![csv.display().to_string()];
    manifest.finished_unix = unix_now();
    manifest.write(&dir.join(format!("sweep_{}.json", kind.name())))?;
    writeln!(out, "{} sweep: {} rows -> {}", kind.name(), result.rows.len(), csv.display())?;
    for row in &result.rows {
        let r = &row.report;
        writeln!(
            out,
            "  {:>10}  local {:6.2}%  cloud {:6.2}%  overall {:6.2}%  local exits {:6.2}%  {:7.2} B",
            row.value, r.local_acc, r.cloud_acc, r.overall_acc, r.local_exit_pct, r.avg_comm_bytes
        )?;
    }
    Ok(csv)
}
