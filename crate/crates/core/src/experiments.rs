//! The evaluation measures and the five sweeps: aggregation schemes, exit
//! thresholds, device count, filter count, and single-device failures.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{split, Dataset, MultiViewSample};
use crate::error::{Error, Result};
use crate::model::{device_memory_bytes, fit, train_individual, AggregationKind, DdnnModel, TrainConfig};
use crate::policy::{
    comm_cost, round_half_up, threshold_for_exit_fraction, CommModel, ExitPoint, ExitThresholds, InferenceTrace,
    SampleOutcome,
};
use crate::scalar::Scalar;

/// Samples per inference batch.
pub const EVAL_BATCH: usize = 64;

/// Share of the training split held out to pick thresholds.
pub const VALIDATION_FRACTION: f64 = 0.2;

/// Local-exit share the filter sweep aims for.
pub const FILTER_SWEEP_LOCAL_EXIT: f64 = 0.75;

/// Exit threshold used when none is configured.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// `{0.1, 0.2, ..., 1.0}`.
pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Scores at both exits for every sample of `dataset`.
pub fn collect_outcomes<T: Scalar>(model: &DdnnModel<T>, dataset: &Dataset, active: &[bool]) -> Result<Vec<SampleOutcome>> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let samples: Vec<&MultiViewSample> = dataset.samples.iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let logits = model.infer(chunk, active)?;
        for (i, s) in chunk.iter().enumerate() {
            out.push(SampleOutcome {
                sample_id: s.id.clone(),
                truth: s.global_label as usize,
                local: logits.local.row(i).iter().map(|v| v.as_f64()).collect(),
                cloud: logits.cloud.row(i).iter().map(|v| v.as_f64()).collect(),
            });
        }
    }
    Ok(out)
}

/// The accuracy measures of one evaluation; percentages in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub samples: usize,
    pub threshold: f64,
    /// Every sample forced through the local exit.
    pub local_acc: f64,
    /// Every sample forced through the cloud exit.
    pub cloud_acc: f64,
    /// Samples routed by the threshold.
    pub overall_acc: f64,
    /// Stand-alone device accuracies, when measured.
    pub individual_accs: Vec<f64>,
    pub local_exit_pct: f64,
    pub avg_comm_bytes: f64,
    pub local_exits: usize,
    pub local_exit_correct: usize,
    pub cloud_exit_correct: usize,
    pub overall_correct: usize,
}

fn pct(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

impl AccuracyReport {
    /// Routes every outcome at `threshold` and tallies the measures.
    pub fn from_outcomes(
        outcomes: &[SampleOutcome],
        threshold: f64,
        comm: &CommModel,
    ) -> Result<(Self, Vec<InferenceTrace>)> {
        if outcomes.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let thresholds = ExitThresholds::new(threshold)?;
        let traces = outcomes.iter().map(|o| o.route(thresholds, comm)).collect::<Result<Vec<_>>>()?;
        let n = outcomes.len();
        let hit = |scores: &[f64], truth: usize| crate::scalar::argmax(scores) == truth;
        let local_ok = outcomes.iter().filter(|o| hit(&o.local, o.truth)).count();
        let cloud_ok = outcomes.iter().filter(|o| hit(&o.cloud, o.truth)).count();
        let local_exits = traces.iter().filter(|t| t.exit == ExitPoint::Local).count();
        let local_exit_correct = traces.iter().filter(|t| t.exit == ExitPoint::Local && t.correct()).count();
        let cloud_exit_correct = traces.iter().filter(|t| t.exit == ExitPoint::Cloud && t.correct()).count();
        let overall_correct = traces.iter().filter(|t| t.correct()).count();
        let bytes: f64 = traces.iter().map(|t| t.bytes_sent).sum();
        let report = Self {
            samples: n,
            threshold,
            local_acc: pct(local_ok, n),
            cloud_acc: pct(cloud_ok, n),
            overall_acc: pct(overall_correct, n),
            individual_accs: Vec::new(),
            local_exit_pct: pct(local_exits, n),
            avg_comm_bytes: bytes / n as f64,
            local_exits,
            local_exit_correct,
            cloud_exit_correct,
            overall_correct,
        };
        report.check(comm)?;
        Ok((report, traces))
    }

    /// Average bytes rounded half up, as tables report them.
    pub fn avg_comm_rounded(&self) -> u64 {
        round_half_up(self.avg_comm_bytes)
    }

    /// Percentage bounds, the exit partition, and agreement of the
    /// per-sample byte average with the closed-form cost.
    pub fn check(&self, comm: &CommModel) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        let pcts = [self.local_acc, self.cloud_acc, self.overall_acc, self.local_exit_pct];
        if let Some(p) = pcts.iter().chain(&self.individual_accs).find(|p| !(0.0..=100.0).contains(*p)) {
            return fail(format!("percentage {} outside [0, 100]", p));
        }
        if self.overall_correct != self.local_exit_correct + self.cloud_exit_correct {
            return fail(format!(
                "overall correct {} != local-exit correct {} + cloud-exit correct {}",
                self.overall_correct, self.local_exit_correct, self.cloud_exit_correct
            ));
        }
        if self.local_exits > self.samples {
            return fail(format!("{} local exits out of {} samples", self.local_exits, self.samples));
        }
        let expected = comm_cost(self.local_exits as f64 / self.samples as f64, comm)?;
        if (expected - self.avg_comm_bytes).abs() > 1e-9 * expected.max(1.0) {
            return fail(format!(
                "average bytes {} disagree with the cost formula {}",
                self.avg_comm_bytes, expected
            ));
        }
        Ok(())
    }
}

/// Evaluates with every device working.
pub fn measure<T: Scalar>(model: &DdnnModel<T>, test: &Dataset, threshold: f64) -> Result<AccuracyReport> {
    Ok(measure_with(model, test, threshold, &vec![true; model.num_devices()])?.0)
}

/// Evaluates with the given devices working, returning per-sample traces.
pub fn measure_with<T: Scalar>(
    model: &DdnnModel<T>,
    test: &Dataset,
    threshold: f64,
    active: &[bool],
) -> Result<(AccuracyReport, Vec<InferenceTrace>)> {
    let outcomes = collect_outcomes(model, test, active)?;
    AccuracyReport::from_outcomes(&outcomes, threshold, &CommModel::for_model(model))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// The axis value, e.g. `MP-CC`, `0.8`, `3` or `fail-2`.
    pub value: String,
    pub report: AccuracyReport,
    /// Sweep-specific columns, in the same order on every row.
    pub extra: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn new(axis: &str) -> Self {
        Self {
            axis: axis.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Unique axis values and consistent extra columns.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(&r.value) {
                return Err(Error::Invariant(format!("duplicate {} value {}", self.axis, r.value)));
            }
        }
        if let Some(first) = self.rows.first() {
            let keys: Vec<&String> = first.extra.iter().map(|(k, _)| k).collect();
            if self.rows.iter().any(|r| r.extra.iter().map(|(k, _)| k).collect::<Vec<_>>() != keys) {
                return Err(Error::Invariant("sweep rows carry different extra columns".into()));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.check()?;
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = [
            self.axis.as_str(),
            "samples",
            "exit_threshold",
            "local_acc",
            "cloud_acc",
            "overall_acc",
            "local_exit_pct",
            "avg_comm_bytes",
            "avg_comm_rounded",
            "individual_accs",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        if let Some(first) = self.rows.first() {
            header.extend(first.extra.iter().map(|(k, _)| k.clone()));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let p = &r.report;
            let mut rec = vec![
                r.value.clone(),
                p.samples.to_string(),
                format!("{:.4}", p.threshold),
                format!("{:.2}", p.local_acc),
                format!("{:.2}", p.cloud_acc),
                format!("{:.2}", p.overall_acc),
                format!("{:.2}", p.local_exit_pct),
                format!("{:.4}", p.avg_comm_bytes),
                p.avg_comm_rounded().to_string(),
                p.individual_accs.iter().map(|a| format!("{:.2}", a)).collect::<Vec<_>>().join(";"),
            ];
            rec.extend(r.extra.iter().map(|(_, v)| v.clone()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Run record written next to every sweep CSV. Timestamps live only here so
/// the CSV itself is reproducible byte for byte.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub versions: BTreeMap<String, String>,
    pub rows: usize,
    pub outputs: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Manifest {
    pub fn new(kind: &str, seed: u64, config: BTreeMap<String, String>, started_unix: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("ddnn".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            kind: kind.to_string(),
            seed,
            config,
            started_unix,
            finished_unix: started_unix,
            versions,
            rows: 0,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// How to train and evaluate each sweep cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub threshold: f64,
    /// Cells evaluated concurrently; output does not depend on it.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            jobs: 1,
        }
    }
}

/// Runs independent cells, in order, on up to `jobs` threads.
fn run_cells<R: Send>(jobs: usize, n: usize, cell: impl Fn(usize) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(cell).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {}", e)))?;
    pool.install(|| (0..n).into_par_iter().map(&cell).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

fn all_devices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.num_devices()).collect()
}

/// One DDNN per (local, cloud) scheme pair, same seed for every cell.
pub fn run_aggregation_sweep(train: &Dataset, test: &Dataset, config: &SweepConfig) -> Result<SweepResult> {
    let pairs: Vec<(AggregationKind, AggregationKind)> = AggregationKind::ALL
        .iter()
        .flat_map(|&l| AggregationKind::ALL.iter().map(move |&c| (l, c)))
        .collect();
    let rows = run_cells(config.jobs, pairs.len(), |i| {
        let (local, cloud) = pairs[i];
        let tc = TrainConfig {
            local,
            cloud,
            ..config.train.clone()
        };
        let (model, _) = fit::<f32>(train, all_devices(train), &tc)?;
        Ok(SweepRow {
            value: format!("{}-{}", local, cloud),
            report: measure(&model, test, config.threshold)?,
            extra: Vec::new(),
        })
    })?;
    let result = SweepResult {
        axis: "schemes".into(),
        rows,
    };
    result.check()?;
    Ok(result)
}

/// Re-routes one model's outcomes at each threshold of `grid`.
pub fn run_threshold_sweep<T: Scalar>(model: &DdnnModel<T>, test: &Dataset, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    let outcomes = collect_outcomes(model, test, &vec![true; model.num_devices()])?;
    let comm = CommModel::for_model(model);
    let mut result = SweepResult::new("threshold");
    for &t in grid {
        result.rows.push(SweepRow {
            value: format!("{:.2}", t),
            report: AccuracyReport::from_outcomes(&outcomes, t, &comm)?.0,
            extra: Vec::new(),
        });
    }
    check_threshold_monotonicity(&result)?;
    result.check()?;
    Ok(result)
}

/// Local exits never drop and traffic never grows as the threshold rises.
pub fn check_threshold_monotonicity(result: &SweepResult) -> Result<()> {
    let mut rows: Vec<&AccuracyReport> = result.rows.iter().map(|r| &r.report).collect();
    rows.sort_by(|a, b| a.threshold.partial_cmp(&b.threshold).expect("finite thresholds"));
    for w in rows.windows(2) {
        if w[1].local_exits < w[0].local_exits || w[1].avg_comm_bytes > w[0].avg_comm_bytes {
            return Err(Error::Invariant(format!(
                "threshold {} -> {}: local exits {} -> {}, bytes {} -> {}",
                w[0].threshold, w[1].threshold, w[0].local_exits, w[1].local_exits, w[0].avg_comm_bytes, w[1].avg_comm_bytes
            )));
        }
    }
    Ok(())
}

/// Stand-alone accuracy of each device on `test`.
pub fn individual_accuracies(train: &Dataset, test: &Dataset, config: &SweepConfig) -> Result<Vec<f64>> {
    run_cells(config.jobs, train.num_devices(), |d| {
        train_individual::<f32>(d, train, &config.train)?.accuracy(test)
    })
}

/// Device indices from the lowest to the highest accuracy (ties by index).
pub fn order_by_accuracy(accs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..accs.len()).collect();
    order.sort_by(|&a, &b| accs[a].partial_cmp(&accs[b]).expect("finite accuracy").then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceScaling {
    pub result: SweepResult,
    /// Stand-alone accuracy per dataset device.
    pub individual: Vec<f64>,
    /// Devices from worst to best; row `k` uses the first `k`.
    pub order: Vec<usize>,
}

/// DDNNs over the `k` weakest devices for `k = 1..=n`.
pub fn run_device_scaling(train: &Dataset, test: &Dataset, config: &SweepConfig) -> Result<DeviceScaling> {
    let individual = individual_accuracies(train, test, config)?;
    let order = order_by_accuracy(&individual);
    let rows = run_cells(config.jobs, order.len(), |i| {
        let ids = order[..=i].to_vec();
        let (model, _) = fit::<f32>(train, ids.clone(), &config.train)?;
        let mut report = measure(&model, test, config.threshold)?;
        report.individual_accs = ids.iter().map(|&d| individual[d]).collect();
        Ok(SweepRow {
            value: (i + 1).to_string(),
            report,
            extra: vec![(
                "devices_used".into(),
                ids.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";"),
            )],
        })
    })?;
    let result = SweepResult {
        axis: "devices".into(),
        rows,
    };
    result.check()?;
    Ok(DeviceScaling {
        result,
        individual,
        order,
    })
}

/// Per filter count: train on 80% of the training split, pick the threshold
/// giving about 75% local exits on the held-out 20%, evaluate on `test`.
pub fn run_filter_sweep(train: &Dataset, test: &Dataset, filters: &[usize], config: &SweepConfig) -> Result<SweepResult> {
    if filters.is_empty() {
        return Err(Error::Empty("filter counts"));
    }
    let (fit_set, validation) = split(train, 1.0 - VALIDATION_FRACTION, config.train.seed)?;
    let rows = run_cells(config.jobs, filters.len(), |i| {
        let tc = TrainConfig {
            filters: filters[i],
            ..config.train.clone()
        };
        let (model, _) = fit::<f32>(&fit_set, all_devices(&fit_set), &tc)?;
        let val = collect_outcomes(&model, &validation, &vec![true; model.num_devices()])?;
        let t = threshold_for_exit_fraction(&val, FILTER_SWEEP_LOCAL_EXIT)?;
        let (val_report, _) = AccuracyReport::from_outcomes(&val, t, &CommModel::for_model(&model))?;
        let memory = device_memory_bytes(&model.branches[0]);
        Ok(SweepRow {
            value: filters[i].to_string(),
            report: measure(&model, test, t)?,
            extra: vec![
                ("device_memory_bytes".into(), memory.to_string()),
                ("validation_local_exit_pct".into(), format!("{:.2}", val_report.local_exit_pct)),
            ],
        })
    })?;
    let result = SweepResult {
        axis: "filters".into(),
        rows,
    };
    result.check()?;
    Ok(result)
}

/// The no-failure baseline followed by each single-device failure.
pub fn single_failure_sets(devices: usize) -> Vec<Vec<usize>> {
    std::iter::once(Vec::new()).chain((0..devices).map(|d| vec![d])).collect()
}

/// Re-evaluates a trained model with the listed branch indices failed.
/// Failed devices are left out of MP/AP and zero-filled under CC.
pub fn run_fault_tolerance<T: Scalar>(
    model: &DdnnModel<T>,
    test: &Dataset,
    threshold: f64,
    failure_sets: &[Vec<usize>],
) -> Result<SweepResult> {
    let mut result = SweepResult::new("failed");
    for set in failure_sets {
        let deployment = crate::policy::Deployment::with_failures(model, set)?;
        let (report, _) = measure_with(model, test, threshold, &deployment.active)?;
        let value = if set.is_empty() {
            "none".to_string()
        } else {
            format!("fail-{}", set.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("+"))
        };
        result.rows.push(SweepRow {
            value,
            report,
            extra: Vec::new(),
        });
    }
    result.check()?;
    Ok(result)
}
