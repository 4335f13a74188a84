use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, SplitTag, CLASS_NAMES};
use crate::error::{Error, Result};

/// 680 training samples out of 851.
pub const DEFAULT_TRAIN_FRACTION: f64 = 680.0 / 851.0;

/// Deterministic disjoint split; each side keeps the original sample order.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {} outside (0, 1)",
            train_fraction
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot be split {:.3}/{:.3} with both sides non-empty",
            n,
            train_fraction,
            1.0 - train_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize], tag| {
        Dataset::new(idx.iter().map(|&i| dataset.samples[i].clone()).collect(), tag)
    };
    Ok((pick(&train_idx, SplitTag::Train), pick(&test_idx, SplitTag::Test)))
}

/// Per-device counts over labels `(-1, 0, 1, 2)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDistribution {
    pub rows: Vec<[usize; 4]>,
}

pub fn class_distribution(dataset: &Dataset) -> ClassDistribution {
    let mut rows = vec![[0usize; 4]; dataset.num_devices()];
    for s in &dataset.samples {
        for (d, &l) in s.device_labels.iter().enumerate() {
            rows[d][(l + 1) as usize] += 1;
        }
    }
    ClassDistribution { rows }
}

pub fn write_distribution_csv<W: Write>(dist: &ClassDistribution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["device", "absent", CLASS_NAMES[0], CLASS_NAMES[1], CLASS_NAMES[2]])?;
    for (d, row) in dist.rows.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

impl std::fmt::Display for ClassDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>6} {:>7} {:>7} {:>7} {:>7}", "device", "absent", "car", "bus", "person")?;
        for (d, r) in self.rows.iter().enumerate() {
            writeln!(f, "{:>6} {:>7} {:>7} {:>7} {:>7}", d, r[0], r[1], r[2], r[3])?;
        }
        Ok(())
    }
}
