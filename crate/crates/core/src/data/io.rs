//! Directory layout: `index.txt` with one line per sample
//! (`sample_id l0 .. l{n-1} global`) plus `<sample_id>_<device>.ppm` views.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{decode_ppm, encode_ppm, Dataset, MultiViewSample, SplitTag};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.txt";

pub fn view_file_name(sample_id: &str, device: usize) -> String {
    format!("{}_{}.ppm", sample_id, device)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(INDEX_FILE);
    let index = fs::read_to_string(&index_path).map_err(|e| Error::Dataset {
        path: index_path.clone(),
        reason: e.to_string(),
    })?;
    let mut samples = Vec::new();
    let mut devices = None;
    for (lineno, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| Error::Dataset {
            path: index_path.clone(),
            reason: format!("line {}: {}", lineno + 1, reason),
        };
        if fields.len() < 3 {
            return Err(bad("expected sample_id, device labels and global label".into()));
        }
        let n = fields.len() - 2;
        if *devices.get_or_insert(n) != n {
            return Err(bad(format!("{} device labels, earlier lines have {}", n, devices.unwrap())));
        }
        let id = fields[0].to_string();
        let sample_err = |reason: String| Error::Sample {
            sample_id: id.clone(),
            reason,
        };
        let parse = |t: &str| {
            t.parse::<i8>()
                .map_err(|_| sample_err(format!("label {:?} is not an integer", t)))
        };
        let device_labels = fields[1..=n].iter().map(|t| parse(t)).collect::<Result<Vec<_>>>()?;
        let global = parse(fields[n + 1])?;
        if !(0..3).contains(&global) {
            return Err(sample_err(format!("global label {} outside 0..=2", global)));
        }
        let mut views = Vec::with_capacity(n);
        for d in 0..n {
            let path = dir.join(view_file_name(&id, d));
            let bytes = fs::read(&path)
                .map_err(|e| sample_err(format!("view {}: {}", path.display(), e)))?;
            views.push(decode_ppm(&bytes).map_err(|e| sample_err(format!("view {}: {}", path.display(), e)))?);
        }
        let sample = MultiViewSample {
            id,
            views,
            device_labels,
            global_label: global as u8,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(Dataset::new(samples, SplitTag::Full))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for s in &dataset.samples {
        s.validate()?;
        if s.id.is_empty() || s.id.chars().any(char::is_whitespace) {
            return Err(Error::Sample {
                sample_id: s.id.clone(),
                reason: "sample ids must be non-empty and free of whitespace".into(),
            });
        }
        write!(index, "{}", s.id).unwrap();
        for l in &s.device_labels {
            write!(index, " {}", l).unwrap();
        }
        writeln!(index, " {}", s.global_label).unwrap();
        for (d, view) in s.views.iter().enumerate() {
            fs::write(dir.join(view_file_name(&s.id, d)), encode_ppm(view))?;
        }
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}
