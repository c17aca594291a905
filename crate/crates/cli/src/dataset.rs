//! On-disk dataset layout:
//!
//! ```text
//! <dir>/images/00000.ppm   RGB image
//! <dir>/masks/00000.pgm    ground-truth mask (pixel value = class)
//! <dir>/labels.csv         index,label
//! <dir>/manifest.json      seed, sizes and per-class counts
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use milseg::pnm;
use milseg::synthgen::{generate_sample, Sample};
use serde_json::json;

use crate::CliError;

/// Validation samples are drawn from the same data seed at indices offset by
/// this amount, so they never coincide with training samples.
pub const VAL_INDEX_OFFSET: u64 = 1 << 40;

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("images").join(format!("{index:05}.ppm"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("masks").join(format!("{index:05}.pgm"))
}

/// `classes` includes background; sample `i` has label `i % classes`.
pub fn synthesize(classes: usize, per_class: usize, image_size: usize, seed: u64, first_index: u64) -> Vec<Sample> {
    (0..classes * per_class)
        .map(|i| generate_sample(i % classes, image_size, seed, first_index + i as u64))
        .collect()
}

pub fn write_dataset(dir: &Path, samples: &[Sample], seed: u64, split: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir.join("images")).map_err(|e| CliError::io(dir, e))?;
    fs::create_dir_all(dir.join("masks")).map_err(|e| CliError::io(dir, e))?;
    let mut labels = String::from("index,label\n");
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        pnm::write_image(&image_path(dir, i), &s.image)?;
        pnm::write_mask(&mask_path(dir, i), s.ground_truth())?;
        labels.push_str(&format!("{i},{}\n", s.label));
        *counts.entry(s.label.to_string()).or_default() += 1;
    }
    let path = dir.join("labels.csv");
    fs::write(&path, labels).map_err(|e| CliError::io(&path, e))?;
    let size = samples.first().map_or(0, |s| s.image.shape()[1]);
    let manifest = json!({
        "split": split,
        "seed": seed,
        "image_size": size,
        "count": samples.len(),
        "per_class": counts,
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("json") + "\n").map_err(|e| CliError::io(&path, e))
}

pub fn read_labels(dir: &Path) -> Result<Vec<usize>, CliError> {
    let path = dir.join("labels.csv");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || CliError::Io(format!("{}:{}: expected `index,label`", path.display(), n + 1));
        let (i, l) = line.split_once(',').ok_or_else(bad)?;
        let (i, l): (usize, usize) = (i.trim().parse().map_err(|_| bad())?, l.trim().parse().map_err(|_| bad())?);
        if i != labels.len() {
            return Err(CliError::Io(format!("{}:{}: index {i} out of sequence", path.display(), n + 1)));
        }
        labels.push(l);
    }
    Ok(labels)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("dataset directory {} does not exist", dir.display())));
    }
    read_labels(dir)?
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let image = pnm::read_image(&image_path(dir, i))?;
            let mask = pnm::read_mask(&mask_path(dir, i))?;
            Ok(Sample::new(image, label, mask)?)
        })
        .collect()
}
