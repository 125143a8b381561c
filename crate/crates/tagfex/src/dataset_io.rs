//! Dataset directories: `meta.json` plus CIFAR-style packed binary splits.
//!
//! Each record is `label_bytes` label bytes followed by the image as
//! row-major channel planes of `u8`. With two label bytes (CIFAR-100 layout)
//! `label_index` picks which one is the class.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tagfex_core::data::{generate_collision_dataset, make_splits, Image, Sample, TaskDataset};

use crate::config::DatasetConfig;
use crate::fsutil::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub file: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub class_names: Vec<String>,
    /// `[height, width, channels]`.
    pub image_size: [usize; 3],
    #[serde(default = "one")]
    pub label_bytes: usize,
    #[serde(default)]
    pub label_index: usize,
    pub splits: BTreeMap<String, SplitFile>,
}

fn one() -> usize {
    1
}

impl DatasetMeta {
    fn record_len(&self) -> usize {
        let [h, w, c] = self.image_size;
        self.label_bytes + h * w * c
    }

    fn validate(&self) -> Result<()> {
        ensure!(matches!(self.label_bytes, 1 | 2), "label_bytes must be 1 or 2");
        ensure!(self.label_index < self.label_bytes, "label_index out of range");
        ensure!(self.image_size.iter().all(|&v| v > 0), "empty image size");
        ensure!(!self.class_names.is_empty(), "no classes");
        Ok(())
    }
}

/// Decodes packed records into samples.
pub fn decode_records(meta: &DatasetMeta, bytes: &[u8]) -> Result<Vec<Sample>> {
    let len = meta.record_len();
    ensure!(bytes.len() % len == 0, "{} bytes is not a whole number of {len}-byte records", bytes.len());
    let [h, w, c] = meta.image_size;
    let plane = h * w;
    bytes
        .chunks_exact(len)
        .map(|rec| {
            let label = rec[meta.label_index] as usize;
            ensure!(label < meta.class_names.len(), "label {label} outside {} classes", meta.class_names.len());
            let pixels = &rec[meta.label_bytes..];
            let mut data = vec![0.0; plane * c];
            for ch in 0..c {
                for p in 0..plane {
                    data[p * c + ch] = pixels[ch * plane + p] as f64 / 255.0;
                }
            }
            Ok(Sample {
                image: Image::new(h, w, c, data)?,
                label,
            })
        })
        .collect()
}

/// Encodes samples as one-label-byte records. Pixels are rounded to bytes.
pub fn encode_records(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        ensure!(s.label < 256, "label {} does not fit a byte", s.label);
        out.push(s.label as u8);
        let img = &s.image;
        let plane = img.height * img.width;
        for ch in 0..img.channels {
            for p in 0..plane {
                out.push((img.data[p * img.channels + ch].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let meta: DatasetMeta = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    meta.validate()?;
    Ok(meta)
}

pub fn read_split(dir: &Path, meta: &DatasetMeta, split: &str) -> Result<Vec<Sample>> {
    let Some(entry) = meta.splits.get(split) else {
        bail!("dataset {} has no {split:?} split", meta.name);
    };
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let samples = decode_records(meta, &bytes).with_context(|| format!("decoding {}", path.display()))?;
    ensure!(samples.len() == entry.count, "{} holds {} records, meta.json says {}", path.display(), samples.len(), entry.count);
    Ok(samples)
}

/// Writes a dataset directory with `train` and `test` splits.
pub fn write_dataset(dir: &Path, name: &str, class_names: Vec<String>, train: &[Sample], test: &[Sample]) -> Result<DatasetMeta> {
    let first = train.first().or(test.first()).context("no samples to write")?;
    let size = [first.image.height, first.image.width, first.image.channels];
    ensure!(
        train.iter().chain(test).all(|s| s.image.shape() == size),
        "samples do not share one image size"
    );
    fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    for (split, samples) in [("train", train), ("test", test)] {
        let file = format!("{split}.bin");
        write_atomic(&dir.join(&file), &encode_records(samples)?)?;
        splits.insert(split.to_string(), SplitFile { file, count: samples.len() });
    }
    let meta = DatasetMeta {
        name: name.into(),
        class_names,
        image_size: size,
        label_bytes: 1,
        label_index: 0,
        splits,
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.write_all(b"\n")?;
    write_atomic(&dir.join("meta.json"), &json)?;
    Ok(meta)
}

/// Train and test task streams with matching class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub train: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
}

impl Stream {
    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn task_classes(&self) -> Vec<Vec<usize>> {
        self.train.iter().map(TaskDataset::classes).collect()
    }
}

/// Splits every class of every task: the first `1 - test_fraction` of its
/// samples train, the rest are held out.
pub fn holdout(tasks: Vec<TaskDataset>, test_fraction: f64) -> Stream {
    let mut train = Vec::with_capacity(tasks.len());
    let mut test = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &task.samples {
            *totals.entry(s.label).or_default() += 1;
        }
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let (mut tr, mut te) = (task.clone(), task.clone());
        tr.samples.clear();
        te.samples.clear();
        for s in task.samples {
            let k = seen.entry(s.label).or_default();
            let keep = ((1.0 - test_fraction) * totals[&s.label] as f64).round() as usize;
            if *k < keep {
                tr.samples.push(s);
            } else {
                te.samples.push(s);
            }
            *k += 1;
        }
        train.push(tr);
        test.push(te);
    }
    Stream { train, test }
}

/// Builds the task stream described by `cfg`, resolving relative dataset
/// paths against `base`.
pub fn load_stream(cfg: &DatasetConfig, base: &Path, seed: u64) -> Result<Stream> {
    match cfg {
        DatasetConfig::Collision { spec, test_fraction } => {
            let tasks = generate_collision_dataset(spec, seed)?;
            Ok(holdout(tasks, *test_fraction))
        }
        DatasetConfig::Directory { path, split } => {
            let dir = if path.is_absolute() { path.clone() } else { base.join(path) };
            let meta = read_meta(&dir)?;
            ensure!(
                split.total_classes == meta.class_names.len(),
                "split covers {} classes, dataset has {}",
                split.total_classes,
                meta.class_names.len()
            );
            let train = make_splits(split, read_split(&dir, &meta, "train")?)?;
            let test = make_splits(split, read_split(&dir, &meta, "test")?)?;
            Ok(Stream { train, test })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(label_bytes: usize, label_index: usize) -> DatasetMeta {
        DatasetMeta {
            name: "t".into(),
            class_names: (0..5).map(|i| i.to_string()).collect(),
            image_size: [2, 2, 3],
            label_bytes,
            label_index,
            splits: BTreeMap::new(),
        }
    }

    #[test]
    fn planes_become_interleaved_pixels() {
        let mut rec = vec![3u8];
        rec.extend(0..12u8);
        let s = decode_records(&meta(1, 0), &rec).unwrap();
        assert_eq!(s[0].label, 3);
        // Pixel (0, 1) reads offset 1 of each plane.
        assert_eq!(s[0].image.pixel(0, 1), [1.0 / 255.0, 5.0 / 255.0, 9.0 / 255.0]);
    }

    #[test]
    fn two_label_bytes_select_the_fine_label() {
        let mut rec = vec![1u8, 4];
        rec.extend([0u8; 12]);
        assert_eq!(decode_records(&meta(2, 1), &rec).unwrap()[0].label, 4);
        assert_eq!(decode_records(&meta(2, 0), &rec).unwrap()[0].label, 1);
    }

    #[test]
    fn truncated_and_out_of_range_records_fail() {
        assert!(decode_records(&meta(1, 0), &[0u8; 12]).is_err());
        let mut rec = vec![9u8];
        rec.extend([0u8; 12]);
        assert!(decode_records(&meta(1, 0), &rec).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rec = vec![2u8];
        rec.extend((0..12u8).map(|v| v * 20));
        let s = decode_records(&meta(1, 0), &rec).unwrap();
        assert_eq!(encode_records(&s).unwrap(), rec);
    }
}
