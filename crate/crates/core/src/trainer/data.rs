use std::collections::BTreeSet;
use std::path::Path;

use crate::encoder::{EncoderConfig, TokenSeq};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::streams;

const MAGIC: &[u8; 4] = b"CPDS";
const VERSION: u32 = 1;

/// One labeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

/// A task: its class-name token sequences and train/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    pub class_names: Vec<TokenSeq>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskDataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::contract("task id must be non-empty".to_string()));
        }
        if self.class_names.is_empty() {
            return Err(Error::contract(format!(
                "task {:?} has no classes",
                self.task_id
            )));
        }
        let distinct: BTreeSet<_> = self.class_names.iter().collect();
        if distinct.len() != self.class_names.len() {
            return Err(Error::contract(format!(
                "task {:?} has duplicate class names",
                self.task_id
            )));
        }
        for name in &self.class_names {
            name.check(cfg)?;
        }
        let want = vec![cfg.image, cfg.image, cfg.channels];
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for (i, s) in samples.iter().enumerate() {
                if s.label >= self.class_names.len() {
                    return Err(Error::contract(format!(
                        "task {:?} {split} sample {i}: label {} out of range",
                        self.task_id, s.label
                    )));
                }
                if s.image.shape() != want.as_slice() {
                    return Err(Error::shape(
                        "dataset",
                        format!(
                            "task {:?} {split} sample {i}: image {:?}, expected {:?}",
                            self.task_id,
                            s.image.shape(),
                            want
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Keeps at most `k` training samples per class, picked without
    /// replacement from a seed-derived stream; the test split is untouched.
    pub fn few_shot(&self, k: usize, seed: u64) -> TaskDataset {
        let mut keep: Vec<usize> = Vec::new();
        for class in 0..self.class_names.len() {
            let mut idx: Vec<usize> = (0..self.train.len())
                .filter(|&i| self.train[i].label == class)
                .collect();
            let mut rng = Rng::derived(seed, streams::label(streams::FEW_SHOT, class as u64));
            rng.shuffle(&mut idx);
            idx.truncate(k);
            keep.extend(idx);
        }
        keep.sort_unstable();
        TaskDataset {
            task_id: self.task_id.clone(),
            class_names: self.class_names.clone(),
            train: keep.iter().map(|&i| self.train[i].clone()).collect(),
            test: self.test.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let id = self.task_id.as_bytes();
        w.u16(id.len() as u16);
        w.bytes(id);
        w.u32(self.class_names.len() as u32);
        for name in &self.class_names {
            w.u16(name.ids().len() as u16);
            for &t in name.ids() {
                w.u32(t);
            }
        }
        for samples in [&self.train, &self.test] {
            w.u32(samples.len() as u32);
            for s in samples {
                w.u32(s.label as u32);
                w.tensor(&s.image);
            }
        }
        w.into_vec()
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let id_len = r.u16()? as usize;
        let id_bytes = r.take(id_len)?;
        let task_id = std::str::from_utf8(id_bytes)
            .map_err(|_| r.error("task id is not valid UTF-8"))?
            .to_string();
        if task_id.is_empty() {
            return Err(r.error("task id is empty"));
        }
        let n_classes = r.u32()? as usize;
        if n_classes == 0 {
            return Err(r.error("dataset has no classes"));
        }
        let mut class_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = r.u16()? as usize;
            let mut ids = Vec::with_capacity(len);
            for _ in 0..len {
                ids.push(r.u32()?);
            }
            class_names.push(TokenSeq::new(ids).map_err(|e| r.error(e.to_string()))?);
        }
        let mut splits = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.u32()? as usize;
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let label = r.u32()? as usize;
                if label >= n_classes {
                    return Err(r.error(format!(
                        "label {label} out of range for {n_classes} classes"
                    )));
                }
                let image = r.tensor()?;
                samples.push(Sample { image, label });
            }
            splits.push(samples);
        }
        r.finish()?;
        let test = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(TaskDataset {
            task_id,
            class_names,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(cfg: &EncoderConfig, fill: f64) -> Tensor {
        let n = cfg.image * cfg.image * cfg.channels;
        Tensor::new(vec![cfg.image, cfg.image, cfg.channels], vec![fill; n]).unwrap()
    }

    fn toy(cfg: &EncoderConfig) -> TaskDataset {
        let mut train = Vec::new();
        for i in 0..6 {
            train.push(Sample {
                image: image(cfg, i as f64 * 0.1),
                label: i % 2,
            });
        }
        TaskDataset {
            task_id: "toy".to_string(),
            class_names: vec![
                TokenSeq::new(vec![1, 2]).unwrap(),
                TokenSeq::new(vec![3]).unwrap(),
            ],
            train,
            test: vec![Sample {
                image: image(cfg, 0.5),
                label: 1,
            }],
        }
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let cfg = EncoderConfig::tiny();
        let ds = toy(&cfg);
        ds.validate(&cfg).unwrap();

        let mut bad = ds.clone();
        bad.train[0].label = 9;
        assert!(bad.validate(&cfg).is_err());

        let mut bad = ds.clone();
        bad.class_names[1] = bad.class_names[0].clone();
        assert!(bad.validate(&cfg).is_err());

        let mut bad = ds.clone();
        bad.test[0].image = Tensor::zeros(vec![2, 2, 3]);
        assert!(bad.validate(&cfg).is_err());

        let mut bad = ds.clone();
        bad.task_id.clear();
        assert!(bad.validate(&cfg).is_err());
    }

    #[test]
    fn few_shot_keeps_k_per_class_deterministically() {
        let cfg = EncoderConfig::tiny();
        let ds = toy(&cfg);
        let fs = ds.few_shot(2, 9);
        assert_eq!(fs.train.len(), 4);
        for class in 0..2 {
            assert_eq!(fs.train.iter().filter(|s| s.label == class).count(), 2);
        }
        assert_eq!(fs.test, ds.test);
        assert_eq!(fs, ds.few_shot(2, 9));
        assert_ne!(fs.train, ds.few_shot(2, 10).train);
        // k beyond the class size keeps everything, in original order
        assert_eq!(ds.few_shot(100, 9).train, ds.train);
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let cfg = EncoderConfig::tiny();
        let ds = toy(&cfg);
        let bytes = ds.to_bytes();
        let back = TaskDataset::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_dataset_files_fail_closed() {
        let cfg = EncoderConfig::tiny();
        let bytes = toy(&cfg).to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TaskDataset::from_bytes(&bad, "mem").is_err());

        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 3);
        let err = TaskDataset::from_bytes(&truncated, "mem").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TaskDataset::from_bytes(&extra, "mem").is_err());

        // first train label lives right after the class names and count
        let labels_at = 4 + 4 + 2 + 3 + 4 + (2 + 8) + (2 + 4) + 4;
        let mut bad = bytes.clone();
        bad[labels_at] = 200;
        assert!(TaskDataset::from_bytes(&bad, "mem").is_err());
    }
}
