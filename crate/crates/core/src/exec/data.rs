use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_FILE: &str = "data.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    shape: [usize; 4],
    num_classes: usize,
}

/// Labelled images `[N,C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<u32>,
    num_classes: usize,
}

/// A batch used by data-driven criteria; same layout and invariants as [`Dataset`].
pub type CalibrationBatch = Dataset;

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 4 {
            return Err(Error::Dataset(format!("inputs must be [N,C,H,W], got {:?}", inputs.shape())));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} samples but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Flat inputs and labels for the given sample indices, in that order.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<u32>) {
        let len = self.sample_len();
        let data = self.inputs.data();
        let mut x = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            x.extend_from_slice(&data[i * len..(i + 1) * len]);
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Dataset(format!("sample {bad} out of range ({} samples)", self.len())));
        }
        let (x, y) = self.gather(idx);
        let [c, h, w] = self.sample_shape();
        Dataset::new(Tensor::new(vec![idx.len(), c, h, w], x)?, y, self.num_classes)
    }

    /// `n` samples drawn without replacement by a seeded shuffle.
    pub fn calibration(&self, n: usize, seed: u64) -> Result<CalibrationBatch> {
        if n == 0 || n > self.len() {
            return Err(Error::Dataset(format!(
                "calibration size {n} must be in 1..={}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.subset(&idx)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta_path = dir.join(META_FILE);
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let data = read_words(&dir.join(DATA_FILE))?;
        let labels = read_words(&dir.join(LABELS_FILE))?;
        let n: usize = meta.shape.iter().product();
        if data.len() != n {
            return Err(Error::Dataset(format!(
                "{DATA_FILE} holds {} values, meta shape {:?} needs {n}",
                data.len(),
                meta.shape
            )));
        }
        let inputs = Tensor::new(meta.shape.to_vec(), data.into_iter().map(f32::from_bits).collect())
            .map_err(|e| Error::Dataset(e.to_string()))?;
        Dataset::new(inputs, labels, meta.num_classes)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = self.inputs.shape();
        let meta = Meta {
            shape: [s[0], s[1], s[2], s[3]],
            num_classes: self.num_classes,
        };
        let write = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(DATA_FILE, self.inputs.data().iter().flat_map(|v| v.to_le_bytes()).collect())?;
        write(LABELS_FILE, self.labels.iter().flat_map(|v| v.to_le_bytes()).collect())?;
        write(META_FILE, serde_json::to_vec_pretty(&meta)?)
    }
}

fn read_words(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Dataset(format!("{} is not a whole number of 4-byte words", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
