//! Binary dataset files, manifests, class-incremental task streams and
//! exemplar selection.
//!
//! File layout, all little-endian:
//! `b"BSA1"`, `u32` version, `u32` n_samples, `u32` points, `u32` channels,
//! `n_samples` `u32` labels, then `n_samples * points * channels` `f32`.
//! A JSON manifest sits next to the binary at `<path>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"BSA1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub split: Split,
    /// Template id behind every class index, when generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_ids: Option<Vec<u32>>,
}

/// Fixed-size point clouds with labels, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub points: usize,
    pub channels: usize,
    pub labels: Vec<u32>,
    pub data: Vec<f32>,
}

impl Dataset {
    pub fn from_clouds(manifest: Manifest, clouds: &[PointCloud], labels: Vec<u32>) -> Result<Self> {
        if clouds.len() != labels.len() {
            return config_err(format!("{} clouds but {} labels", clouds.len(), labels.len()));
        }
        let points = clouds.first().map_or(0, |c| c.len());
        let mut data = Vec::with_capacity(clouds.len() * points * 3);
        for c in clouds {
            if c.len() != points {
                return config_err("all clouds in a dataset must have the same point count");
            }
            for p in &c.points {
                data.extend(p.iter().map(|&v| v as f32));
            }
        }
        let ds = Dataset { manifest, points, channels: 3, labels, data };
        ds.check_labels()?;
        Ok(ds)
    }

    fn check_labels(&self) -> Result<()> {
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.manifest.class_count)
        {
            return Err(Error::Format {
                offset: (HEADER_LEN + 4 * i) as u64,
                msg: format!("label {l} out of range for {} classes", self.manifest.class_count),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.points * self.channels;
        &self.data[i * n..(i + 1) * n]
    }

    /// xyz of sample `i` widened to `f64`.
    pub fn xyz(&self, i: usize) -> Vec<Vec3> {
        self.sample(i)
            .chunks_exact(self.channels)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect()
    }

    pub fn indices_of(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ds.labels.len() + 4 * ds.data.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, ds.len() as u32, ds.points as u32, ds.channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for v in &ds.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_dataset(bytes: &[u8], manifest: Manifest) -> Result<Dataset> {
    let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let n = read_u32(bytes, 8) as usize;
    let points = read_u32(bytes, 12) as usize;
    let channels = read_u32(bytes, 16) as usize;
    if channels != 3 {
        return Err(fmt(16, format!("expected 3 channels, found {channels}")));
    }
    let expected = (n as u128) * 4 + (n as u128) * (points as u128) * (channels as u128) * 4
        + HEADER_LEN as u128;
    if bytes.len() as u128 != expected {
        let at = bytes.len().min(expected.min(usize::MAX as u128) as usize);
        return Err(fmt(at, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let labels: Vec<u32> = (0..n).map(|i| read_u32(bytes, HEADER_LEN + 4 * i)).collect();
    let start = HEADER_LEN + 4 * n;
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ds = Dataset { manifest, points, channels, labels, data };
    ds.check_labels()?;
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&ds.manifest)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mp = manifest_path(path);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&mp)?)?;
    decode_dataset(&bytes, manifest)
}

/// One incremental stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<u32>,
    /// Indices into the training set.
    pub train: Vec<usize>,
    /// Indices into the test set.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub seed: u64,
    pub class_order: Vec<u32>,
    pub tasks: Vec<Task>,
}

/// Split sizes for `classes` classes with increment `k`, optionally forcing
/// the last task to hold `k_last` classes.
pub fn task_sizes(classes: usize, k: usize, k_last: Option<usize>) -> Result<Vec<usize>> {
    if k == 0 || classes == 0 {
        return config_err("increment and class count must be >= 1");
    }
    match k_last {
        None => {
            let mut sizes = vec![k; classes / k];
            if classes % k != 0 {
                sizes.push(classes % k);
            }
            Ok(sizes)
        }
        Some(kl) => {
            if kl == 0 || kl > classes || (classes - kl) % k != 0 {
                return config_err(format!(
                    "{classes} classes cannot be split into tasks of {k} with a final task of {kl}"
                ));
            }
            let mut sizes = vec![k; (classes - kl) / k];
            sizes.push(kl);
            Ok(sizes)
        }
    }
}

/// Seeded class permutation of `0..classes`.
pub fn class_order(classes: usize, seed: u64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..classes as u32).collect();
    rng::shuffle(&mut rng::rng_from(seed), &mut order);
    order
}

pub fn make_task_stream(
    train: &Dataset,
    test: &Dataset,
    k: usize,
    k_last: Option<usize>,
    seed: u64,
) -> Result<TaskStream> {
    let classes = train.manifest.class_count;
    if test.manifest.class_count != classes {
        return config_err(format!(
            "train has {classes} classes but test has {}",
            test.manifest.class_count
        ));
    }
    let sizes = task_sizes(classes, k, k_last)?;
    let order = class_order(classes, seed);
    let mut tasks = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for (index, &sz) in sizes.iter().enumerate() {
        let cls = order[at..at + sz].to_vec();
        at += sz;
        let pick = |ds: &Dataset| -> Vec<usize> {
            (0..ds.len()).filter(|&i| cls.contains(&ds.labels[i])).collect()
        };
        tasks.push(Task { index, train: pick(train), test: pick(test), classes: cls.clone() });
    }
    Ok(TaskStream { seed, class_order: order, tasks })
}

impl TaskStream {
    /// Digest of the class order, task membership and referenced sample data.
    pub fn content_hash(&self, train: &Dataset, test: &Dataset) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for c in &self.class_order {
            h.update(c.to_le_bytes());
        }
        for t in &self.tasks {
            h.update((t.classes.len() as u64).to_le_bytes());
            for (ds, idx) in [(train, &t.train), (test, &t.test)] {
                h.update((idx.len() as u64).to_le_bytes());
                for &i in idx {
                    h.update(ds.labels[i].to_le_bytes());
                    for v in ds.sample(i) {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-class exemplar indices into the training set.
pub type ExemplarStore = BTreeMap<u32, Vec<usize>>;

/// Uniformly random exemplars without replacement, `min(e, class size)` per
/// class. The pick depends only on `(seed, class)` and the candidate list.
pub fn select_exemplars(train: &Dataset, classes: &[u32], e: usize, seed: u64) -> ExemplarStore {
    classes
        .iter()
        .map(|&c| {
            let members = train.indices_of(c);
            let mut r = rng::rng_at(seed, &[c as u64, 0xe8]);
            let picks = rng::sample_without_replacement(&mut r, members.len(), e);
            (c, picks.into_iter().map(|i| members[i]).collect())
        })
        .collect()
}
