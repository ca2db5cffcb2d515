//! Named parameter storage, Adam updates, and binary snapshots.
//!
//! Snapshot layout: 8-byte magic, u32 version, u64 manifest length, JSON
//! manifest (names, shapes, step counter), then raw little-endian f64
//! payloads in manifest order (value, then first/second Adam moments).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::TensorError;

const SNAPSHOT_MAGIC: &[u8; 8] = b"MEMOIRPS";
const SNAPSHOT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Named f64 matrices plus per-parameter Adam moments and a step counter.
/// Iteration order is the name order (BTreeMap), so updates and snapshots
/// are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
    moments: BTreeMap<String, (Mat, Mat)>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    version: u32,
    step: u64,
    entries: Vec<SnapshotEntry>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        assert!(value.all_finite(), "parameter `{name}` has non-finite entries");
        let (r, c) = value.shape();
        self.moments
            .insert(name.to_string(), (Mat::zeros(r, c), Mat::zeros(r, c)));
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Adam update with (0.9, 0.999, 1e-8) and bias correction. Parameters
    /// without a gradient entry are left untouched (their moments too).
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Mat>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, grad) in grads {
            let param = match self.params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let (m, v) = self.moments.get_mut(name).expect("moments track params");
            assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch for `{name}`");
            for i in 0..param.data.len() {
                let g = grad.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                param.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        let entries: Vec<SnapshotEntry> = self
            .params
            .iter()
            .map(|(name, m)| SnapshotEntry {
                name: name.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect();
        let manifest = SnapshotManifest {
            version: SNAPSHOT_VERSION,
            step: self.step,
            entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for (name, value) in &self.params {
            let (m, v) = &self.moments[name];
            for src in [value, m, v] {
                for x in &src.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self, TensorError> {
        let fail = |msg: &str| TensorError::Snapshot(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(TensorError::Snapshot(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + mlen {
            return Err(fail("truncated manifest"));
        }
        let manifest: SnapshotManifest = serde_json::from_slice(&bytes[20..20 + mlen])
            .map_err(|e| TensorError::Snapshot(format!("bad manifest: {e}")))?;
        let payload = &bytes[20 + mlen..];
        let expected: usize = manifest
            .entries
            .iter()
            .map(|e| e.rows * e.cols * 3 * 8)
            .sum();
        if payload.len() != expected {
            return Err(TensorError::Snapshot(format!(
                "payload length {} does not match manifest (expected {expected})",
                payload.len()
            )));
        }
        let mut store = ParamStore {
            step: manifest.step,
            ..Default::default()
        };
        let mut off = 0;
        let read_mat = |rows: usize, cols: usize, off: &mut usize| {
            let n = rows * cols;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(
                    payload[*off..*off + 8].try_into().unwrap(),
                ));
                *off += 8;
            }
            Mat::from_vec(rows, cols, data)
        };
        for entry in &manifest.entries {
            let value = read_mat(entry.rows, entry.cols, &mut off);
            let m = read_mat(entry.rows, entry.cols, &mut off);
            let v = read_mat(entry.rows, entry.cols, &mut off);
            if !value.all_finite() {
                return Err(TensorError::Snapshot(format!(
                    "non-finite values in `{}`",
                    entry.name
                )));
            }
            store.params.insert(entry.name.clone(), value);
            store.moments.insert(entry.name.clone(), (m, v));
        }
        Ok(store)
    }
}

/// Uniform Xavier-style init: scale 1/sqrt(fan_in).
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let scale = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Mat::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_lr_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::row(vec![1.0, 2.0]));
        let before = store.get("w").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Mat::row(vec![0.3, -0.7]));
        store.adam_step(&grads, 0.0);
        assert_eq!(store.get("w").unwrap(), &before);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        // minimize 0.5 * w^2, gradient = w
        let mut store = ParamStore::new();
        store.insert("w", Mat::row(vec![5.0]));
        for _ in 0..2000 {
            let w = store.get("w").unwrap().data[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Mat::row(vec![w]));
            store.adam_step(&grads, 0.05);
        }
        assert!(store.get("w").unwrap().data[0].abs() < 1e-3);
    }

    #[test]
    fn snapshot_roundtrip_bitexact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a.w", xavier(3, 4, &mut rng));
        store.insert("b.bias", xavier(1, 4, &mut rng));
        let mut grads = BTreeMap::new();
        grads.insert("a.w".to_string(), xavier(3, 4, &mut rng));
        store.adam_step(&grads, 0.01);

        let bytes = store.to_snapshot();
        let restored = ParamStore::from_snapshot(&bytes).unwrap();
        assert_eq!(restored.step(), store.step());
        assert_eq!(restored.get("a.w"), store.get("a.w"));
        assert_eq!(restored.to_snapshot(), bytes);
    }

    #[test]
    fn snapshot_rejects_truncation_and_bad_magic() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::row(vec![1.0, 2.0, 3.0]));
        let bytes = store.to_snapshot();
        assert!(ParamStore::from_snapshot(&bytes[..bytes.len() - 4]).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(ParamStore::from_snapshot(&corrupt).is_err());
    }
}
