//! Named parameter storage, the Adam optimizer, and the checkpoint archive.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

const ARCHIVE_MAGIC: &[u8; 8] = b"STSHCKPT";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// An ordered collection of named matrices.
///
/// Every store has a process-unique id so a [`crate::autograd::Graph`] can
/// tell parameters of different models apart.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    /// Clones values under a fresh uid.
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform initialization in `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..=scale));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies every tensor of `other` whose name and shape match; returns the
    /// names copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, &id) in &other.index {
            if let Some(&mine) = self.index.get(name) {
                if self.values[mine.0].dim() == other.values[id.0].dim() {
                    self.values[mine.0].assign(&other.values[id.0]);
                    copied.push(name.clone());
                }
            }
        }
        copied.sort();
        copied
    }

    /// Serializes to the versioned archive format.
    ///
    /// Layout (little endian): magic, version `u32`, tensor count `u32`, then
    /// per tensor: name length `u32`, UTF-8 name, rows `u64`, cols `u64`,
    /// `rows * cols` row-major `f64` bit patterns.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, value) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != ARCHIVE_MAGIC {
            return Err(Error::Format("not a parameter archive".into()));
        }
        let version = cur.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!(
                "unsupported archive version {version}"
            )));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = cur.u64()? as usize;
            let cols = cur.u64()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_bits(cur.u64()?));
            }
            let value = Mat::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            store.add(&name, value);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after archive".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the archive bytes.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Replaces values from `other`, which must hold the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, &id) in &self.index {
            let src = other
                .id(name)
                .ok_or_else(|| Error::Format(format!("archive lacks tensor {name}")))?;
            let v = other.value(src);
            if v.dim() != self.values[id.0].dim() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} in archive, {:?} expected",
                    v.dim(),
                    self.values[id.0].dim()
                )));
            }
            self.values[id.0].assign(v);
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("truncated archive".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store.values.iter().map(|v| Mat::zeros(v.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// [`Adam::step`] with the gradients of `store` taken from a backward pass.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &crate::autograd::Gradients) -> f64 {
        let g = grads.for_store(store);
        self.step(store, &g)
    }

    /// Applies one update. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>]) -> f64 {
        assert_eq!(grads.len(), store.len());
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (b1, b2) = (self.beta1, self.beta2);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let w = &mut store.values[i];
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn archive_round_trips_bit_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.add_uniform("enc.w", 3, 5, 1.0, &mut rng);
        store.add("odd", ndarray::array![[f64::MIN_POSITIVE, -0.0, 1e300]]);
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.name(ParamId(1)), "odd");
        assert_eq!(back.value(ParamId(1))[[0, 1]].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let mut store = ParamStore::new();
        store.add_zeros("w", 2, 2);
        let bytes = store.to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ParamStore::from_bytes(b"garbage!....").is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ndarray::array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.value(id) * 2.0;
            opt.step(&mut store, &[Some(g)]);
        }
        assert!(store.value(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", ndarray::array![[0.0]]);
        let mut opt = Adam::new(&store, 1.0);
        let norm = opt.step(&mut store, &[Some(ndarray::array![[100.0]])]);
        assert_eq!(norm, 100.0);
        // First Adam step moves by lr regardless of scale.
        assert!((store.value(id)[[0, 0]] + 1.0).abs() < 1e-6);
    }
}
