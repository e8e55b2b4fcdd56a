//! Exact cosine search over unit-normalized query embeddings.

use std::io::Write;
use std::path::Path;

use super::{finish, top_k, CandidatePool, RetrievalResult};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::Generator;

const INDEX_MAGIC: &[u8; 8] = b"STSHDIDX";
const INDEX_VERSION: u32 = 1;
const REFRESH_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub style: usize,
    /// Sentence id of each embedding row.
    pub ids: Vec<usize>,
    /// `N x d`, unit rows.
    pub embeddings: Mat,
    /// Training steps since the embeddings were computed.
    pub staleness: usize,
    /// Fingerprint of the parameters the embeddings came from.
    pub checkpoint_hash: String,
}

fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Recomputes every embedding of `style` with the current encoder.
pub fn refresh_dense_index(generator: &Generator, sentences: &[Vec<usize>], style: usize) -> DenseIndex {
    let d = generator.dims.enc_dim();
    let mut embeddings = Mat::zeros((sentences.len(), d));
    // Length-sorted batches keep padding small.
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by_key(|&i| (sentences[i].len(), i));
    for chunk in order.chunks(REFRESH_BATCH) {
        let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| sentences[i].clone()).collect();
        let q = generator.query_embeddings(&batch);
        for (row, &i) in chunk.iter().enumerate() {
            embeddings.row_mut(i).assign(&q.row(row));
        }
    }
    normalize_rows(&mut embeddings);
    DenseIndex {
        style,
        ids: (0..sentences.len()).collect(),
        embeddings,
        staleness: 0,
        checkpoint_hash: generator.store.fingerprint(),
    }
}

impl DenseIndex {
    pub fn from_embeddings(style: usize, mut embeddings: Mat, checkpoint_hash: String) -> Self {
        normalize_rows(&mut embeddings);
        DenseIndex {
            style,
            ids: (0..embeddings.nrows()).collect(),
            embeddings,
            staleness: 0,
            checkpoint_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Cosine similarity of `query` with every stored sentence, by sentence id.
    pub fn cosine_scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroQuery);
        }
        let q = ndarray::Array1::from_iter(query.iter().map(|x| x / norm));
        let sims = self.embeddings.dot(&q);
        let mut scores = vec![f64::NEG_INFINITY; self.ids.iter().max().map_or(0, |m| m + 1)];
        for (row, &id) in self.ids.iter().enumerate() {
            scores[id] = sims[row];
        }
        Ok(scores)
    }

    pub fn retrieve(
        &self,
        pool: &CandidatePool,
        query: &[f64],
        exclude: Option<&[usize]>,
        k: usize,
    ) -> Result<RetrievalResult> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let scores = self.cosine_scores(query)?;
        let excluded = exclude.map_or(&[][..], |t| pool.identical_to(t));
        Ok(finish(self.style, k, top_k(&scores, k, excluded)))
    }

    /// Header (magic, version, style, d, n, hash) then `u32` ids and the
    /// `f32` row-major embedding matrix, all little endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.style as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.checkpoint_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.checkpoint_hash.as_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        for &x in self.embeddings.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = || Error::Format(format!("{}: malformed dense index", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != INDEX_MAGIC {
            return Err(bad());
        }
        let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = read_u32(take(4)?);
        if version != INDEX_VERSION {
            return Err(bad());
        }
        let style = read_u32(take(4)?) as usize;
        let dim = read_u32(take(4)?) as usize;
        let n = read_u32(take(4)?) as usize;
        let hash_len = read_u32(take(4)?) as usize;
        let checkpoint_hash = String::from_utf8(take(hash_len)?.to_vec()).map_err(|_| bad())?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(read_u32(take(4)?) as usize);
        }
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            data.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
        }
        let embeddings = Mat::from_shape_vec((n, dim), data).map_err(|_| bad())?;
        Ok(DenseIndex {
            style,
            ids,
            embeddings,
            staleness: 0,
            checkpoint_hash,
        })
    }
}
