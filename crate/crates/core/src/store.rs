//! Labeled embedding sets and their on-disk format.
//!
//! File layout (all little-endian):
//!
//! ```text
//! magic "BMEB" | version u16 = 1 | dim u32 | count u64
//! count × ( id u64 | label u32 | dim × f32 )
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"BMEB";
pub const EMBEDDING_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 8;

/// An n×d matrix of feature vectors with a class label and a unique id per row.
///
/// The in-memory type admits an empty set (an empty sub-gallery is a normal
/// state during backfilling); files always hold at least one row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<u32>,
    ids: Vec<u64>,
}

impl LabeledEmbeddings {
    pub fn new(dim: usize, vectors: Vec<f32>, labels: Vec<u32>, ids: Vec<u64>) -> Result<Self> {
        let set = Self {
            dim,
            vectors,
            labels,
            ids,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new(), Vec::new())
    }

    /// Builds a set from row slices.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], labels: Vec<u32>, ids: Vec<u64>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::invalid("from_rows needs at least one row"))?;
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            Error::check_dim(dim, row.as_ref().len())?;
            vectors.extend_from_slice(row.as_ref());
        }
        Self::new(dim, vectors, labels, ids)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        let n = self.ids.len();
        if self.labels.len() != n {
            return Err(Error::invalid(format!(
                "{} labels for {} ids",
                self.labels.len(),
                n
            )));
        }
        if self.vectors.len() != n * self.dim {
            return Err(Error::invalid(format!(
                "{} vector entries for {} rows of dim {}",
                self.vectors.len(),
                n,
                self.dim
            )));
        }
        if let Some(pos) = self.vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / self.dim,
                col: pos % self.dim,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Copies the given rows, in the given order, into a new set.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut vectors = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            vectors.extend_from_slice(self.row(r));
        }
        Self {
            dim: self.dim,
            vectors,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    /// Same ids and labels, new vectors (e.g. the output of a transform).
    pub fn with_vectors(&self, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        Self::new(dim, vectors, self.labels.clone(), self.ids.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        if self.is_empty() {
            return Err(Error::invalid("cannot serialize an empty embedding set"));
        }
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * record_bytes(self.dim));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, row) in self.rows().enumerate() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::PayloadSize {
                expected: HEADER_BYTES as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < HEADER_BYTES {
            return Err(Error::PayloadSize {
                expected: HEADER_BYTES as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        if dim == 0 || count == 0 {
            return Err(Error::invalid("embedding file declares zero rows or zero dim"));
        }
        let expected = (record_bytes(dim) as u64)
            .checked_mul(count)
            .and_then(|p| p.checked_add(HEADER_BYTES as u64))
            .ok_or_else(|| Error::invalid("declared size overflows"))?;
        if expected != bytes.len() as u64 {
            return Err(Error::PayloadSize {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let count = count as usize;
        let mut ids = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for rec in bytes[HEADER_BYTES..].chunks_exact(record_bytes(dim)) {
            ids.push(u64::from_le_bytes(rec[0..8].try_into().unwrap()));
            labels.push(u32::from_le_bytes(rec[8..12].try_into().unwrap()));
            vectors.extend(
                rec[12..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        Self::new(dim, vectors, labels, ids)
    }

    /// Debug mirror: `id,label,v0,...,v{d-1}`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("v{j}")).collect();
        writeln!(w, "id,label,{}", header.join(","))?;
        for (i, row) in self.rows().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", self.ids[i], self.labels[i], vals.join(","))?;
        }
        Ok(())
    }

    /// Stratified query/gallery split.
    ///
    /// The total query count is `round(fraction · n)`; it is apportioned over
    /// labels by largest remainder of `fraction · n_label` (ties go to the
    /// smaller label). Each label's rows are shuffled with a seeded
    /// Fisher–Yates pass, one shared ChaCha8 stream visiting labels in
    /// ascending order, and the first rows of the shuffle become queries.
    /// Both outputs keep the original row order.
    pub fn split(&self, query_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(query_fraction > 0.0 && query_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "query fraction {query_fraction} not in (0, 1)"
            )));
        }
        let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        let n = self.len();
        let total_queries = (query_fraction * n as f64).round() as usize;
        let quotas: Vec<(u32, f64)> = by_label
            .iter()
            .map(|(&l, rows)| (l, query_fraction * rows.len() as f64))
            .collect();
        let mut counts: BTreeMap<u32, usize> =
            quotas.iter().map(|&(l, q)| (l, q.floor() as usize)).collect();
        let assigned: usize = counts.values().sum();
        let mut remainders: Vec<(u32, f64)> =
            quotas.iter().map(|&(l, q)| (l, q - q.floor())).collect();
        remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(l, _) in remainders
            .iter()
            .take(total_queries.saturating_sub(assigned))
        {
            *counts.get_mut(&l).unwrap() += 1;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut is_query = vec![false; n];
        for (label, rows) in &by_label {
            let q = counts[label];
            if q >= rows.len() {
                return Err(Error::invalid(format!(
                    "split leaves label {label} with no gallery items"
                )));
            }
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rng);
            for &r in &shuffled[..q] {
                is_query[r] = true;
            }
        }
        let query_rows: Vec<usize> = (0..n).filter(|&i| is_query[i]).collect();
        let gallery_rows: Vec<usize> = (0..n).filter(|&i| !is_query[i]).collect();
        if query_rows.is_empty() {
            return Err(Error::invalid("split produced no queries"));
        }
        Ok((self.select(&query_rows), self.select(&gallery_rows)))
    }
}

fn record_bytes(dim: usize) -> usize {
    8 + 4 + 4 * dim
}

/// The same samples embedded by the old and by the new model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPairSet {
    old_side: LabeledEmbeddings,
    new_side: LabeledEmbeddings,
}

impl EmbeddingPairSet {
    pub fn new(old_side: LabeledEmbeddings, new_side: LabeledEmbeddings) -> Result<Self> {
        if old_side.ids != new_side.ids {
            return Err(Error::invalid("paired sets must share ids in the same order"));
        }
        if old_side.labels != new_side.labels {
            return Err(Error::invalid("paired sets must share labels"));
        }
        Ok(Self { old_side, new_side })
    }

    pub fn old_side(&self) -> &LabeledEmbeddings {
        &self.old_side
    }

    pub fn new_side(&self) -> &LabeledEmbeddings {
        &self.new_side
    }

    pub fn len(&self) -> usize {
        self.old_side.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_side.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        self.old_side.labels()
    }

    pub fn ids(&self) -> &[u64] {
        self.old_side.ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledEmbeddings {
        LabeledEmbeddings::new(
            2,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            vec![0, 1, 0],
            vec![5, 7, 9],
        )
        .unwrap()
    }

    #[test]
    fn one_by_one_file_size() {
        let set = LabeledEmbeddings::new(1, vec![0.0], vec![0], vec![0]).unwrap();
        let bytes = set.to_bytes().unwrap();
        // header + id + label + one f32
        assert_eq!(bytes.len(), HEADER_BYTES + 8 + 4 + 4);
        assert_eq!(&bytes[..4], b"BMEB");
        assert_eq!(LabeledEmbeddings::from_bytes(&bytes).unwrap(), set);
    }

    #[test]
    fn preserves_id_order() {
        let back = LabeledEmbeddings::from_bytes(&sample().to_bytes().unwrap()).unwrap();
        assert_eq!(back.ids(), &[5, 7, 9]);
    }

    #[test]
    fn rejects_nan_before_write() {
        let set = LabeledEmbeddings {
            dim: 1,
            vectors: vec![f32::NAN],
            labels: vec![0],
            ids: vec![0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.bmeb");
        assert!(matches!(set.save(&path), Err(Error::NonFinite { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        let err = LabeledEmbeddings::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn duplicate_ids_in_file() {
        let mut bytes = sample().to_bytes().unwrap();
        // overwrite the second record's id with the first one's
        let rec = record_bytes(2);
        let first: [u8; 8] = bytes[HEADER_BYTES..HEADER_BYTES + 8].try_into().unwrap();
        bytes[HEADER_BYTES + rec..HEADER_BYTES + rec + 8].copy_from_slice(&first);
        let err = LabeledEmbeddings::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            LabeledEmbeddings::from_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn csv_mirror() {
        let mut out = Vec::new();
        sample().write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("id,label,v0,v1"));
        assert_eq!(lines.next(), Some("5,0,0.1,0.2"));
    }

    fn balanced(n_per_label: usize, labels: u32) -> LabeledEmbeddings {
        let n = n_per_label * labels as usize;
        LabeledEmbeddings::new(
            1,
            (0..n).map(|i| i as f32).collect(),
            (0..n).map(|i| (i % labels as usize) as u32).collect(),
            (0..n as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn split_balanced_halves() {
        let (q, g) = balanced(5, 2).split(0.5, 1).unwrap();
        assert_eq!(q.len(), 5);
        assert_eq!(g.len(), 5);
        for label in 0..2 {
            assert!(q.labels().contains(&label));
            assert!(g.labels().contains(&label));
        }
        // label 0 wins the tied remainder
        assert_eq!(q.labels().iter().filter(|&&l| l == 0).count(), 3);
        let qi: HashSet<_> = q.ids().iter().collect();
        assert!(g.ids().iter().all(|id| !qi.contains(id)));
    }

    #[test]
    fn split_that_empties_a_label_fails() {
        assert!(balanced(2, 2).split(0.99, 3).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let set = balanced(7, 3);
        assert_eq!(set.split(0.3, 11).unwrap(), set.split(0.3, 11).unwrap());
    }

    #[test]
    fn pair_set_requires_matching_ids() {
        let a = sample();
        let b = LabeledEmbeddings::new(1, vec![1.0, 2.0, 3.0], vec![0, 1, 0], vec![5, 9, 7]).unwrap();
        assert!(EmbeddingPairSet::new(a.clone(), b).is_err());
        let c = LabeledEmbeddings::new(3, vec![0.0; 9], vec![0, 1, 0], vec![5, 7, 9]).unwrap();
        assert_eq!(EmbeddingPairSet::new(a, c).unwrap().len(), 3);
    }
}
