//! Global memory bank with cross-attention write and read.
//!
//! The teacher path writes: teacher features are projected to keys and
//! values, every memory item attends over the keys, and each item absorbs
//! the attention-weighted values before being renormalized. The student
//! path reads: projected student queries attend over memory items and the
//! attention-weighted sum of items becomes the positive for that query. The
//! least-attended items are mined as negatives.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{norm, softmax_rows, DenseMatrix, NORM_EPS};

pub const BANK_MAGIC: &[u8; 4] = b"MEMX";
pub const BANK_FORMAT_VERSION: u32 = 1;

/// Tolerance on the unit-norm invariant of memory rows.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// `N_l × C` matrix of unit-norm memory items.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    items: DenseMatrix,
}

impl MemoryBank {
    /// Seeded standard-normal rows, each normalized to unit length.
    pub fn init(n_items: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_items == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "memory bank needs n_items >= 1 and dim >= 1, got {n_items}x{dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = DenseMatrix::zeros(n_items, dim);
        for j in 0..n_items {
            let row = items.row_mut(j);
            // a standard normal draw of dim >= 1 has zero norm with probability 0;
            // redraw anyway so the invariant holds unconditionally
            loop {
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let n = norm(row);
                if n > NORM_EPS {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        Ok(Self { items })
    }

    /// Wraps an existing item matrix; every row must already be unit norm.
    pub fn from_items(items: DenseMatrix) -> Result<Self> {
        if items.rows() == 0 || items.cols() == 0 {
            return Err(Error::invalid("memory bank must have at least one item and one column"));
        }
        items.ensure_finite("memory items")?;
        for (j, row) in items.row_iter().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("memory item {j} has norm {n}, expected 1")));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &DenseMatrix {
        &self.items
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    /// Teacher-side write. Every item is updated from the pre-write bank,
    /// so the result does not depend on item order. Returns the number of
    /// rows whose update collapsed to (near) zero and was therefore skipped.
    pub fn write(&mut self, teacher_feats: &DenseMatrix, proj: &ProjectionSet) -> Result<usize> {
        let dim = self.dim();
        if teacher_feats.cols() != dim {
            return Err(Error::shape("memory write", format!("feature dim {dim}"), teacher_feats.cols()));
        }
        proj.check_dim(dim)?;
        if teacher_feats.is_empty() {
            return Ok(0);
        }
        teacher_feats.ensure_finite("teacher features")?;

        let keys = teacher_feats.matmul_t(&proj.w_k)?;
        let values = teacher_feats.matmul_t(&proj.w_v)?;
        // attention[i][j]: feature i over memory items j
        let attention = softmax_rows(&keys.matmul_t(&self.items)?)?;
        // updates[j] = Σ_i attention[i][j] · values[i]
        let updates = attention.t_matmul(&values)?;

        let mut next = self.items.clone();
        let mut skipped = 0;
        for j in 0..self.n_items() {
            let row = next.row_mut(j);
            for (m, u) in row.iter_mut().zip(updates.row(j)) {
                *m += u;
            }
            let n = norm(row);
            if !n.is_finite() {
                return Err(Error::NonFinite("memory write update"));
            }
            if n <= NORM_EPS {
                log::warn!("memory item {j} collapsed to norm {n:e} during write; keeping previous value");
                row.copy_from_slice(self.items.row(j));
                skipped += 1;
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.items = next;
        Ok(skipped)
    }

    /// Student-side read: positives, attention map and mined negatives.
    /// The bank is not modified.
    pub fn read(&self, student_feats: &DenseMatrix, proj: &ProjectionSet, neg_ratio: f64) -> Result<ReadResult> {
        let dim = self.dim();
        if student_feats.is_empty() {
            return Err(Error::invalid("memory read needs at least one student feature"));
        }
        if student_feats.cols() != dim {
            return Err(Error::shape("memory read", format!("feature dim {dim}"), student_feats.cols()));
        }
        proj.check_dim(dim)?;
        check_neg_ratio(neg_ratio)?;
        student_feats.ensure_finite("student features")?;

        let queries = student_feats.matmul_t(&proj.w_q)?;
        let attention = softmax_rows(&queries.matmul_t(&self.items)?)?;
        let positives = attention.matmul(&self.items)?;
        let negative_indices = attention
            .row_iter()
            .map(|row| mine_negatives(row, neg_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReadResult {
            positives,
            attention,
            negative_indices,
        })
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_FORMAT_VERSION.to_le_bytes())?;
        self.write_block(&mut w)
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::format("memory bank", format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != BANK_FORMAT_VERSION {
            return Err(Error::format("memory bank", format!("unsupported version {version}")));
        }
        Self::read_block(&mut r)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.items.as_slice().len() * 8);
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// `N_l u64, C u64` then row-major little-endian `f64`s.
    pub(crate) fn write_block<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.n_items() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        write_f64s(w, self.items.as_slice())
    }

    pub(crate) fn read_block<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_u64(r)? as usize;
        let c = read_u64(r)? as usize;
        let data = read_f64s(r, n.checked_mul(c).ok_or_else(|| Error::format("memory bank", "size overflow"))?)?;
        Self::from_items(DenseMatrix::new(n, c, data)?)
    }
}

/// Key/value projections (teacher write path) and query projection
/// (student read path), each `C × C` and applied as `W · f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_q: DenseMatrix,
}

impl ProjectionSet {
    /// Identity plus seeded Gaussian noise of standard deviation `noise_std`.
    pub fn init(dim: usize, seed: u64, noise_std: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("projection dim must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy_identity = || {
            DenseMatrix::from_fn(dim, dim, |r, c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if r == c { 1.0 + noise_std * z } else { noise_std * z }
            })
        };
        Ok(Self {
            w_k: noisy_identity(),
            w_v: noisy_identity(),
            w_q: noisy_identity(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w_k: DenseMatrix::identity(dim),
            w_v: DenseMatrix::identity(dim),
            w_q: DenseMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        for (name, w) in [("W_k", &self.w_k), ("W_v", &self.w_v), ("W_q", &self.w_q)] {
            if w.shape() != (dim, dim) {
                return Err(Error::shape(name, format!("{dim}x{dim}"), format!("{:?}", w.shape())));
            }
        }
        Ok(())
    }
}

/// Output of [`MemoryBank::read`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReadResult {
    /// `N_f × C`; row `i` is the attention-weighted sum of memory items.
    pub positives: DenseMatrix,
    /// `N_f × N_l`; rows are probability vectors.
    pub attention: DenseMatrix,
    /// Per query, the least-attended item indices in ascending attention order.
    pub negative_indices: Vec<Vec<usize>>,
}

/// Number of negatives mined from a bank of `n_items`: `max(1, ⌊ratio·n⌋)`.
pub fn negative_count(n_items: usize, neg_ratio: f64) -> usize {
    // the 1e-9 slack keeps products like 0.29·100 = 28.999999999999996 at 29
    ((neg_ratio * n_items as f64 + 1e-9).floor() as usize).clamp(1, n_items.max(1))
}

fn check_neg_ratio(neg_ratio: f64) -> Result<()> {
    if neg_ratio > 0.0 && neg_ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("negative ratio must lie in (0, 1], got {neg_ratio}")))
    }
}

/// Indices of the `max(1, ⌊ratio·N_l⌋)` smallest attention values, ascending
/// by value with ties broken by ascending index.
pub fn mine_negatives(attention_row: &[f64], neg_ratio: f64) -> Result<Vec<usize>> {
    check_neg_ratio(neg_ratio)?;
    if attention_row.is_empty() {
        return Err(Error::invalid("attention row is empty"));
    }
    let total: f64 = attention_row.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > 1e-6 || attention_row.iter().any(|&a| a < 0.0) {
        return Err(Error::invalid(format!("attention row is not a probability vector (sum {total})")));
    }
    let count = negative_count(attention_row.len(), neg_ratio);
    let mut order: Vec<usize> = (0..attention_row.len()).collect();
    order.sort_by(|&a, &b| attention_row[a].total_cmp(&attention_row[b]).then(a.cmp(&b)));
    order.truncate(count);
    Ok(order)
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::format("f64 block", "size overflow"))?];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numerics::{dot, l2_normalize};
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    }

    /// Scalar double loop over every (feature, item) pair.
    fn naive_write(items: &DenseMatrix, feats: &DenseMatrix, p: &ProjectionSet) -> DenseMatrix {
        let (n_l, c) = items.shape();
        let n_f = feats.rows();
        let project = |w: &DenseMatrix, f: &[f64]| -> Vec<f64> {
            (0..c).map(|r| (0..c).map(|k| w.get(r, k) * f[k]).sum()).collect()
        };
        let keys: Vec<Vec<f64>> = (0..n_f).map(|i| project(&p.w_k, feats.row(i))).collect();
        let vals: Vec<Vec<f64>> = (0..n_f).map(|i| project(&p.w_v, feats.row(i))).collect();
        let mut s = vec![vec![0.0; n_l]; n_f];
        for i in 0..n_f {
            let logits: Vec<f64> = (0..n_l).map(|j| dot(items.row(j), &keys[i])).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..n_l {
                s[i][j] = (logits[j] - max).exp() / z;
            }
        }
        let mut out = DenseMatrix::zeros(n_l, c);
        for j in 0..n_l {
            let mut m = items.row(j).to_vec();
            for i in 0..n_f {
                for k in 0..c {
                    m[k] += s[i][j] * vals[i][k];
                }
            }
            out.row_mut(j).copy_from_slice(&l2_normalize(&m).unwrap());
        }
        out
    }

    fn naive_read(items: &DenseMatrix, feats: &DenseMatrix, p: &ProjectionSet) -> (DenseMatrix, DenseMatrix) {
        let (n_l, c) = items.shape();
        let n_f = feats.rows();
        let mut att = DenseMatrix::zeros(n_f, n_l);
        let mut pos = DenseMatrix::zeros(n_f, c);
        for i in 0..n_f {
            let q: Vec<f64> = (0..c).map(|r| (0..c).map(|k| p.w_q.get(r, k) * feats.get(i, k)).sum()).collect();
            let logits: Vec<f64> = (0..n_l).map(|j| dot(&q, items.row(j))).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for j in 0..n_l {
                let a = (logits[j] - max).exp() / z;
                att.set(i, j, a);
                for k in 0..c {
                    pos.set(i, k, pos.get(i, k) + a * items.get(j, k));
                }
            }
        }
        (att, pos)
    }

    #[test]
    fn init_examples() {
        let bank = MemoryBank::init(1024, 256, 7).unwrap();
        assert_eq!(bank.items().shape(), (1024, 256));
        for row in bank.items().row_iter() {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(bank, MemoryBank::init(1024, 256, 7).unwrap());
        assert_ne!(bank, MemoryBank::init(1024, 256, 8).unwrap());
        let one = MemoryBank::init(1, 2, 99).unwrap();
        assert!((norm(one.items().row(0)) - 1.0).abs() < 1e-12);
        assert!(MemoryBank::init(0, 4, 1).is_err());
        assert!(MemoryBank::init(4, 0, 1).is_err());
    }

    #[test]
    fn write_single_item_takes_full_attention() {
        let mut bank = MemoryBank::init(1, 3, 1).unwrap();
        let m = bank.items().row(0).to_vec();
        let proj = ProjectionSet::init(3, 5, 0.3).unwrap();
        let f = DenseMatrix::new(1, 3, vec![0.4, -1.2, 2.0]).unwrap();
        bank.write(&f, &proj).unwrap();
        let v = f.matmul_t(&proj.w_v).unwrap();
        let expected: Vec<f64> = m.iter().zip(v.row(0)).map(|(a, b)| a + b).collect();
        let expected = l2_normalize(&expected).unwrap();
        for (a, b) in bank.items().row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn write_empty_is_noop() {
        let mut bank = MemoryBank::init(8, 4, 3).unwrap();
        let before = bank.clone();
        let skipped = bank.write(&DenseMatrix::zeros(0, 4), &ProjectionSet::identity(4)).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(bank, before);
    }

    #[test]
    fn write_matches_naive_oracle() {
        let mut bank = MemoryBank::init(3, 4, 11).unwrap();
        let proj = ProjectionSet::init(4, 12, 0.2).unwrap();
        let feats = random_matrix(2, 4, 13, 1.0);
        let expected = naive_write(bank.items(), &feats, &proj);
        bank.write(&feats, &proj).unwrap();
        assert!(bank.items().max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn write_rejects_dim_mismatch() {
        let mut bank = MemoryBank::init(3, 4, 11).unwrap();
        let err = bank.write(&DenseMatrix::zeros(1, 5), &ProjectionSet::identity(4));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        assert!(bank.write(&DenseMatrix::zeros(1, 4), &ProjectionSet::identity(5)).is_err());
    }

    #[test]
    fn write_skips_collapsed_rows() {
        // value = −m exactly cancels the single item
        let items = DenseMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let mut bank = MemoryBank::from_items(items.clone()).unwrap();
        let mut proj = ProjectionSet::identity(2);
        proj.w_v.scale(-1.0);
        let skipped = bank.write(&DenseMatrix::new(1, 2, vec![1.0, 0.0]).unwrap(), &proj).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(bank.items(), &items);
    }

    #[test]
    fn read_single_item_returns_it() {
        let bank = MemoryBank::init(1, 3, 2).unwrap();
        let feats = random_matrix(3, 3, 4, 2.0);
        let r = bank.read(&feats, &ProjectionSet::init(3, 1, 0.1).unwrap(), 0.1).unwrap();
        for i in 0..3 {
            assert_eq!(r.attention.get(i, 0), 1.0);
            assert_eq!(r.positives.row(i), bank.items().row(0));
            assert_eq!(r.negative_indices[i], vec![0]);
        }
    }

    #[test]
    fn read_with_equal_similarities_gives_row_mean() {
        // query orthogonal to every memory item
        let items = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0],
        ])
        .unwrap();
        let bank = MemoryBank::from_items(items).unwrap();
        let feats = DenseMatrix::new(1, 3, vec![0.0, 0.0, 2.5]).unwrap();
        let r = bank.read(&feats, &ProjectionSet::identity(3), 0.5).unwrap();
        for k in 0..3 {
            let mean: f64 = bank.items().row_iter().map(|m| m[k]).sum::<f64>() / 4.0;
            assert!((r.positives.get(0, k) - mean).abs() < 1e-15);
        }
        assert_eq!(r.negative_indices[0], vec![0, 1]);
    }

    #[test]
    fn read_matches_naive_oracle() {
        let bank = MemoryBank::init(4, 5, 21).unwrap();
        let proj = ProjectionSet::init(5, 22, 0.2).unwrap();
        let feats = random_matrix(2, 5, 23, 1.5);
        let (att, pos) = naive_read(bank.items(), &feats, &proj);
        let r = bank.read(&feats, &proj, 0.25).unwrap();
        assert!(r.attention.max_abs_diff(&att) <= 1e-12);
        assert!(r.positives.max_abs_diff(&pos) <= 1e-12);
    }

    #[test]
    fn read_errors() {
        let bank = MemoryBank::init(4, 3, 1).unwrap();
        let p = ProjectionSet::identity(3);
        assert!(bank.read(&DenseMatrix::zeros(0, 3), &p, 0.1).is_err());
        assert!(bank.read(&DenseMatrix::zeros(1, 2), &p, 0.1).is_err());
        assert!(bank.read(&DenseMatrix::zeros(1, 3), &p, 0.0).is_err());
        assert!(bank.read(&DenseMatrix::zeros(1, 3), &p, 1.5).is_err());
    }

    #[test]
    fn mine_negatives_examples() {
        let row = [0.12, 0.08, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        assert_eq!(mine_negatives(&row, 0.1).unwrap(), vec![1]);
        assert_eq!(negative_count(1024, 0.1), 102);
        let uniform = vec![1.0 / 1024.0; 1024];
        assert_eq!(mine_negatives(&uniform, 0.1).unwrap().len(), 102);
        assert_eq!(mine_negatives(&[0.1; 10], 0.2).unwrap(), vec![0, 1]);
        assert_eq!(negative_count(5, 0.01), 1);
        assert_eq!(negative_count(100, 0.29), 29);
        assert!(mine_negatives(&[0.5, 0.6], 0.5).is_err());
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let bank = MemoryBank::init(17, 6, 5).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..4], b"MEMX");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8 + 17 * 6 * 8);
        let back = MemoryBank::load(bytes.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryBank::load(bad.as_slice()), Err(Error::Format { .. })));
        assert!(MemoryBank::load(&bytes[..20]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn write_and_read_agree_with_oracles(
            n_l in 1usize..=16, n_f in 1usize..=4, c in 1usize..=8, seed in any::<u64>(),
        ) {
            let mut bank = MemoryBank::init(n_l, c, seed).unwrap();
            let proj = ProjectionSet::init(c, seed ^ 1, 0.3).unwrap();
            let feats = random_matrix(n_f, c, seed ^ 2, 1.0);
            let expected = naive_write(bank.items(), &feats, &proj);
            bank.write(&feats, &proj).unwrap();
            prop_assert!(bank.items().max_abs_diff(&expected) <= 1e-12);

            let queries = random_matrix(n_f, c, seed ^ 3, 1.0);
            let (att, pos) = naive_read(bank.items(), &queries, &proj);
            let r = bank.read(&queries, &proj, 0.1).unwrap();
            prop_assert!(r.attention.max_abs_diff(&att) <= 1e-12);
            prop_assert!(r.positives.max_abs_diff(&pos) <= 1e-12);
        }

        #[test]
        fn mining_is_permutation_equivariant(
            values in proptest::collection::vec(0.0f64..1.0, 1..40),
            ratio in 0.01f64..=1.0,
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let total: f64 = values.iter().sum::<f64>() + 1e-3;
            let row: Vec<f64> = values.iter().map(|v| (v + 1e-3 / values.len() as f64) / total).collect();
            let picked = mine_negatives(&row, ratio).unwrap();
            prop_assert_eq!(picked.len(), negative_count(row.len(), ratio));
            prop_assert_eq!(picked.len(), ((ratio * row.len() as f64 + 1e-9).floor() as usize).max(1));

            // perm[new] = old
            let mut perm: Vec<usize> = (0..row.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let permuted: Vec<f64> = perm.iter().map(|&old| row[old]).collect();
            let picked_perm = mine_negatives(&permuted, ratio).unwrap();
            // compare as multisets of attention values: ties may relabel
            let mut a: Vec<f64> = picked.iter().map(|&i| row[i]).collect();
            let mut b: Vec<f64> = picked_perm.iter().map(|&i| permuted[i]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            // without ties the index sets correspond exactly
            let mut distinct = row.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            if distinct.len() == row.len() {
                let mut relabeled: Vec<usize> = picked_perm.iter().map(|&i| perm[i]).collect();
                let mut orig = picked.clone();
                relabeled.sort_unstable();
                orig.sort_unstable();
                prop_assert_eq!(relabeled, orig);
            }
        }
    }
}
