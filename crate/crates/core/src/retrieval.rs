//! Sign-binarized codes packed into 64-bit words, and exact Hamming kNN.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A packed sign code: bit `i` lives in `words[i / 64]` at position `i % 64`.
/// Bits at or beyond `dim_bits` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    dim_bits: usize,
    words: Vec<u64>,
}

pub fn words_for(dim_bits: usize) -> usize {
    dim_bits.div_ceil(64)
}

impl BinaryCode {
    pub fn zeros(dim_bits: usize) -> Self {
        BinaryCode {
            dim_bits,
            words: vec![0; words_for(dim_bits)],
        }
    }

    pub fn from_words(dim_bits: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(dim_bits) {
            return Err(Error::dim("binary_code", &[words_for(dim_bits)], &[words.len()]));
        }
        let code = BinaryCode { dim_bits, words };
        if code.padding_mask().is_some_and(|m| code.words.last().is_some_and(|&w| w & !m != 0)) {
            return Err(Error::Format("binary code has non-zero padding bits".into()));
        }
        Ok(code)
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            code.set(i, b);
        }
        code
    }

    fn padding_mask(&self) -> Option<u64> {
        let rem = self.dim_bits % 64;
        (rem != 0).then(|| (1u64 << rem) - 1)
    }

    pub fn dim_bits(&self) -> usize {
        self.dim_bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, bit: bool) {
        assert!(i < self.dim_bits, "bit {i} out of range {}", self.dim_bits);
        let mask = 1u64 << (i % 64);
        if bit {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.dim_bits).map(|i| self.get(i)).collect()
    }

    /// `±1` vector: set bits map to `+1`.
    pub fn to_signs(&self) -> Vec<i32> {
        (0..self.dim_bits).map(|i| if self.get(i) { 1 } else { -1 }).collect()
    }
}

/// Bit `i` set iff `embedding[i] > 0`; exact zeros map to 0.
pub fn binarize<T: Scalar>(embedding: &[T]) -> Result<BinaryCode> {
    if let Some(i) = embedding.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("embedding coordinate {i}")));
    }
    let mut code = BinaryCode::zeros(embedding.len());
    for (w, chunk) in code.words.iter_mut().zip(embedding.chunks(64)) {
        for (b, &v) in chunk.iter().enumerate() {
            if v > T::zero() {
                *w |= 1 << b;
            }
        }
    }
    Ok(code)
}

/// Number of differing bits.
pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.dim_bits != b.dim_bits {
        return Err(Error::dim("hamming", &[a.dim_bits], &[b.dim_bits]));
    }
    Ok(hamming_words(&a.words, &b.words))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: u32,
}

/// Result of a kNN query. `truncated` is set when fewer than `k` items exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnResult {
    pub neighbors: Vec<Neighbor>,
    pub truncated: bool,
}

/// Immutable exhaustive-scan index over binary codes.
#[derive(Debug, Clone)]
pub struct BinaryIndex {
    dim_bits: usize,
    ids: Vec<u64>,
    /// Codes stored back to back, `words_for(dim_bits)` words each.
    words: Vec<u64>,
}

impl BinaryIndex {
    pub fn build(dim_bits: usize, items: impl IntoIterator<Item = (u64, BinaryCode)>) -> Result<Self> {
        let mut ids = Vec::new();
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (id, code) in items {
            if code.dim_bits != dim_bits {
                return Err(Error::dim("binary_index", &[dim_bits], &[code.dim_bits]));
            }
            if !seen.insert(id) {
                return Err(Error::Precondition(format!("duplicate id {id} in index")));
            }
            ids.push(id);
            words.extend_from_slice(&code.words);
        }
        Ok(BinaryIndex { dim_bits, ids, words })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim_bits(&self) -> usize {
        self.dim_bits
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// The `k` nearest codes by Hamming distance, ascending, ties broken by
    /// ascending id.
    pub fn knn(&self, query: &BinaryCode, k: usize) -> Result<KnnResult> {
        self.knn_excluding(query, k, None)
    }

    /// As [`knn`](Self::knn), skipping the item whose id is `exclude`.
    pub fn knn_excluding(&self, query: &BinaryCode, k: usize, exclude: Option<u64>) -> Result<KnnResult> {
        if k == 0 {
            return Err(Error::Precondition("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Precondition("knn on an empty index".into()));
        }
        if query.dim_bits != self.dim_bits {
            return Err(Error::dim("knn", &[self.dim_bits], &[query.dim_bits]));
        }
        let w = words_for(self.dim_bits);
        let mut all: Vec<Neighbor> = self
            .ids
            .iter()
            .zip(self.words.chunks_exact(w.max(1)))
            .filter(|(&id, _)| Some(id) != exclude)
            .map(|(&id, code)| Neighbor {
                id,
                distance: hamming_words(&query.words, code),
            })
            .collect();
        let available = all.len();
        let keep = k.min(available);
        let key = |n: &Neighbor| (n.distance, n.id);
        if keep < available {
            all.select_nth_unstable_by_key(keep, key);
            all.truncate(keep);
        }
        all.sort_unstable_by_key(key);
        Ok(KnnResult {
            neighbors: all,
            truncated: k > available,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_zero_rule() {
        let c = binarize(&[0.3f64, -0.2, 0.0, 1.5]).unwrap();
        assert_eq!(c.to_bits(), vec![true, false, false, true]);
        let ones = binarize(&[1.0f32; 70]).unwrap();
        assert!(ones.to_bits().iter().all(|&b| b));
        assert_eq!(ones.words()[1], (1 << 6) - 1);
        assert!(binarize(&[f64::NAN]).is_err());
    }

    #[test]
    fn hamming_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dim in [1, 63, 64, 65, 200] {
            let bits: Vec<bool> = (0..dim).map(|_| rng.random()).collect();
            let a = BinaryCode::from_bits(&bits);
            let comp: Vec<bool> = bits.iter().map(|b| !b).collect();
            assert_eq!(hamming(&a, &a).unwrap(), 0);
            assert_eq!(hamming(&a, &BinaryCode::from_bits(&comp)).unwrap() as usize, dim);
            let other: Vec<bool> = (0..dim).map(|_| rng.random()).collect();
            let oracle = bits.iter().zip(&other).filter(|(x, y)| x != y).count();
            assert_eq!(hamming(&a, &BinaryCode::from_bits(&other)).unwrap() as usize, oracle);
        }
        assert!(hamming(&BinaryCode::zeros(3), &BinaryCode::zeros(4)).is_err());
    }

    #[test]
    fn padding_bits_rejected() {
        assert!(BinaryCode::from_words(3, vec![0b1000]).is_err());
        assert!(BinaryCode::from_words(3, vec![0b0111]).is_ok());
    }

    #[test]
    fn knn_tie_rule_and_truncation() {
        let a = BinaryCode::from_bits(&[true, false]);
        let b = BinaryCode::from_bits(&[false, true]);
        let idx = BinaryIndex::build(2, [(9, a.clone()), (4, b.clone()), (7, a.clone())]).unwrap();
        let r = idx.knn(&a, 2).unwrap();
        assert_eq!(r.neighbors, vec![Neighbor { id: 7, distance: 0 }, Neighbor { id: 9, distance: 0 }]);
        let q = BinaryCode::from_bits(&[true, true]);
        let r = idx.knn(&q, 5).unwrap();
        assert!(r.truncated);
        assert_eq!(r.neighbors.iter().map(|n| n.id).collect::<Vec<_>>(), vec![4, 7, 9]);
        let r = idx.knn_excluding(&a, 1, Some(7)).unwrap();
        assert_eq!(r.neighbors[0].id, 9);
    }
}
