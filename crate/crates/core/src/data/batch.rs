use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{BOS, EOS, PAD};

/// Sentence pair as vocabulary ids, without framing tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// A padded minibatch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    /// `B x n_max`, PAD-filled.
    pub src: Vec<Vec<usize>>,
    /// `B x (m_max + 2)`: `BOS y_1 .. y_m EOS` then PAD.
    pub tgt: Vec<Vec<usize>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub src_lengths: Vec<usize>,
    /// Reference lengths without BOS/EOS.
    pub tgt_lengths: Vec<usize>,
}

impl ParallelBatch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Self {
        let n_max = pairs.iter().map(|p| p.src.len()).max().unwrap_or(0);
        let m_max = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
        let mut batch = ParallelBatch {
            src: Vec::with_capacity(pairs.len()),
            tgt: Vec::with_capacity(pairs.len()),
            src_mask: Vec::with_capacity(pairs.len()),
            tgt_mask: Vec::with_capacity(pairs.len()),
            src_lengths: Vec::with_capacity(pairs.len()),
            tgt_lengths: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            let mut s = p.src.clone();
            s.resize(n_max, PAD);
            let mut t = Vec::with_capacity(m_max + 2);
            t.push(BOS);
            t.extend(&p.tgt);
            t.push(EOS);
            t.resize(m_max + 2, PAD);
            batch.src_mask.push((0..n_max).map(|i| i < p.src.len()).collect());
            batch.tgt_mask.push((0..m_max + 2).map(|i| i < p.tgt.len() + 2).collect());
            batch.src.push(s);
            batch.tgt.push(t);
            batch.src_lengths.push(p.src.len());
            batch.tgt_lengths.push(p.tgt.len());
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Teacher-forced decoder steps: `m_max + 1`.
    pub fn decode_steps(&self) -> usize {
        self.tgt[0].len() - 1
    }

    /// Reference tokens (`y_1 .. y_m`) of sentence `b`.
    pub fn reference(&self, b: usize) -> &[usize] {
        &self.tgt[b][1..=self.tgt_lengths[b]]
    }
}

/// Pairs per sorting pool, in batches.
const POOL_BATCHES: usize = 20;

/// Seeded shuffle, then length-sorted within pools of `POOL_BATCHES` batches so
/// each batch holds similar lengths; batch order is shuffled again.
/// The final batch may be partial.
pub fn make_batches(pairs: &[EncodedPair], batch_size: usize, seed: u64) -> Vec<ParallelBatch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for pool in order.chunks(batch_size * POOL_BATCHES) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));
        groups.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    // keep a short trailing batch last so batch sizes read as full..., partial
    let partial = groups.last().filter(|g| g.len() < batch_size).is_some();
    let tail = if partial { groups.pop() } else { None };
    groups.shuffle(&mut rng);
    groups.extend(tail);
    groups
        .iter()
        .map(|g| ParallelBatch::from_pairs(&g.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(n: usize, m: usize) -> EncodedPair {
        EncodedPair {
            src: (0..n).map(|i| 4 + i).collect(),
            tgt: (0..m).map(|i| 5 + i).collect(),
        }
    }

    #[test]
    fn batch_counts() {
        let pairs: Vec<_> = (1..=5).map(|i| pair(i, i)).collect();
        let sizes: Vec<usize> = make_batches(&pairs, 2, 0).iter().map(ParallelBatch::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(make_batches(&pairs[..1], 64, 0).len(), 1);
    }

    #[test]
    fn same_length_needs_no_padding() {
        let pairs: Vec<_> = (0..7).map(|_| pair(4, 3)).collect();
        for b in make_batches(&pairs, 3, 9) {
            assert!(b.src.iter().flatten().all(|&t| t != PAD));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let pairs: Vec<_> = (0..50).map(|i| pair(1 + i % 7, 1 + i % 5)).collect();
        assert_eq!(make_batches(&pairs, 8, 42), make_batches(&pairs, 8, 42));
        assert_ne!(make_batches(&pairs, 8, 42), make_batches(&pairs, 8, 43));
    }

    #[test]
    fn target_framing() {
        let b = ParallelBatch::from_pairs(&[&pair(2, 1), &pair(1, 3)]);
        assert_eq!(b.tgt[0], vec![BOS, 5, EOS, PAD, PAD]);
        assert_eq!(b.tgt[1], vec![BOS, 5, 6, 7, EOS]);
        assert_eq!(b.src[1], vec![4, PAD]);
        assert_eq!(b.decode_steps(), 4);
        assert_eq!(b.reference(1), &[5, 6, 7]);
    }

    proptest! {
        #[test]
        fn masks_match_lengths(lens in proptest::collection::vec((1usize..9, 1usize..9), 1..30), bs in 1usize..8, seed in 0u64..100) {
            let pairs: Vec<_> = lens.iter().map(|&(n, m)| pair(n, m)).collect();
            let batches = make_batches(&pairs, bs, seed);
            prop_assert_eq!(batches.iter().map(ParallelBatch::len).sum::<usize>(), pairs.len());
            for b in &batches {
                for i in 0..b.len() {
                    prop_assert_eq!(b.src_mask[i].iter().filter(|&&m| m).count(), b.src_lengths[i]);
                    prop_assert_eq!(b.tgt_mask[i].iter().filter(|&&m| m).count(), b.tgt_lengths[i] + 2);
                    for (tok, m) in b.src[i].iter().zip(&b.src_mask[i]) {
                        prop_assert_eq!(*tok != PAD, *m);
                    }
                    for (tok, m) in b.tgt[i].iter().zip(&b.tgt_mask[i]) {
                        prop_assert_eq!(*tok != PAD, *m);
                    }
                }
            }
        }
    }
}
