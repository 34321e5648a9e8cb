use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};

/// Batches of utterance ids plus the padding they would incur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketPlan {
    pub batches: Vec<Vec<String>>,
    pub batch_size: usize,
    /// `1 - real_samples / padded_samples` over all batches.
    pub padding_ratio: f64,
}

impl BucketPlan {
    pub fn num_items(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Sorts records by audio length, slices them into consecutive batches of
/// `batch_size` and shuffles the batch order with `seed`. The composition of
/// each batch does not depend on the seed.
pub fn plan_buckets(records: &[&UtteranceRecord], batch_size: usize, seed: u64) -> Result<BucketPlan> {
    let items: Vec<(String, usize)> = records.iter().map(|r| (r.id.clone(), r.num_samples())).collect();
    plan_buckets_by_length(&items, batch_size, seed)
}

/// [`plan_buckets`] over `(id, length)` pairs.
pub fn plan_buckets_by_length(items: &[(String, usize)], batch_size: usize, seed: u64) -> Result<BucketPlan> {
    check(items, batch_size)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    // Stable: equal lengths keep input order.
    order.sort_by_key(|&i| items[i].1);
    let lengths: Vec<usize> = order.iter().map(|&i| items[i].1).collect();
    let (start, len) = short_batch_span(&lengths, batch_size);

    let mut chunks: Vec<Vec<usize>> = order[..start]
        .chunks(batch_size)
        .chain(order[start + len..].chunks(batch_size))
        .map(<[usize]>::to_vec)
        .collect();
    chunks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The short batch goes last so every earlier batch is full.
    if len > 0 {
        chunks.push(order[start..start + len].to_vec());
    }
    Ok(finish(items, chunks, batch_size))
}

/// Where the one short batch should sit in the sorted order.
///
/// Consecutive groups of a sorted sequence minimize padding for fixed group
/// sizes; only the position of the short group is free, so every position is
/// tried. Returns `(start, len)` of the short group, `len == 0` when the
/// length divides evenly.
fn short_batch_span(sorted: &[usize], batch_size: usize) -> (usize, usize) {
    let full = sorted.len() / batch_size;
    let rem = sorted.len() % batch_size;
    if rem == 0 {
        return (0, 0);
    }
    // Padded size of full group `i` when it lies before / after the short group.
    let before: Vec<usize> = (0..full).map(|i| sorted[(i + 1) * batch_size - 1] * batch_size).collect();
    let after: Vec<usize> = (0..full).map(|i| sorted[(i + 1) * batch_size - 1 + rem] * batch_size).collect();
    let mut prefix = 0;
    let mut suffix: usize = after.iter().sum();
    let mut best = (usize::MAX, 0);
    for p in 0..=full {
        let cost = prefix + sorted[p * batch_size + rem - 1] * rem + suffix;
        if cost < best.0 {
            best = (cost, p);
        }
        if p < full {
            prefix += before[p];
            suffix -= after[p];
        }
    }
    (best.1 * batch_size, rem)
}

/// Baseline without bucketing: shuffles all items with `seed`, then slices.
pub fn random_grouping(items: &[(String, usize)], batch_size: usize, seed: u64) -> Result<BucketPlan> {
    check(items, batch_size)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chunks = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(finish(items, chunks, batch_size))
}

fn check(items: &[(String, usize)], batch_size: usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::invalid("cannot batch an empty collection"));
    }
    if batch_size < 2 {
        return Err(Error::invalid(format!(
            "batch size {batch_size} < 2; the CCC objective needs at least two items"
        )));
    }
    Ok(())
}

fn finish(items: &[(String, usize)], chunks: Vec<Vec<usize>>, batch_size: usize) -> BucketPlan {
    let (mut real, mut padded) = (0usize, 0usize);
    for chunk in &chunks {
        let longest = chunk.iter().map(|&i| items[i].1).max().unwrap_or(0);
        real += chunk.iter().map(|&i| items[i].1).sum::<usize>();
        padded += longest * chunk.len();
    }
    let padding_ratio = if padded == 0 {
        0.0
    } else {
        1.0 - real as f64 / padded as f64
    };
    BucketPlan {
        batches: chunks
            .into_iter()
            .map(|c| c.into_iter().map(|i| items[i].0.clone()).collect())
            .collect(),
        batch_size,
        padding_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(lengths: &[usize]) -> Vec<(String, usize)> {
        lengths.iter().enumerate().map(|(i, &l)| (format!("u{i}"), l)).collect()
    }

    #[test]
    fn equal_lengths_have_no_padding() {
        let plan = plan_buckets_by_length(&items(&[10, 10, 10, 10]), 2, 0).unwrap();
        assert_eq!(plan.padding_ratio, 0.0);
    }

    #[test]
    fn sorted_slicing_pairs_like_lengths() {
        let plan = plan_buckets_by_length(&items(&[1, 100, 1, 100]), 2, 3).unwrap();
        assert_eq!(plan.padding_ratio, 0.0);
        let mut batches = plan.batches.clone();
        batches.sort();
        assert_eq!(batches, vec![vec!["u0", "u2"], vec!["u1", "u3"]]);
    }

    #[test]
    fn mixed_pairs_pad_half() {
        // (1, 100) twice: 202 real samples over 400 padded.
        let chunks = vec![vec![0, 1], vec![2, 3]];
        let plan = finish(&items(&[1, 100, 1, 100]), chunks, 2);
        assert!((plan.padding_ratio - 0.495).abs() < 1e-12);
    }

    #[test]
    fn every_id_once_and_full_batches() {
        let lengths: Vec<usize> = (0..37).map(|i| (i * 7919) % 101 + 1).collect();
        let plan = plan_buckets_by_length(&items(&lengths), 5, 11).unwrap();
        let mut ids: Vec<_> = plan.batches.iter().flatten().cloned().collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 37);
        let (last, full) = plan.batches.split_last().unwrap();
        assert!(full.iter().all(|b| b.len() == 5));
        assert_eq!(last.len(), 2);
    }

    #[test]
    fn short_batch_sits_where_padding_is_least() {
        // Short batch among the long items.
        let plan = plan_buckets_by_length(&items(&[1, 100, 100]), 2, 0).unwrap();
        assert_eq!(plan.padding_ratio, 0.0);
        // Short batch among the short items.
        let plan = plan_buckets_by_length(&items(&[1, 1, 100]), 2, 0).unwrap();
        assert_eq!(plan.padding_ratio, 0.0);
        assert_eq!(plan.batches.last().unwrap().len(), 1);
    }

    #[test]
    fn seed_changes_order_not_composition() {
        let lengths: Vec<usize> = (0..40).map(|i| (i * 31) % 17 + 1).collect();
        let a = plan_buckets_by_length(&items(&lengths), 4, 1).unwrap();
        let b = plan_buckets_by_length(&items(&lengths), 4, 2).unwrap();
        let mut sa = a.batches.clone();
        let mut sb = b.batches.clone();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
        assert_eq!(a.padding_ratio, b.padding_ratio);
    }

    #[test]
    fn rejects_small_batches_and_empty_input() {
        assert!(plan_buckets_by_length(&items(&[1, 2]), 1, 0).is_err());
        assert!(plan_buckets_by_length(&[], 4, 0).is_err());
    }
}
