use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::store::SequenceStore;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sequence id of padding slots.
pub const PAD_ID: u32 = u32::MAX;

/// `B` rows of `L` tokens, each row holding one or more sequences back to
/// back followed by padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch {
    /// `[B×L×1]`
    pub tokens: Tensor<f32>,
    /// `B·L` row-major; ids restart at 0 in every row, pads are `PAD_ID`.
    pub seq_ids: Vec<u32>,
    /// One mask per head, `B·L` row-major: true where all `p` following
    /// points exist in the same sequence.
    pub loss_masks: Vec<Vec<bool>>,
    pub horizons: Vec<usize>,
}

impl PackedBatch {
    /// Packs the given crops row by row, in order.
    pub fn from_rows(rows: &[Vec<Vec<f32>>], len: usize, horizons: &[usize]) -> Result<Self> {
        if rows.is_empty() || len == 0 {
            return Err(Error::Usage("a batch needs at least one row of positive length".into()));
        }
        let b = rows.len();
        let mut tokens = vec![0.0f32; b * len];
        let mut seq_ids = vec![PAD_ID; b * len];
        let mut ends = vec![0usize; b * len];
        for (r, crops) in rows.iter().enumerate() {
            let mut at = 0;
            for (id, crop) in crops.iter().enumerate() {
                if at + crop.len() > len {
                    return Err(Error::Usage(format!("row {r} holds more than {len} points")));
                }
                let base = r * len + at;
                tokens[base..base + crop.len()].copy_from_slice(crop);
                for k in 0..crop.len() {
                    seq_ids[base + k] = id as u32;
                    ends[base + k] = at + crop.len();
                }
                at += crop.len();
            }
        }
        let loss_masks = horizons
            .iter()
            .map(|&p| {
                (0..b * len)
                    .map(|i| seq_ids[i] != PAD_ID && i % len + p < ends[i])
                    .collect()
            })
            .collect();
        Ok(Self {
            tokens: Tensor::new(tokens, &[b, len, 1])?,
            seq_ids,
            loss_masks,
            horizons: horizons.to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn row_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn row_tokens(&self, r: usize) -> &[f32] {
        let l = self.row_len();
        &self.tokens.data()[r * l..(r + 1) * l]
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        let l = self.row_len();
        &self.seq_ids[r * l..(r + 1) * l]
    }

    /// Non-pad positions, row-major.
    pub fn valid(&self) -> Vec<bool> {
        self.seq_ids.iter().map(|&i| i != PAD_ID).collect()
    }

    pub fn num_valid(&self) -> usize {
        self.seq_ids.iter().filter(|&&i| i != PAD_ID).count()
    }

    /// Ids that keep every sequence (and each row's padding) a distinct
    /// contiguous run when all rows are laid end to end.
    pub fn flat_ids(&self) -> Vec<u64> {
        let l = self.row_len() as u64;
        self.seq_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let row = i as u64 / l;
                let local = if id == PAD_ID { l } else { u64::from(id) };
                row * (l + 1) + local
            })
            .collect()
    }

    /// Targets for head `j` at every position, `[B·L × p]` row-major, zero
    /// where the mask is off.
    pub fn targets(&self, j: usize) -> Vec<f32> {
        let p = self.horizons[j];
        let l = self.row_len();
        let mask = &self.loss_masks[j];
        let data = self.tokens.data();
        let mut out = vec![0.0; data.len() * p];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[i * p..(i + 1) * p].copy_from_slice(&data[i + 1..i + 1 + p]);
            }
        }
        debug_assert!(mask.iter().enumerate().all(|(i, &m)| !m || i % l + p < l));
        out
    }
}

/// RNG for batch number `step` of a run seeded with `seed`; independent of
/// how many batches were drawn before.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn pick_domain<'a, R: Rng + ?Sized>(rng: &mut R, open: &[(&'a str, f64)]) -> &'a str {
    let total: f64 = open.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for &(d, w) in open {
        if u < w {
            return d;
        }
        u -= w;
    }
    open.last().map(|(d, _)| *d).unwrap_or_default()
}

/// Fills `b` rows of length `len`. For each row: pick a domain in proportion
/// to its weight (among domains with sequences not yet used in this row),
/// pick one of its sequences uniformly, take a crop of
/// `min(length, space left)` points at a uniform start, and repeat until
/// fewer than two slots remain or nothing is left to draw. Sequences shorter
/// than two points are never drawn.
pub fn sample_batch<R: Rng + ?Sized>(
    store: &SequenceStore,
    rng: &mut R,
    b: usize,
    len: usize,
    weights: &BTreeMap<String, f64>,
    horizons: &[usize],
) -> Result<PackedBatch> {
    if store.is_empty() {
        return Err(Error::Usage("cannot sample from an empty store".into()));
    }
    let mut pools: Vec<(&str, f64, Vec<usize>)> = Vec::new();
    let domains = store.domains();
    for (d, idx) in &domains {
        let w = *weights
            .get(d)
            .ok_or_else(|| Error::Config(format!("no sampling weight for domain {d:?}")))?;
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::Config(format!("weight for domain {d:?} must be finite and non-negative")));
        }
        let usable: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| store.meta().sequences[i].length_points >= 2)
            .collect();
        if w > 0.0 && !usable.is_empty() {
            pools.push((d.as_str(), w, usable));
        }
    }
    if pools.is_empty() {
        return Err(Error::Config("no domain with positive weight has a sequence of two or more points".into()));
    }
    let mut rows = Vec::with_capacity(b);
    for _ in 0..b {
        let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); pools.len()];
        let mut crops = Vec::new();
        let mut left = len;
        while left >= 2 {
            let open: Vec<(&str, f64)> = pools
                .iter()
                .zip(&used)
                .filter(|((_, _, seqs), u)| u.len() < seqs.len())
                .map(|((d, w, _), _)| (*d, *w))
                .collect();
            if open.is_empty() {
                break;
            }
            let d = pick_domain(rng, &open);
            let k = pools.iter().position(|(name, _, _)| *name == d).expect("picked an open domain");
            let seqs = &pools[k].2;
            let seq = loop {
                let s = seqs[rng.random_range(0..seqs.len())];
                if used[k].insert(s) {
                    break s;
                }
            };
            let n = store.meta().sequences[seq].length_points as usize;
            let take = n.min(left);
            let start = rng.random_range(0..=n - take);
            crops.push(store.read_range(seq, start as u64, take as u64)?);
            left -= take;
        }
        rows.push(crops);
    }
    PackedBatch::from_rows(&rows, len, horizons)
}
