//! Four-group pair construction and balanced batch streams.
//!
//! Group semantics, with the source sample always in slot one:
//!
//! 1. source-source, same class (distinct samples, unordered);
//! 2. source-target, same class (ordered, source first);
//! 3. source-source, different classes (unordered);
//! 4. source-target, different classes (ordered, source first).
//!
//! Group 2 is used exhaustively; the other pools are uniformly subsampled
//! down to its size. Pools are never materialized: a pair is decoded from
//! its rank in closed form, so sampling stays cheap even when the source
//! has tens of thousands of items.

use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{group_by_class, Examples, NUM_CLASSES};
use crate::error::{Error, Result};

/// Which of the four pair pools a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PairGroup {
    SourceSame,
    CrossSame,
    SourceDiff,
    CrossDiff,
}

impl PairGroup {
    pub const ALL: [PairGroup; 4] =
        [PairGroup::SourceSame, PairGroup::CrossSame, PairGroup::SourceDiff, PairGroup::CrossDiff];

    /// 1-based group number.
    pub fn number(self) -> u8 {
        match self {
            PairGroup::SourceSame => 1,
            PairGroup::CrossSame => 2,
            PairGroup::SourceDiff => 3,
            PairGroup::CrossDiff => 4,
        }
    }

    /// 0-based class index for the discriminator.
    pub fn class_index(self) -> u8 {
        self.number() - 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(PairGroup::SourceSame),
            2 => Ok(PairGroup::CrossSame),
            3 => Ok(PairGroup::SourceDiff),
            4 => Ok(PairGroup::CrossDiff),
            other => Err(Error::invalid("pair_group", format!("group {other} outside 1..=4"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One pair: slot one always indexes the source dataset; slot two indexes
/// the dataset named by `second_domain`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairRecord {
    pub first_index: u32,
    pub second_index: u32,
    pub second_domain: Domain,
    pub group: PairGroup,
}

/// The four balanced pair lists.
#[derive(Clone, Debug)]
pub struct GroupedPairs {
    groups: [Vec<PairRecord>; 4],
    pub seed: u64,
}

impl GroupedPairs {
    /// Reassembles grouped pairs, enforcing the balance invariant.
    pub fn from_parts(groups: [Vec<PairRecord>; 4], seed: u64) -> Result<Self> {
        let len = groups[1].len();
        if groups.iter().any(|g| g.len() != len) {
            return Err(Error::invalid(
                "grouped_pairs",
                format!("unbalanced group sizes {:?}", groups.each_ref().map(|g| g.len())),
            ));
        }
        Ok(GroupedPairs { groups, seed })
    }

    pub fn group(&self, g: PairGroup) -> &[PairRecord] {
        &self.groups[g.class_index() as usize]
    }

    /// Common length of the four lists after balancing.
    pub fn balanced_len(&self) -> usize {
        self.groups[1].len()
    }

    /// Seeded split into a training part and a held-out part for
    /// discriminator metrics. Every group gives up the same count:
    /// `min(cap, len * frac)`, at least one when `len > 1`.
    pub fn split_holdout(&self, frac: f64, cap: usize, seed: u64) -> (GroupedPairs, GroupedPairs) {
        let len = self.balanced_len();
        let mut h = ((len as f64 * frac) as usize).min(cap);
        if len > 1 {
            h = h.max(1);
        }
        let h = h.min(len.saturating_sub(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train_groups: [Vec<PairRecord>; 4] = std::array::from_fn(|_| Vec::new());
        let mut held_groups: [Vec<PairRecord>; 4] = std::array::from_fn(|_| Vec::new());
        for (gi, g) in PairGroup::ALL.iter().enumerate() {
            let mut order: Vec<u32> = (0..len as u32).collect();
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let list = self.group(*g);
            held_groups[gi] = order[..h].iter().map(|&i| list[i as usize]).collect();
            train_groups[gi] = order[h..].iter().map(|&i| list[i as usize]).collect();
        }
        (
            GroupedPairs { groups: train_groups, seed: self.seed },
            GroupedPairs { groups: held_groups, seed: self.seed },
        )
    }

    /// Line-oriented debug dump: `group first_index second_domain second_index`.
    pub fn write_debug_dump(&self, out: &mut impl Write) -> Result<()> {
        for g in PairGroup::ALL {
            for p in self.group(g) {
                writeln!(
                    out,
                    "{} {} {} {}",
                    p.group.number(),
                    p.first_index,
                    p.second_domain.as_str(),
                    p.second_index
                )?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pool indexing
// ---------------------------------------------------------------------------

fn choose2(m: u64) -> u64 {
    m * m.saturating_sub(1) / 2
}

/// Rank `t` within the unordered pairs of `0..m`, listed as
/// (0,1)..(0,m-1),(1,2)...; returns positional indices `a < b`.
fn unrank_unordered(m: u64, t: u64) -> (u64, u64) {
    // cum(a) = pairs in rows before `a` = a*(2m - a - 1)/2
    let cum = |a: u64| a * (2 * m - a - 1) / 2;
    let (mut lo, mut hi) = (0u64, m - 2);
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if cum(mid) <= t {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let a = lo;
    let b = a + 1 + (t - cum(a));
    (a, b)
}

/// Closed-form view of the four pair pools for one source/target labeling.
pub struct PairIndex {
    src_by_class: Vec<Vec<u32>>,
    tgt_by_class: Vec<Vec<u32>>,
    target_total: u64,
    /// cumulative G1 pool sizes per class, length NUM_CLASSES+1
    g1_prefix: Vec<u64>,
    /// G3 blocks: one per ordered class pair (c,d) with c<d, cumulative
    g3_blocks: Vec<(usize, usize)>,
    g3_prefix: Vec<u64>,
    /// cumulative G4 pool sizes per source class, length NUM_CLASSES+1
    g4_prefix: Vec<u64>,
}

impl PairIndex {
    pub fn new(source_labels: &[u8], target_labels: &[u8]) -> Self {
        let src_by_class = group_by_class(source_labels);
        let tgt_by_class = group_by_class(target_labels);
        let target_total = target_labels.len() as u64;

        let mut g1_prefix = vec![0u64; NUM_CLASSES + 1];
        for c in 0..NUM_CLASSES {
            g1_prefix[c + 1] = g1_prefix[c] + choose2(src_by_class[c].len() as u64);
        }

        let mut g3_blocks = Vec::new();
        let mut g3_prefix = vec![0u64];
        for c in 0..NUM_CLASSES {
            for d in c + 1..NUM_CLASSES {
                let size = src_by_class[c].len() as u64 * src_by_class[d].len() as u64;
                if size > 0 {
                    g3_blocks.push((c, d));
                    g3_prefix.push(g3_prefix.last().unwrap() + size);
                }
            }
        }

        let mut g4_prefix = vec![0u64; NUM_CLASSES + 1];
        for c in 0..NUM_CLASSES {
            let others = target_total - tgt_by_class[c].len() as u64;
            g4_prefix[c + 1] = g4_prefix[c] + src_by_class[c].len() as u64 * others;
        }

        PairIndex { src_by_class, tgt_by_class, target_total, g1_prefix, g3_blocks, g3_prefix, g4_prefix }
    }

    pub fn pool_size(&self, g: PairGroup) -> u64 {
        match g {
            PairGroup::SourceSame => *self.g1_prefix.last().unwrap(),
            PairGroup::CrossSame => (0..NUM_CLASSES)
                .map(|c| self.src_by_class[c].len() as u64 * self.tgt_by_class[c].len() as u64)
                .sum(),
            PairGroup::SourceDiff => *self.g3_prefix.last().unwrap(),
            PairGroup::CrossDiff => *self.g4_prefix.last().unwrap(),
        }
    }

    /// Pair at rank `u` of group `g`'s pool. Unordered groups come out with
    /// `first_index < second_index`.
    fn decode(&self, g: PairGroup, u: u64) -> PairRecord {
        match g {
            PairGroup::SourceSame => {
                let c = partition_of(&self.g1_prefix, u);
                let t = u - self.g1_prefix[c];
                let rows = &self.src_by_class[c];
                let (a, b) = unrank_unordered(rows.len() as u64, t);
                PairRecord {
                    first_index: rows[a as usize],
                    second_index: rows[b as usize],
                    second_domain: Domain::Source,
                    group: g,
                }
            }
            PairGroup::CrossSame => unreachable!("group 2 is enumerated, never sampled"),
            PairGroup::SourceDiff => {
                let block = partition_of(&self.g3_prefix, u);
                let t = u - self.g3_prefix[block];
                let (c, d) = self.g3_blocks[block];
                let nd = self.src_by_class[d].len() as u64;
                let (i, j) = (t / nd, t % nd);
                let (mut first, mut second) =
                    (self.src_by_class[c][i as usize], self.src_by_class[d][j as usize]);
                if first > second {
                    std::mem::swap(&mut first, &mut second);
                }
                PairRecord { first_index: first, second_index: second, second_domain: Domain::Source, group: g }
            }
            PairGroup::CrossDiff => {
                let c = partition_of(&self.g4_prefix, u);
                let t = u - self.g4_prefix[c];
                let others = self.target_total - self.tgt_by_class[c].len() as u64;
                let (i, mut r) = (t / others, t % others);
                let first = self.src_by_class[c][i as usize];
                for d in 0..NUM_CLASSES {
                    if d == c {
                        continue;
                    }
                    let td = self.tgt_by_class[d].len() as u64;
                    if r < td {
                        return PairRecord {
                            first_index: first,
                            second_index: self.tgt_by_class[d][r as usize],
                            second_domain: Domain::Target,
                            group: g,
                        };
                    }
                    r -= td;
                }
                unreachable!("rank exceeded pool size");
            }
        }
    }

    /// Uniform sample of `k` ranks; without replacement while the pool
    /// permits, with replacement (and a warning) otherwise.
    fn sample(&self, g: PairGroup, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PairRecord>> {
        let pool = self.pool_size(g);
        if pool == 0 {
            return Err(Error::invalid(
                "build_grouped_pairs",
                format!("group {} pool is empty", g.number()),
            ));
        }
        let mut out = Vec::with_capacity(k);
        if (k as u64) <= pool {
            let mut seen = HashSet::with_capacity(k * 2);
            while out.len() < k {
                let u = rng.random_range(0..pool);
                if seen.insert(u) {
                    out.push(self.decode(g, u));
                }
            }
        } else {
            log::warn!(
                "group {} pool has {} pairs, fewer than the {} required; sampling with replacement",
                g.number(),
                pool,
                k
            );
            for _ in 0..k {
                let u = rng.random_range(0..pool);
                out.push(self.decode(g, u));
            }
        }
        Ok(out)
    }

    /// Materializes an entire pool; intended for small instances and
    /// debugging (the G3 pool grows quadratically in the source size).
    pub fn enumerate(&self, g: PairGroup) -> Vec<PairRecord> {
        if g == PairGroup::CrossSame {
            let mut out = Vec::new();
            for c in 0..NUM_CLASSES {
                for &i in &self.src_by_class[c] {
                    for &j in &self.tgt_by_class[c] {
                        out.push(PairRecord {
                            first_index: i,
                            second_index: j,
                            second_domain: Domain::Target,
                            group: g,
                        });
                    }
                }
            }
            return out;
        }
        (0..self.pool_size(g)).map(|u| self.decode(g, u)).collect()
    }
}

/// Largest index `i` such that `prefix[i] <= u < prefix[i+1]`.
fn partition_of(prefix: &[u64], u: u64) -> usize {
    let mut lo = 0;
    let mut hi = prefix.len() - 2;
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if prefix[mid] <= u {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

// ---------------------------------------------------------------------------
// Public construction
// ---------------------------------------------------------------------------

/// All ordered same-class (source, target) pairs. Classes missing from the
/// target contribute nothing; having no shared class at all is an error.
pub fn enumerate_g2<S: Examples, T: Examples>(source: &S, target: &T) -> Result<Vec<PairRecord>> {
    let index = PairIndex::new(source.labels(), target.labels());
    let pairs = index.enumerate(PairGroup::CrossSame);
    if pairs.is_empty() {
        return Err(Error::invalid(
            "enumerate_g2",
            "source and target share no class; no same-class cross-domain pairs exist",
        ));
    }
    Ok(pairs)
}

/// Builds the four groups: all of group 2, and uniform subsamples of groups
/// 1, 3, and 4 matched to group 2's size.
pub fn build_grouped_pairs<S: Examples, T: Examples>(
    source: &S,
    target: &T,
    seed: u64,
) -> Result<GroupedPairs> {
    let index = PairIndex::new(source.labels(), target.labels());
    let g2 = enumerate_g2(source, target)?;
    let k = g2.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g1 = index.sample(PairGroup::SourceSame, k, &mut rng)?;
    let g3 = index.sample(PairGroup::SourceDiff, k, &mut rng)?;
    let g4 = index.sample(PairGroup::CrossDiff, k, &mut rng)?;
    Ok(GroupedPairs { groups: [g1, g2, g3, g4], seed })
}

// ---------------------------------------------------------------------------
// Batch stream
// ---------------------------------------------------------------------------

/// Group-stratified mini-batches over a [`GroupedPairs`]: every batch holds
/// an equal count from each group, and each epoch is a fresh seeded shuffle
/// covering every retained pair once per group.
pub struct PairBatches<'a> {
    gp: &'a GroupedPairs,
    per_group: usize,
    seed: u64,
}

impl<'a> PairBatches<'a> {
    pub fn new(gp: &'a GroupedPairs, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 4 {
            return Err(Error::invalid("pair_batches", format!("batch size {batch_size} below 4")));
        }
        if batch_size % 4 != 0 {
            return Err(Error::invalid(
                "pair_batches",
                format!("batch size {batch_size} not divisible by 4"),
            ));
        }
        Ok(PairBatches { gp, per_group: batch_size / 4, seed })
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }

    /// Number of batches per epoch (a trailing remainder forms one smaller,
    /// still balanced batch).
    pub fn epoch_len(&self) -> usize {
        self.gp.balanced_len().div_ceil(self.per_group)
    }

    /// The batches of one epoch. The same (stream seed, epoch) always yields
    /// the same order.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Vec<PairRecord>> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        let len = self.gp.balanced_len();
        let mut orders: [Vec<u32>; 4] = std::array::from_fn(|_| (0..len as u32).collect());
        for order in orders.iter_mut() {
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        let per = self.per_group;
        (0..self.epoch_len()).map(move |b| {
            let lo = b * per;
            let hi = ((b + 1) * per).min(len);
            let mut batch = Vec::with_capacity(4 * (hi - lo));
            for (gi, g) in PairGroup::ALL.iter().enumerate() {
                let list = self.gp.group(*g);
                for &row in &orders[gi][lo..hi] {
                    batch.push(list[row as usize]);
                }
            }
            batch
        })
    }
}
