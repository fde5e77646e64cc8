//! Sequence packing and batch construction.
//!
//! Packing layout: `[BOS] query [EOS] response [EOS]`. The model is scored
//! only on response positions (including the closing EOS), so the query is
//! conditioning context, never a target.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{tokenize, BOS, EOS};
use crate::pole::{TraitPole, NUM_POLES};
use crate::synth::Record;

/// One packed training sequence. `input[t]` predicts `targets[t]`; rows
/// `resp_start..resp_end` of the input are the scored positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSeq {
    pub input: Vec<u32>,
    pub targets: Vec<usize>,
    pub resp_start: usize,
    pub resp_end: usize,
}

impl PackedSeq {
    /// Targets for the scored rows only, aligned with the logits slice.
    pub fn resp_targets(&self) -> &[usize] {
        &self.targets[self.resp_start..self.resp_end]
    }
}

/// Prompt prefix `[BOS] query [EOS]` used at generation time; training and
/// inference share this exact conditioning shape.
pub fn pack_query(query: &str, t_max: usize) -> Result<Vec<u32>> {
    if query.trim().is_empty() {
        return Err(Error::InvalidInput("cannot pack an empty query".into()));
    }
    let q = tokenize(query, None);
    let mut ids = Vec::with_capacity(q.ids.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(&q.ids);
    ids.push(EOS);
    if ids.len() > t_max {
        return Err(Error::ContextOverflow { len: ids.len(), t_max });
    }
    Ok(ids)
}

pub fn pack_pair(query: &str, response: &str, t_max: usize) -> Result<PackedSeq> {
    if query.trim().is_empty() || response.trim().is_empty() {
        return Err(Error::InvalidInput("cannot pack an empty query or response".into()));
    }
    let q = tokenize(query, None);
    let r = tokenize(response, None);
    let mut seq = Vec::with_capacity(q.ids.len() + r.ids.len() + 3);
    seq.push(BOS);
    seq.extend_from_slice(&q.ids);
    seq.push(EOS);
    seq.extend_from_slice(&r.ids);
    seq.push(EOS);
    // Input drops the final token; model must fit T = len-1 positions.
    if seq.len() - 1 > t_max {
        return Err(Error::ContextOverflow { len: seq.len() - 1, t_max });
    }
    let input = seq[..seq.len() - 1].to_vec();
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    let resp_start = q.ids.len() + 1;
    let resp_end = input.len();
    Ok(PackedSeq { input, targets, resp_start, resp_end })
}

pub fn pack_record(record: &Record, t_max: usize) -> Result<PackedSeq> {
    pack_pair(&record.query, &record.response, t_max)
}

/// Index partitions P_1..P_10 in canonical pole order: record j enters
/// partition i iff p_j[i] = 1, so a k-pole record appears k times.
pub fn partition_by_trait(records: &[Record]) -> Result<[Vec<usize>; NUM_POLES]> {
    let mut parts: [Vec<usize>; NUM_POLES] = Default::default();
    for (j, r) in records.iter().enumerate() {
        for (i, part) in parts.iter_mut().enumerate() {
            if r.p.bits()[i] == 1 {
                part.push(j);
            }
        }
    }
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::StarvedPole(TraitPole::ALL[i].label().to_string()));
        }
    }
    Ok(parts)
}

/// Batches whose members all share one exact activation vector.
#[derive(Clone, Debug, Default)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// Groups of size 1, unusable because the trait-consistency loss needs
    /// at least one pair.
    pub skipped_singletons: usize,
}

/// Group records by exact p, shuffle within groups, and chunk. A remainder
/// of one borrows a member from the previous chunk (every emitted batch
/// has size >= 2); a whole group of one is skipped with a warning count.
/// Deterministic per seed.
pub fn make_same_p_batches(records: &[Record], batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::InvalidParameter {
            name: "batch_size",
            details: "same-p batches need batch_size >= 2".into(),
        });
    }
    let mut groups: Vec<([u8; NUM_POLES], Vec<usize>)> = Vec::new();
    for (j, r) in records.iter().enumerate() {
        let key = *r.p.bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(j),
            None => groups.push((key, vec![j])),
        }
    }
    // Stable group order independent of record order.
    groups.sort_by(|a, b| a.0.cmp(&b.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = BatchPlan::default();
    for (_, mut members) in groups {
        if members.len() == 1 {
            plan.skipped_singletons += 1;
            continue;
        }
        members.shuffle(&mut rng);
        let mut chunks: Vec<Vec<usize>> = members.chunks(batch_size).map(|c| c.to_vec()).collect();
        let n = chunks.len();
        if n > 1 && chunks[n - 1].len() == 1 {
            let borrowed = chunks[n - 2].pop().expect("prior chunk is full");
            chunks[n - 1].push(borrowed);
        }
        plan.batches.extend(chunks);
    }
    plan.batches.shuffle(&mut rng);
    Ok(plan)
}

/// Stratified train/validation split: within each exact-p group, shuffle
/// and hold out `floor(len * val_fraction)` records. Deterministic per seed.
pub fn split_train_val(records: &[Record], val_fraction: f64, seed: u64) -> (Vec<Record>, Vec<Record>) {
    let mut groups: Vec<([u8; NUM_POLES], Vec<usize>)> = Vec::new();
    for (j, r) in records.iter().enumerate() {
        let key = *r.p.bits();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(j),
            None => groups.push((key, vec![j])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64) * val_fraction).floor() as usize;
        for (k, j) in members.into_iter().enumerate() {
            if k < n_val {
                val.push(records[j].clone());
            } else {
                train.push(records[j].clone());
            }
        }
    }
    (train, val)
}

/// Endless shuffled index stream: reshuffles at each epoch boundary.
pub struct IndexCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexCycler {
    pub fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = indices;
        order.shuffle(&mut rng);
        IndexCycler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        assert!(!self.order.is_empty(), "cycler over an empty index set");
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
