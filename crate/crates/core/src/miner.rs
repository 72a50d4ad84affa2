//! Rule extraction from a trained model.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{Kg, RelationId, Vocab};
use crate::model::ModelParams;
use crate::sampler::{sample_paths, SamplerConfig};

/// Chain rule `head(x, y) <- b1(x, z1) & ... & bn(z_{n-1}, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub head: RelationId,
    pub body: Vec<RelationId>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSource {
    Enumerate,
    SampledPaths,
    /// Enumerate when `|R|^L_max` fits under the cap, otherwise harvest.
    Auto,
}

#[derive(Clone, Debug)]
pub struct MinerConfig {
    pub max_len: usize,
    pub top_k: usize,
    pub source: CandidateSource,
    pub enumeration_cap: u64,
    /// Walks used when harvesting bodies from the graph.
    pub harvest_samples: usize,
    pub seed: u64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            max_len: 3,
            top_k: 10,
            source: CandidateSource::Auto,
            enumeration_cap: 2_000_000,
            harvest_samples: 200_000,
            seed: 0,
        }
    }
}

const SHARD: usize = 4096;

/// Final head distribution for one body (slot 0 is null, `1 + r` is `r`).
pub fn score_rule(params: &ModelParams, body: &[RelationId], max_len: usize) -> Result<Vec<f64>> {
    if body.len() < 2 || body.len() > max_len {
        return Err(Error::InvalidArgument(format!(
            "body length {} outside [2, {max_len}]",
            body.len()
        )));
    }
    params.predict(body)
}

/// Every relation sequence of length `2..=max_len`, shortest first, each
/// length in lexicographic order.
pub fn enumerate_bodies(num_relations: usize, max_len: usize) -> Vec<Vec<RelationId>> {
    let mut out = Vec::new();
    if num_relations == 0 {
        return out;
    }
    for len in 2..=max_len {
        let mut cur = vec![0u32; len];
        'odometer: loop {
            out.push(cur.iter().map(|&r| RelationId(r)).collect());
            let mut i = len;
            loop {
                if i == 0 {
                    break 'odometer;
                }
                i -= 1;
                cur[i] += 1;
                if (cur[i] as usize) < num_relations {
                    break;
                }
                cur[i] = 0;
            }
        }
    }
    out
}

fn harvest_bodies(kg: &Kg, cfg: &MinerConfig) -> Result<Vec<Vec<RelationId>>> {
    let scfg = SamplerConfig {
        n_max: cfg.max_len,
        open_ratio: 0.0,
        count: cfg.harvest_samples,
        seed: cfg.seed,
        ..SamplerConfig::default()
    };
    let set: BTreeSet<Vec<RelationId>> = sample_paths(kg, &scfg)?.into_iter().map(|s| s.body).collect();
    Ok(set.into_iter().collect())
}

/// Candidate bodies according to `cfg.source`.
pub fn candidates(kg: &Kg, num_relations: usize, cfg: &MinerConfig) -> Result<Vec<Vec<RelationId>>> {
    let full = (num_relations as u64).checked_pow(cfg.max_len as u32);
    let enumerate = match cfg.source {
        CandidateSource::Enumerate => true,
        CandidateSource::SampledPaths => false,
        CandidateSource::Auto => full.is_some_and(|n| n <= cfg.enumeration_cap),
    };
    if enumerate {
        Ok(enumerate_bodies(num_relations, cfg.max_len))
    } else {
        harvest_bodies(kg, cfg)
    }
}

#[derive(PartialEq)]
struct Ranked<'a> {
    score: f64,
    body: &'a [RelationId],
}

impl Eq for Ranked<'_> {}

// Greater means worse, so a max-heap keeps the weakest kept rule on top.
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.body.cmp(other.body))
    }
}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn offer<'a>(heap: &mut BinaryHeap<Ranked<'a>>, k: usize, item: Ranked<'a>) {
    if heap.len() < k {
        heap.push(item);
    } else if let Some(top) = heap.peek() {
        if item < *top {
            heap.pop();
            heap.push(item);
        }
    }
}

/// Top-`k` rules per head over the given candidate bodies.
pub fn top_rules(params: &ModelParams, bodies: &[Vec<RelationId>], k: usize) -> Result<Vec<Rule>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k must be at least 1".into()));
    }
    let r = params.num_relations();
    let shard_heaps: Vec<Result<Vec<BinaryHeap<Ranked>>>> = bodies
        .par_chunks(SHARD)
        .map(|chunk| {
            let refs: Vec<&[RelationId]> = chunk.iter().map(|b| b.as_slice()).collect();
            let theta = params.predict_batch(&refs)?;
            let mut heaps: Vec<BinaryHeap<Ranked>> = (0..r).map(|_| BinaryHeap::new()).collect();
            for (row, body) in theta.rows().into_iter().zip(&refs) {
                for (h, heap) in heaps.iter_mut().enumerate() {
                    offer(heap, k, Ranked { score: row[h + 1], body });
                }
            }
            Ok(heaps)
        })
        .collect();
    let mut heaps: Vec<BinaryHeap<Ranked>> = (0..r).map(|_| BinaryHeap::new()).collect();
    for shard in shard_heaps {
        for (h, local) in shard?.into_iter().enumerate() {
            for item in local {
                offer(&mut heaps[h], k, item);
            }
        }
    }
    let mut rules = Vec::new();
    for (h, heap) in heaps.into_iter().enumerate() {
        for item in heap.into_sorted_vec() {
            rules.push(Rule {
                head: RelationId(h as u32),
                body: item.body.to_vec(),
                score: item.score,
            });
        }
    }
    Ok(rules)
}

/// Scores candidate bodies and keeps the best `k` per head relation, sorted
/// by head then descending score. The null slot never becomes a rule.
pub fn mine(params: &ModelParams, kg: &Kg, cfg: &MinerConfig) -> Result<Vec<Rule>> {
    if cfg.max_len < 2 {
        return Err(Error::InvalidArgument("maximum rule length must be at least 2".into()));
    }
    let bodies = candidates(kg, params.num_relations(), cfg)?;
    if bodies.is_empty() {
        log::warn!("no candidate rule bodies");
        return Ok(Vec::new());
    }
    log::info!("scoring {} candidate bodies", bodies.len());
    top_rules(params, &bodies, cfg.top_k)
}

/// One rule per line: `score<TAB>head<TAB>b1,b2,...`.
pub fn format_rules(rules: &[Rule], vocab: &Vocab) -> String {
    let mut out = String::new();
    for r in rules {
        let body: Vec<&str> = r.body.iter().map(|&b| vocab.relation_name(b)).collect();
        let _ = writeln!(out, "{}\t{}\t{}", r.score, vocab.relation_name(r.head), body.join(","));
    }
    out
}

pub fn write_rules(path: impl AsRef<Path>, rules: &[Rule], vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_rules(rules, vocab)).map_err(|e| Error::io(path, e))
}
