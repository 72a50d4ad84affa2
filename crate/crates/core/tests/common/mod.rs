#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use kgrules::kg::VocabBuilder;
use kgrules::{EntityId, Kg, RelationId, Triple};
use proptest::prelude::*;

/// Base triples as `(head, rel, tail)` indices.
pub type RawTriples = Vec<(u32, u32, u32)>;

pub fn raw_triples(entities: u32, relations: u32, max_len: usize) -> impl Strategy<Value = RawTriples> {
    prop::collection::vec((0..entities, 0..relations, 0..entities), 1..=max_len)
}

/// Graph over `e0..`, `r0..` with inverses; every entity and relation index
/// below the bounds is registered even if unused.
pub fn build_kg(entities: u32, relations: u32, triples: &[(u32, u32, u32)]) -> Kg {
    let mut b = VocabBuilder::new();
    for e in 0..entities {
        b.entity(&format!("e{e}"));
    }
    for r in 0..relations {
        b.relation(&format!("r{r}"));
    }
    let vocab = Arc::new(b.finish(true).unwrap());
    Kg::from_base_triples(
        vocab,
        triples
            .iter()
            .map(|&(h, r, t)| Triple::new(EntityId(h), RelationId(r), EntityId(t))),
    )
}

/// Every `(a, r, b)` including inverse copies, by linear construction.
pub fn closure_by_scan(relations: u32, triples: &[(u32, u32, u32)]) -> BTreeSet<(u32, u32, u32)> {
    let mut all = BTreeSet::new();
    for &(h, r, t) in triples {
        all.insert((h, r, t));
        all.insert((t, r + relations, h));
    }
    all
}

/// Counts every walk `start -b1-> ... -bn-> end` by recursive enumeration
/// over an explicit edge list.
pub fn count_paths(edges: &BTreeSet<(u32, u32, u32)>, body: &[u32], start: u32) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    fn go(edges: &BTreeSet<(u32, u32, u32)>, body: &[u32], at: u32, out: &mut BTreeMap<u32, f64>) {
        match body.split_first() {
            None => *out.entry(at).or_insert(0.0) += 1.0,
            Some((&r, rest)) => {
                for &(h, rel, t) in edges {
                    if h == at && rel == r {
                        go(edges, rest, t, out);
                    }
                }
            }
        }
    }
    go(edges, body, start, &mut out);
    out
}

pub fn ids(body: &[u32]) -> Vec<RelationId> {
    body.iter().map(|&r| RelationId(r)).collect()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
