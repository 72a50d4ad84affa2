mod common;

use std::collections::{BTreeSet, HashMap};

use common::{build_kg, raw_triples};
use kgrules::sampler::{read_samples, sample_paths, write_samples};
use kgrules::synth::{generate, WorldSpec};
use kgrules::{EntityId, Kg, RelationId, Rule, SamplerConfig};
use proptest::prelude::*;

fn config(count: usize, open_ratio: f64, seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_max: 3,
        open_ratio,
        count,
        seed,
        chunk_size: 256,
        ..SamplerConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labels_agree_with_the_graph(triples in raw_triples(15, 3, 120), seed in any::<u64>()) {
        let kg = build_kg(15, 3, &triples);
        let Ok(samples) = sample_paths(&kg, &config(300, 0.3, seed)) else {
            // Graphs without length-2 walks are allowed to fail.
            return Ok(());
        };
        prop_assert_eq!(samples.len(), 300);
        for s in &samples {
            prop_assert!(s.body.len() >= 2 && s.body.len() <= 3);
            let (a, b) = s.endpoints.unwrap();
            let between = kg.relations_between(a, b);
            match s.head {
                Some(h) => prop_assert!(between.contains(&h)),
                None => prop_assert!(between.is_empty()),
            }
        }
    }

    #[test]
    fn open_share_stays_under_the_ratio(seed in any::<u64>(), ratio in 0.0..0.9f64) {
        let triples: Vec<(u32, u32, u32)> = (0..60)
            .flat_map(|i| [(i, 0, (i + 1) % 60), (i, 1, (i + 7) % 60), (i, 2, (i + 2) % 60)])
            .collect();
        let kg = build_kg(60, 3, &triples);
        let samples = sample_paths(&kg, &config(1000, ratio, seed)).unwrap();
        let open = samples.iter().filter(|s| s.is_open()).count() as f64 / 1000.0;
        prop_assert!(open <= ratio + 0.02, "open share {open} for ratio {ratio}");
        let again = sample_paths(&kg, &config(1000, ratio, seed)).unwrap();
        prop_assert_eq!(again, samples);
    }
}

#[test]
fn dump_keeps_labels() {
    let kg = build_kg(4, 2, &[(0, 0, 1), (1, 1, 2), (0, 1, 2), (2, 0, 3)]);
    let samples = sample_paths(&kg, &config(50, 0.2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.tsv");
    write_samples(&path, kg.vocab(), &samples).unwrap();
    let back = read_samples(&path, kg.vocab()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in back.iter().zip(&samples) {
        assert_eq!((&a.body, a.head), (&b.body, b.head));
    }
}

/// Rules plus their mirror images over inverse relations.
fn with_mirrors(kg: &Kg, rules: &[Rule]) -> Vec<(RelationId, Vec<RelationId>)> {
    let v = kg.vocab();
    let mut out: Vec<(RelationId, Vec<RelationId>)> = rules.iter().map(|r| (r.head, r.body.clone())).collect();
    for r in rules {
        let body = r.body.iter().rev().map(|&b| v.inverse(b).unwrap()).collect();
        out.push((v.inverse(r.head).unwrap(), body));
    }
    out
}

/// Relations derivable between the two ends of an abstract chain.
fn chain_heads(body: &[RelationId], rules: &[(RelationId, Vec<RelationId>)]) -> BTreeSet<RelationId> {
    let k = body.len();
    let mut rel: HashMap<(usize, usize), BTreeSet<RelationId>> = HashMap::new();
    for (i, &r) in body.iter().enumerate() {
        rel.entry((i, i + 1)).or_default().insert(r);
    }
    fn matches(rel: &HashMap<(usize, usize), BTreeSet<RelationId>>, body: &[RelationId], from: usize, to: usize) -> bool {
        match body {
            [] => from == to,
            [r] => rel.get(&(from, to)).is_some_and(|s| s.contains(r)),
            [r, rest @ ..] => (from + 1..to).any(|m| rel.get(&(from, m)).is_some_and(|s| s.contains(r)) && matches(rel, rest, m, to)),
        }
    }
    loop {
        let mut added = Vec::new();
        for i in 0..=k {
            for j in i + 2..=k {
                for (h, b) in rules {
                    let known = rel.get(&(i, j)).is_some_and(|s| s.contains(h));
                    if !known && matches(&rel, b, i, j) {
                        added.push(((i, j), *h));
                    }
                }
            }
        }
        if added.is_empty() {
            break;
        }
        for (key, h) in added {
            rel.entry(key).or_default().insert(h);
        }
    }
    rel.remove(&(0, k)).unwrap_or_default()
}

/// True when some edge of the cycle follows from the rest of it.
fn cycle_entailed(cycle: &[RelationId], kg: &Kg, rules: &[(RelationId, Vec<RelationId>)]) -> bool {
    let n = cycle.len();
    (0..n).any(|j| {
        let rest: Vec<RelationId> = (1..n).map(|t| cycle[(j + t) % n]).collect();
        chain_heads(&rest, rules).contains(&kg.vocab().inverse(cycle[j]).unwrap())
    })
}

/// A closed walk is a rule grounding when its cycle is entailed, or, for
/// three edges, when a chord splits it into two entailed triangles.
fn grounding_explained(kg: &Kg, rules: &[(RelationId, Vec<RelationId>)], nodes: &[EntityId], body: &[RelationId], head: RelationId) -> bool {
    let v = kg.vocab();
    let inv = |r: RelationId| v.inverse(r).unwrap();
    let mut cycle = body.to_vec();
    cycle.push(inv(head));
    if cycle_entailed(&cycle, kg, rules) {
        return true;
    }
    if body.len() != 3 {
        return false;
    }
    let (x, y1, y2, w) = (nodes[0], nodes[1], nodes[2], nodes[3]);
    let chord_a = kg.relations_between(x, y2).iter().any(|&c| {
        cycle_entailed(&[body[0], body[1], inv(c)], kg, rules) && cycle_entailed(&[c, body[2], inv(head)], kg, rules)
    });
    let chord_b = kg.relations_between(y1, w).iter().any(|&c| {
        cycle_entailed(&[body[1], body[2], inv(c)], kg, rules) && cycle_entailed(&[body[0], c, inv(head)], kg, rules)
    });
    chord_a || chord_b
}

/// Every node sequence realising `body` from `x` to `y`, without stepping
/// straight back.
fn groundings(kg: &Kg, body: &[RelationId], x: EntityId, y: EntityId) -> Vec<Vec<EntityId>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![x]];
    while let Some(path) = stack.pop() {
        let i = path.len() - 1;
        if i == body.len() {
            if *path.last().unwrap() == y {
                out.push(path);
            }
            continue;
        }
        for t in kg.neighbors_via(path[i], body[i]) {
            if i > 0 && t.tail == path[i - 1] && Some(body[i]) == kg.vocab().inverse(body[i - 1]) {
                continue;
            }
            let mut next = path.clone();
            next.push(t.tail);
            stack.push(next);
        }
    }
    out
}

#[test]
fn family_closed_samples_are_rule_groundings() {
    let world = generate(&WorldSpec::family()).unwrap();
    let kg = &world.train;
    let rules = with_mirrors(kg, &world.rules);
    let samples = sample_paths(kg, &config(20_000, 0.1, 7)).unwrap();
    let closed: Vec<_> = samples.iter().filter(|s| !s.is_open()).collect();
    let mut explained = 0;
    for s in &closed {
        let (x, y) = s.endpoints.unwrap();
        let head = s.head.unwrap();
        if groundings(kg, &s.body, x, y)
            .iter()
            .any(|nodes| grounding_explained(kg, &rules, nodes, &s.body, head))
        {
            explained += 1;
        }
    }
    let share = explained as f64 / closed.len() as f64;
    assert!(share >= 0.95, "{explained} of {} closed samples explained ({share:.4})", closed.len());
}
