//! Synthetic kinship worlds with a known rule set.
//!
//! The training graph is a union of small components. Each component starts
//! as a few random root facts; edges whose relation heads a rule are then
//! rewritten backwards (the edge stays, a fresh path realising one of the
//! rule bodies is added next to it), and finally the component is saturated
//! under all rules. Distractor edges join random entities of different
//! components. Test queries are long chains grown the same way on fresh
//! entities; their gold label is the single relation that saturation puts
//! between the chain endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Kg, RelationId, Triple, VocabBuilder, Vocab};
use crate::miner::{format_rules, Rule};
use crate::reasoner::PathQuery;

/// `head <- body[0] & body[1] & ...`, by relation name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axiom {
    pub head: String,
    pub body: Vec<String>,
}

impl Axiom {
    pub fn new(head: &str, body: &[&str]) -> Self {
        Axiom {
            head: head.to_string(),
            body: body.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorldSpec {
    pub relations: Vec<String>,
    pub axioms: Vec<Axiom>,
    /// Training entities (components are added until this is reached).
    pub entities: usize,
    pub roots_per_component: usize,
    pub expansions_per_component: usize,
    pub expansions_per_edge: usize,
    pub test_hops: RangeInclusive<usize>,
    pub queries_per_hop: usize,
    pub distractor_rate: f64,
    /// Upper bound on facts held by one saturation run.
    pub max_facts: usize,
    pub seed: u64,
}

const MOTHER: &str = "hasMother";
const FATHER: &str = "hasFather";
const SON: &str = "hasSon";
const DAUGHTER: &str = "hasDaughter";
const GRANDMA: &str = "hasGrandma";
const GRANDPA: &str = "hasGrandpa";
const GRANDSON: &str = "hasGrandson";
const GRANDDAUGHTER: &str = "hasGranddaughter";
const UNCLE: &str = "hasUncle";
const AUNT: &str = "hasAunt";
const HUSBAND: &str = "hasHusband";
const WIFE: &str = "hasWife";

impl WorldSpec {
    /// Twelve kinship relations, 3,000 training entities.
    pub fn family() -> Self {
        let relations = [
            MOTHER, FATHER, SON, DAUGHTER, GRANDMA, GRANDPA, GRANDSON, GRANDDAUGHTER, UNCLE, AUNT, HUSBAND, WIFE,
        ];
        let a = Axiom::new;
        let axioms = vec![
            a(GRANDMA, &[MOTHER, MOTHER]),
            a(GRANDMA, &[FATHER, MOTHER]),
            a(GRANDPA, &[MOTHER, FATHER]),
            a(GRANDPA, &[FATHER, FATHER]),
            a(GRANDPA, &[GRANDMA, HUSBAND]),
            a(GRANDMA, &[GRANDPA, WIFE]),
            a(MOTHER, &[FATHER, WIFE]),
            a(FATHER, &[MOTHER, HUSBAND]),
            a(SON, &[WIFE, SON]),
            a(SON, &[HUSBAND, SON]),
            a(DAUGHTER, &[WIFE, DAUGHTER]),
            a(DAUGHTER, &[HUSBAND, DAUGHTER]),
            a(GRANDSON, &[SON, SON]),
            a(GRANDSON, &[DAUGHTER, SON]),
            a(GRANDDAUGHTER, &[SON, DAUGHTER]),
            a(GRANDDAUGHTER, &[DAUGHTER, DAUGHTER]),
            a(GRANDSON, &[WIFE, GRANDSON]),
            a(GRANDSON, &[HUSBAND, GRANDSON]),
            a(GRANDDAUGHTER, &[WIFE, GRANDDAUGHTER]),
            a(GRANDDAUGHTER, &[HUSBAND, GRANDDAUGHTER]),
            a(UNCLE, &[GRANDMA, SON]),
            a(UNCLE, &[GRANDPA, SON]),
            a(AUNT, &[GRANDMA, DAUGHTER]),
            a(AUNT, &[GRANDPA, DAUGHTER]),
            a(GRANDPA, &[MOTHER, MOTHER, HUSBAND]),
            a(UNCLE, &[MOTHER, MOTHER, SON]),
        ];
        WorldSpec {
            relations: relations.iter().map(|s| s.to_string()).collect(),
            axioms,
            entities: 3000,
            roots_per_component: 4,
            expansions_per_component: 12,
            expansions_per_edge: 1,
            test_hops: 5..=10,
            queries_per_hop: 200,
            distractor_rate: 0.1,
            max_facts: 5_000_000,
            seed: 0,
        }
    }

    /// Relation ids of every axiom, checked against the vocabulary.
    pub fn compiled_rules(&self) -> Result<Vec<Rule>> {
        let index: BTreeMap<&str, u32> = self
            .relations
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), i as u32))
            .collect();
        let id = |name: &str| {
            index.get(name).map(|&i| RelationId(i)).ok_or_else(|| Error::UnknownSymbol {
                kind: "relation",
                name: name.to_string(),
            })
        };
        self.axioms
            .iter()
            .map(|a| {
                Ok(Rule {
                    head: id(&a.head)?,
                    body: a.body.iter().map(|b| id(b)).collect::<Result<_>>()?,
                    score: 1.0,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let names: BTreeSet<&String> = self.relations.iter().collect();
        if names.len() != self.relations.len() || self.relations.is_empty() {
            return bad("relation names must be non-empty and distinct".into());
        }
        if self.axioms.is_empty() {
            return bad("world needs at least one rule".into());
        }
        for a in &self.axioms {
            if !(2..=3).contains(&a.body.len()) {
                return bad(format!("rule for {} has body length {}", a.head, a.body.len()));
            }
        }
        self.compiled_rules()?;
        if self.entities < 2 || self.roots_per_component == 0 || self.expansions_per_edge == 0 {
            return bad("entity count, roots per component and expansions per edge must be positive".into());
        }
        if *self.test_hops.start() < 2 || self.test_hops.is_empty() {
            return bad("test hops must start at 2 or more".into());
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor rate {} outside [0, 1)", self.distractor_rate));
        }
        Ok(())
    }
}

/// A generated world. Train and test entities are disjoint; both graphs
/// share one vocabulary with inverse relations.
#[derive(Clone, Debug)]
pub struct World {
    pub train: Kg,
    pub test: Kg,
    pub queries: Vec<PathQuery>,
    pub rules: Vec<Rule>,
    pub train_entities: usize,
    pub distractors: usize,
}

impl World {
    pub fn vocab(&self) -> &Arc<Vocab> {
        self.train.vocab()
    }
}

type Fact = (u32, u32, u32);

/// Facts with an outgoing index, saturated in place.
struct FactSet {
    facts: BTreeSet<Fact>,
    out: BTreeMap<u32, Vec<(u32, u32)>>,
}

impl FactSet {
    fn new() -> Self {
        FactSet {
            facts: BTreeSet::new(),
            out: BTreeMap::new(),
        }
    }

    fn insert(&mut self, f: Fact) -> bool {
        if f.0 == f.2 || !self.facts.insert(f) {
            return false;
        }
        self.out.entry(f.0).or_default().push((f.1, f.2));
        true
    }

    fn ends(&self, from: u32, body: &[RelationId]) -> BTreeSet<u32> {
        let mut cur = BTreeSet::from([from]);
        for r in body {
            let mut next = BTreeSet::new();
            for x in &cur {
                if let Some(edges) = self.out.get(x) {
                    next.extend(edges.iter().filter(|e| e.0 == r.0).map(|e| e.1));
                }
            }
            cur = next;
        }
        cur
    }
}

/// Applies `rules` until nothing new is derived. Self-loops are never
/// added. Fails once more than `max_facts` facts exist; the error names a
/// rule cycle using `names` for relation ids.
pub fn saturate(facts: &mut BTreeSet<Fact>, rules: &[Rule], max_facts: usize, names: &[String]) -> Result<()> {
    let mut set = FactSet::new();
    for &f in facts.iter() {
        set.insert(f);
    }
    loop {
        let starts: Vec<u32> = set.out.keys().copied().collect();
        let mut new = Vec::new();
        for &x in &starts {
            for rule in rules {
                for y in set.ends(x, &rule.body) {
                    let f = (x, rule.head.0, y);
                    if x != y && !set.facts.contains(&f) {
                        new.push(f);
                    }
                }
            }
        }
        let mut changed = false;
        for f in new {
            changed |= set.insert(f);
        }
        if set.facts.len() > max_facts {
            return Err(Error::NonTerminating(runaway_message(rules, max_facts, names)));
        }
        if !changed {
            break;
        }
    }
    *facts = set.facts;
    Ok(())
}

/// Names a dependency cycle among the rules, if there is one.
pub fn rule_cycle(rules: &[Rule]) -> Option<Vec<RelationId>> {
    let mut deps: BTreeMap<RelationId, BTreeSet<RelationId>> = BTreeMap::new();
    for r in rules {
        deps.entry(r.head).or_default().extend(r.body.iter().copied());
    }
    // 0 unseen, 1 on stack, 2 done
    let mut state: BTreeMap<RelationId, u8> = BTreeMap::new();
    fn visit(
        r: RelationId,
        deps: &BTreeMap<RelationId, BTreeSet<RelationId>>,
        state: &mut BTreeMap<RelationId, u8>,
        stack: &mut Vec<RelationId>,
    ) -> Option<Vec<RelationId>> {
        match state.get(&r).copied().unwrap_or(0) {
            1 => {
                let at = stack.iter().position(|&s| s == r).expect("on stack");
                let mut cycle = stack[at..].to_vec();
                cycle.push(r);
                return Some(cycle);
            }
            2 => return None,
            _ => {}
        }
        state.insert(r, 1);
        stack.push(r);
        for &d in deps.get(&r).into_iter().flatten() {
            if let Some(c) = visit(d, deps, state, stack) {
                return Some(c);
            }
        }
        stack.pop();
        state.insert(r, 2);
        None
    }
    let heads: Vec<RelationId> = deps.keys().copied().collect();
    for h in heads {
        if let Some(c) = visit(h, &deps, &mut state, &mut Vec::new()) {
            return Some(c);
        }
    }
    None
}

fn runaway_message(rules: &[Rule], max_facts: usize, names: &[String]) -> String {
    match rule_cycle(rules) {
        Some(cycle) => {
            let cycle: Vec<String> = cycle
                .iter()
                .map(|r| names.get(r.index()).cloned().unwrap_or_else(|| format!("r{}", r.0)))
                .collect();
            format!("more than {max_facts} facts; rule cycle {}", cycle.join(" <- "))
        }
        None => format!("more than {max_facts} facts"),
    }
}

/// Relations that saturation places between the ends of a chain of base
/// relations, chain positions `0..=body.len()`.
pub fn chain_closure(body: &[RelationId], rules: &[Rule]) -> BTreeSet<RelationId> {
    let n = body.len();
    // span[i][j]: relations from position i to position j
    let mut span = vec![vec![BTreeSet::new(); n + 1]; n + 1];
    for (i, r) in body.iter().enumerate() {
        span[i][i + 1].insert(*r);
    }
    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let mut found = BTreeSet::new();
            for rule in rules {
                if splits_match(&span, i, j, &rule.body) {
                    found.insert(rule.head);
                }
            }
            span[i][j].extend(found);
        }
    }
    std::mem::take(&mut span[0][n])
}

fn splits_match(span: &[Vec<BTreeSet<RelationId>>], i: usize, j: usize, body: &[RelationId]) -> bool {
    let (first, rest) = body.split_first().expect("non-empty body");
    if rest.is_empty() {
        return span[i][j].contains(first);
    }
    (i + 1..j).any(|m| span[i][m].contains(first) && splits_match(span, m, j, rest))
}

fn by_head(rules: &[Rule]) -> BTreeMap<RelationId, Vec<&Rule>> {
    let mut m: BTreeMap<RelationId, Vec<&Rule>> = BTreeMap::new();
    for r in rules {
        m.entry(r.head).or_default().push(r);
    }
    m
}

/// Root facts plus backward expansions; returns the edges and the next
/// free entity id.
fn grow_component(
    rng: &mut ChaCha8Rng,
    spec: &WorldSpec,
    rules: &BTreeMap<RelationId, Vec<&Rule>>,
    first: u32,
) -> (Vec<Fact>, u32) {
    let num_rel = spec.relations.len() as u32;
    let mut edges: Vec<Fact> = Vec::new();
    let mut next = first + 1;
    for _ in 0..spec.roots_per_component {
        let anchor = rng.gen_range(first..next);
        let r = rng.gen_range(0..num_rel);
        if rng.gen_bool(0.5) {
            edges.push((anchor, r, next));
        } else {
            edges.push((next, r, anchor));
        }
        next += 1;
    }
    let mut used = vec![0usize; edges.len()];
    for _ in 0..spec.expansions_per_component {
        let open: Vec<usize> = (0..edges.len())
            .filter(|&i| used[i] < spec.expansions_per_edge && rules.contains_key(&RelationId(edges[i].1)))
            .collect();
        let Some(&pick) = open.choose(rng) else { break };
        used[pick] += 1;
        let (x, r, y) = edges[pick];
        let rule = rules[&RelationId(r)].choose(rng).expect("rules for head");
        let mut nodes = vec![x];
        for _ in 1..rule.body.len() {
            nodes.push(next);
            next += 1;
        }
        nodes.push(y);
        for (k, b) in rule.body.iter().enumerate() {
            edges.push((nodes[k], b.0, nodes[k + 1]));
            used.push(0);
        }
    }
    (edges, next)
}

/// Grows a chain of exactly `hops` relations by backward expansion from a
/// random head. `None` when the draw cannot reach the length.
fn grow_chain(rng: &mut ChaCha8Rng, rules: &BTreeMap<RelationId, Vec<&Rule>>, hops: usize) -> Option<Vec<RelationId>> {
    let heads: Vec<RelationId> = rules.keys().copied().collect();
    let mut body = vec![*heads.choose(rng)?];
    while body.len() < hops {
        let room = hops - body.len() + 1;
        let mut options: Vec<(usize, &Rule)> = Vec::new();
        for (i, r) in body.iter().enumerate() {
            for rule in rules.get(r).into_iter().flatten() {
                if rule.body.len() <= room {
                    options.push((i, rule));
                }
            }
        }
        let &(i, rule) = options.choose(rng)?;
        body.splice(i..=i, rule.body.iter().copied());
    }
    Some(body)
}

const CHAIN_ATTEMPTS: usize = 1000;

/// Builds the world described by `spec`.
pub fn generate(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let rules = spec.compiled_rules()?;
    let heads = by_head(&rules);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut facts: BTreeSet<Fact> = BTreeSet::new();
    let mut component_of: Vec<u32> = Vec::new();
    let mut next = 0u32;
    let mut component = 0u32;
    while (next as usize) < spec.entities {
        let (edges, end) = grow_component(&mut rng, spec, &heads, next);
        let mut local: BTreeSet<Fact> = edges.into_iter().collect();
        saturate(&mut local, &rules, spec.max_facts, &spec.relations)?;
        facts.extend(local);
        component_of.extend(std::iter::repeat_n(component, (end - next) as usize));
        next = end;
        component += 1;
    }
    let train_entities = next as usize;

    let want = (spec.distractor_rate * facts.len() as f64).round() as usize;
    let mut distractors = 0;
    if component > 1 {
        let mut guard = 0;
        while distractors < want && guard < want * 100 {
            guard += 1;
            let a = rng.gen_range(0..next);
            let b = rng.gen_range(0..next);
            if component_of[a as usize] == component_of[b as usize] {
                continue;
            }
            let r = rng.gen_range(0..spec.relations.len() as u32);
            if facts.insert((a, r, b)) {
                distractors += 1;
            }
        }
    }

    let mut qrng = ChaCha8Rng::seed_from_u64(spec.seed);
    qrng.set_stream(1);
    let mut queries = Vec::new();
    let mut test_facts: Vec<Fact> = Vec::new();
    let mut tnext = 0u32;
    for hops in spec.test_hops.clone() {
        let mut made = 0;
        let mut attempts = 0;
        while made < spec.queries_per_hop {
            attempts += 1;
            if attempts > CHAIN_ATTEMPTS * spec.queries_per_hop.max(1) {
                return Err(Error::InvalidArgument(format!(
                    "could not build {} test chains of {hops} hops with a unique label",
                    spec.queries_per_hop
                )));
            }
            let Some(body) = grow_chain(&mut qrng, &heads, hops) else { continue };
            let closure = chain_closure(&body, &rules);
            let gold = match closure.iter().next() {
                Some(&g) if closure.len() == 1 => g,
                _ => continue,
            };
            let mut chain: BTreeSet<Fact> = body
                .iter()
                .enumerate()
                .map(|(i, r)| (tnext + i as u32, r.0, tnext + i as u32 + 1))
                .collect();
            saturate(&mut chain, &rules, spec.max_facts, &spec.relations)?;
            test_facts.extend(chain);
            tnext += hops as u32 + 1;
            queries.push(PathQuery { body, gold });
            made += 1;
        }
    }

    let mut vb = VocabBuilder::new();
    for r in &spec.relations {
        vb.relation(r);
    }
    for i in 0..train_entities {
        vb.entity(&format!("p{i}"));
    }
    for i in 0..tnext {
        vb.entity(&format!("q{i}"));
    }
    let vocab = Arc::new(vb.finish(true)?);
    let offset = train_entities as u32;
    let triple = |(h, r, t): Fact, shift: u32| Triple::new(EntityId(h + shift), RelationId(r), EntityId(t + shift));
    let train = Kg::from_base_triples(vocab.clone(), facts.into_iter().map(|f| triple(f, 0)));
    let test = Kg::from_base_triples(vocab, test_facts.into_iter().map(|f| triple(f, offset)));
    Ok(World {
        train,
        test,
        queries,
        rules,
        train_entities,
        distractors,
    })
}

pub fn format_queries(queries: &[PathQuery], vocab: &Vocab) -> String {
    let mut out = String::new();
    for q in queries {
        let body: Vec<&str> = q.body.iter().map(|&r| vocab.relation_name(r)).collect();
        out.push_str(&body.join(","));
        out.push('\t');
        out.push_str(vocab.relation_name(q.gold));
        out.push('\n');
    }
    out
}

/// Writes `train.tsv`, `test.tsv`, `rules.txt` and `queries.tsv` into `dir`.
pub fn write_world(world: &World, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    world.train.write_tsv(dir.join("train.tsv"))?;
    world.test.write_tsv(dir.join("test.tsv"))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("rules.txt", format_rules(&world.rules, world.vocab()))?;
    write("queries.tsv", format_queries(&world.queries, world.vocab()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldSpec {
        WorldSpec {
            entities: 300,
            queries_per_hop: 10,
            seed,
            ..WorldSpec::family()
        }
    }

    #[test]
    fn single_rule_closes_every_pair() {
        let spec = WorldSpec {
            relations: vec!["m".into(), "g".into()],
            axioms: vec![Axiom::new("g", &["m", "m"])],
            entities: 200,
            test_hops: 2..=2,
            queries_per_hop: 5,
            distractor_rate: 0.0,
            ..WorldSpec::family()
        };
        let w = generate(&spec).unwrap();
        let v = w.vocab();
        let (m, g) = (v.relation_id("m").unwrap(), v.relation_id("g").unwrap());
        let mut pairs = 0;
        for t in w.train.triples().iter().filter(|t| t.rel == m) {
            for u in w.train.neighbors_via(t.tail, m) {
                if u.tail != t.head {
                    pairs += 1;
                    assert!(w.train.contains(t.head, g, u.tail));
                }
            }
        }
        assert!(pairs > 0);
        assert!(w.queries.iter().all(|q| q.gold == g && q.body == vec![m, m]));
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let a = generate(&small(3)).unwrap();
        let train: BTreeSet<EntityId> = a.train.triples().iter().flat_map(|t| [t.head, t.tail]).collect();
        let test: BTreeSet<EntityId> = a.test.triples().iter().flat_map(|t| [t.head, t.tail]).collect();
        assert!(!test.is_empty());
        assert!(train.is_disjoint(&test));
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.train.triples(), b.train.triples());
        assert_eq!(a.queries, b.queries);
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.train.triples(), c.train.triples());
    }

    #[test]
    fn queries_cover_requested_hops() {
        let w = generate(&small(1)).unwrap();
        for hops in 5..=10 {
            assert_eq!(w.queries.iter().filter(|q| q.body.len() == hops).count(), 10);
        }
    }

    #[test]
    fn chain_closure_composes() {
        let spec = WorldSpec::family();
        let rules = spec.compiled_rules().unwrap();
        let id = |n: &str| RelationId(spec.relations.iter().position(|r| r == n).unwrap() as u32);
        let got = chain_closure(&[id(MOTHER), id(MOTHER)], &rules);
        assert_eq!(got, BTreeSet::from([id(GRANDMA)]));
        let got = chain_closure(&[id(FATHER), id(WIFE), id(HUSBAND), id(WIFE), id(MOTHER)], &rules);
        assert_eq!(got, BTreeSet::from([id(GRANDMA)]));
        assert!(chain_closure(&[id(HUSBAND), id(WIFE)], &rules).is_empty());
    }

    #[test]
    fn runaway_saturation_names_cycle() {
        let rules = vec![Rule {
            head: RelationId(0),
            body: vec![RelationId(0), RelationId(0)],
            score: 1.0,
        }];
        let mut facts: BTreeSet<Fact> = (0..40).map(|i| (i, 0, i + 1)).collect();
        match saturate(&mut facts, &rules, 200, &["anc".to_string()]) {
            Err(Error::NonTerminating(msg)) => assert!(msg.contains("anc <- anc"), "{msg}"),
            other => panic!("expected runaway error, got {other:?}"),
        }
        let mut facts: BTreeSet<Fact> = (0..40).map(|i| (i, 0, i + 1)).collect();
        saturate(&mut facts, &rules, 10_000, &[]).unwrap();
        assert_eq!(facts.len(), 40 * 41 / 2);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = WorldSpec::family();
        s.axioms.push(Axiom::new(MOTHER, &[FATHER]));
        assert!(generate(&s).is_err());
        let mut s = WorldSpec::family();
        s.axioms.push(Axiom::new("hasCousin", &[FATHER, FATHER]));
        assert!(matches!(generate(&s), Err(Error::UnknownSymbol { .. })));
    }
}
