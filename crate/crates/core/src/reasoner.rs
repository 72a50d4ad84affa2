//! Rule application: forward chaining for link prediction, filtered ranking
//! metrics, and direct relation classification of path queries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Kg, RelationId, Triple, Vocab};
use crate::miner::Rule;
use crate::model::ModelParams;

pub const DEFAULT_FRONTIER_CAP: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Sum of rule score times grounding count.
    Additive,
    /// Best single rule score.
    Max,
    /// `1 - prod (1 - s)^count`.
    NoisyOr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieRule {
    Mean,
    Optimistic,
    Pessimistic,
}

impl TieRule {
    pub fn name(self) -> &'static str {
        match self {
            TieRule::Mean => "mean",
            TieRule::Optimistic => "optimistic",
            TieRule::Pessimistic => "pessimistic",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub aggregation: Aggregation,
    pub frontier_cap: usize,
    pub ties: TieRule,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            aggregation: Aggregation::Additive,
            frontier_cap: DEFAULT_FRONTIER_CAP,
            ties: TieRule::Mean,
        }
    }
}

/// Rules bucketed by head relation.
#[derive(Clone, Debug, Default)]
pub struct RuleSet {
    by_head: Vec<Vec<Rule>>,
}

impl RuleSet {
    pub fn new(rules: &[Rule], num_relations: usize) -> Self {
        let mut by_head = vec![Vec::new(); num_relations];
        for r in rules {
            by_head[r.head.index()].push(r.clone());
        }
        RuleSet { by_head }
    }

    pub fn for_head(&self, r: RelationId) -> &[Rule] {
        self.by_head.get(r.index()).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_head.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parses the `score<TAB>head<TAB>b1,b2,...` rule format; `#` lines are comments.
pub fn parse_rules(text: &str, vocab: &Vocab) -> Result<Vec<Rule>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: "<rules>".into(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let score: f64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad score `{}`", fields[0])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 1]")));
        }
        let head = vocab.lookup_relation(fields[1]).map_err(|e| err(e.to_string()))?;
        let body = fields[2]
            .split(',')
            .map(|b| vocab.lookup_relation(b))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(e.to_string()))?;
        if body.is_empty() {
            return Err(err("empty body".into()));
        }
        out.push(Rule { head, body, score });
    }
    Ok(out)
}

pub fn read_rules(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Rule>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules(&text, vocab).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        },
        other => other,
    })
}

/// Number of distinct groundings of `body` from `start`, per end entity.
/// Returns `None` when a breadth-first layer exceeds `cap` states.
pub fn grounding_counts(kg: &Kg, body: &[RelationId], start: EntityId, cap: usize) -> Option<BTreeMap<EntityId, f64>> {
    let mut frontier: BTreeMap<EntityId, f64> = BTreeMap::new();
    frontier.insert(start, 1.0);
    for &r in body {
        let mut next: BTreeMap<EntityId, f64> = BTreeMap::new();
        for (&e, &count) in &frontier {
            for t in kg.neighbors_via(e, r) {
                *next.entry(t.tail).or_insert(0.0) += count;
            }
            if next.len() > cap {
                return None;
            }
        }
        if next.is_empty() {
            return Some(next);
        }
        frontier = next;
    }
    Some(frontier)
}

/// Candidate scores for the query `(h, r, ?)`, one per entity; zero means
/// unreached.
pub fn chain(kg: &Kg, rules: &[Rule], h: EntityId, cfg: &ChainConfig) -> Vec<f64> {
    let n = kg.num_entities();
    let mut scores = vec![0.0; n];
    let mut log_miss = vec![0.0f64; if cfg.aggregation == Aggregation::NoisyOr { n } else { 0 }];
    for rule in rules {
        let Some(counts) = grounding_counts(kg, &rule.body, h, cfg.frontier_cap) else {
            log::warn!(
                "frontier cap {} hit for a rule of length {}; skipped",
                cfg.frontier_cap,
                rule.body.len()
            );
            continue;
        };
        for (e, count) in counts {
            let i = e.index();
            match cfg.aggregation {
                Aggregation::Additive => scores[i] += rule.score * count,
                Aggregation::Max => scores[i] = scores[i].max(rule.score),
                Aggregation::NoisyOr => log_miss[i] += count * (-rule.score).ln_1p(),
            }
        }
    }
    if cfg.aggregation == Aggregation::NoisyOr {
        for (s, lm) in scores.iter_mut().zip(log_miss) {
            *s = -lm.exp_m1();
        }
    }
    scores
}

/// Rank of `gold` among all entities, skipping those `filtered` says are
/// other true answers.
pub fn rank_of(scores: &[f64], gold: EntityId, ties: TieRule, filtered: impl Fn(usize) -> bool) -> f64 {
    let g = scores[gold.index()];
    let (mut greater, mut equal) = (0usize, 0usize);
    for (i, &s) in scores.iter().enumerate() {
        if i == gold.index() || filtered(i) {
            continue;
        }
        if s > g {
            greater += 1;
        } else if s == g {
            equal += 1;
        }
    }
    let base = greater as f64 + 1.0;
    match ties {
        TieRule::Mean => base + equal as f64 / 2.0,
        TieRule::Optimistic => base,
        TieRule::Pessimistic => base + equal as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Tail,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRank {
    pub triple: Triple,
    pub direction: Direction,
    pub rank: f64,
    pub raw_rank: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub queries: Vec<QueryRank>,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub ties: TieRule,
}

impl RankingReport {
    fn from_queries(queries: Vec<QueryRank>, ties: TieRule) -> Self {
        let n = queries.len() as f64;
        let frac = |k: f64| queries.iter().filter(|q| q.rank <= k).count() as f64 / n;
        RankingReport {
            mrr: queries.iter().map(|q| 1.0 / q.rank).sum::<f64>() / n,
            hits1: frac(1.0),
            hits3: frac(3.0),
            hits10: frac(10.0),
            ties,
            queries,
        }
    }

    /// `MRR`, `Hits@1` and `Hits@10` (the latter two in percent).
    pub fn summary(&self) -> String {
        format!(
            "MRR={:.4} Hits@1={:.2} Hits@10={:.2}",
            self.mrr,
            100.0 * self.hits1,
            100.0 * self.hits10
        )
    }

    pub fn to_csv(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# filter=train+valid+test with inverse triples; ties={}", self.ties.name());
        s.push_str("query,gold,rank\n");
        for q in &self.queries {
            let t = q.triple;
            let (query, gold) = match q.direction {
                Direction::Tail => (
                    format!("{} {} ?", vocab.entity_name(t.head), vocab.relation_name(t.rel)),
                    t.tail,
                ),
                Direction::Head => (
                    format!("? {} {}", vocab.relation_name(t.rel), vocab.entity_name(t.tail)),
                    t.head,
                ),
            };
            let _ = writeln!(s, "{},{},{}", csv_field(&query), csv_field(vocab.entity_name(gold)), q.rank);
        }
        let _ = writeln!(s, "# {}", self.summary());
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn rank_query(
    train: &Kg,
    filter: &Kg,
    rules: &RuleSet,
    from: EntityId,
    rel: RelationId,
    gold: EntityId,
    cfg: &ChainConfig,
) -> (f64, f64) {
    let scores = chain(train, rules.for_head(rel), from, cfg);
    let known = filter.neighbors_via(from, rel);
    let filtered = |i: usize| known.binary_search_by_key(&(i as u32), |t| t.tail.0).is_ok();
    let rank = rank_of(&scores, gold, cfg.ties, filtered);
    let raw = rank_of(&scores, gold, cfg.ties, |_| false);
    (rank, raw)
}

/// Filtered ranking of every test triple in both directions. Head queries
/// `(?, r, t)` are answered as `(t, r_inv, ?)`.
pub fn evaluate_kgc(train: &Kg, filter: &Kg, rules: &[Rule], test: &[Triple], cfg: &ChainConfig) -> Result<RankingReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let vocab = train.vocab();
    if !vocab.has_inverses() {
        return Err(Error::InvalidArgument("head queries need inverse relations".into()));
    }
    let rules = RuleSet::new(rules, vocab.num_relations());
    let queries: Vec<QueryRank> = test
        .par_iter()
        .flat_map_iter(|&t| {
            let inv = vocab.inverse(t.rel).expect("inverses present");
            let (tr, traw) = rank_query(train, filter, &rules, t.head, t.rel, t.tail, cfg);
            let (hr, hraw) = rank_query(train, filter, &rules, t.tail, inv, t.head, cfg);
            [
                QueryRank {
                    triple: t,
                    direction: Direction::Tail,
                    rank: tr,
                    raw_rank: traw,
                },
                QueryRank {
                    triple: t,
                    direction: Direction::Head,
                    rank: hr,
                    raw_rank: hraw,
                },
            ]
        })
        .collect();
    Ok(RankingReport::from_queries(queries, cfg.ties))
}

/// Most probable non-null head for a path body.
pub fn classify_relation(params: &ModelParams, body: &[RelationId]) -> Result<RelationId> {
    let theta = params.predict(body)?;
    Ok(RelationId(crate::model::argmax(&theta[1..]) as u32))
}

/// Path query with a known answer relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathQuery {
    pub body: Vec<RelationId>,
    pub gold: RelationId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InductiveReport {
    pub accuracy: f64,
    /// `(hops, correct, total)` per body length.
    pub by_hops: Vec<(usize, usize, usize)>,
}

impl InductiveReport {
    pub fn accuracy_at(&self, hops: usize) -> Option<f64> {
        self.by_hops
            .iter()
            .find(|(h, _, _)| *h == hops)
            .map(|&(_, c, t)| c as f64 / t as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("hops,correct,total,accuracy\n");
        for &(h, c, t) in &self.by_hops {
            let _ = writeln!(s, "{h},{c},{t},{}", c as f64 / t as f64);
        }
        let _ = writeln!(s, "# accuracy={:.4}", self.accuracy);
        s
    }
}

pub fn evaluate_inductive(params: &ModelParams, queries: &[PathQuery]) -> Result<InductiveReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no path queries".into()));
    }
    let bodies: Vec<&[RelationId]> = queries.iter().map(|q| q.body.as_slice()).collect();
    let theta = params.predict_batch(&bodies)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (q, row) in queries.iter().zip(theta.rows()) {
        let pred = crate::model::argmax(&row.as_slice().expect("contiguous")[1..]);
        let ok = pred == q.gold.index();
        correct += ok as usize;
        let e = per.entry(q.body.len()).or_insert((0, 0));
        e.0 += ok as usize;
        e.1 += 1;
    }
    Ok(InductiveReport {
        accuracy: correct as f64 / queries.len() as f64,
        by_hops: per.into_iter().map(|(h, (c, t))| (h, c, t)).collect(),
    })
}

pub fn parse_queries(text: &str, vocab: &Vocab) -> Result<Vec<PathQuery>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: "<queries>".into(),
            line: i + 1,
            msg,
        };
        let (body, gold) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `body<TAB>gold`".into()))?;
        let body = body
            .split(',')
            .map(|b| vocab.lookup_relation(b))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| err(e.to_string()))?;
        let gold = vocab.lookup_relation(gold).map_err(|e| err(e.to_string()))?;
        out.push(PathQuery { body, gold });
    }
    Ok(out)
}
