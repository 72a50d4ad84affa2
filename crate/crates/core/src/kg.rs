//! Indexed triple store.
//!
//! Relations are laid out as `0..B` for the base relations (first-appearance
//! order) followed by `B..2B` for their inverses when augmentation is on, so
//! `inverse(r) = (r + B) mod 2B`. The null head label is not a relation: it is
//! the extra classifier slot reported by [`Vocab::null_label`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const INVERSE_SUFFIX: &str = "_inv";
const SNAPSHOT_MAGIC: &str = "kgrules-kg";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }
}

/// Entity and relation names with their dense ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    num_base: usize,
    with_inverses: bool,
}

impl Vocab {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of relations after inverse augmentation.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_base_relations(&self) -> usize {
        self.num_base
    }

    pub fn has_inverses(&self) -> bool {
        self.with_inverses
    }

    /// Reserved classifier index for "no relation closes this path".
    pub fn null_label(&self) -> usize {
        self.relations.len()
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        r.index() >= self.num_base
    }

    pub fn inverse(&self, r: RelationId) -> Option<RelationId> {
        if !self.with_inverses {
            return None;
        }
        let b = self.num_base as u32;
        Some(RelationId((r.0 + b) % (2 * b)))
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities[e.index()]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relations[r.index()]
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_ids.get(name).copied()
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    pub fn lookup_relation(&self, name: &str) -> Result<RelationId> {
        self.relation_id(name).ok_or_else(|| Error::UnknownSymbol {
            kind: "relation",
            name: name.to_string(),
        })
    }

    pub fn lookup_entity(&self, name: &str) -> Result<EntityId> {
        self.entity_id(name).ok_or_else(|| Error::UnknownSymbol {
            kind: "entity",
            name: name.to_string(),
        })
    }
}

/// Collects names in first-appearance order.
#[derive(Default)]
pub struct VocabBuilder {
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        id
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        id
    }

    pub fn finish(self, with_inverses: bool) -> Result<Vocab> {
        let num_base = self.relations.len();
        let mut relations = self.relations;
        let mut relation_ids = self.relation_ids;
        if with_inverses {
            for i in 0..num_base {
                let name = format!("{}{}", relations[i], INVERSE_SUFFIX);
                if relation_ids.contains_key(&name) {
                    return Err(Error::InverseNameCollision(name));
                }
                relation_ids.insert(name.clone(), RelationId(relations.len() as u32));
                relations.push(name);
            }
        }
        Ok(Vocab {
            entities: self.entities,
            entity_ids: self.entity_ids,
            relations,
            relation_ids,
            num_base,
            with_inverses,
        })
    }
}

/// Immutable indexed knowledge graph.
///
/// Triples are kept sorted by `(head, rel, tail)` so the outgoing edges of an
/// entity form a contiguous slice ordered by relation.
#[derive(Clone, Debug)]
pub struct Kg {
    vocab: Arc<Vocab>,
    triples: Vec<Triple>,
    offsets: Vec<usize>,
    pair_index: HashMap<(EntityId, EntityId), Vec<RelationId>>,
}

impl Kg {
    /// Builds a graph from base triples, adding inverses when the vocabulary
    /// carries them. Duplicates collapse.
    pub fn from_base_triples(vocab: Arc<Vocab>, base: impl IntoIterator<Item = Triple>) -> Kg {
        let mut triples: Vec<Triple> = Vec::new();
        for t in base {
            triples.push(t);
            if let Some(inv) = vocab.inverse(t.rel) {
                triples.push(Triple::new(t.tail, inv, t.head));
            }
        }
        Self::from_all_triples(vocab, triples)
    }

    fn from_all_triples(vocab: Arc<Vocab>, mut triples: Vec<Triple>) -> Kg {
        triples.sort_unstable();
        triples.dedup();
        let n = vocab.num_entities();
        let mut offsets = vec![0usize; n + 1];
        for t in &triples {
            offsets[t.head.index() + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut pair_index: HashMap<(EntityId, EntityId), Vec<RelationId>> = HashMap::new();
        for t in &triples {
            pair_index.entry((t.head, t.tail)).or_default().push(t.rel);
        }
        Kg {
            vocab,
            triples,
            offsets,
            pair_index,
        }
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn num_entities(&self) -> usize {
        self.vocab.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.vocab.num_relations()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples over base (non-inverse) relations.
    pub fn base_triples(&self) -> impl Iterator<Item = &Triple> + '_ {
        self.triples.iter().filter(|t| !self.vocab.is_inverse(t.rel))
    }

    /// Outgoing `(rel, neighbor)` edges, sorted by relation then neighbor.
    pub fn neighbors(&self, e: EntityId) -> &[Triple] {
        &self.triples[self.offsets[e.index()]..self.offsets[e.index() + 1]]
    }

    pub fn out_degree(&self, e: EntityId) -> usize {
        self.offsets[e.index() + 1] - self.offsets[e.index()]
    }

    /// Outgoing edges of `e` labelled `r`.
    pub fn neighbors_via(&self, e: EntityId, r: RelationId) -> &[Triple] {
        let edges = self.neighbors(e);
        let lo = edges.partition_point(|t| t.rel < r);
        let hi = edges.partition_point(|t| t.rel <= r);
        &edges[lo..hi]
    }

    /// Every relation `r` with `(a, r, b)` in the graph.
    pub fn relations_between(&self, a: EntityId, b: EntityId) -> &[RelationId] {
        self.pair_index
            .get(&(a, b))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn contains(&self, h: EntityId, r: RelationId, t: EntityId) -> bool {
        self.relations_between(h, t).contains(&r)
    }

    /// Drops `round(fraction * n)` base triples chosen uniformly at random,
    /// together with their inverses.
    pub fn remove_fraction(&self, fraction: f64, seed: u64) -> Result<Kg> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "removal fraction {fraction} outside [0, 1]"
            )));
        }
        let mut base: Vec<Triple> = self.base_triples().copied().collect();
        let remove = (fraction * base.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        base.shuffle(&mut rng);
        base.truncate(base.len() - remove.min(base.len()));
        Ok(Kg::from_base_triples(self.vocab.clone(), base))
    }

    /// Union of graphs sharing one vocabulary.
    pub fn union(parts: &[&Kg]) -> Result<Kg> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("union of zero graphs".into()))?;
        let mut triples = Vec::new();
        for kg in parts {
            if !Arc::ptr_eq(&kg.vocab, &first.vocab) && kg.vocab != first.vocab {
                return Err(Error::InvalidArgument(
                    "union of graphs with different vocabularies".into(),
                ));
            }
            triples.extend_from_slice(&kg.triples);
        }
        Ok(Self::from_all_triples(first.vocab.clone(), triples))
    }

    /// Loads a single TSV file.
    pub fn load_tsv(path: impl AsRef<Path>, add_inverses: bool) -> Result<Kg> {
        let mut kgs = load_splits(&[path.as_ref()], add_inverses)?;
        Ok(kgs.remove(0))
    }

    /// Writes base triples as `head<TAB>relation<TAB>tail`.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in self.base_triples() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.vocab.entity_name(t.head),
                self.vocab.relation_name(t.rel),
                self.vocab.entity_name(t.tail)
            )
            .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Versioned text snapshot holding the vocabulary and base triples by id.
    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let v = &self.vocab;
        let mut out = String::new();
        out.push_str(&format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}\n"));
        out.push_str(&format!("inverses {}\n", v.has_inverses()));
        out.push_str(&format!("entities {}\n", v.num_entities()));
        for name in &v.entities {
            out.push_str(name);
            out.push('\n');
        }
        out.push_str(&format!("relations {}\n", v.num_base_relations()));
        for name in &v.relations[..v.num_base] {
            out.push_str(name);
            out.push('\n');
        }
        let base: Vec<&Triple> = self.base_triples().collect();
        out.push_str(&format!("triples {}\n", base.len()));
        for t in base {
            out.push_str(&format!("{} {} {}\n", t.head.0, t.rel.0, t.tail.0));
        }
        w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Kg> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Snapshot(format!("truncated before {what}")))
        };
        let header = next("header")?;
        if header != format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}") {
            return Err(Error::Snapshot(format!("unsupported header `{header}`")));
        }
        let inverses = match next("inverses")? {
            "inverses true" => true,
            "inverses false" => false,
            other => return Err(Error::Snapshot(format!("bad inverses line `{other}`"))),
        };
        let count = |line: &str, key: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Snapshot(format!("expected `{key} <n>`, got `{line}`")))
        };
        let mut builder = VocabBuilder::new();
        let n_ent = count(next("entities")?, "entities")?;
        for _ in 0..n_ent {
            builder.entity(next("entity name")?);
        }
        let n_rel = count(next("relations")?, "relations")?;
        for _ in 0..n_rel {
            builder.relation(next("relation name")?);
        }
        if builder.entities.len() != n_ent || builder.relations.len() != n_rel {
            return Err(Error::Snapshot("duplicate names in vocabulary".into()));
        }
        let vocab = Arc::new(builder.finish(inverses)?);
        let n_tri = count(next("triples")?, "triples")?;
        let mut base = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let line = next("triple")?;
            let ids: Vec<u32> = line
                .split(' ')
                .map(|s| s.parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Snapshot(format!("bad triple line `{line}`")))?;
            if ids.len() != 3
                || ids[0] as usize >= n_ent
                || ids[1] as usize >= n_rel
                || ids[2] as usize >= n_ent
            {
                return Err(Error::Snapshot(format!("bad triple line `{line}`")));
            }
            base.push(Triple::new(EntityId(ids[0]), RelationId(ids[1]), EntityId(ids[2])));
        }
        Ok(Kg::from_base_triples(vocab, base))
    }
}

fn read_tsv(path: &Path, builder: &mut VocabBuilder) -> Result<Vec<Triple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let h = builder.entity(fields[0]);
        let r = builder.relation(fields[1]);
        let t = builder.entity(fields[2]);
        out.push(Triple::new(h, r, t));
    }
    if out.is_empty() {
        return Err(Error::EmptyGraph(path.to_path_buf()));
    }
    Ok(out)
}

/// Loads several TSV files (e.g. train/valid/test) into graphs sharing one
/// vocabulary. Ids follow first appearance across the files in order.
pub fn load_splits<P: AsRef<Path>>(paths: &[P], add_inverses: bool) -> Result<Vec<Kg>> {
    let mut builder = VocabBuilder::new();
    let mut raw = Vec::with_capacity(paths.len());
    for p in paths {
        raw.push(read_tsv(p.as_ref(), &mut builder)?);
    }
    let vocab = Arc::new(builder.finish(add_inverses)?);
    Ok(raw
        .into_iter()
        .map(|base| Kg::from_base_triples(vocab.clone(), base))
        .collect())
}
