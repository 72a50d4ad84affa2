//! Random-walk path sampling.
//!
//! A walk starts from a uniformly drawn entity and follows uniformly drawn
//! outgoing edges. After every step `i >= 2` the endpoints `(x0, xi)` are
//! looked up in the pair index; each relation that connects them yields a
//! closed sample `(body, head)`. A walk contributes at most one open sample,
//! at a length drawn when the walk starts. Samples are produced in fixed-size
//! chunks, each with its own random stream and open quota, so the output does
//! not depend on the number of worker threads.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kg::{EntityId, Kg, RelationId, Triple, Vocab};

pub const NULL_TOKEN: &str = "NULL";

/// Walks attempted per requested sample before a chunk gives up.
const ATTEMPTS_PER_SAMPLE: usize = 200;
const MIN_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PathSample {
    pub body: Vec<RelationId>,
    /// `None` is the null label: no relation closes the path.
    pub head: Option<RelationId>,
    /// Walk endpoints, when known (not kept in dumps).
    pub endpoints: Option<(EntityId, EntityId)>,
}

impl PathSample {
    /// Class index in the model output: 0 for null, `1 + r` otherwise.
    pub fn label(&self) -> usize {
        self.head.map_or(0, |r| r.index() + 1)
    }

    pub fn is_open(&self) -> bool {
        self.head.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    /// Maximum walk length in edges.
    pub n_max: usize,
    pub open_ratio: f64,
    pub count: usize,
    pub seed: u64,
    /// Forbid stepping straight back over the inverse of the last edge.
    pub no_backtrack: bool,
    pub chunk_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_max: 3,
            open_ratio: 0.1,
            count: 10_000,
            seed: 0,
            no_backtrack: true,
            chunk_size: 1024,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 2 {
            return Err(Error::InvalidArgument(format!(
                "maximum path length must be at least 2, got {}",
                self.n_max
            )));
        }
        if !(0.0..1.0).contains(&self.open_ratio) {
            return Err(Error::InvalidArgument(format!(
                "open ratio must lie in [0, 1), got {}",
                self.open_ratio
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidArgument("chunk size must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform transition distribution over the outgoing edge slots of `current`.
pub fn step_distribution(kg: &Kg, current: EntityId) -> Vec<(Triple, f64)> {
    let edges = kg.neighbors(current);
    let p = 1.0 / edges.len() as f64;
    edges.iter().map(|&t| (t, p)).collect()
}

fn choose_step(
    kg: &Kg,
    at: EntityId,
    came_by: Option<&Triple>,
    no_backtrack: bool,
    rng: &mut ChaCha8Rng,
) -> Option<Triple> {
    let edges = kg.neighbors(at);
    let banned = match (no_backtrack, came_by) {
        (true, Some(prev)) => kg
            .vocab()
            .inverse(prev.rel)
            .map(|inv| Triple::new(at, inv, prev.head)),
        _ => None,
    };
    match banned {
        Some(b) if edges.binary_search(&b).is_ok() => {
            if edges.len() == 1 {
                return None;
            }
            let skip = edges.binary_search(&b).unwrap();
            let mut k = rng.gen_range(0..edges.len() - 1);
            if k >= skip {
                k += 1;
            }
            Some(edges[k])
        }
        _ if edges.is_empty() => None,
        _ => Some(edges[rng.gen_range(0..edges.len())]),
    }
}

struct ChunkQuota {
    want: usize,
    open_cap: usize,
    open: usize,
    closed: usize,
}

impl ChunkQuota {
    fn done(&self) -> bool {
        self.open + self.closed >= self.want
    }
    fn take_closed(&mut self, relaxed: bool) -> bool {
        let cap = if relaxed {
            self.want - self.open
        } else {
            self.want - self.open_cap
        };
        if self.closed < cap && !self.done() {
            self.closed += 1;
            true
        } else {
            false
        }
    }
    fn take_open(&mut self) -> bool {
        if self.open < self.open_cap && !self.done() {
            self.open += 1;
            true
        } else {
            false
        }
    }
}

fn sample_chunk(kg: &Kg, cfg: &SamplerConfig, chunk: u64, want: usize) -> Result<Vec<PathSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chunk);
    let mut quota = ChunkQuota {
        want,
        open_cap: (cfg.open_ratio * want as f64).floor() as usize,
        open: 0,
        closed: 0,
    };
    let max_attempts = (want * ATTEMPTS_PER_SAMPLE).max(MIN_ATTEMPTS);
    let n = kg.num_entities() as u32;
    let mut out = Vec::with_capacity(want);
    let mut attempts = 0;
    let mut path: Vec<Triple> = Vec::with_capacity(cfg.n_max);
    while !quota.done() {
        if attempts >= max_attempts {
            return Err(Error::SamplingExhausted {
                wanted: want,
                got: out.len(),
                attempts,
            });
        }
        attempts += 1;
        // Past half the budget, let closed samples fill the open share.
        let relaxed = attempts * 2 > max_attempts;
        let source = EntityId(rng.gen_range(0..n));
        let open_len = rng.gen_range(2..=cfg.n_max);
        path.clear();
        let mut at = source;
        for i in 1..=cfg.n_max {
            let Some(edge) = choose_step(kg, at, path.last(), cfg.no_backtrack, &mut rng) else {
                break;
            };
            path.push(edge);
            at = edge.tail;
            if i < 2 {
                continue;
            }
            let heads = kg.relations_between(source, at);
            let body: Vec<RelationId> = path.iter().map(|t| t.rel).collect();
            if heads.is_empty() {
                if i == open_len && quota.take_open() {
                    out.push(PathSample {
                        body,
                        head: None,
                        endpoints: Some((source, at)),
                    });
                }
            } else {
                for &h in heads {
                    if quota.take_closed(relaxed) {
                        out.push(PathSample {
                            body: body.clone(),
                            head: Some(h),
                            endpoints: Some((source, at)),
                        });
                    }
                }
            }
            if quota.done() {
                break;
            }
        }
    }
    Ok(out)
}

/// Draws exactly `cfg.count` labelled path samples.
pub fn sample_paths(kg: &Kg, cfg: &SamplerConfig) -> Result<Vec<PathSample>> {
    cfg.validate()?;
    if kg.is_empty() {
        return Err(Error::InvalidArgument("cannot sample paths from an empty graph".into()));
    }
    let chunks: Vec<(u64, usize)> = (0..cfg.count.div_ceil(cfg.chunk_size))
        .map(|c| {
            let start = c * cfg.chunk_size;
            (c as u64, cfg.chunk_size.min(cfg.count - start))
        })
        .collect();
    let parts: Vec<Result<Vec<PathSample>>> = chunks
        .par_iter()
        .map(|&(c, want)| sample_chunk(kg, cfg, c, want))
        .collect();
    let mut out = Vec::with_capacity(cfg.count);
    for part in parts {
        match part {
            Ok(v) => out.extend(v),
            Err(Error::SamplingExhausted { attempts, .. }) => {
                return Err(Error::SamplingExhausted {
                    wanted: cfg.count,
                    got: out.len(),
                    attempts,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Writes samples as `head<TAB>b1,b2,...` with `NULL` for the null label.
pub fn write_samples(path: impl AsRef<Path>, vocab: &Vocab, samples: &[PathSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let head = s.head.map_or(NULL_TOKEN, |r| vocab.relation_name(r));
        let body: Vec<&str> = s.body.iter().map(|&r| vocab.relation_name(r)).collect();
        writeln!(w, "{head}\t{}", body.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<PathSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (head, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `head<TAB>body`".into()))?;
        let head = if head == NULL_TOKEN {
            None
        } else {
            Some(vocab.lookup_relation(head).map_err(|e| parse_err(e.to_string()))?)
        };
        let body = body
            .split(',')
            .map(|b| vocab.lookup_relation(b))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| parse_err(e.to_string()))?;
        if body.len() < 2 {
            return Err(parse_err("body must have at least two relations".into()));
        }
        out.push(PathSample {
            body,
            head,
            endpoints: None,
        });
    }
    Ok(out)
}
