//! Cross-entropy training with Adam.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{Kg, RelationId};
use crate::model::{group_by_len, Gradients, ModelConfig, ModelParams, Selection};
use crate::sampler::{sample_paths, PathSample, SamplerConfig};

/// Samples per gradient shard. Fixed so the reduction order, and therefore
/// the result, does not depend on the thread count.
const SHARD: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dim: usize,
    pub hidden: usize,
    pub window_size: usize,
    pub init_scale: f64,
    pub selection: Selection,
    pub n_max: usize,
    pub open_ratio: f64,
    pub samples: usize,
    pub no_backtrack: bool,
    /// Epochs between fresh path samples; `None` samples once.
    pub resample_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("family").expect("known preset")
    }
}

impl TrainConfig {
    /// Published settings for the standard benchmarks.
    pub fn preset(name: &str) -> Result<Self> {
        let (batch, dim, epochs, lr) = match name {
            "family" => (500, 512, 1000, 1e-4),
            "kinship" => (1000, 1024, 2000, 2.5e-4),
            "umls" => (1000, 512, 2000, 2.5e-4),
            "wn18rr" => (5000, 1024, 2000, 1e-4),
            other => return Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        };
        Ok(TrainConfig {
            batch_size: batch,
            epochs,
            learning_rate: lr,
            seed: 0,
            dim,
            hidden: dim,
            window_size: 2,
            init_scale: 1.0,
            selection: Selection::Hard,
            n_max: 3,
            open_ratio: 0.1,
            samples: 10_000,
            no_backtrack: true,
            resample_every: None,
            checkpoint_every: None,
            threads: 1,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            window_size: self.window_size,
            hidden: self.hidden,
            init_scale: self.init_scale,
            selection: self.selection,
        }
    }

    pub fn sampler_config(&self, round: u64) -> SamplerConfig {
        SamplerConfig {
            n_max: self.n_max,
            open_ratio: self.open_ratio,
            count: self.samples,
            seed: self.seed.wrapping_add(round),
            no_backtrack: self.no_backtrack,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.sampler_config(0).validate()?;
        if self.batch_size == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument("batch size and sample count must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be non-negative".into()));
        }
        if self.resample_every == Some(0) || self.checkpoint_every == Some(0) {
            return Err(Error::InvalidArgument("epoch intervals must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "preset" => {
                let seed = self.seed;
                *self = Self::preset(v)?;
                self.seed = seed;
            }
            "batch_size" | "batch" => self.batch_size = p(key, v)?,
            "epochs" => self.epochs = p(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "dim" | "d" => {
                let hidden_tracks = self.hidden == self.dim;
                self.dim = p(key, v)?;
                if hidden_tracks {
                    self.hidden = self.dim;
                }
            }
            "hidden" => self.hidden = p(key, v)?,
            "window_size" => self.window_size = p(key, v)?,
            "init_scale" => self.init_scale = p(key, v)?,
            "selection" => {
                self.selection = match v {
                    "hard" => Selection::Hard,
                    "soft" => Selection::Soft,
                    _ => return Err(Error::InvalidArgument(format!("bad selection `{v}`"))),
                }
            }
            "n_max" | "max_len" => self.n_max = p(key, v)?,
            "open_ratio" => self.open_ratio = p(key, v)?,
            "samples" => self.samples = p(key, v)?,
            "no_backtrack" => self.no_backtrack = p(key, v)?,
            "resample_every" => {
                self.resample_every = match v {
                    "inf" | "none" => None,
                    _ => Some(p(key, v)?),
                }
            }
            "checkpoint_every" => {
                self.checkpoint_every = match v {
                    "none" => None,
                    _ => Some(p(key, v)?),
                }
            }
            "threads" => self.threads = p(key, v)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` lines; `#` starts a comment. Keys the trainer
    /// does not know are returned for other stages to consume.
    pub fn apply_text(&mut self, text: &str, known_elsewhere: &[&str]) -> Result<Vec<(String, String)>> {
        let mut rest = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key=value", i + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if known_elsewhere.contains(&k) {
                rest.push((k.to_string(), v.to_string()));
            } else {
                self.set(k, v)?;
            }
        }
        Ok(rest)
    }

    pub fn to_text(&self) -> String {
        let sel = match self.selection {
            Selection::Hard => "hard",
            Selection::Soft => "soft",
        };
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "hidden={}", self.hidden);
        let _ = writeln!(s, "window_size={}", self.window_size);
        let _ = writeln!(s, "init_scale={}", self.init_scale);
        let _ = writeln!(s, "selection={sel}");
        let _ = writeln!(s, "n_max={}", self.n_max);
        let _ = writeln!(s, "open_ratio={}", self.open_ratio);
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "no_backtrack={}", self.no_backtrack);
        let _ = writeln!(s, "resample_every={}", opt(self.resample_every));
        let _ = writeln!(s, "checkpoint_every={}", opt(self.checkpoint_every));
        s
    }

    /// Short digest of the canonical settings, excluding the thread count.
    pub fn hash(&self) -> String {
        config_hash(&self.to_text())
    }
}

pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,seconds\n");
    for e in log {
        let _ = writeln!(s, "{},{},{:.3}", e.epoch, e.loss, e.seconds);
    }
    s
}

fn split_batch<'a>(batch: &[&'a PathSample]) -> Vec<(Vec<&'a [RelationId]>, Vec<usize>)> {
    let bodies: Vec<&[RelationId]> = batch.iter().map(|s| s.body.as_slice()).collect();
    let mut shards = Vec::new();
    for (_, idx) in group_by_len(&bodies) {
        for chunk in idx.chunks(SHARD) {
            shards.push((
                chunk.iter().map(|&i| bodies[i]).collect(),
                chunk.iter().map(|&i| batch[i].label()).collect(),
            ));
        }
    }
    shards
}

fn check_batch(params: &ModelParams, batch: &[&PathSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let r = params.num_relations();
    for s in batch {
        if s.body.len() < 2 || s.body.iter().chain(s.head.iter()).any(|x| x.index() >= r) {
            return Err(Error::InvalidArgument(format!("sample {:?} does not fit the model", s.body)));
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels.
pub fn loss(params: &ModelParams, batch: &[&PathSample]) -> Result<f64> {
    check_batch(params, batch)?;
    let total: f64 = split_batch(batch)
        .iter()
        .map(|(b, y)| params.loss_sum(b, y))
        .sum::<Result<f64>>()?;
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(mean)
}

/// Mean loss and its exact gradient. Shards run on the current rayon pool
/// and are summed in a fixed order.
pub fn loss_and_grad(params: &ModelParams, batch: &[&PathSample]) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    let n = batch.len() as f64;
    let parts: Vec<(f64, Gradients)> = split_batch(batch)
        .par_iter()
        .map(|(b, y)| params.loss_and_grad_group(b, y, n))
        .collect();
    let mut iter = parts.into_iter();
    let (mut total, mut g) = iter.next().expect("non-empty batch");
    for (l, part) in iter {
        total += l;
        g.add_scaled(&part, 1.0);
    }
    let mean = total / n;
    if !mean.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if let Some(name) = g.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok((mean, g))
}

pub fn grad(params: &ModelParams, batch: &[&PathSample]) -> Result<Gradients> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, g: &Gradients) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let eps = self.eps;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Trains on a fixed sample set.
///
/// `on_epoch` sees every finished epoch and may write checkpoints.
pub fn fit_samples(
    samples: &[PathSample],
    num_relations: usize,
    cfg: &TrainConfig,
    mut resample: impl FnMut(usize) -> Result<Option<Vec<PathSample>>>,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut params = ModelParams::init(cfg.model_config(), num_relations, cfg.seed)?;
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut data: Vec<PathSample> = samples.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    for epoch in 1..=cfg.epochs {
        if let Some(fresh) = resample(epoch)? {
            data = fresh;
        }
        let start = Instant::now();
        let last_good = params.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PathSample> = chunk.iter().map(|&i| &data[i]).collect();
            let step = pool.install(|| loss_and_grad(&params, &batch));
            let (l, g) = match step {
                Ok(x) => x,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            total += l * batch.len() as f64;
            adam.step(&mut params, &g);
        }
        if params.first_non_finite().is_some() {
            return Err(Error::Diverged {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        let entry = EpochLog {
            epoch,
            loss: total / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} loss {:.6} ({:.2}s)", entry.epoch, entry.loss, entry.seconds);
        on_epoch(&entry, &params)?;
        log.push(entry);
    }
    Ok((params, log))
}

/// Samples paths from `kg` and trains on them.
pub fn fit(
    kg: &Kg,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    let threads = cfg.threads;
    let sample = |round: u64| -> Result<Vec<PathSample>> {
        crate::parallel::with_threads(threads, || sample_paths(kg, &cfg.sampler_config(round)))
    };
    let initial = sample(0)?;
    let resample = |epoch: usize| -> Result<Option<Vec<PathSample>>> {
        match cfg.resample_every {
            Some(k) if epoch > 1 && (epoch - 1).is_multiple_of(k) => Ok(Some(sample(epoch as u64)?)),
            _ => Ok(None),
        }
    };
    fit_samples(&initial, kg.num_relations(), cfg, resample, on_epoch)
}

/// Checkpoint callback writing `epoch_<n>.ckpt` under `dir`.
pub fn checkpoint_every<'a>(
    dir: &'a Path,
    every: Option<usize>,
) -> impl FnMut(&EpochLog, &ModelParams) -> Result<()> + 'a {
    move |entry, params| {
        if let Some(k) = every {
            if entry.epoch % k == 0 {
                params.save(dir.join(format!("epoch_{}.ckpt", entry.epoch)))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(r: usize, n: usize, lens: std::ops::RangeInclusive<usize>, seed: u64) -> Vec<PathSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(lens.clone());
                let head = rng.gen_range(0..=r);
                PathSample {
                    body: (0..len).map(|_| RelationId(rng.gen_range(0..r as u32))).collect(),
                    head: (head > 0).then(|| RelationId(head as u32 - 1)),
                    endpoints: None,
                }
            })
            .collect()
    }

    fn max_rel_error(p: &ModelParams, batch: &[&PathSample]) -> f64 {
        let g = grad(p, batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (t, (name, gt)) in g.tensors().into_iter().enumerate() {
            for (i, &a) in gt.iter().enumerate() {
                let mut plus = p.clone();
                plus.tensors_mut()[t].1[i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t].1[i] -= h;
                let num = (loss(&plus, batch).unwrap() - loss(&minus, batch).unwrap()) / (2.0 * h);
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{i}]: analytic {a} numeric {num}");
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (k, s) in [(0u64, 2usize), (1, 3)] {
            for sel in [Selection::Hard, Selection::Soft] {
                let mut cfg = ModelConfig::new(4);
                cfg.window_size = s;
                cfg.hidden = 3;
                cfg.selection = sel;
                let mut p = ModelParams::init(cfg, 3, k).unwrap();
                p.b.mapv_inplace(|_| 0.1);
                p.h0.mapv_inplace(|_| -0.2);
                p.sel_b1.mapv_inplace(|_| 0.05);
                let data = random_batch(3, 6, 2..=5, k + 10);
                let batch: Vec<&PathSample> = data.iter().collect();
                max_rel_error(&p, &batch);
            }
        }
    }

    #[test]
    fn loss_of_duplicates_and_uniform_baseline() {
        let p = ModelParams::init(ModelConfig::new(8), 5, 0).unwrap();
        let data = random_batch(5, 1000, 2..=4, 3);
        let one = [&data[0]];
        let two = [&data[0], &data[0]];
        assert_eq!(loss(&p, &one).unwrap(), loss(&p, &two).unwrap());
        let all: Vec<&PathSample> = data.iter().collect();
        let l = loss(&p, &all).unwrap();
        assert!((l - 6f64.ln()).abs() < 0.1 * 6f64.ln());
        assert!(loss(&p, &[]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let p0 = ModelParams::init(ModelConfig::new(6), 4, 1).unwrap();
        let data = random_batch(4, 20, 2..=4, 9);
        let batch: Vec<&PathSample> = data.iter().collect();
        let mut p = p0.clone();
        let mut adam = Adam::new(&p, 0.0);
        let g = grad(&p, &batch).unwrap();
        adam.step(&mut p, &g);
        assert_eq!(loss(&p, &batch).unwrap(), loss(&p0, &batch).unwrap());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig::preset("umls").unwrap();
        cfg.resample_every = Some(7);
        cfg.selection = Selection::Soft;
        let mut back = TrainConfig::preset("family").unwrap();
        back.apply_text(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(back.set("nope", "1").is_err());
        assert!(back.set("epochs", "x").is_err());
    }
}
