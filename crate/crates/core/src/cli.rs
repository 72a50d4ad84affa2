//! Command-line interface.
//!
//! Every flag also exists as a `key=value` line in the file given to
//! `--config` (dashes become underscores); flags win over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::kg::{load_splits, Kg};
use crate::miner::{format_rules, mine, CandidateSource, MinerConfig};
use crate::model::{export_attention, ModelParams};
use crate::parallel::with_threads;
use crate::reasoner::{evaluate_inductive, evaluate_kgc, parse_queries, read_rules, Aggregation, ChainConfig, TieRule};
use crate::sampler::{read_samples, sample_paths, write_samples};
use crate::synth::{generate, write_world, WorldSpec};
use crate::trainer::{checkpoint_every, config_hash, fit, fit_samples, log_csv, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "kgrules", version, about = "Learn chain rules from knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a TSV graph and write a snapshot.
    Ingest(IngestArgs),
    /// Sample closed and open paths and write them as a dump.
    Sample(SampleArgs),
    /// Train a model; prints the per-epoch CSV log.
    Train(TrainArgs),
    /// Extract the top rules per head from a checkpoint.
    Mine(MineArgs),
    /// Rank test triples with mined rules (filtered MRR and Hits@k).
    EvalKgc(EvalKgcArgs),
    /// Classify the relation of path queries with a checkpoint.
    EvalInductive(EvalInductiveArgs),
    /// Generate a synthetic kinship world.
    GenWorld(GenWorldArgs),
    /// Write the pairwise attention matrix as CSV.
    ExportAttn(ExportAttnArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// File of key=value settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default 1).
    #[arg(long)]
    threads: Option<usize>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    /// Graph in TSV form (head, relation, tail).
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Do not add inverse relations.
    #[arg(long)]
    no_inverses: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Graph as TSV or snapshot.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Longest sampled body.
    #[arg(long)]
    max_len: Option<usize>,
    /// Share of open (null-labelled) samples.
    #[arg(long)]
    open_ratio: Option<f64>,
    /// Number of samples.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Graph as TSV or snapshot.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Train on a sample dump instead of sampling the graph.
    #[arg(long)]
    sample_file: Option<PathBuf>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Longest sampled body.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    open_ratio: Option<f64>,
    /// Number of training samples.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Longest rule body.
    #[arg(long)]
    max_len: Option<usize>,
    /// Rules kept per head.
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalKgcArgs {
    #[command(flatten)]
    common: Common,
    /// Training graph (TSV); the rules are grounded here.
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Rule file written by `mine`.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Test triples (TSV).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Further known-true triples removed in the filtered setting.
    #[arg(long, num_args = 1..)]
    filter: Vec<PathBuf>,
    /// additive, max or noisy-or.
    #[arg(long)]
    aggregation: Option<String>,
}

#[derive(Args, Debug)]
struct EvalInductiveArgs {
    #[command(flatten)]
    common: Common,
    /// Graph the checkpoint was trained on (for relation names).
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query file, `b1,...,bk<TAB>gold` per line.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenWorldArgs {
    #[command(flatten)]
    common: Common,
    /// Training entities.
    #[arg(long)]
    entities: Option<usize>,
    /// Test queries per hop count.
    #[arg(long)]
    queries_per_hop: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportAttnArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Leave out the null column and renormalise.
    #[arg(long)]
    no_null: bool,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

type Run<T = ()> = std::result::Result<T, Failure>;

/// Merged settings: config file first, then flags.
struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn new(common: &Common) -> Run<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(existing(path)?).map_err(|e| Error::io(path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
                values.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        let mut s = Settings { values };
        s.flag("seed", common.seed);
        s.flag("threads", common.threads);
        s.flag("out", common.out.as_ref().map(|p| p.display()));
        Ok(s)
    }

    fn flag(&mut self, key: &str, v: Option<impl ToString>) {
        if let Some(v) = v {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.flag(key, v.as_ref().map(|p| p.display()));
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Run<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Usage(format!("bad value `{v}` for {key}")).into()),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Run<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required(&self, key: &str) -> Run<PathBuf> {
        self.values
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Usage(format!("missing --{}", key.replace('_', "-"))).into())
    }

    fn input(&self, key: &str) -> Run<PathBuf> {
        let p = self.required(key)?;
        existing(&p)?;
        Ok(p)
    }

    fn threads(&self) -> Run<usize> {
        self.or("threads", 1)
    }
}

fn existing(p: &Path) -> std::result::Result<&Path, Usage> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Usage(format!("no such file: {}", p.display())))
    }
}

/// Reads a snapshot or a TSV file (inverses added).
fn load_graph(path: &Path) -> Result<Kg> {
    let head = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if head.starts_with(b"kgrules-kg") {
        Kg::load_snapshot(path)
    } else {
        Kg::load_tsv(path, true)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Hash of the settings a stage ran with, in key order.
/// Hash of the settings that shape a stage's output; file locations and the
/// thread count are left out so reruns elsewhere stamp the same value.
fn stamp(values: &BTreeMap<String, String>, stage: &str) -> String {
    const IGNORED: [&str; 6] = ["threads", "out", "config", "kg", "checkpoint", "sample_file"];
    let mut text = format!("stage={stage}\n");
    for (k, v) in values.iter().filter(|(k, _)| !IGNORED.contains(&k.as_str())) {
        text.push_str(&format!("{k}={v}\n"));
    }
    config_hash(&text)
}

fn ingest(a: IngestArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    if a.no_inverses {
        s.flag("no_inverses", Some(true));
    }
    let kg = Kg::load_tsv(s.input("kg")?, !s.or("no_inverses", false)?)?;
    let out = s.required("out")?;
    kg.save_snapshot(&out)?;
    println!(
        "entities={} relations={} triples={}",
        kg.num_entities(),
        kg.vocab().num_base_relations(),
        kg.base_triples().count()
    );
    Ok(())
}

/// Settings consumed by stages other than training.
const NON_TRAINING_KEYS: &[&str] = &[
    "kg", "out", "sample_file", "config", "checkpoint", "rules", "test", "filter", "queries", "top_k",
    "aggregation", "candidates", "entities", "queries_per_hop", "distractor_rate", "no_null", "no_inverses",
];

fn train_config(s: &Settings) -> Run<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut keys: Vec<(&String, &String)> = s.values.iter().collect();
    // A preset resets everything else, so it goes first.
    keys.sort_by_key(|(k, _)| k.as_str() != "preset");
    for (k, v) in keys {
        if !NON_TRAINING_KEYS.contains(&k.as_str()) {
            cfg.set(k, v).map_err(|e| Usage(e.to_string()))?;
        }
    }
    cfg.validate().map_err(|e| Usage(e.to_string()))?;
    Ok(cfg)
}

fn sample(a: SampleArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    s.flag("max_len", a.max_len);
    s.flag("open_ratio", a.open_ratio);
    s.flag("samples", a.samples);
    let cfg = train_config(&s)?;
    let kg = load_graph(&s.input("kg")?)?;
    let out = s.required("out")?;
    let samples = with_threads(cfg.threads, || sample_paths(&kg, &cfg.sampler_config(0)))?;
    write_samples(&out, kg.vocab(), &samples)?;
    let open = samples.iter().filter(|p| p.is_open()).count();
    println!("samples={} open={} config={}", samples.len(), open, cfg.hash());
    Ok(())
}

fn train(a: TrainArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    s.path("sample_file", &a.sample_file);
    s.flag("window_size", a.window_size);
    s.flag("dim", a.dim);
    s.flag("epochs", a.epochs);
    s.flag("batch", a.batch);
    s.flag("lr", a.lr);
    s.flag("max_len", a.max_len);
    s.flag("open_ratio", a.open_ratio);
    s.flag("samples", a.samples);
    let cfg = train_config(&s)?;
    let kg = load_graph(&s.input("kg")?)?;
    let dump = match s.values.contains_key("sample_file") {
        true => Some(s.input("sample_file")?),
        false => None,
    };
    let out = s.required("out")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let hash = cfg.hash();
    write(&out.join("config.txt"), &format!("{}config_hash={hash}\n", cfg.to_text()))?;
    let on_epoch = checkpoint_every(&out, cfg.checkpoint_every);
    let result = match dump {
        Some(path) => {
            let samples = read_samples(&path, kg.vocab())?;
            fit_samples(&samples, kg.num_relations(), &cfg, |_| Ok(None), on_epoch)
        }
        None => fit(&kg, &cfg, on_epoch),
    };
    let (params, log) = match result {
        Ok(x) => x,
        Err(Error::Diverged { epoch, last_good }) => {
            last_good.save(out.join("last_good.ckpt"))?;
            return Err(Error::NonFinite(format!("training at epoch {epoch}; last good weights kept")).into());
        }
        Err(e) => return Err(e.into()),
    };
    params.save(out.join("model.ckpt"))?;
    let csv = log_csv(&log);
    write(&out.join("train_log.csv"), &csv)?;
    println!("# config={hash}");
    print!("{csv}");
    Ok(())
}

fn mine_cmd(a: MineArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    s.path("checkpoint", &a.checkpoint);
    s.flag("max_len", a.max_len);
    s.flag("top_k", a.top_k);
    let kg = load_graph(&s.input("kg")?)?;
    let params = ModelParams::load(s.input("checkpoint")?)?;
    if params.num_relations() != kg.num_relations() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} relations, graph has {}",
            params.num_relations(),
            kg.num_relations()
        ))
        .into());
    }
    let defaults = MinerConfig::default();
    let cfg = MinerConfig {
        max_len: s.or("max_len", defaults.max_len)?,
        top_k: s.or("top_k", defaults.top_k)?,
        source: match s.get::<String>("candidates")?.as_deref() {
            None | Some("auto") => CandidateSource::Auto,
            Some("enumerate") => CandidateSource::Enumerate,
            Some("sampled") => CandidateSource::SampledPaths,
            Some(other) => return Err(Usage(format!("unknown candidate source `{other}`")).into()),
        },
        seed: s.or("seed", 0)?,
        ..defaults
    };
    let rules = with_threads(s.threads()?, || mine(&params, &kg, &cfg))?;
    let out = s.required("out")?;
    let hash = stamp(&s.values, "mine");
    write(&out, &format!("# config={hash}\n{}", format_rules(&rules, kg.vocab())))?;
    println!("rules={} config={hash}", rules.len());
    Ok(())
}

fn eval_kgc(a: EvalKgcArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    s.path("rules", &a.rules);
    s.path("test", &a.test);
    s.flag("aggregation", a.aggregation);
    let mut paths = vec![s.input("kg")?, s.input("test")?];
    for f in &a.filter {
        paths.push(existing(f)?.to_path_buf());
    }
    if let Some(extra) = s.values.get("filter").filter(|_| a.filter.is_empty()) {
        for f in extra.split(',') {
            paths.push(existing(Path::new(f.trim()))?.to_path_buf());
        }
    }
    let splits = load_splits(&paths, true)?;
    let (train, test) = (&splits[0], &splits[1]);
    let rules = read_rules(s.input("rules")?, train.vocab())?;
    let filter = Kg::union(&splits.iter().collect::<Vec<_>>())?;
    let aggregation = match s.get::<String>("aggregation")?.as_deref() {
        None | Some("additive") => Aggregation::Additive,
        Some("max") => Aggregation::Max,
        Some("noisy-or") | Some("noisy_or") => Aggregation::NoisyOr,
        Some(other) => return Err(Usage(format!("unknown aggregation `{other}`")).into()),
    };
    let cfg = ChainConfig {
        aggregation,
        ties: TieRule::Mean,
        ..ChainConfig::default()
    };
    let queries: Vec<_> = test.base_triples().copied().collect();
    let report = with_threads(s.threads()?, || evaluate_kgc(train, &filter, &rules, &queries, &cfg))?;
    if let Some(out) = s.values.get("out") {
        write(Path::new(out), &report.to_csv(train.vocab()))?;
    }
    println!("{}", report.summary());
    Ok(())
}

fn eval_inductive(a: EvalInductiveArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    s.path("checkpoint", &a.checkpoint);
    s.path("queries", &a.queries);
    let kg = load_graph(&s.input("kg")?)?;
    let params = ModelParams::load(s.input("checkpoint")?)?;
    let qpath = s.input("queries")?;
    let text = std::fs::read_to_string(&qpath).map_err(|e| Error::io(&qpath, e))?;
    let queries = parse_queries(&text, kg.vocab())?;
    let report = evaluate_inductive(&params, &queries)?;
    if let Some(out) = s.values.get("out") {
        write(Path::new(out), &report.to_csv())?;
    }
    println!("accuracy={:.4} queries={}", report.accuracy, queries.len());
    Ok(())
}

fn gen_world(a: GenWorldArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.flag("entities", a.entities);
    s.flag("queries_per_hop", a.queries_per_hop);
    let d = WorldSpec::family();
    let spec = WorldSpec {
        entities: s.or("entities", d.entities)?,
        queries_per_hop: s.or("queries_per_hop", d.queries_per_hop)?,
        distractor_rate: s.or("distractor_rate", d.distractor_rate)?,
        seed: s.or("seed", d.seed)?,
        ..d
    };
    let world = generate(&spec)?;
    let out = s.required("out")?;
    write_world(&world, &out)?;
    println!(
        "entities={} triples={} queries={} rules={}",
        world.train_entities,
        world.train.base_triples().count(),
        world.queries.len(),
        world.rules.len()
    );
    Ok(())
}

fn export_attn(a: ExportAttnArgs) -> Run {
    let mut s = Settings::new(&a.common)?;
    s.path("kg", &a.kg);
    s.path("checkpoint", &a.checkpoint);
    if a.no_null {
        s.flag("no_null", Some(true));
    }
    let kg = load_graph(&s.input("kg")?)?;
    let params = ModelParams::load(s.input("checkpoint")?)?;
    let csv = export_attention(&params, kg.vocab(), !s.or("no_null", false)?)?;
    match s.values.get("out") {
        Some(out) => write(Path::new(out), &csv)?,
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(csv.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(Error::io("<stdout>", e).into()),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code: 0 on success, 2 for usage errors or missing inputs, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::Train(a) => train(a),
        Command::Mine(a) => mine_cmd(a),
        Command::EvalKgc(a) => eval_kgc(a),
        Command::EvalInductive(a) => eval_inductive(a),
        Command::GenWorld(a) => gen_world(a),
        Command::ExportAttn(a) => export_attn(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(std::env::args_os())
}
