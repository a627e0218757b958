//! `sstag`: ingest, pretrain, embed and probe text-attributed graphs.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure,
//! 4 incompatible artifact.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use sstag::config::RunConfig;
use sstag::eval::{
    edge_probe_dataset, embed_with_checkpoint, mean_std, node_probe_dataset, run_probe, EdgeMode, EmbeddingMatrix,
    Metric, MetricReport, ProbeOptions,
};
use sstag::models::ModelConfig;
use sstag::ppr::{exact_ppr, push_ppr, PprTable};
use sstag::rng::{self, purpose};
use sstag::sampler::sample_node_subgraph;
use sstag::store::{
    default_word_pools, load_binary, load_jsonl, make_synthetic_tag, save_binary, IngestOptions, SyntheticSpec,
    TextAttributedGraph,
};
use sstag::text::Vocabulary;
use sstag::training::{load_checkpoint, LossRecord, Trainer, CHECKPOINT_VERSION, LOSS_CSV_HEADER};

#[derive(Parser)]
#[command(name = "sstag", version, about = "Co-distilled text/graph encoders for text-attributed graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Node and edge JSON Lines to a binary graph file.
    Ingest(IngestArgs),
    /// Planted-partition graph with cluster-specific vocabularies.
    Synth(SynthArgs),
    /// Top-k personalized PageRank scores of one node as CSV.
    Ppr(PprArgs),
    /// One PPR-weighted context subgraph as JSON.
    Sample(SampleArgs),
    /// Co-distillation pretraining.
    Pretrain(PretrainArgs),
    /// Student embeddings from a checkpoint.
    Embed(EmbedArgs),
    /// Linear probes over frozen embeddings.
    Probe(ProbeArgs),
    /// Pretrain, embed and probe node and edge tasks in one run directory.
    EvalAll(EvalAllArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    directed: bool,
    /// Attach a random node split `train,val`; the rest is test.
    #[arg(long, value_parser = parse_pair)]
    split: Option<(f64, f64)>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long, default_value_t = 0.06)]
    p_intra: f64,
    #[arg(long, default_value_t = 0.004)]
    p_inter: f64,
    #[arg(long, default_value_t = 8)]
    pool_size: usize,
    #[arg(long, default_value_t = 2.5)]
    zipf: f64,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 4)]
    min_words: usize,
    #[arg(long, default_value_t = 8)]
    max_words: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PprArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Node id as written in the source files.
    #[arg(long)]
    node: i64,
    #[arg(long, default_value_t = sstag::ppr::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    /// Dense solve instead of forward push.
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    node: i64,
    #[arg(long, value_delimiter = ',', default_values_t = sstag::sampler::DEFAULT_BUDGETS)]
    budgets: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = sstag::ppr::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = sstag::ppr::DEFAULT_FEATURE_WIDTH)]
    width: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Term {
    Mask,
    St,
    Me,
    Gnn,
    Ppr,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    /// `key = value` file; command-line settings take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Disable one ingredient. Repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Term>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    /// `all`, or a file with one node id per line.
    #[arg(long, default_value = "all")]
    anchors: String,
    /// Refuse to embed unless the checkpoint was trained with this vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Node,
    Edge,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Graph providing labels, split and (for edge tasks) adjacency.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "node")]
    task: TaskArg,
    /// accuracy, roc_auc or rmse.
    #[arg(long)]
    metric: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Seed of the split (and of edge negatives) when the graph has none.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value = "hadamard")]
    edge_mode: String,
    /// Metric records as JSON Lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalAllArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `train,val`")?;
    let p = |x: &str| x.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

/// Marks a run directory as in use; removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".sstag.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(sstag::Error::Config(format!(
                "{} is in use by another command (remove {} if stale)",
                dir.display(),
                path.display()
            ))
            .into()),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, contents),
        None => Ok(io::stdout().write_all(contents.as_bytes())?),
    }
}

fn load_graph(path: &Path) -> Result<TextAttributedGraph> {
    load_binary(path).with_context(|| format!("loading graph {}", path.display()))
}

fn node_index(g: &TextAttributedGraph, id: i64) -> Result<usize> {
    g.dense_id(id)
        .ok_or_else(|| sstag::Error::InvalidArgument(format!("no node with id {id}")).into())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let opts = IngestOptions {
        directed: a.directed,
        node_split: a.split.map(|(t, v)| (t, v, a.split_seed)),
    };
    let g = load_jsonl(&a.nodes, &a.edges, &opts)?;
    save_binary(&g, &a.out)?;
    eprintln!("{} nodes, {} arcs -> {}", g.n_nodes(), g.csr().n_slots(), a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(a.nodes, a.clusters, a.p_intra, a.p_inter);
    spec.pools = default_word_pools(a.clusters, a.pool_size);
    spec.zipf_exponent = a.zipf;
    spec.text_noise = a.noise;
    spec.words_per_node = (a.min_words, a.max_words);
    let g = make_synthetic_tag(&spec, a.seed)?;
    save_binary(&g, &a.out)?;
    eprintln!("{} nodes, {} arcs -> {}", g.n_nodes(), g.csr().n_slots(), a.out.display());
    Ok(())
}

fn cmd_ppr(a: PprArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let v = node_index(&g, a.node)?;
    let pi = if a.exact {
        exact_ppr(g.csr(), v, a.alpha)?
    } else {
        push_ppr(g.csr(), v, a.alpha, a.epsilon)?
    };
    let mut csv = String::from("node,score\n");
    for (u, s) in pi.top_k(a.top_k) {
        csv.push_str(&format!("{},{s}\n", g.original_ids()[u]));
    }
    output(a.out.as_deref(), &csv)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let v = node_index(&g, a.node)?;
    let table = PprTable::compute(&g, a.alpha, a.epsilon)?;
    let mut r = rng::stream(a.seed, &[purpose::SAMPLE, v as u64]);
    let mut sg = sample_node_subgraph(&g, v, table.get(v), &a.budgets, &mut r)?;
    sg.attach_ppr_features(&table, a.width);
    let ids: Vec<i64> = sg.local_to_global.iter().map(|&u| g.original_ids()[u]).collect();
    let doc = json!({ "anchor": a.node, "node_ids": ids, "subgraph": sg });
    output(a.out.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for s in &a.set {
        cfg.apply_override(s)?;
    }
    for t in &a.ablate {
        let key = match t {
            Term::Mask => "ablate.mask",
            Term::St => "ablate.st",
            Term::Me => "ablate.me",
            Term::Gnn => "ablate.gnn",
            Term::Ppr => "ablate.ppr",
        };
        cfg.set(key, "true")?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(dir: &Path, command: &str, inputs: &[(&str, &Path)], extra: serde_json::Value) -> Result<()> {
    let mut files = serde_json::Map::new();
    for (name, path) in inputs {
        files.insert(
            name.to_string(),
            json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }),
        );
    }
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": CHECKPOINT_VERSION,
        "inputs": files,
        "outputs": extra,
    });
    write_file(&dir.join("run.json"), serde_json::to_string_pretty(&doc)? + "\n")
}

struct Pretrained {
    checkpoint: PathBuf,
    config: RunConfig,
}

fn pretrain(a: &TrainArgs, dir: &Path, quiet: bool) -> Result<Pretrained> {
    let cfg = resolve_config(a)?;
    let g = load_graph(&a.graph)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    let vocab = Vocabulary::build(g.node_texts().iter().map(String::as_str), cfg.min_count)?;
    vocab.save(dir.join("vocab.txt"))?;
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    };
    let mut trainer = Trainer::new(&g, Arc::new(vocab), model_cfg, cfg.train.clone())?;
    let curve_path = dir.join("loss_curve.csv");
    let mut curve = io::BufWriter::new(File::create(&curve_path)?);
    writeln!(curve, "{LOSS_CSV_HEADER}")?;
    let every = (cfg.train.steps / 10).max(1);
    let mut io_err = None;
    let result = trainer.run(|r: &LossRecord| {
        if let Err(e) = writeln!(curve, "{}", r.csv_line()) {
            io_err.get_or_insert(e);
        }
        if !quiet && (r.step % every == 0 || r.step == 1) {
            eprintln!(
                "step {:>5}  mask {:.4}  st {:.4}  me {:.4}  total {:.4}",
                r.step, r.losses.l_mask, r.losses.l_st, r.losses.l_me, r.losses.total
            );
        }
    });
    curve.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    result?;
    let checkpoint = dir.join("ckpt.sstc");
    trainer.save(&checkpoint, cfg.precision)?;
    let ckpt_hash = sha256_file(&checkpoint)?;
    write_manifest(
        dir,
        "pretrain",
        &[("graph", a.graph.as_path())],
        json!({
            "graph_content": g.content_hash(),
            "vocab": trainer.vocab.content_hash(),
            "checkpoint_sha256": ckpt_hash,
            "steps": trainer.step(),
            "parameters": trainer.model.n_parameters(),
        }),
    )?;
    Ok(Pretrained { checkpoint, config: cfg })
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let _lock = RunLock::acquire(&a.out_dir)?;
    let done = pretrain(&a.train, &a.out_dir, a.quiet)?;
    eprintln!("checkpoint -> {}", done.checkpoint.display());
    Ok(())
}

fn read_anchor_ids(spec: &str, g: &TextAttributedGraph) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..g.n_nodes()).collect());
    }
    let src = fs::read_to_string(spec).with_context(|| format!("anchor file {spec}"))?;
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let id: i64 = l.trim().parse().map_err(|_| sstag::Error::Parse {
                line: i + 1,
                message: format!("`{}` is not a node id", l.trim()),
            })?;
            node_index(g, id)
        })
        .collect()
}

fn embed(checkpoint: &Path, graph: &Path, anchors: &str, vocab: Option<&Path>) -> Result<EmbeddingMatrix> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    if let Some(p) = vocab {
        let expected = Vocabulary::load(p)?.content_hash();
        let found = ckpt.vocab.content_hash();
        if expected != found {
            return Err(sstag::Error::Incompatible(format!(
                "checkpoint vocabulary {found} differs from {} ({expected})",
                p.display()
            ))
            .into());
        }
    }
    let g = load_graph(graph)?;
    let nodes = read_anchor_ids(anchors, &g)?;
    Ok(embed_with_checkpoint(&ckpt, &g, &nodes)?)
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let e = embed(&a.checkpoint, &a.graph, &a.anchors, a.vocab.as_deref())?;
    e.save_csv(&a.out)?;
    eprintln!("{} x {} -> {}", e.len(), e.dim, a.out.display());
    Ok(())
}

fn probe(
    e: &EmbeddingMatrix,
    g: &TextAttributedGraph,
    task: TaskArg,
    metric: Metric,
    seeds: &[u64],
    split_seed: u64,
    mode: EdgeMode,
    opts: &ProbeOptions,
) -> Result<Vec<MetricReport>> {
    Ok(match task {
        TaskArg::Node => {
            let (targets, split) = node_probe_dataset(e, g, split_seed)?;
            run_probe("node", e, &targets, &split, metric, seeds, opts)?
        }
        TaskArg::Edge => {
            let (features, targets, split) = edge_probe_dataset(e, g, mode, split_seed)?;
            run_probe("edge", &features, &targets, &split, metric, seeds, opts)?
        }
    })
}

fn summarize(reports: &[MetricReport]) -> String {
    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    let (m, s) = mean_std(&values);
    let r = &reports[0];
    format!("{} {} {m:.4} ± {s:.4} over {} seeds", r.task, r.metric, values.len())
}

fn jsonl(reports: &[MetricReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_edge_mode(s: &str) -> Result<EdgeMode> {
    match s {
        "hadamard" => Ok(EdgeMode::Hadamard),
        "concat" => Ok(EdgeMode::Concat),
        _ => Err(sstag::Error::InvalidArgument(format!("edge mode must be hadamard or concat, got `{s}`")).into()),
    }
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    if a.seeds.is_empty() {
        bail!(sstag::Error::InvalidArgument("no probe seeds".into()));
    }
    let e = EmbeddingMatrix::load_csv(&a.embeddings)?;
    let g = load_graph(&a.graph)?;
    let mode = parse_edge_mode(&a.edge_mode)?;
    let reports = probe(&e, &g, a.task, metric, &a.seeds, a.split_seed, mode, &ProbeOptions::default())?;
    if let Some(p) = &a.out {
        write_file(p, jsonl(&reports)?)?;
    }
    println!("{}", summarize(&reports));
    Ok(())
}

fn cmd_eval_all(a: EvalAllArgs) -> Result<()> {
    let _lock = RunLock::acquire(&a.out_dir)?;
    let dir = &a.out_dir;
    let done = pretrain(&a.train, dir, false)?;
    let e = embed(&done.checkpoint, &a.train.graph, "all", None)?;
    let emb_path = dir.join("embeddings.csv");
    e.save_csv(&emb_path)?;
    let g = load_graph(&a.train.graph)?;
    let cfg = &done.config;
    let mut reports = Vec::new();
    if let Some(labels) = g.node_labels() {
        let real = labels.iter().flatten().any(|l| l.as_class().is_none());
        let metric = if real { Metric::Rmse } else { Metric::Accuracy };
        let r = probe(&e, &g, TaskArg::Node, metric, &cfg.probe_seeds, cfg.train.seed, EdgeMode::Hadamard, &cfg.probe)?;
        println!("{}", summarize(&r));
        reports.extend(r);
    }
    if g.csr().n_slots() > 0 {
        let r = probe(&e, &g, TaskArg::Edge, Metric::RocAuc, &cfg.probe_seeds, cfg.train.seed, EdgeMode::Hadamard, &cfg.probe)?;
        println!("{}", summarize(&r));
        reports.extend(r);
    }
    write_file(&dir.join("metrics.jsonl"), jsonl(&reports)?)?;
    let mut csv = String::from("task,metric,seed,value\n");
    for r in &reports {
        csv.push_str(&format!("{},{},{},{}\n", r.task, r.metric, r.seed, r.value));
    }
    write_file(&dir.join("metrics.csv"), csv)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use sstag::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite { .. } => 3,
                E::Incompatible(_) | E::Version(_) | E::Checksum { .. } | E::Truncated(_) => 4,
                _ => 2,
            };
        }
    }
    2
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SSTAG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| sstag::Error::Config(format!("SSTAG_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Ppr(a) => cmd_ppr(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Probe(a) => cmd_probe(a),
        Command::EvalAll(a) => cmd_eval_all(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
