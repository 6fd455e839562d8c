//! Command-line driver: argument parsing and the subcommands behind the
//! `reformer` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use reformer_core::io::config::parse_pairs;
use reformer_core::io::text::{model_vocab, read_parallel, read_sentences, read_text, read_vocab, sentences_to_text, write_text};
use reformer_core::io::{Checkpoint, RunConfig};
use reformer_core::models::{count_parameters, ModelConfig, Variant};
use reformer_core::scaling::{finite_diff_gradients, identify_probes, parse_eval_points, solve_step_size, EvalPoint, ScalingReport};
use reformer_core::training::metrics::Bucket;
use reformer_core::training::{
    beam_decode, eval_metrics, make_toy_corpus, teacher_forced, train, Corpus, Task, Vocab, BOS,
};
use reformer_core::Error;

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV: &str = "JOINT_SEED";

/// Bad arguments or inputs; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(UsageError(msg.into()).into())
}

/// 2 for usage and validation errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
    }
    1
}

#[derive(Debug, Parser)]
#[command(name = "reformer", version, about = "Train, decode and scale joint source-target sequence models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Translate a file of source sentences.
    Decode(DecodeArgs),
    /// Decode a test set and report BLEU, accuracy and length statistics.
    Eval(EvalArgs),
    /// Single-shot depth/width scaling from three evaluations.
    Scale(ScaleArgs),
    /// Parameter counts of a configuration.
    CountParams(CountArgs),
    /// Write every attention distribution of one forward pass.
    DumpAttention(DumpArgs),
    /// Generate a synthetic parallel corpus with a matching config.
    MakeCorpus(MakeCorpusArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub variant: Option<String>,
    /// Overrides the config; falls back to JOINT_SEED when neither is set.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory for `model.ckpt`, `metrics.txt` and `config.cfg`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Suppress timing on the progress output so stdout is reproducible too.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Source vocabulary file (default: from the checkpoint config, else synthetic).
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Output length cap (default: 2·source length + 10).
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub length_penalty: f64,
    #[command(flatten)]
    pub vocab: VocabArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Training targets for the frequency buckets (default: from the config).
    #[arg(long)]
    pub train_tgt: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub length_penalty: f64,
    #[command(flatten)]
    pub vocab: VocabArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    /// `key=value` lines.
    Kv,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    /// Base depth and width multiplier, `l,w`.
    #[arg(long)]
    pub base: String,
    /// `l w loss` results file, or `auto` to train the three models.
    #[arg(long, conflicts_with = "grads")]
    pub probes: Option<String>,
    /// Known gradients `g_l,g_w` of performance (negative loss).
    #[arg(long)]
    pub grads: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eps: f64,
    /// Training config for `--probes auto`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Start from a config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub prenet_layers: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Source and target vocabulary size when not set by the config.
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentence (space-separated tokens).
    #[arg(long)]
    pub src: String,
    /// Target prefix; the model sees `<s>` followed by these tokens.
    #[arg(long, default_value = "")]
    pub tgt: String,
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Variant written into the generated `train.cfg`.
    #[arg(long, default_value = "reformer-base")]
    pub variant: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command line, writing reports to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Decode(a) => cmd_decode(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Scale(a) => cmd_scale(&a, out),
        Command::CountParams(a) => cmd_count_params(&a, out),
        Command::DumpAttention(a) => cmd_dump_attention(&a, out),
        Command::MakeCorpus(a) => cmd_make_corpus(&a, out),
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => match v.trim().parse() {
            Ok(s) => Ok(Some(s)),
            Err(_) => usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")),
        },
        Err(_) => Ok(None),
    }
}

fn split_override(s: &str) -> anyhow::Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => usage(format!("override `{s}` is not KEY=VALUE")),
    }
}

fn resolve(base: &Path, p: &Option<PathBuf>) -> Option<PathBuf> {
    p.as_ref().map(|p| if p.is_relative() { base.join(p) } else { p.clone() })
}

/// A run configuration with overrides applied, paths resolved against the
/// config's directory and vocabulary sizes filled in from vocab files.
struct PreparedRun {
    config: RunConfig,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
}

fn prepare_run(
    config_path: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
    overrides: &[String],
) -> anyhow::Result<PreparedRun> {
    let text = read_text(config_path)?;
    let mut cfg = RunConfig::parse(&text)?;
    let mut kv = Vec::new();
    if let Some(v) = variant {
        kv.push(("variant".to_string(), v.to_string()));
    }
    for o in overrides {
        kv.push(split_override(o)?);
    }
    cfg.apply_overrides(&kv)?;
    let seed_in_file = parse_pairs(&text)?.contains_key("seed") || kv.iter().any(|(k, _)| k == "seed");
    match seed {
        Some(s) => cfg.run.seed = s,
        None if !seed_in_file => {
            if let Some(s) = env_seed()? {
                cfg.run.seed = s;
            }
        }
        None => {}
    }
    let dir = config_path.parent().unwrap_or(Path::new("."));
    cfg.train_src = resolve(dir, &cfg.train_src);
    cfg.train_tgt = resolve(dir, &cfg.train_tgt);
    cfg.valid_src = resolve(dir, &cfg.valid_src);
    cfg.valid_tgt = resolve(dir, &cfg.valid_tgt);
    cfg.src_vocab_file = resolve(dir, &cfg.src_vocab_file);
    cfg.tgt_vocab_file = resolve(dir, &cfg.tgt_vocab_file);

    let side = |file: &Option<PathBuf>, size: &mut usize, name: &str| -> anyhow::Result<Vocab> {
        if let (Some(p), 0) = (file, *size) {
            *size = read_vocab(p)?.len();
        }
        if *size == 0 {
            return usage(format!("{name}_vocab is not set and no {name}_vocab_file is given"));
        }
        Ok(model_vocab(file.as_deref(), name, *size)?)
    };
    let src_vocab = side(&cfg.src_vocab_file, &mut cfg.model.src_vocab, "src")?;
    let tgt_vocab = side(&cfg.tgt_vocab_file, &mut cfg.model.tgt_vocab, "tgt")?;
    cfg.validate()?;
    Ok(PreparedRun { config: cfg, src_vocab, tgt_vocab })
}

fn load_corpora(p: &PreparedRun) -> anyhow::Result<(Corpus, Corpus)> {
    let c = &p.config;
    let need = |x: &Option<PathBuf>, key: &str| -> anyhow::Result<PathBuf> {
        match x {
            Some(p) => Ok(p.clone()),
            None => usage(format!("config does not set `{key}`")),
        }
    };
    let train_set = read_parallel(
        &need(&c.train_src, "train_src")?,
        &need(&c.train_tgt, "train_tgt")?,
        &p.src_vocab,
        &p.tgt_vocab,
    )?;
    let valid_set = read_parallel(
        &need(&c.valid_src, "valid_src")?,
        &need(&c.valid_tgt, "valid_tgt")?,
        &p.src_vocab,
        &p.tgt_vocab,
    )?;
    if train_set.is_empty() || valid_set.is_empty() {
        return usage("training and validation corpora must be non-empty");
    }
    Ok((train_set, valid_set))
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let prepared = prepare_run(&a.config, a.variant.as_deref(), a.seed, &a.overrides)?;
    let (train_set, valid_set) = load_corpora(&prepared)?;
    let cfg = &prepared.config;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let metrics_path = a.out.join("metrics.txt");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?,
    );
    let mut write_err = None;
    let outcome = train(&cfg.model, &train_set, &valid_set, &cfg.run, |r| {
        let line = r.to_line(false);
        if write_err.is_none() {
            if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
                write_err = Some(e);
            }
        }
        let _ = writeln!(out, "{}", r.to_line(!a.deterministic));
    });
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    let outcome = outcome?;

    let ck = Checkpoint::new(cfg.clone(), outcome.best)?;
    ck.save(&a.out.join("model.ckpt"))?;
    write_text(&a.out.join("config.cfg"), &cfg.to_text())?;
    writeln!(
        out,
        "best valid_loss={:.6} at step {} ({} steps run{})",
        outcome.best_valid_loss,
        outcome.best_step,
        outcome.steps_run,
        if outcome.reached_target { ", target accuracy reached" } else { "" }
    )?;
    Ok(())
}

fn checkpoint_vocabs(ck: &Checkpoint, v: &VocabArgs) -> anyhow::Result<(Vocab, Vocab)> {
    let pick = |flag: &Option<PathBuf>, stored: &Option<PathBuf>| -> Option<PathBuf> {
        flag.clone().or_else(|| stored.clone().filter(|p| p.exists()))
    };
    let m = &ck.config.model;
    let src = model_vocab(pick(&v.src_vocab, &ck.config.src_vocab_file).as_deref(), "source", m.src_vocab)?;
    let tgt = model_vocab(pick(&v.tgt_vocab, &ck.config.tgt_vocab_file).as_deref(), "target", m.tgt_vocab)?;
    Ok((src, tgt))
}

fn decode_all(
    ck: &Checkpoint,
    sources: &[Vec<usize>],
    beam: usize,
    max_len: Option<usize>,
    length_penalty: f64,
) -> anyhow::Result<Vec<Vec<usize>>> {
    if beam == 0 {
        return usage("--beam must be at least 1");
    }
    if max_len == Some(0) {
        return usage("--max-len must be at least 1");
    }
    sources
        .iter()
        .map(|s| {
            let cap = max_len.unwrap_or(2 * s.len() + 10);
            Ok(beam_decode(&ck.model, s, beam, cap, length_penalty)?.tokens)
        })
        .collect()
}

fn cmd_decode(a: &DecodeArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (src_vocab, tgt_vocab) = checkpoint_vocabs(&ck, &a.vocab)?;
    let sources = read_sentences(&a.input, &src_vocab)?;
    let hyps = decode_all(&ck, &sources, a.beam, a.max_len, a.length_penalty)?;
    write_text(&a.output, &sentences_to_text(&tgt_vocab, &hyps))?;
    writeln!(out, "decoded {} sentences to {}", hyps.len(), a.output.display())?;
    Ok(())
}

fn write_buckets(out: &mut dyn Write, title: &str, buckets: &[Bucket]) -> std::io::Result<()> {
    writeln!(out, "{title}:")?;
    for b in buckets {
        match b.accuracy() {
            Some(acc) => writeln!(out, "  {:>8} accuracy={acc:.4} tokens={}", b.label, b.total)?,
            None => writeln!(out, "  {:>8} accuracy=n/a tokens=0", b.label)?,
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (src_vocab, tgt_vocab) = checkpoint_vocabs(&ck, &a.vocab)?;
    let test = read_parallel(&a.src, &a.reference, &src_vocab, &tgt_vocab)?;
    if test.is_empty() {
        return usage(format!("{} is empty", a.src.display()));
    }
    let train_tgt = a.train_tgt.clone().or_else(|| ck.config.train_tgt.clone().filter(|p| p.exists()));
    let freq = match train_tgt {
        Some(p) => {
            let sents = read_sentences(&p, &tgt_vocab)?;
            let c = Corpus::new(vec![vec![BOS]; sents.len()], sents)?;
            c.target_frequencies(tgt_vocab.len())
        }
        None => vec![0; tgt_vocab.len()],
    };
    let tf = teacher_forced(&ck.model, &test)?;
    let hyps = decode_all(&ck, &test.src, a.beam, a.max_len, a.length_penalty)?;
    let report = eval_metrics(&hyps, &test.tgt, &freq)?;
    writeln!(out, "sentences={}", test.len())?;
    writeln!(out, "teacher_forced_loss={:.6}", tf.loss)?;
    writeln!(out, "teacher_forced_accuracy={:.6}", tf.accuracy)?;
    writeln!(out, "bleu={:.4}", report.bleu)?;
    writeln!(out, "decoded_accuracy={:.6}", report.accuracy)?;
    writeln!(out, "length_ratio={:.6}", report.length_ratio)?;
    write_buckets(out, "accuracy by position", &report.by_position)?;
    write_buckets(out, "accuracy by training frequency", &report.by_frequency)?;
    Ok(())
}

fn parse_pair<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<(T, T)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() == 2 {
        if let (Ok(a), Ok(b)) = (parts[0].parse(), parts[1].parse()) {
            return Ok((a, b));
        }
    }
    usage(format!("{what} must look like `a,b`, got `{s}`"))
}

fn write_report(out: &mut dyn Write, r: &ScalingReport, format: ReportFormat) -> std::io::Result<()> {
    match format {
        ReportFormat::Text => writeln!(out, "{r}"),
        ReportFormat::Kv => {
            let rows: BTreeMap<&str, String> = [
                ("g_l", format!("{:?}", r.g_l)),
                ("g_w", format!("{:?}", r.g_w)),
                ("beta", format!("{:?}", r.beta)),
                ("alpha", format!("{:?}", r.alpha)),
                ("l_hat", format!("{:?}", r.l_hat)),
                ("w_hat", format!("{:?}", r.w_hat)),
                ("l_new", r.l_new.to_string()),
                ("w_new", r.w_new.to_string()),
                ("param_ratio_continuous", format!("{:?}", r.continuous_ratio)),
                ("param_ratio_rounded", format!("{:?}", r.rounded_ratio)),
                ("decision", r.decision()),
            ]
            .into_iter()
            .collect();
            for (k, v) in rows {
                writeln!(out, "{k}={v}")?;
            }
            Ok(())
        }
    }
}

/// Trains the base and both probes and returns their best validation losses.
fn train_probes(a: &ScaleArgs, base: (f64, f64), out: &mut dyn Write) -> anyhow::Result<Vec<EvalPoint>> {
    let Some(config) = &a.config else {
        return usage("--probes auto needs --config");
    };
    if a.eps.fract() != 0.0 || a.eps < 1.0 || base.0.fract() != 0.0 || base.1.fract() != 0.0 {
        return usage("--probes auto needs an integer base and a positive integer --eps");
    }
    let prepared = prepare_run(config, None, None, &a.overrides)?;
    let (train_set, valid_set) = load_corpora(&prepared)?;
    let (l, w, eps) = (base.0 as usize, base.1 as usize, a.eps as usize);
    let mut points = Vec::new();
    for (pl, pw) in [(l, w), (l + eps, w), (l, w + eps)] {
        let mut model = prepared.config.model.clone();
        model.layers = pl;
        model.ffn_mult = pw;
        let outcome = train(&model, &train_set, &valid_set, &prepared.config.run, |_| {})?;
        writeln!(out, "# trained l={pl} w={pw}: valid_loss={:.6}", outcome.best_valid_loss)?;
        points.push(EvalPoint::new(pl as f64, pw as f64, outcome.best_valid_loss)?);
    }
    Ok(points)
}

fn cmd_scale(a: &ScaleArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let base: (f64, f64) = parse_pair(&a.base, "--base")?;
    let (g_l, g_w) = match (&a.grads, a.probes.as_deref()) {
        (Some(g), None) => parse_pair(g, "--grads")?,
        (None, Some(p)) => {
            let points = if p == "auto" {
                train_probes(a, base, out)?
            } else {
                parse_eval_points(&read_text(Path::new(p))?)?
            };
            let (b, pl, pw) = identify_probes(&points, base, a.eps)?;
            finite_diff_gradients(b, pl, pw, a.eps)?
        }
        _ => return usage("give exactly one of --probes or --grads"),
    };
    let report = solve_step_size(base.0, base.1, g_l, g_w, a.beta)?;
    write_report(out, &report, a.format)?;
    Ok(())
}

fn cmd_count_params(a: &CountArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = match (&a.config, &a.variant) {
        (Some(p), _) => RunConfig::parse(&read_text(p)?)?.model,
        (None, Some(v)) => ModelConfig::defaults(v.parse()?),
        (None, None) => return usage("give --config or --variant"),
    };
    if let (Some(_), Some(v)) = (&a.config, &a.variant) {
        let v: Variant = v.parse()?;
        if v != cfg.variant {
            let d = ModelConfig::defaults(v);
            cfg.variant = v;
            cfg.prenet_layers = d.prenet_layers;
            cfg.encoder_layers = d.encoder_layers;
        }
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.layers, a.layers);
    set(&mut cfg.ffn_mult, a.ffn_mult);
    set(&mut cfg.embed_dim, a.embed_dim);
    set(&mut cfg.heads, a.heads);
    set(&mut cfg.prenet_layers, a.prenet_layers);
    set(&mut cfg.encoder_layers, a.encoder_layers);
    if cfg.src_vocab == 0 {
        cfg.src_vocab = a.vocab;
    }
    if cfg.tgt_vocab == 0 {
        cfg.tgt_vocab = a.vocab;
    }
    let count = count_parameters(&cfg)?;
    let e2 = (cfg.embed_dim * cfg.embed_dim) as f64;
    writeln!(out, "variant={}", cfg.variant)?;
    writeln!(out, "layers={} ffn_mult={} embed_dim={}", cfg.layers, cfg.ffn_mult, cfg.embed_dim)?;
    writeln!(out, "simplified={}e^2", count.simplified)?;
    writeln!(out, "trunk_matrices={} ({}e^2)", count.trunk_matrices, count.trunk_matrices as f64 / e2)?;
    writeln!(out, "total={} (src_vocab={}, tgt_vocab={})", count.full, cfg.src_vocab, cfg.tgt_vocab)?;
    Ok(())
}

fn cmd_dump_attention(a: &DumpArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (src_vocab, tgt_vocab) = checkpoint_vocabs(&ck, &a.vocab)?;
    if a.src.split_whitespace().next().is_none() {
        return usage("--src must contain at least one token");
    }
    let src = reformer_core::training::source_ids(&src_vocab.encode(&a.src));
    let mut tgt_in = vec![BOS];
    tgt_in.extend(tgt_vocab.encode(&a.tgt));
    let dump = ck.model.attention_dump(&src, &tgt_in)?;

    let mut text = String::new();
    text.push_str(&format!("# source: {}\n", src_vocab.decode(&src)));
    text.push_str(&format!("# target: {}\n", tgt_vocab.decode(&tgt_in)));
    for r in &dump.records {
        let [nb, nq, nk] = r.shape;
        let (outer, inner) = match r.axis {
            reformer_core::joint::Axis::Target => ("src", "tgt"),
            reformer_core::joint::Axis::Source => ("tgt", "src"),
        };
        text.push_str(&format!(
            "# layer={} axis={} head={} shape={nb}x{nq}x{nk}\n",
            r.layer, r.axis, r.head
        ));
        for b in 0..nb {
            for q in 0..nq {
                let row: Vec<String> = r.row(b, q).iter().map(|x| format!("{x:.6}")).collect();
                text.push_str(&format!(
                    "layer={} axis={} head={} {outer}={b} {inner}_query={q}: {}\n",
                    r.layer,
                    r.axis,
                    r.head,
                    row.join(" ")
                ));
            }
        }
    }
    write_text(&a.output, &text)?;
    writeln!(out, "wrote {} attention maps to {}", dump.records.len(), a.output.display())?;
    Ok(())
}

fn cmd_make_corpus(a: &MakeCorpusArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let task: Task = a.task.parse()?;
    let variant: Variant = a.variant.parse()?;
    if a.pairs == 0 || a.valid == 0 {
        return usage("--pairs and --valid must be positive");
    }
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(1),
    };
    let vocab = Vocab::synthetic(a.vocab)?;
    let corpus = make_toy_corpus(task, a.vocab, a.pairs + a.valid, (a.min_len, a.max_len), seed)?;
    let (train_set, valid_set) = corpus.split_at(a.pairs);

    let mut cfg = RunConfig::new(ModelConfig::defaults(variant));
    cfg.model.src_vocab = a.vocab;
    cfg.model.tgt_vocab = a.vocab;
    cfg.run.seed = seed;
    cfg.train_src = Some("train.src".into());
    cfg.train_tgt = Some("train.tgt".into());
    cfg.valid_src = Some("valid.src".into());
    cfg.valid_tgt = Some("valid.tgt".into());
    cfg.src_vocab_file = Some("vocab.txt".into());
    cfg.tgt_vocab_file = Some("vocab.txt".into());

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let files = [
        ("vocab.txt", vocab.to_text()),
        ("train.src", sentences_to_text(&vocab, &train_set.src)),
        ("train.tgt", sentences_to_text(&vocab, &train_set.tgt)),
        ("valid.src", sentences_to_text(&vocab, &valid_set.src)),
        ("valid.tgt", sentences_to_text(&vocab, &valid_set.tgt)),
        ("train.cfg", format!("# {task} task, seed {seed}\n{}", cfg.to_text())),
    ];
    for (name, text) in files {
        write_text(&a.out.join(name), &text)?;
    }
    writeln!(out, "wrote {} train and {} valid pairs to {}", train_set.len(), valid_set.len(), a.out.display())?;
    Ok(())
}

/// Entry point shared by the binary: parses `args`, runs, and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
