//! Command implementations behind the `kgdialog` binary.

pub mod config;

use std::fs;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kgdialog_core::eval::{evaluate, k_label, EvalOptions, EvalReport};
use kgdialog_core::kg::{
    generate_synthetic, load_dataset, load_graph, normalize_text, split_synthetic, write_dataset, DatasetSplit,
    DialogueTurn, KnowledgeGraph, Speaker, SplitName, SynthConfig,
};
use kgdialog_core::model::{load_checkpoint, sample_response, save_checkpoint, Checkpoint, DecodingParams};
use kgdialog_core::pipeline::{mix_seed, Pipeline};
use kgdialog_core::sequence::Vocabulary;
use kgdialog_core::train::{train, write_history};
use kgdialog_core::{Error, Result};
use serde::Serialize;

use crate::config::{config_path, RunConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "kgdialog", version, about = "Knowledge-graph grounded dialogue: train, evaluate, inspect, chat")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on <data>/train.json with <data>/valid.json for model selection.
    Train(TrainArgs),
    /// Generate responses for a split and score them.
    Eval(EvalArgs),
    /// Print the weighted graph for one question as JSON.
    Inspect(InspectArgs),
    /// Interactive chat over one knowledge graph.
    Chat(ChatArgs),
    /// Write a synthetic train/valid/test corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration (default: $KGDIALOG_CONFIG, else built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding train.json and valid.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, vocabulary and history.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Ablation list, e.g. `no-kg-mask` or `no-entity-emb,no-triple-emb`.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shorthand for `--set train.threads=N`.
    #[arg(long)]
    pub threads: Option<usize>,
    /// No per-epoch progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `kgdialog train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory (reads <split>.json) or a dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    /// Report path. With several k pairs each report gets a `.e<k>_r<k>` suffix.
    #[arg(long)]
    pub report: PathBuf,
    /// Entity budget(s): comma-separated integers or `all`. Default: the checkpoint's.
    #[arg(long)]
    pub k_entity: Option<String>,
    /// Relation budget(s), as for --k-entity.
    #[arg(long)]
    pub k_relation: Option<String>,
    /// Score the gold responses against themselves.
    #[arg(long)]
    pub hyp_from_gold: bool,
    /// Vocabulary file (default: next to the checkpoint).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Override a key of the configuration stored in the checkpoint, e.g. `decoding.top_k=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for generation; reports do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Graph file: {"triples": [[subject, relation, object], ...]}.
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub k_entity: Option<String>,
    #[arg(long)]
    pub k_relation: Option<String>,
    /// Add per-triple selected flags and the masked position count.
    #[arg(long)]
    pub dump_mask: bool,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub kg: PathBuf,
    /// Session seed (default: the checkpoint's decoding seed).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of dialogues before the 80/10/10 split.
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub subjects: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub relations: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Seed of the pseudo-word pools.
    #[arg(long, default_value_t = 0)]
    pub pool_seed: u64,
}

/// 2 for unreadable or malformed inputs, 3 for a vocabulary that does not
/// belong to the checkpoint, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::Validation { .. }
        | Error::Graph(_)
        | Error::Config(_)
        | Error::Checkpoint(_) => 2,
        Error::VocabMismatch { .. } => 3,
        _ => 1,
    }
}

fn split_path(data: &Path, split: SplitName) -> PathBuf {
    if data.is_file() {
        data.to_path_buf()
    } else {
        data.join(format!("{split}.json"))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Parses `7`, `all` or `1,3,all`.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "all" => Ok(usize::MAX),
            n => match n.parse::<usize>() {
                Ok(k) if k > 0 => Ok(k),
                _ => Err(Error::Config(format!("invalid k `{n}`: expected a positive integer or `all`"))),
            },
        })
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::Config("empty k list".into()))
            } else {
                Ok(v)
            }
        })
}

fn vocab_path(ckpt: &Path, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

/// A checkpoint plus the vocabulary it was trained with, hash-checked.
pub fn load_model(ckpt: &Path, vocab: &Path) -> Result<(Checkpoint, Vocabulary)> {
    let ckpt = load_checkpoint(ckpt)?;
    let vocab = Vocabulary::load(vocab)?;
    let found = vocab.hash();
    if found != ckpt.header.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: ckpt.header.vocab_hash.clone(),
            found,
        });
    }
    Ok((ckpt, vocab))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub steps: u64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut overrides = args.overrides.clone();
    if let Some(a) = &args.ablation {
        overrides.push(format!("model.ablation=\"{a}\""));
    }
    if let Some(e) = args.epochs {
        overrides.push(format!("train.epochs={e}"));
    }
    if let Some(t) = args.threads {
        overrides.push(format!("train.threads={t}"));
    }
    let cfg = RunConfig::resolve(config_path(args.config.clone()).as_deref(), &overrides)?;

    let train_split = load_dataset(args.data.join("train.json"), SplitName::Train)?;
    let valid_split = load_dataset(args.data.join("valid.json"), SplitName::Valid)?;
    let vocab = Vocabulary::build(&[&train_split, &valid_split], cfg.data.min_freq)?;
    let model_cfg = cfg.model.to_model_config(vocab.len())?;
    if !args.quiet {
        eprintln!(
            "training on {} samples ({} valid), vocabulary {}, {} epochs",
            train_split.len(),
            valid_split.len(),
            vocab.len(),
            cfg.train.epochs
        );
    }
    let quiet = args.quiet;
    let outcome = train(&train_split, &valid_split, &vocab, model_cfg, &cfg.train, &mut |r| {
        if !quiet {
            eprintln!("epoch {:>3}  train {:.4}  valid {:.4}", r.epoch, r.train_loss, r.valid_loss);
        }
    })?;

    create_dir(&args.out)?;
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&Checkpoint::new(outcome.best, vocab.hash(), cfg.to_json()), &ckpt_path)?;
    vocab.save(args.out.join(VOCAB_FILE))?;
    write_history(&outcome.history, &args.out.join(HISTORY_FILE))?;
    write_file(&args.out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let best_valid_loss = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map_or(f64::NAN, |r| r.valid_loss);
    Ok(TrainSummary {
        checkpoint: ckpt_path,
        best_epoch: outcome.best_epoch,
        best_valid_loss,
        steps: outcome.steps,
    })
}

/// Report file contents: the evaluation plus the configuration it ran under.
#[derive(Debug, Serialize)]
pub struct ReportFile<'a> {
    pub split: SplitName,
    pub run_config: &'a serde_json::Value,
    #[serde(flatten)]
    pub report: &'a EvalReport,
}

fn grid_report_path(base: &Path, ke: usize, kr: usize) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("json");
    base.with_file_name(format!("{stem}.e{}_r{}.{ext}", k_label(ke), k_label(kr)))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<Vec<(PathBuf, EvalReport)>> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let vocab = Vocabulary::load(vocab_path(&args.ckpt, &args.vocab))?;
    let cfg = RunConfig::from_echo(&ckpt.header.run_config, &args.overrides)?;
    let split_file = split_path(&args.data, args.split);
    let split: DatasetSplit = load_dataset(&split_file, args.split)?;
    let kes = match &args.k_entity {
        Some(s) => parse_k_list(s)?,
        None => vec![cfg.train.k_entity],
    };
    let krs = match &args.k_relation {
        Some(s) => parse_k_list(s)?,
        None => vec![cfg.train.k_relation],
    };
    let grid = kes.len() * krs.len() > 1;
    if let Some(dir) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut written = Vec::new();
    for &ke in &kes {
        for &kr in &krs {
            let opts = EvalOptions {
                decoding: cfg.decoding,
                k_entity: ke,
                k_relation: kr,
                limits: cfg.train.limits,
                threads: args.threads.unwrap_or(1).max(1),
                hyp_from_gold: args.hyp_from_gold,
            };
            let report = evaluate(&ckpt, &vocab, &split, &opts)?;
            let path = if grid {
                grid_report_path(&args.report, ke, kr)
            } else {
                args.report.clone()
            };
            let file = ReportFile {
                split: args.split,
                run_config: &ckpt.header.run_config,
                report: &report,
            };
            let mut json = serde_json::to_string_pretty(&file).expect("report serializes");
            json.push('\n');
            write_file(&path, json.as_bytes())?;
            let table = report.table();
            let text = if written.is_empty() {
                table
            } else {
                table.lines().skip(1).map(|l| format!("{l}\n")).collect()
            };
            let _ = out.write_all(text.as_bytes());
            written.push((path, report));
        }
    }
    Ok(written)
}

fn single_k(flag: &Option<String>, default: usize) -> Result<usize> {
    match flag {
        None => Ok(default),
        Some(s) => match parse_k_list(s)?.as_slice() {
            [k] => Ok(*k),
            _ => Err(Error::Config(format!("expected one k value, got `{s}`"))),
        },
    }
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (ckpt, vocab) = load_model(&args.ckpt, &vocab_path(&args.ckpt, &args.vocab))?;
    let cfg = RunConfig::from_echo(&ckpt.header.run_config, &[])?;
    let graph = load_graph(&args.kg)?;
    let ke = single_k(&args.k_entity, cfg.train.k_entity)?;
    let kr = single_k(&args.k_relation, cfg.train.k_relation)?;
    let pipeline = Pipeline::new(vocab, cfg.train.limits, ckpt.state.config.ablation.kg_mask());
    let dump = pipeline.dump(&graph, &normalize_text(&args.question), ke, kr, args.dump_mask)?;
    let mut json = serde_json::to_string_pretty(&dump).expect("dump serializes");
    json.push('\n');
    out.write_all(json.as_bytes()).map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

/// One chat session over a fixed graph.
pub struct ChatSession {
    ckpt: Checkpoint,
    pipeline: Pipeline,
    graph: KnowledgeGraph,
    decoding: DecodingParams,
    k_entity: usize,
    k_relation: usize,
    history: Vec<DialogueTurn>,
    seed: u64,
    turn: u64,
}

/// What a chat line produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatEvent {
    Reply { text: String, evicted: usize },
    Rejected(String),
    Reset,
    Reseeded(u64),
    Quit,
    Empty,
}

impl ChatSession {
    pub fn new(ckpt: Checkpoint, vocab: Vocabulary, graph: KnowledgeGraph, cfg: &RunConfig, seed: u64) -> Self {
        let pipeline = Pipeline::new(vocab, cfg.train.limits, ckpt.state.config.ablation.kg_mask());
        ChatSession {
            ckpt,
            pipeline,
            graph,
            decoding: cfg.decoding,
            k_entity: cfg.train.k_entity,
            k_relation: cfg.train.k_relation,
            history: Vec::new(),
            seed,
            turn: 0,
        }
    }

    pub fn history(&self) -> &[DialogueTurn] {
        &self.history
    }

    pub fn handle(&mut self, line: &str) -> Result<ChatEvent> {
        let line = line.trim();
        if line.is_empty() {
            return Ok(ChatEvent::Empty);
        }
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["/quit"] => return Ok(ChatEvent::Quit),
            ["/reset"] => {
                self.history.clear();
                return Ok(ChatEvent::Reset);
            }
            ["/seed", n] => {
                return match n.parse::<u64>() {
                    Ok(s) => {
                        self.seed = s;
                        self.turn = 0;
                        Ok(ChatEvent::Reseeded(s))
                    }
                    Err(_) => Ok(ChatEvent::Rejected(format!("`{n}` is not a seed"))),
                };
            }
            [cmd, ..] if cmd.starts_with('/') => {
                return Ok(ChatEvent::Rejected(format!("unknown command `{cmd}`")));
            }
            _ => {}
        }

        let question = normalize_text(line);
        let sel = self.pipeline.selection(&self.graph, &question, self.k_entity, self.k_relation);
        let order = Pipeline::order(&self.graph, None);
        let enc = match self.pipeline.encode("chat", &self.graph, &order, &self.history, &question, None, sel) {
            Ok(enc) => enc,
            Err(Error::SequenceTooLong { len, limit, .. }) => {
                return Ok(ChatEvent::Rejected(format!(
                    "input too long: {len} tokens with the graph, limit {limit}"
                )));
            }
            Err(e) => return Err(e),
        };
        if enc.seq.len() >= self.ckpt.state.config.max_positions {
            return Ok(ChatEvent::Rejected(format!(
                "input too long: {} tokens, the model holds {}",
                enc.seq.len(),
                self.ckpt.state.config.max_positions
            )));
        }
        let evicted = enc.seq.evicted_turns;
        self.history.drain(..evicted);
        let decoding = DecodingParams {
            seed: mix_seed(&[self.seed, self.turn]),
            ..self.decoding
        };
        self.turn += 1;
        let tokens = sample_response(&self.ckpt.state, &enc.seq, &enc.columns, &decoding)?;
        let text = self.pipeline.vocab.decode(&tokens);
        self.history.push(DialogueTurn::new(Speaker::User, &question));
        self.history.push(DialogueTurn::new(Speaker::System, &text));
        Ok(ChatEvent::Reply { text, evicted })
    }
}

pub fn cmd_chat(args: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let (ckpt, vocab) = load_model(&args.ckpt, &vocab_path(&args.ckpt, &args.vocab))?;
    let cfg = RunConfig::from_echo(&ckpt.header.run_config, &args.overrides)?;
    let graph = load_graph(&args.kg)?;
    let seed = args.seed.unwrap_or(cfg.decoding.seed);
    let n_triples = graph.triples().len();
    let mut session = ChatSession::new(ckpt, vocab, graph, &cfg, seed);
    let interactive = std::io::stdin().is_terminal();
    let io_err = |e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    };
    writeln!(out, "[{n_triples} triples loaded; /reset clears history, /seed N reseeds, /quit exits]").map_err(io_err)?;
    let mut line = String::new();
    loop {
        if interactive {
            write!(out, "> ").map_err(io_err)?;
            out.flush().map_err(io_err)?;
        }
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| Error::Io {
            path: "<stdin>".into(),
            source: e,
        })?;
        if n == 0 {
            break;
        }
        match session.handle(&line)? {
            ChatEvent::Quit => break,
            ChatEvent::Empty => {}
            ChatEvent::Reset => writeln!(out, "[history cleared]").map_err(io_err)?,
            ChatEvent::Reseeded(s) => writeln!(out, "[seed {s}]").map_err(io_err)?,
            ChatEvent::Rejected(why) => writeln!(out, "[rejected: {why}]").map_err(io_err)?,
            ChatEvent::Reply { text, evicted } => {
                if evicted > 0 {
                    writeln!(out, "[evicted {evicted} oldest history turn(s)]").map_err(io_err)?;
                }
                writeln!(out, "system: {text}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// Split sizes in dialogues.
pub fn cmd_synth(args: &SynthArgs) -> Result<[(SplitName, usize); 3]> {
    let cfg = SynthConfig {
        n_dialogues: args.n as usize,
        n_subjects_per_graph: args.subjects as usize,
        n_relations: args.relations as usize,
        vocab_pool_seed: args.pool_seed,
        seed: args.seed,
    };
    let splits = split_synthetic(generate_synthetic(&cfg));
    create_dir(&args.out)?;
    let mut counts = [(SplitName::Train, 0); 3];
    for (slot, split) in counts.iter_mut().zip(&splits) {
        write_dataset(split, args.out.join(format!("{}.json", split.name)))?;
        *slot = (split.name, split.dialogue_count());
    }
    Ok(counts)
}
