//! Subcommand implementations.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use gdr_core::data::{filter_by_length, Batcher, Example, ParallelBatch, SyntheticSpec, Task, Vocab};
use gdr_core::decode::{beam_search, greedy};
use gdr_core::inspect::{inspect_routing, RoutingDump};
use gdr_core::metrics::{
    bleu, corpus_cdr, exact_match, length_buckets, overlap_rate, BleuOptions, EvalReport, LexicalAligner, Scored,
    Side,
};
use gdr_core::routing::RouteOptions;
use gdr_core::train::{StepRecord, Trainer};
use gdr_core::{Graph, LossConfig, Model, ModelConfig, ParamStore, RoutingConfig, TrainConfig};

use crate::checkpoint::{warm_start, Checkpoint};
use crate::corpus::{encode_counting, read_parallel, synthetic, synthetic_vocabs, write_lines, Parallel};
use crate::error::{CliError, Result};

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Synthetic task to train on: copy, reverse or lexicon.
    #[arg(long, conflicts_with = "src")]
    pub task: Option<Task>,
    /// Source side of a text corpus (or a tab-separated file without --tgt).
    #[arg(long)]
    pub src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    pub tgt: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 10_000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub filler_rate: f64,
    /// Seed of the synthetic data (defaults to --seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Vocabulary cap for text corpora.
    #[arg(long, default_value_t = 30_000)]
    pub max_vocab: usize,

    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ff_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 32)]
    pub capsule_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub caps_per_category: usize,
    #[arg(long, default_value_t = 2)]
    pub redundant_caps: usize,
    #[arg(long, default_value_t = 3)]
    pub routing_iters: usize,
    /// Train the plain encoder-decoder without routing.
    #[arg(long)]
    pub no_gdr: bool,
    #[arg(long)]
    pub tie_output: bool,

    #[arg(long, default_value_t = 1.0)]
    pub lambda_bow: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_bca: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_smoothing: f64,
    /// Preceding bag-of-words excludes the current word.
    #[arg(long)]
    pub strict_preceding: bool,

    #[arg(long, default_value_t = 4000)]
    pub steps: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_tokens: usize,
    #[arg(long, default_value_t = 400)]
    pub warmup: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    /// Global gradient norm limit; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Copy matching parameters from an existing checkpoint before training.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long, default_value = "model.ckpt")]
    pub out: PathBuf,
    /// Training log, one JSON record per step.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

/// Everything needed to start a training run.
pub struct TrainSetup {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub task: Option<SyntheticSpec>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub examples: Vec<Example>,
    pub init: Option<Checkpoint>,
}

impl TrainArgs {
    pub fn setup(&self) -> Result<TrainSetup> {
        let init = self.init_from.as_deref().map(Checkpoint::load).transpose()?;
        let (task, data, vocabs) = match (self.task, &self.src) {
            (Some(task), None) => {
                let mut spec = SyntheticSpec::new(
                    task,
                    self.vocab_size,
                    self.min_len,
                    self.max_len,
                    self.train_size,
                    self.data_seed.unwrap_or(self.seed),
                );
                spec.filler_rate = self.filler_rate;
                spec.validate()?;
                (Some(spec), synthetic(&spec)?, synthetic_vocabs(&spec)?)
            }
            (None, Some(src)) => {
                let data = read_parallel(src, self.tgt.as_deref())?;
                let vocabs = (
                    Vocab::build(data.sources.iter().map(String::as_str), self.max_vocab)?,
                    Vocab::build(data.targets.iter().map(String::as_str), self.max_vocab)?,
                );
                (None, data, vocabs)
            }
            _ => return Err(CliError::Usage("give either --task or --src".into())),
        };
        let (src_vocab, tgt_vocab) = match &init {
            Some(c) => c.vocabs()?,
            None => vocabs,
        };
        let routing = (!self.no_gdr).then_some(RoutingConfig {
            iterations: self.routing_iters,
            capsule_dim: self.capsule_dim,
            per_category: self.caps_per_category,
            redundant: self.redundant_caps,
        });
        let model = ModelConfig {
            src_vocab: src_vocab.len(),
            tgt_vocab: tgt_vocab.len(),
            d_model: self.dim,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.ff_dim,
            dropout: self.dropout,
            routing,
            norm_after_routing: true,
            tie_output: self.tie_output,
        };
        model.validate()?;
        let loss = LossConfig {
            lambda_bow: self.lambda_bow,
            lambda_bca: self.lambda_bca,
            label_smoothing: self.label_smoothing,
            strict_preceding: self.strict_preceding,
        };
        loss.validate()?;
        let train = TrainConfig {
            steps: self.steps,
            batch_tokens: self.batch_tokens,
            warmup: self.warmup,
            peak_lr: self.lr,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
            seed: self.seed,
            ..TrainConfig::default()
        };
        train.validate()?;
        let examples: Vec<Example> = data
            .sources
            .iter()
            .zip(&data.targets)
            .map(|(s, t)| Example::encode(&src_vocab, &tgt_vocab, s, t))
            .collect();
        let examples = match task {
            Some(_) => examples,
            None => filter_by_length(examples, 256),
        };
        Ok(TrainSetup {
            model,
            loss,
            train,
            task,
            src_vocab,
            tgt_vocab,
            examples,
            init,
        })
    }
}

/// Trains from `setup`, calling `on_step` after every update and `on_save`
/// with intermediate checkpoints every `checkpoint_every` steps.
pub fn train_model(
    setup: TrainSetup,
    checkpoint_every: Option<usize>,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    mut on_save: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let (model, mut store) = Model::build::<f32>(setup.model, setup.train.seed)?;
    if let Some(init) = &setup.init {
        warm_start(&mut store, &init.params)?;
    }
    let batcher = Batcher::new(setup.examples, setup.train.batch_tokens, setup.train.seed)?;
    let mut trainer = Trainer::new(model, store, setup.train, setup.loss, batcher)?;
    let snapshot = |t: &Trainer<f32>| {
        Checkpoint::new(
            setup.model,
            setup.loss,
            setup.train,
            t.steps_done(),
            setup.task,
            &setup.src_vocab,
            &setup.tgt_vocab,
            &t.store,
        )
    };
    while trainer.steps_done() < setup.train.steps {
        let rec = trainer.step()?;
        on_step(&rec)?;
        if checkpoint_every.is_some_and(|n| n > 0 && rec.step % n == 0 && rec.step < setup.train.steps) {
            on_save(&snapshot(&trainer))?;
        }
    }
    Ok(snapshot(&trainer))
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let setup = args.setup()?;
    if args.no_gdr && (args.lambda_bow > 0.0 || args.lambda_bca > 0.0) && !args.quiet {
        eprintln!("note: --no-gdr has no capsules; the bag-of-words and agreement losses are inactive");
    }
    let mut log = match &args.log {
        Some(p) => Some(BufWriter::new(fs::File::create(p).map_err(|e| CliError::io(p, e))?)),
        None => None,
    };
    let start = Instant::now();
    let mut tokens = 0usize;
    let log_path = args.log.clone().unwrap_or_default();
    let ckpt = train_model(
        setup,
        args.checkpoint_every,
        |rec| {
            tokens += rec.tokens;
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(rec).map_err(|e| CliError::Format(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| CliError::io(&log_path, e))?;
            }
            if !args.quiet && (rec.step % 100 == 0 || rec.step == 1) {
                let secs = start.elapsed().as_secs_f64();
                eprintln!(
                    "step {:>6}  nll {:.4}  bow {:.4}  bca {:.4}  total {:.4}  lr {:.2e}  {:.0} tok/s",
                    rec.step,
                    rec.loss.nll,
                    rec.loss.bow,
                    rec.loss.bca,
                    rec.loss.total,
                    rec.lr,
                    tokens as f64 / secs.max(1e-9)
                );
            }
            Ok(())
        },
        |c| c.save(&args.out),
    )?;
    if let Some(mut w) = log {
        w.flush().map_err(|e| CliError::io(&log_path, e))?;
    }
    ckpt.save(&args.out)?;
    if !args.quiet {
        eprintln!("saved {}", args.out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Clone, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input sentences, one per line (standard input when omitted).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_penalty: f64,
}

/// Translates whitespace-tokenized lines. Returns the output lines and the
/// number of input tokens missing from the source vocabulary.
pub fn translate_lines(
    model: &Model,
    store: &ParamStore<f32>,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    lines: &[String],
    beam: usize,
    length_penalty: f64,
) -> Result<(Vec<String>, usize)> {
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    if !(length_penalty >= 0.0) {
        return Err(CliError::Usage("--length-penalty must be non-negative".into()));
    }
    let mut unknown = 0;
    let encoded: Vec<Vec<usize>> = lines.iter().map(|l| encode_counting(src_vocab, l, &mut unknown)).collect();
    let mut out = vec![String::new(); lines.len()];
    let pending: Vec<usize> = (0..lines.len()).filter(|&i| !encoded[i].is_empty()).collect();
    let render = |ids: &[usize]| tgt_vocab.decode(ids).join(" ");
    if beam == 1 {
        for chunk in pending.chunks(64) {
            let srcs: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            for (&i, h) in chunk.iter().zip(greedy(model, store, &srcs)?) {
                out[i] = render(&h.tokens);
            }
        }
    } else {
        for &i in &pending {
            out[i] = render(&beam_search(model, store, &encoded[i], beam, length_penalty)?.tokens);
        }
    }
    Ok((out, unknown))
}

fn read_input(path: Option<&Path>) -> Result<Vec<String>> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).map_err(|e| CliError::io("<stdin>", e))?;
            s
        }
    };
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

pub fn run_translate(args: &TranslateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (src_vocab, tgt_vocab) = ckpt.vocabs()?;
    let (model, store) = ckpt.model()?;
    let lines = read_input(args.input.as_deref())?;
    let (out, unknown) = translate_lines(&model, &store, &src_vocab, &tgt_vocab, &lines, args.beam, args.length_penalty)?;
    if unknown > 0 {
        eprintln!("warning: {unknown} input tokens are not in the source vocabulary and were mapped to <unk>");
    }
    let mut text = out.join("\n");
    if !out.is_empty() {
        text.push('\n');
    }
    match &args.output {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => write_stdout(&text),
    }
}

// ---------------------------------------------------------------------------

#[derive(Args, Clone, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test sources (or a tab-separated file without --tgt).
    #[arg(long, conflicts_with = "synthetic_test")]
    pub src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    pub tgt: Option<PathBuf>,
    /// Draw this many fresh test pairs from the checkpoint's synthetic task.
    #[arg(long)]
    pub synthetic_test: Option<usize>,
    #[arg(long, default_value_t = 12_345)]
    pub test_seed: u64,
    /// Score these hypotheses instead of decoding.
    #[arg(long)]
    pub hyp: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_penalty: f64,
    #[arg(long, default_value_t = 5)]
    pub bucket_width: usize,
    /// Source-to-target word dictionary (tab-separated) for coverage.
    #[arg(long)]
    pub align_dict: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub overlap_multiplier: usize,
    #[arg(long)]
    pub case_sensitive: bool,
    #[arg(long)]
    pub smooth: bool,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

/// Mean past and future overlap rates of the bag-of-words heads on the
/// reference translations, or `None` for models without routing.
pub fn overlap_rates(
    model: &Model,
    store: &ParamStore<f32>,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    data: &Parallel,
    multiplier: usize,
) -> Result<Option<(f64, f64)>> {
    if model.router.is_none() {
        return Ok(None);
    }
    let examples: Vec<Example> = data
        .sources
        .iter()
        .zip(&data.targets)
        .map(|(s, t)| Example::encode(src_vocab, tgt_vocab, s, t))
        .collect();
    let (mut past, mut future, mut n) = (0.0, 0.0, 0usize);
    for chunk in examples.chunks(32) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = ParallelBatch::from_examples(&refs)?;
        let mut g = Graph::with_params(store);
        let fwd = model.forward(&mut g, &batch, &mut None, RouteOptions::default())?;
        let Some((p, f)) = model.bow_log_probs(&mut g, &fwd)? else {
            return Ok(None);
        };
        let v = tgt_vocab.len();
        for (r, ex) in chunk.iter().enumerate() {
            let rows = |var| -> Vec<Vec<f64>> {
                let d = g.value(var).data();
                (0..ex.tgt.len())
                    .map(|t| {
                        let off = (r * batch.tgt_len + t) * v;
                        d[off..off + v].iter().map(|&x| x as f64).collect()
                    })
                    .collect()
            };
            past += overlap_rate(&rows(p), &ex.tgt, Side::Past, multiplier)?;
            future += overlap_rate(&rows(f), &ex.tgt, Side::Future, multiplier)?;
            n += 1;
        }
    }
    Ok(Some((past / n as f64, future / n as f64)))
}

fn read_dict(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let Some((s, t)) = line.split_once('\t') else {
            return Err(CliError::Format(format!("{}:{}: expected `source<TAB>target`", path.display(), n + 1)));
        };
        out.insert(s.trim().to_string(), t.trim().to_string());
    }
    Ok(out)
}

pub struct EvalOptions {
    pub bleu: BleuOptions,
    pub bucket_width: usize,
    pub overlap_multiplier: usize,
    pub aligner: LexicalAligner,
}

/// Scores `hypotheses` against `data` and, for routed models, measures the
/// bag-of-words overlap rates.
pub fn build_report(
    model: &Model,
    store: &ParamStore<f32>,
    vocabs: (&Vocab, &Vocab),
    data: &Parallel,
    hypotheses: &[String],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if hypotheses.len() != data.len() {
        return Err(CliError::Format(format!(
            "{} hypotheses for {} test sentences",
            hypotheses.len(),
            data.len()
        )));
    }
    let scored: Vec<Scored<'_>> = (0..data.len())
        .map(|i| Scored {
            source: &data.sources[i],
            reference: &data.targets[i],
            hypothesis: &hypotheses[i],
        })
        .collect();
    let cdr = match corpus_cdr(&data.sources, &data.targets, hypotheses, &opts.aligner) {
        Ok(v) => Some(v),
        Err(gdr_core::Error::Input(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let overlap = overlap_rates(model, store, vocabs.0, vocabs.1, data, opts.overlap_multiplier)?;
    Ok(EvalReport {
        sentences: data.len(),
        bleu: bleu(hypotheses, &data.targets, opts.bleu)?,
        exact_match: exact_match(hypotheses, &data.targets)?,
        cdr,
        overlap_past: overlap.map(|o| o.0),
        overlap_future: overlap.map(|o| o.1),
        buckets: length_buckets(&scored, opts.bucket_width, opts.bleu)?,
    })
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (src_vocab, tgt_vocab) = ckpt.vocabs()?;
    let (model, store) = ckpt.model()?;
    let data = match (&args.src, args.synthetic_test) {
        (Some(src), None) => read_parallel(src, args.tgt.as_deref())?,
        (None, Some(count)) => {
            let Some(mut spec) = ckpt.manifest.task else {
                return Err(CliError::Usage("--synthetic-test needs a checkpoint trained on a synthetic task".into()));
            };
            spec.count = count;
            spec.seed = args.test_seed;
            synthetic(&spec)?
        }
        _ => return Err(CliError::Usage("give either --src or --synthetic-test".into())),
    };
    if data.is_empty() {
        return Err(CliError::Format("empty test set".into()));
    }
    let hypotheses = match &args.hyp {
        Some(p) => read_input(Some(p))?,
        None => {
            translate_lines(&model, &store, &src_vocab, &tgt_vocab, &data.sources, args.beam, args.length_penalty)?.0
        }
    };
    let aligner = match (&args.align_dict, &ckpt.manifest.task) {
        (Some(p), _) => LexicalAligner::with_table(read_dict(p)?),
        (None, Some(spec)) => LexicalAligner::with_table(spec.translation_table()),
        (None, None) => LexicalAligner::identity(),
    };
    let opts = EvalOptions {
        bleu: BleuOptions {
            case_sensitive: args.case_sensitive,
            smooth: args.smooth,
        },
        bucket_width: args.bucket_width,
        overlap_multiplier: args.overlap_multiplier,
        aligner,
    };
    let report = build_report(&model, &store, (&src_vocab, &tgt_vocab), &data, &hypotheses, &opts)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Format(e.to_string()))?;
    fs::write(&args.report, json + "\n").map_err(|e| CliError::io(&args.report, e))?;
    write_stdout(&summary(&report))?;
    Ok(report)
}

fn summary(r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "sentences {}\nbleu {:.2}\nexact_match {:.4}\ncdr {}\noverlap_past {}\noverlap_future {}\n",
        r.sentences,
        r.bleu,
        r.exact_match,
        opt(r.cdr),
        opt(r.overlap_past),
        opt(r.overlap_future)
    );
    for b in &r.buckets {
        out.push_str(&format!(
            "bucket {}-{} count {} bleu {:.2} mean_len {:.2}\n",
            b.lo, b.hi, b.count, b.bleu, b.mean_hyp_len
        ));
    }
    out
}

/// A reader that closed the pipe early (`| head`) is not an error.
fn write_stdout(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------

#[derive(Args, Clone, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentence.
    #[arg(long)]
    pub src: String,
    /// Target sentence for teacher forcing; the greedy translation otherwise.
    #[arg(long)]
    pub tgt: Option<String>,
    /// Include the masses after every routing round.
    #[arg(long)]
    pub trace_iterations: bool,
    /// Output file (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn routing_dump(ckpt: &Checkpoint, src: &str, tgt: Option<&str>, trace: bool) -> Result<(RoutingDump, usize)> {
    let (src_vocab, tgt_vocab) = ckpt.vocabs()?;
    let (model, store) = ckpt.model()?;
    let mut unknown = 0;
    let source = encode_counting(&src_vocab, src, &mut unknown);
    let target = tgt.map(|t| encode_counting(&tgt_vocab, t, &mut unknown));
    let dump = inspect_routing(&model, &store, &src_vocab, &tgt_vocab, &source, target.as_deref(), trace)?;
    Ok((dump, unknown))
}

pub fn run_inspect(args: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (dump, unknown) = routing_dump(&ckpt, &args.src, args.tgt.as_deref(), args.trace_iterations)?;
    if unknown > 0 {
        eprintln!("warning: {unknown} tokens are not in the vocabulary and were mapped to <unk>");
    }
    let json = serde_json::to_string_pretty(&dump).map_err(|e| CliError::Format(e.to_string()))? + "\n";
    match &args.out {
        Some(p) => fs::write(p, json).map_err(|e| CliError::io(p, e)),
        None => write_stdout(&json),
    }
}

// ---------------------------------------------------------------------------

#[derive(Args, Clone, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub task: Task,
    #[arg(long, default_value_t = 20)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub filler_rate: f64,
    /// Writes `<prefix>.src` and `<prefix>.tgt`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec = SyntheticSpec::new(args.task, args.vocab_size, args.min_len, args.max_len, args.count, args.seed);
    spec.filler_rate = args.filler_rate;
    spec.validate()?;
    let data = synthetic(&spec)?;
    let with_ext = |ext: &str| {
        let mut p = args.out_prefix.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_lines(&with_ext(".src"), &data.sources)?;
    write_lines(&with_ext(".tgt"), &data.targets)
}

