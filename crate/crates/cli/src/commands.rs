use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use difflm::data::{
    escape_field, examples_from_corpus, generate_synthetic, parse_corpus, unescape_field,
    write_corpus, CorpusLine, Example, SyntheticSpec, SyntheticTask, Tokenizer, TokenizerMode,
};
use difflm::denoiser::{LengthHeadConfig, TransformerConfig, TransformerDenoiser};
use difflm::diffusion::{DecodeMode, Generation};
use difflm::eval::{bleu, exact_match, token_accuracy, EvalReport};
use difflm::exec::{init_threads, mix_seed, Exec};
use difflm::length::{decode_lengths, length_beam_generate};
use difflm::nn::{DType, Float};
use difflm::schedule::ScheduleSpec;
use difflm::training::{
    checkpoint_dtype, prune_vocab, Checkpoint, Init, LogRecord, Objective, TrainConfig, Trainer,
};
use difflm::{NoiseSchedule, ScheduleFamily};

use crate::settings::Settings;

#[derive(Parser, Debug)]
#[command(
    name = "difflm",
    version,
    about = "Train and sample absorbing-state diffusion language models"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Masked-LM pretraining on a corpus, from scratch.
    Pretrain(PretrainArgs),
    /// Diffusion finetuning on prompt/response pairs.
    Adapt(AdaptArgs),
    /// Generate one response per prompt.
    Generate(GenerateArgs),
    /// Write the step-by-step decode of each prompt.
    Trace(TraceArgs),
    /// Score generations (or a hypothesis file) against references.
    Eval(EvalArgs),
    /// Print the noise schedule table.
    InspectSchedule(ScheduleArgs),
    /// Write train/test corpora for a synthetic task.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// key=value settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    /// char or whitespace.
    #[arg(long)]
    tokenizer: Option<TokenizerMode>,
}

#[derive(Args, Debug)]
pub struct OptimArgs {
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    final_lr_ratio: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    shard_size: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Diffusion steps T used during training.
    #[arg(long)]
    diffusion_steps: Option<usize>,
    /// linear or cosine.
    #[arg(long)]
    schedule: Option<ScheduleFamily>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Training corpus (prompt<TAB>response per line).
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Metrics log (step, loss, held-out loss, tokens/sec).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
pub struct AdaptArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Drop vocabulary entries absent from the corpus before training.
    #[arg(long)]
    prune: bool,
    #[arg(long)]
    length_classes: Option<usize>,
    #[arg(long)]
    length_weight: Option<f64>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// topk or ancestral.
    #[arg(long)]
    mode: Option<DecodeMode>,
    /// Diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// linear or cosine.
    #[arg(long)]
    schedule: Option<ScheduleFamily>,
    #[arg(long)]
    length_beams: Option<usize>,
    /// Use each prompt's reference length instead of the length head.
    #[arg(long)]
    oracle_length: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Prompt file (prompt[<TAB>reference] per line); standard input if absent.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Output file; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Directory receiving one trace file per prompt.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Test corpus with references.
    #[arg(long)]
    corpus: PathBuf,
    /// Score these hypotheses (one per line) instead of generating.
    #[arg(long)]
    hypotheses: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    schedule: Option<ScheduleFamily>,
    /// Response length used for the unmask-count column.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// copy, reverse, cipher-translate or sorted-digits.
    #[arg(long)]
    task: Option<SyntheticTask>,
    /// Total vocabulary size, three special tokens included.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectSchedule(a) => cmd_inspect_schedule(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {what} '{}'", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write '{}'", path.display()))
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusLine>> {
    let text = read_text(path, "corpus")?;
    parse_corpus(&text).with_context(|| format!("in corpus '{}'", path.display()))
}

/// Seed and thread settings shared by every command.
fn common(s: &mut Settings, run: &RunArgs) -> Result<(u64, Exec)> {
    let seed = s.get("seed", run.seed, 0u64)?;
    let threads = s.get("threads", run.threads, 1usize)?;
    if threads == 0 {
        bail!("threads must be at least 1");
    }
    if threads > 1 {
        init_threads(threads);
    }
    Ok((seed, Exec::from_threads(threads)))
}

fn train_config(s: &mut Settings, o: &OptimArgs, seed: u64, init: Init) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        steps: s.get("steps", o.steps, d.steps)?,
        batch_size: s.get("batch_size", o.batch_size, d.batch_size)?,
        learning_rate: s.get("learning_rate", o.learning_rate, d.learning_rate)?,
        warmup_steps: s.get("warmup_steps", o.warmup_steps, d.warmup_steps)?,
        final_lr_ratio: s.get("final_lr_ratio", o.final_lr_ratio, d.final_lr_ratio)?,
        label_smoothing: s.get_opt("label_smoothing", o.label_smoothing)?,
        init,
        seed,
        schedule: ScheduleSpec {
            steps: s.get("diffusion_steps", o.diffusion_steps, 50usize)?,
            family: s.get("schedule", o.schedule, ScheduleFamily::default())?,
        },
        clip_norm: s.get("clip_norm", o.clip_norm, d.clip_norm)?,
        adam: d.adam,
        shard_size: s.get("shard_size", o.shard_size, d.shard_size)?,
        length_weight: d.length_weight,
        log_every: s.get("log_every", o.log_every, d.log_every)?,
        heldout_draws: d.heldout_draws,
    };
    s.record("label_smoothing", cfg.smoothing());
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(s: &mut Settings, m: &ModelArgs, vocab_size: usize) -> Result<TransformerConfig> {
    let cfg = TransformerConfig {
        layers: s.get("layers", m.layers, 2usize)?,
        heads: s.get("heads", m.heads, 4usize)?,
        model_dim: s.get("model_dim", m.model_dim, 64usize)?,
        ff_dim: s.get("ff_dim", m.ff_dim, 256usize)?,
        max_positions: s.get("max_positions", m.max_positions, 64usize)?,
        vocab_size,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn fit_tokenizer(lines: &[CorpusLine], mode: TokenizerMode) -> Result<Tokenizer> {
    Ok(Tokenizer::fit(
        lines
            .iter()
            .flat_map(|l| [l.prompt.as_str(), l.response.as_str()]),
        mode,
    )?)
}

fn write_log(path: Option<&Path>, header: &str, log: &[LogRecord]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut text = format!("{header}\nstep\tloss\theldout_loss\ttokens_per_sec\n");
    for r in log {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    write_text(path, &text)
}

fn record_run<F: Float>(ckpt: &mut Checkpoint<F>, phase: &str, steps: usize, s: &Settings) {
    *ckpt.header.steps.entry(phase.to_string()).or_insert(0) += steps as u64;
    for (k, v) in s.resolved() {
        ckpt.header.run.insert(format!("{phase}.{k}"), v.clone());
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut s = Settings::load(a.run.config.as_deref())?;
    let (seed, exec) = common(&mut s, &a.run)?;
    let mode = s.get("tokenizer", a.model.tokenizer, TokenizerMode::Char)?;
    let mask_ratio = s.get("mask_ratio", a.mask_ratio, 0.15f64)?;
    let lines = read_corpus(&a.corpus)?;
    if lines.is_empty() {
        bail!("corpus '{}' has no examples", a.corpus.display());
    }
    let tok = fit_tokenizer(&lines, mode)?;
    let vocab = tok.vocab().clone();
    let mcfg = model_config(&mut s, &a.model, vocab.len())?;
    let tcfg = train_config(&mut s, &a.optim, seed, Init::Scratch)?;
    s.finish()?;
    let train = examples_from_corpus(&lines, &tok, mcfg.max_positions)?;
    let heldout = match &a.heldout {
        Some(p) => examples_from_corpus(&read_corpus(p)?, &tok, mcfg.max_positions)?,
        None => Vec::new(),
    };
    let model = TransformerDenoiser::<f32>::new(mcfg, None, vocab.mask_id(), vocab.pad_id(), seed)?;
    let steps = tcfg.steps;
    let schedule = tcfg.schedule;
    let mut trainer = Trainer::new(
        model,
        train,
        Objective::MaskedLm { mask_ratio },
        tcfg,
        &vocab,
        exec,
    )?;
    let log = trainer.run(&heldout, |_| {})?;
    let mut ckpt = Checkpoint::new(trainer.into_model(), vocab, mode, schedule)?;
    record_run(&mut ckpt, "pretrain", steps, &s);
    ckpt.save(&a.out)
        .with_context(|| format!("cannot write checkpoint '{}'", a.out.display()))?;
    write_log(a.log.as_deref(), &s.header(), &log)
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let mut s = Settings::load(a.run.config.as_deref())?;
    let (seed, exec) = common(&mut s, &a.run)?;
    let lines = read_corpus(&a.corpus)?;
    if lines.is_empty() {
        bail!("corpus '{}' has no examples", a.corpus.display());
    }
    let prune = s.switch("prune", a.prune)?;
    let length_weight = s.get("length_weight", a.length_weight, 0.1f64)?;
    let mut ckpt: Checkpoint<f32> = match &a.init {
        Some(p) => {
            let ckpt = load_checkpoint::<f32>(p)?;
            let examples =
                examples_from_corpus(&lines, &ckpt.tokenizer(), ckpt.model.config().max_positions)?;
            if prune {
                prune_vocab(&ckpt, &examples)?
            } else {
                ckpt
            }
        }
        None => {
            let mode = s.get("tokenizer", a.model.tokenizer, TokenizerMode::Char)?;
            let tok = fit_tokenizer(&lines, mode)?;
            let vocab = tok.vocab().clone();
            let mcfg = model_config(&mut s, &a.model, vocab.len())?;
            let model =
                TransformerDenoiser::<f32>::new(mcfg, None, vocab.mask_id(), vocab.pad_id(), seed)?;
            Checkpoint::new(model, vocab, mode, ScheduleSpec::default())?
        }
    };
    let init = match &a.init {
        Some(p) => Init::Checkpoint(p.clone()),
        None => Init::Scratch,
    };
    let mut tcfg = train_config(&mut s, &a.optim, seed, init)?;
    tcfg.length_weight = length_weight;
    let tok = ckpt.tokenizer();
    let max_positions = ckpt.model.config().max_positions;
    let train = examples_from_corpus(&lines, &tok, max_positions)?;
    let longest = train.iter().map(|e| e.response.len()).max().unwrap_or(1);
    let classes = match ckpt.model.length_config() {
        Some(c) => c.classes,
        None => s.get("length_classes", a.length_classes, longest)?,
    };
    s.finish()?;
    let heldout = match &a.heldout {
        Some(p) => examples_from_corpus(&read_corpus(p)?, &tok, max_positions)?,
        None => Vec::new(),
    };
    let vocab = ckpt.vocab().clone();
    let d = ckpt.model.config().model_dim;
    let model = ckpt.model.clone().with_length_head(
        LengthHeadConfig { classes, ff_dim: d },
        mix_seed(seed, 0x1E47),
    )?;
    let steps = tcfg.steps;
    ckpt.header.schedule = tcfg.schedule;
    let mut trainer = Trainer::new(model, train, Objective::Diffusion, tcfg, &vocab, exec)?;
    let log = trainer.run(&heldout, |_| {})?;
    ckpt.model = trainer.into_model();
    ckpt.header.length = ckpt.model.length_config();
    record_run(&mut ckpt, "adapt", steps, &s);
    ckpt.save(&a.out)
        .with_context(|| format!("cannot write checkpoint '{}'", a.out.display()))?;
    write_log(a.log.as_deref(), &s.header(), &log)
}

fn load_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read checkpoint '{}'", path.display()))?;
    let dtype =
        checkpoint_dtype(&bytes).with_context(|| format!("in checkpoint '{}'", path.display()))?;
    if dtype != F::DTYPE {
        bail!(
            "checkpoint '{}' stores {dtype:?} weights but {:?} was expected",
            path.display(),
            F::DTYPE
        );
    }
    Checkpoint::from_bytes(&bytes).with_context(|| format!("in checkpoint '{}'", path.display()))
}

/// A prompt line, optionally with a `\t`-separated reference.
struct PromptLine {
    prompt: String,
    reference: Option<String>,
}

fn parse_prompts(text: &str) -> Result<Vec<PromptLine>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut fields = raw.split('\t');
        let un = |f: &str| unescape_field(f).map_err(|m| anyhow!("prompt line {}: {m}", i + 1));
        let prompt = un(fields.next().unwrap_or(""))?;
        let reference = fields.next().map(un).transpose()?;
        if fields.next().is_some() {
            bail!("prompt line {}: more than two tab-separated fields", i + 1);
        }
        out.push(PromptLine { prompt, reference });
    }
    Ok(out)
}

fn read_prompts(path: Option<&Path>) -> Result<Vec<PromptLine>> {
    let text = match path {
        Some(p) => read_text(p, "prompts")?,
        None => {
            let mut t = String::new();
            std::io::stdin()
                .read_to_string(&mut t)
                .context("cannot read prompts from standard input")?;
            t
        }
    };
    parse_prompts(&text)
}

struct Decoder {
    mode: DecodeMode,
    schedule: NoiseSchedule,
    beams: usize,
    oracle_length: bool,
    seed: u64,
}

fn decoder(s: &mut Settings, d: &DecodeArgs, seed: u64, family: ScheduleFamily) -> Result<Decoder> {
    let mode = s.get("mode", d.mode, DecodeMode::Topk)?;
    let steps = s.get("steps", d.steps, 50usize)?;
    let family = s.get("schedule", d.schedule, family)?;
    let beams = s.get("length_beams", d.length_beams, 1usize)?;
    let oracle_length = s.switch("oracle_length", d.oracle_length)?;
    if beams == 0 {
        bail!("length_beams must be at least 1");
    }
    let schedule = NoiseSchedule::from_spec(ScheduleSpec { steps, family })?;
    Ok(Decoder {
        mode,
        schedule,
        beams,
        oracle_length,
        seed,
    })
}

/// Decode every prompt; prompt `i` uses seed `mix_seed(seed, i)`.
fn decode_all<F: Float>(
    ckpt: &Checkpoint<F>,
    prompts: &[PromptLine],
    dec: &Decoder,
    exec: Exec,
) -> Result<Vec<Generation>> {
    let tok = ckpt.tokenizer();
    let model = &ckpt.model;
    let head_trained =
        model.length_config().is_some() && ckpt.header.steps.get("adapt").copied().unwrap_or(0) > 0;
    if !dec.oracle_length && model.length_config().is_none() {
        bail!("checkpoint has no length head; pass --oracle-length");
    }
    exec.try_map_range(prompts.len(), |i| -> Result<Generation> {
        let p = &prompts[i];
        let mut ids = tok
            .tokenize(&p.prompt)
            .with_context(|| format!("prompt {}", i + 1))?;
        ids.push(tok.vocab().sep_id());
        let seed = mix_seed(dec.seed, i as u64);
        let search = if dec.oracle_length {
            let reference = p.reference.as_ref().ok_or_else(|| {
                anyhow!(
                    "prompt {}: --oracle-length needs a reference after a tab",
                    i + 1
                )
            })?;
            let len = tok
                .tokenize(reference)
                .with_context(|| format!("reference {}", i + 1))?
                .len();
            decode_lengths(
                &ids,
                &[len],
                None,
                model,
                &dec.schedule,
                dec.mode,
                seed,
                Exec::Serial,
            )?
        } else {
            length_beam_generate(
                &ids,
                model,
                &dec.schedule,
                dec.beams,
                dec.mode,
                seed,
                head_trained,
                Exec::Serial,
            )?
        };
        Ok(search.generation)
    })
}

fn with_checkpoint<R>(
    path: &Path,
    f32_case: impl FnOnce(Checkpoint<f32>) -> Result<R>,
    f64_case: impl FnOnce(Checkpoint<f64>) -> Result<R>,
) -> Result<R> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read checkpoint '{}'", path.display()))?;
    let ctx = || format!("in checkpoint '{}'", path.display());
    match checkpoint_dtype(&bytes).with_context(ctx)? {
        DType::F32 => f32_case(Checkpoint::from_bytes(&bytes).with_context(ctx)?),
        DType::F64 => f64_case(Checkpoint::from_bytes(&bytes).with_context(ctx)?),
    }
}

/// Everything a decoding command emits.
struct Decoded {
    outputs: Vec<String>,
    traces: Vec<String>,
    settings: Settings,
    tokenizer: TokenizerMode,
}

fn decode_with<F: Float>(
    c: Checkpoint<F>,
    prompts: &[PromptLine],
    run: &RunArgs,
    d: &DecodeArgs,
) -> Result<Decoded> {
    let mut s = Settings::load(run.config.as_deref())?;
    let (seed, exec) = common(&mut s, run)?;
    let dec = decoder(&mut s, d, seed, c.header.schedule.family)?;
    s.finish()?;
    let gens = decode_all(&c, prompts, &dec, exec)?;
    let tok = c.tokenizer();
    let outputs = gens
        .iter()
        .map(|g| tok.detokenize(&g.tokens))
        .collect::<difflm::Result<Vec<_>>>()?;
    let traces = gens
        .iter()
        .map(|g| g.trace.render(c.vocab(), tok.joiner()))
        .collect();
    Ok(Decoded {
        outputs,
        traces,
        settings: s,
        tokenizer: c.header.tokenizer,
    })
}

fn decode_checkpoint(d: &DecodeArgs, run: &RunArgs, prompts: &[PromptLine]) -> Result<Decoded> {
    let path = d
        .checkpoint
        .as_deref()
        .ok_or_else(|| anyhow!("--checkpoint is required"))?;
    with_checkpoint(
        path,
        |c| decode_with(c, prompts, run, d),
        |c| decode_with(c, prompts, run, d),
    )
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let prompts = read_prompts(a.prompts.as_deref())?;
    let dec = decode_checkpoint(&a.decode, &a.run, &prompts)?;
    let mut text = dec.settings.header();
    text.push('\n');
    for o in &dec.outputs {
        text.push_str(&escape_field(o));
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let prompts = read_prompts(a.prompts.as_deref())?;
    let dec = decode_checkpoint(&a.decode, &a.run, &prompts)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("cannot create '{}'", a.out_dir.display()))?;
    write_text(
        &a.out_dir.join("config.txt"),
        &format!("{}\n", dec.settings.header()),
    )?;
    for (i, r) in dec.traces.iter().enumerate() {
        write_text(&a.out_dir.join(format!("trace-{:04}.tsv", i + 1)), r)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let lines = read_corpus(&a.corpus)?;
    if lines.is_empty() {
        bail!("corpus '{}' has no examples", a.corpus.display());
    }
    let (hyps, mode, settings) = match &a.hypotheses {
        Some(p) => {
            let mut s = Settings::load(a.run.config.as_deref())?;
            let mode = s.get("tokenizer", None, TokenizerMode::Char)?;
            s.get("source", None, "hypotheses".to_string())?;
            s.finish()?;
            let text = read_text(p, "hypotheses")?;
            let hyps = text
                .lines()
                .filter(|l| !l.starts_with('#'))
                .enumerate()
                .map(|(i, l)| unescape_field(l).map_err(|m| anyhow!("hypothesis {}: {m}", i + 1)))
                .collect::<Result<Vec<_>>>()?;
            (hyps, mode, s)
        }
        None => {
            let prompts: Vec<PromptLine> = lines
                .iter()
                .map(|l| PromptLine {
                    prompt: l.prompt.clone(),
                    reference: Some(l.response.clone()),
                })
                .collect();
            let dec = decode_checkpoint(&a.decode, &a.run, &prompts)?;
            (dec.outputs, dec.tokenizer, dec.settings)
        }
    };
    let refs: Vec<Vec<&str>> = lines.iter().map(|l| mode.split(&l.response)).collect();
    let hyp_tokens: Vec<Vec<&str>> = hyps.iter().map(|h| mode.split(h)).collect();
    let mut report = EvalReport::new(lines.len(), settings.resolved().clone())?;
    report.push("exact_match", exact_match(&hyp_tokens, &refs)?)?;
    report.push("token_accuracy", token_accuracy(&hyp_tokens, &refs)?)?;
    report.push("bleu", bleu(&hyp_tokens, &refs, 4)?)?;
    emit(a.out.as_deref(), &report.render())
}

fn cmd_inspect_schedule(a: ScheduleArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    let steps = s.get("steps", a.steps, 50usize)?;
    let family = s.get("schedule", a.schedule, ScheduleFamily::default())?;
    let n = s.get("length", a.length, 16usize)?;
    s.finish()?;
    let sched = NoiseSchedule::from_spec(ScheduleSpec { steps, family })?;
    let mut out = format!(
        "{}\n# t\talpha\tmask_ratio\tloss_weight\tunmask_count\n",
        s.header()
    );
    for t in 0..=steps {
        let w = match sched.loss_weight(t) {
            Ok(w) => format!("{w:.6}"),
            Err(_) => "-".to_string(),
        };
        writeln!(
            out,
            "{t}\t{:.6}\t{:.6}\t{w}\t{}",
            sched.alpha(t),
            sched.mask_ratio(t),
            sched.unmask_count(n, t)?
        )?;
    }
    print!("{out}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut s = Settings::load(a.run.config.as_deref())?;
    let seed = s.get("seed", a.run.seed, 0u64)?;
    let spec = SyntheticSpec {
        task: s.get("task", a.task, SyntheticTask::Reverse)?,
        vocab_size: s.get("vocab_size", a.vocab_size, 16usize)?,
        min_len: s.get("min_len", a.min_len, 4usize)?,
        max_len: s.get("max_len", a.max_len, 12usize)?,
        seed,
        train_size: s.get("train_size", a.train_size, 1000usize)?,
        test_size: s.get("test_size", a.test_size, 100usize)?,
        max_positions: s.get("max_positions", a.max_positions, 64usize)?,
    };
    s.finish()?;
    let data = generate_synthetic(&spec)?;
    let render = |set: &[Example]| -> Result<String> {
        let pairs = set
            .iter()
            .map(|e| {
                Ok((
                    data.tokenizer.detokenize(e.payload())?,
                    data.tokenizer.detokenize(&e.response)?,
                ))
            })
            .collect::<Result<Vec<(String, String)>>>()?;
        Ok(format!(
            "{}\n{}",
            s.header(),
            write_corpus(pairs.iter().map(|(p, r)| (p.as_str(), r.as_str())))
        ))
    };
    write_text(&a.out_train, &render(&data.train)?)?;
    write_text(&a.out_test, &render(&data.test)?)
}
