use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use decore_core::decoder::{
    diagnostics_to_json_lines, generate, DecodeConfig, DecodeError, DecodeMode, MaskedModel,
    NextTokenModel, StepDiagnostics,
};
use decore_core::detector::{detect_retrieval_heads, DetectorConfig, DetectorError, RetrievalScoreTable, VocabSplit};
use decore_core::harness::{
    self, compare_entropy, default_detector_config, memorized_token_of, run_task,
    select_masked_heads, sweep_masked_heads, HarnessError, TaskConfig, TaskKind, TaskModels,
    TaskResult,
};
use decore_core::zoo::{self, build_induction_model, random_model, WiredModelSpec, ZooError};
use decore_core::{HeadId, HeadMask, Model, ModelConfig, ModelError};
use serde::Serialize;
use serde_json::Value;

mod assert;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_ASSERT: u8 = 4;

#[derive(Parser)]
#[command(name = "decore", version, about = "Retrieval-head masking and contrastive decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Static,
    Entropy,
    #[value(name = "entropy-lite")]
    EntropyLite,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Copy,
    Swap,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::Swap => TaskKind::Swap,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Induction,
    Random,
}

#[derive(clap::Args, Clone)]
struct ModeOpts {
    #[arg(long, value_enum, default_value = "greedy")]
    mode: ModeArg,
    /// Contrast weight, required by `--mode static`.
    #[arg(long)]
    alpha: Option<f64>,
}

impl ModeOpts {
    fn decode_mode(&self) -> Result<DecodeMode, Failure> {
        match (self.mode, self.alpha) {
            (ModeArg::Greedy, _) => Ok(DecodeMode::Greedy),
            (ModeArg::Static, Some(alpha)) if alpha.is_finite() => Ok(DecodeMode::DecoreStatic { alpha }),
            (ModeArg::Static, _) => Err(Failure::usage(anyhow!("--mode static needs a finite --alpha"))),
            (ModeArg::Entropy, _) => Ok(DecodeMode::DecoreEntropy),
            (ModeArg::EntropyLite, _) => Ok(DecodeMode::DecoreEntropyLite),
        }
    }
}

#[derive(clap::Args, Clone)]
struct HeadSource {
    /// Retrieval score table written by `detect`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Score heads on the fly instead of reading `--scores`.
    #[arg(long, conflicts_with = "scores")]
    detect_inline: bool,
    /// Separate amateur model for `--mode entropy-lite`.
    #[arg(long)]
    amateur: Option<PathBuf>,
    /// Token treated as the memorized answer (default: argmax of the output bias).
    #[arg(long)]
    memorized_token: Option<u32>,
}

#[derive(clap::Args, Clone)]
struct TaskOpts {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_HAYSTACK_LEN)]
    haystack_len: usize,
    #[arg(long, default_value_t = harness::DEFAULT_NEEDLE_LEN)]
    needle_len: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Score every head by copy-paste behaviour on needle probes.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = harness::DEFAULT_DETECTOR_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = harness::DEFAULT_HAYSTACK_LEN)]
        haystack_len: usize,
        #[arg(long, default_value_t = harness::DEFAULT_NEEDLE_LEN)]
        needle_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        memorized_token: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a single prompt.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        mode: ModeOpts,
        #[arg(long, default_value_t = 0)]
        masked_heads: usize,
        #[command(flatten)]
        heads: HeadSource,
        /// Space-separated token ids.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        /// Space-separated stop token ids.
        #[arg(long, default_value = "")]
        stop: String,
        /// Print a JSON object with tokens and per-step diagnostics.
        #[arg(long)]
        json: bool,
        /// Also write per-step diagnostics as JSON lines.
        #[arg(long)]
        diagnostics_out: Option<PathBuf>,
    },
    /// Run a copy or swap task and report exact match and entropy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        task: TaskOpts,
        #[command(flatten)]
        mode: ModeOpts,
        #[arg(long, default_value_t = 0)]
        masked_heads: usize,
        #[command(flatten)]
        heads: HeadSource,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Check a metric of the result, e.g. `exact_match>=0.99`.
        #[arg(long = "assert")]
        asserts: Vec<String>,
    },
    /// Run a task for several masked-head counts and correlate count with EM.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        task: TaskOpts,
        #[command(flatten)]
        mode: ModeOpts,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        ns: Vec<usize>,
        #[command(flatten)]
        heads: HeadSource,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "assert")]
        asserts: Vec<String>,
    },
    /// Compare per-sample entropies across `eval` results.
    EntropyReport {
        #[arg(long, num_args = 2.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "assert")]
        asserts: Vec<String>,
    },
    /// Write a wired induction model or a seeded random model.
    BuildModel {
        #[arg(long, value_enum)]
        kind: ModelKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        vocab_size: usize,
        #[arg(long, default_value_t = 40)]
        max_seq_len: usize,
        /// Induction: token favoured by the output bias.
        #[arg(long, default_value_t = 0)]
        memorized_token: u32,
        /// Induction: output-bias logit of the memorized token.
        #[arg(long, default_value_t = 2.0)]
        bias_strength: f64,
        /// Random: weight seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        d_head: usize,
        #[arg(long)]
        layer_norm: bool,
        #[arg(long)]
        mlp: bool,
    },
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: anyhow::Error) -> Self {
        Self { code: EXIT_USAGE, error }
    }

    fn data(error: anyhow::Error) -> Self {
        Self { code: EXIT_DATA, error }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Detector(d) => detector_code(d),
            HarnessError::Decode(d) => decode_code(d),
            HarnessError::Model(m) => model_code(m),
            HarnessError::Usage(_) | HarnessError::Config(_) | HarnessError::MissingScores(_) => EXIT_USAGE,
        };
        Self { code, error: e.into() }
    }
}

impl From<DecodeError> for Failure {
    fn from(e: DecodeError) -> Self {
        Self { code: decode_code(&e), error: e.into() }
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        Self { code: detector_code(&e), error: e.into() }
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::TokenOutOfRange { .. } | ModelError::SequenceTooLong { .. } | ModelError::EmptySequence => {
            EXIT_USAGE
        }
        _ => EXIT_DATA,
    }
}

fn decode_code(e: &DecodeError) -> u8 {
    match e {
        DecodeError::Model(m) => model_code(m),
        DecodeError::Tensor(_) => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn detector_code(e: &DetectorError) -> u8 {
    match e {
        DetectorError::Config(_) | DetectorError::Range { .. } => EXIT_USAGE,
        DetectorError::Model(m) => model_code(m),
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Detect {
            model,
            samples,
            haystack_len,
            needle_len,
            seed,
            memorized_token,
            out,
        } => {
            let model = load_model(&model)?;
            let mem = memorized_token.unwrap_or_else(|| memorized_token_of(&model));
            let split = VocabSplit::for_vocab(model.config().vocab_size, Some(mem))?;
            let cfg = DetectorConfig {
                samples,
                haystack_len,
                needle_len,
                seed,
                split,
            };
            let table = detect_retrieval_heads(&model, &cfg)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            emit(out.as_deref(), &buf)
        }
        Command::Decode {
            model,
            mode,
            masked_heads,
            heads,
            prompt,
            max_new,
            stop,
            json,
            diagnostics_out,
        } => {
            let mode = mode.decode_mode()?;
            let prompt = parse_tokens(&prompt, "--prompt")?;
            let stop_tokens = parse_tokens(&stop, "--stop")?.into_iter().collect();
            let base_model = load_model(&model)?;
            let amateur_model = heads.amateur.as_deref().map(load_model).transpose()?;
            let table = score_table(&base_model, &heads, masked_heads, 0)?;
            let chosen = select_masked_heads(&base_model, table.as_ref(), masked_heads)?;
            let mask = HeadMask::new(chosen.iter().copied());

            let base;
            let amateur;
            match mode {
                DecodeMode::Greedy => {
                    base = MaskedModel::new(&base_model, mask)?;
                    amateur = None;
                }
                DecodeMode::DecoreStatic { .. } | DecodeMode::DecoreEntropy => {
                    base = MaskedModel::unmasked(&base_model);
                    amateur = Some(MaskedModel::new(&base_model, mask)?);
                }
                DecodeMode::DecoreEntropyLite => {
                    let a = amateur_model
                        .as_ref()
                        .ok_or_else(|| Failure::usage(anyhow!("--mode entropy-lite needs --amateur")))?;
                    base = MaskedModel::unmasked(&base_model);
                    amateur = Some(MaskedModel::unmasked(a));
                }
            }
            let mut cfg = DecodeConfig::new(mode, max_new);
            cfg.masked_heads = chosen.clone();
            cfg.stop_tokens = stop_tokens;
            let g = generate(&base, amateur.as_ref().map(|a| a as &dyn NextTokenModel), &prompt, &cfg)?;

            if let Some(path) = diagnostics_out {
                write_file(&path, diagnostics_to_json_lines(&g.diagnostics).as_bytes())?;
            }
            if json {
                #[derive(Serialize)]
                struct DecodeReport<'a> {
                    schema_version: u32,
                    mode: &'static str,
                    alpha: Option<f64>,
                    masked_heads: &'a [HeadId],
                    prompt: &'a [u32],
                    tokens: &'a [u32],
                    diagnostics: &'a [StepDiagnostics],
                }
                let report = DecodeReport {
                    schema_version: harness::SCHEMA_VERSION,
                    mode: mode.name(),
                    alpha: mode.static_alpha(),
                    masked_heads: &chosen,
                    prompt: &prompt,
                    tokens: &g.tokens,
                    diagnostics: &g.diagnostics,
                };
                emit(None, &to_json(&report)?)
            } else {
                let line = g.tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
                emit(None, format!("{line}\n").as_bytes())
            }
        }
        Command::Eval {
            model,
            task,
            mode,
            masked_heads,
            heads,
            out,
            asserts,
        } => {
            let cfg = task_config(&task, &mode, masked_heads, &heads)?;
            let base = load_model(&model)?;
            let amateur = heads.amateur.as_deref().map(load_model).transpose()?;
            let table = score_table(&base, &heads, masked_heads, task.seed)?;
            let models = task_models(&base, amateur.as_ref(), table.as_ref());
            let result = run_task(models, &cfg)?;
            finish(out.as_deref(), &result, &asserts)
        }
        Command::Sweep {
            model,
            task,
            mode,
            ns,
            heads,
            out,
            asserts,
        } => {
            let cfg = task_config(&task, &mode, 0, &heads)?;
            let base = load_model(&model)?;
            let amateur = heads.amateur.as_deref().map(load_model).transpose()?;
            let max_n = ns.iter().copied().max().unwrap_or(0);
            let table = score_table(&base, &heads, max_n, task.seed)?;
            let models = task_models(&base, amateur.as_ref(), table.as_ref());
            let result = sweep_masked_heads(models, &cfg, &ns)?;
            finish(out.as_deref(), &result, &asserts)
        }
        Command::EntropyReport { inputs, out, asserts } => {
            let results = inputs
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))
                        .map_err(Failure::data)?;
                    serde_json::from_str::<TaskResult>(&text)
                        .with_context(|| format!("parsing {} as an eval result", p.display()))
                        .map_err(Failure::data)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let report = compare_entropy(&results)?;
            finish(out.as_deref(), &report, &asserts)
        }
        Command::BuildModel {
            kind,
            out,
            vocab_size,
            max_seq_len,
            memorized_token,
            bias_strength,
            seed,
            layers,
            heads,
            d_model,
            d_head,
            layer_norm,
            mlp,
        } => {
            let model = match kind {
                ModelKind::Induction => build_induction_model(&WiredModelSpec {
                    vocab_size,
                    max_seq_len,
                    memorized_token,
                    memorized_bias_strength: bias_strength,
                })
                .map_err(zoo_failure)?,
                ModelKind::Random => random_model(
                    ModelConfig {
                        n_layers: layers,
                        n_heads: heads,
                        d_model,
                        d_head,
                        vocab_size,
                        max_seq_len,
                        use_layer_norm: layer_norm,
                        use_mlp: mlp,
                    },
                    seed,
                )
                .map_err(|e| Failure::usage(e.into()))?,
            };
            let bytes = zoo::to_bytes(&model).map_err(|e| Failure::data(e.into()))?;
            write_file(&out, &bytes)
        }
    }
}

fn zoo_failure(e: ZooError) -> Failure {
    match e {
        ZooError::InvalidSpec(_) => Failure::usage(e.into()),
        _ => Failure::data(e.into()),
    }
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    zoo::load_flat_model(path)
        .with_context(|| format!("loading model {}", path.display()))
        .map_err(Failure::data)
}

fn load_scores(path: &Path) -> Result<RetrievalScoreTable, Failure> {
    let file = fs::File::open(path)
        .with_context(|| format!("opening score table {}", path.display()))
        .map_err(Failure::data)?;
    RetrievalScoreTable::read_csv(file)
        .with_context(|| format!("reading score table {}", path.display()))
        .map_err(Failure::data)
}

/// Loads `--scores`, or runs the detector for `--detect-inline`. Nothing is
/// loaded when no heads are masked.
fn score_table(
    model: &Model,
    heads: &HeadSource,
    masked_n: usize,
    seed: u64,
) -> Result<Option<RetrievalScoreTable>, Failure> {
    if let Some(path) = &heads.scores {
        return load_scores(path).map(Some);
    }
    if heads.detect_inline && masked_n > 0 {
        let cfg = default_detector_config(model, heads.memorized_token, seed)?;
        return Ok(Some(detect_retrieval_heads(model, &cfg)?));
    }
    Ok(None)
}

fn task_config(task: &TaskOpts, mode: &ModeOpts, masked_n: usize, heads: &HeadSource) -> Result<TaskConfig, Failure> {
    let mut cfg = TaskConfig::new(task.task.into(), mode.decode_mode()?, masked_n, task.samples, task.seed);
    cfg.haystack_len = task.haystack_len;
    cfg.needle_len = task.needle_len;
    cfg.memorized_token = heads.memorized_token;
    Ok(cfg)
}

fn task_models<'a>(
    base: &'a Model,
    amateur: Option<&'a Model>,
    scores: Option<&'a RetrievalScoreTable>,
) -> TaskModels<'a> {
    TaskModels {
        base,
        amateur,
        scores,
    }
}

fn parse_tokens(text: &str, flag: &str) -> Result<Vec<u32>, Failure> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| Failure::usage(anyhow!("{flag}: `{t}` is not a token id")))
        })
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::data(e.into()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes the report, then evaluates every `--assert` against it.
fn finish<T: Serialize>(out: Option<&Path>, value: &T, asserts: &[String]) -> Result<(), Failure> {
    let checks = asserts
        .iter()
        .map(|a| assert::Check::parse(a).map_err(Failure::usage))
        .collect::<Result<Vec<_>, _>>()?;
    emit(out, &to_json(value)?)?;
    let doc: Value = serde_json::to_value(value).map_err(|e| Failure::data(e.into()))?;
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|c| c.evaluate(&doc).err())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_ASSERT,
            error: anyhow!("assertion failed: {}", failed.join("; ")),
        })
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => write_file(path, bytes),
        None => io::stdout()
            .write_all(bytes)
            .context("writing to stdout")
            .map_err(Failure::data),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::data)
}
