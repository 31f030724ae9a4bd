//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
//! (non-finite loss, infeasible matching, failed self check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{grad_check, sample_coords, AutodiffError, NodeId, Tape, Tensor};
use crate::data::{
    build_vocab, load_narratives, load_region_features, prepare_examples, read_jsonl,
    save_narratives, save_region_features, synth_dataset, write_jsonl, CandidateLine, DataError,
    ReferenceLine, SynthSpec, TraceLine,
};
use crate::lbm::{band_mask, lbm_brute_force, lbm_score, LbmError};
use crate::metrics::{cider, corpus_bleu, rouge_l, tokenize};
use crate::model::{
    build_masks, generate_caption, generate_joint, generate_trace, load_checkpoint, mitr_forward,
    save_checkpoint, teacher_inputs, CaptionTokens, Checkpoint, ModelConfig, ModelError,
    ModelParams, TaskMode,
};
use crate::trace::{AlignedTrace, TraceBox};
use crate::training::{caption_accuracy, train, LossWeights, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LbmError> for CliError {
    fn from(e: LbmError) -> Self {
        match e {
            LbmError::Infeasible { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Autodiff(AutodiffError::NonFinite { .. }) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Lbm(l) => l.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "mitr",
    version,
    about = "Controlled caption / trace generation with a mirrored transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Turn narrative records into one box per caption word.
    EncodeTrace {
        /// Narrative JSONL input.
        #[arg(long = "in")]
        input: PathBuf,
        /// Trace JSONL output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted traces against reference traces, pair by pair.
    Lbm {
        /// Reference trace JSONL.
        #[arg(long)]
        gt: PathBuf,
        /// Predicted trace JSONL, same image order as --gt.
        #[arg(long)]
        pred: PathBuf,
        /// Matching window; repeat for several windows.
        #[arg(long = "k", default_values_t = [0usize, 1])]
        k: Vec<usize>,
        /// Print one JSON document instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Training narratives (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Region feature file.
        #[arg(long)]
        features: PathBuf,
        /// Optional validation narratives, looked up in the same feature file.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of trace, caption, joint, cycle_b, cycle_s.
        #[arg(long)]
        tasks: Option<String>,
        /// Overrides both the config file and MITR_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Initial learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Per-epoch loss log (JSONL).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Print the summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run a checkpoint over a narrative file.
    Generate {
        /// joint: caption and trace from the image alone.
        #[arg(long, value_enum)]
        task: GenTask,
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Narratives that supply the given trace (caption task) or caption
        /// (trace task).
        #[arg(long)]
        data: PathBuf,
        /// Region feature file.
        #[arg(long)]
        features: PathBuf,
        /// Beam width for captions; 1 is greedy.
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Output JSONL; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BLEU-1, BLEU-4, ROUGE-L and CIDEr of candidate captions.
    EvalCaptions {
        /// `{"image_id", "caption"}` JSONL.
        #[arg(long)]
        cand: PathBuf,
        /// `{"image_id", "captions": [...]}` JSONL.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Print the scores as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Quick matcher, mask and gradient checks.
    Selftest {
        /// Print the check results as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic narrative set and its features.
    Synth {
        /// Directory that receives narratives.jsonl and features.bin.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 320)]
        images: usize,
        /// Number of object types.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Defaults to MITR_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GenTask {
    Joint,
    Caption,
    Trace,
}

/// Everything a training run reads from a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk(0, 0);
        Self {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ffn: m.d_ffn,
            max_len: m.max_len,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
            v.parse()
                .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}")))
        }
        let t = &mut self.train;
        match key {
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "d_ffn" => self.d_ffn = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "decay" => t.decay = num(key, value)?,
            "decay_every" => t.decay_every = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "max_steps" => t.max_steps = Some(num(key, value)?),
            "replace_p" => t.replace_p = num(key, value)?,
            "tau" => t.tau = num(key, value)?,
            "segments" => t.segments = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "tasks" => {
                t.tasks = value
                    .parse()
                    .map_err(|e: TrainError| CliError::Usage(e.to_string()))?
            }
            "eval_every" => t.eval_every = num(key, value)?,
            "eval_limit" => t.eval_limit = num(key, value)?,
            "beam" => t.beam = num(key, value)?,
            "lambda_trace" => self.weights.trace = num(key, value)?,
            "lambda_caption" => self.weights.caption = num(key, value)?,
            "lambda_cycle" => self.weights.cycle = num(key, value)?,
            "lambda_joint" => self.weights.joint = num(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn model(&self, vocab_size: usize, d_visual: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            vocab_size,
            d_visual,
            max_len: self.max_len,
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("MITR_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("MITR_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn print_json<T: Serialize>(v: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{s}");
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::EncodeTrace { input, out } => encode_traces(&input, &out),
        Command::Lbm { gt, pred, k, json } => lbm_files(&gt, &pred, &k, json),
        Command::Train {
            data,
            features,
            val,
            config,
            tasks,
            seed,
            lr,
            epochs,
            max_steps,
            batch_size,
            metrics,
            out,
            json,
        } => {
            let mut rc = match &config {
                Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
                None => RunConfig::default(),
            };
            if let Some(s) = env_seed()? {
                rc.train.seed = s;
            }
            if let Some(t) = tasks {
                rc.set("tasks", &t)?;
            }
            let t = &mut rc.train;
            t.seed = seed.unwrap_or(t.seed);
            t.lr = lr.unwrap_or(t.lr);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.max_steps = max_steps.or(t.max_steps);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            train_files(
                &data,
                &features,
                val.as_deref(),
                &rc,
                metrics.as_deref(),
                &out,
                json,
            )
        }
        Command::Generate {
            task,
            ckpt,
            data,
            features,
            beam,
            out,
        } => generate_files(task, &ckpt, &data, &features, beam, out.as_deref()),
        Command::EvalCaptions {
            cand,
            reference,
            json,
        } => eval_caption_files(&cand, &reference, json),
        Command::Selftest { json } => selftest(json),
        Command::Synth {
            out_dir,
            images,
            k,
            seed,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            };
            let spec = SynthSpec {
                k,
                images,
                seed,
                ..SynthSpec::default()
            };
            let d = synth_dataset(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            save_narratives(out_dir.join("narratives.jsonl"), &d.records)?;
            save_region_features(out_dir.join("features.bin"), &d.features)?;
            println!("wrote {} records to {}", d.records.len(), out_dir.display());
            Ok(())
        }
    }
}

pub fn encode_traces(input: &Path, out: &Path) -> Result<(), CliError> {
    let records = load_narratives(input)?;
    let lines = records
        .iter()
        .map(|r| {
            Ok(TraceLine {
                image_id: r.image_id.clone(),
                boxes: r.encode()?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    write_jsonl(BufWriter::new(File::create(out)?), &lines)?;
    Ok(())
}

#[derive(Serialize)]
struct PairScores {
    image_id: String,
    scores: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct LbmReport {
    pairs: Vec<PairScores>,
    mean: BTreeMap<String, f64>,
}

pub fn lbm_files(gt: &Path, pred: &Path, ks: &[usize], json: bool) -> Result<(), CliError> {
    let gt: Vec<TraceLine> = read_jsonl(gt)?;
    let pred: Vec<TraceLine> = read_jsonl(pred)?;
    if gt.len() != pred.len() {
        return Err(CliError::Data(format!(
            "{} reference traces but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    for (i, (a, b)) in gt.iter().zip(&pred).enumerate() {
        if a.image_id != b.image_id {
            return Err(CliError::Data(format!(
                "line {}: image {:?} paired with {:?}",
                i + 1,
                a.image_id,
                b.image_id
            )));
        }
        for bx in a.boxes.iter().chain(b.boxes.iter()) {
            bx.validate().map_err(|e| {
                CliError::Data(format!("line {}: image {:?}: {e}", i + 1, a.image_id))
            })?;
        }
    }
    // Collecting an indexed parallel iterator keeps input order.
    let scores: Vec<Vec<f64>> = gt
        .par_iter()
        .zip(&pred)
        .map(|(a, b)| {
            ks.iter()
                .map(|&k| lbm_score(&a.boxes, &b.boxes, k))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let n = scores.len().max(1) as f64;
    let means: Vec<f64> = (0..ks.len())
        .map(|j| scores.iter().map(|s| s[j]).sum::<f64>() / n)
        .collect();
    if json {
        let key = |k: usize| format!("k{k}");
        let report = LbmReport {
            pairs: gt
                .iter()
                .zip(&scores)
                .map(|(g, s)| PairScores {
                    image_id: g.image_id.clone(),
                    scores: ks.iter().zip(s).map(|(&k, &v)| (key(k), v)).collect(),
                })
                .collect(),
            mean: ks.iter().zip(&means).map(|(&k, &v)| (key(k), v)).collect(),
        };
        return print_json(&report);
    }
    let header: Vec<String> = ks.iter().map(|k| format!("k={k}")).collect();
    println!("image_id\t{}", header.join("\t"));
    for (g, s) in gt.iter().zip(&scores) {
        let cols: Vec<String> = s.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}\t{}", g.image_id, cols.join("\t"));
    }
    let cols: Vec<String> = means.iter().map(|v| format!("{v:.4}")).collect();
    println!("mean\t{}", cols.join("\t"));
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    epochs: usize,
    checksum: String,
    val_caption_accuracy: Option<f64>,
}

pub fn train_files(
    data: &Path,
    features: &Path,
    val: Option<&Path>,
    rc: &RunConfig,
    metrics: Option<&Path>,
    out: &Path,
    json: bool,
) -> Result<(), CliError> {
    let records = load_narratives(data)?;
    let feats = load_region_features(features)?;
    let vocab = build_vocab(&records);
    let train_set = prepare_examples(&records, &feats, &vocab)?;
    let val_set = match val {
        Some(p) => prepare_examples(&load_narratives(p)?, &feats, &vocab)?,
        None => Vec::new(),
    };
    let params = ModelParams::init(rc.model(vocab.len(), feats.d_visual), rc.train.seed)?;
    let report = train(&train_set, &val_set, params, &rc.train, &rc.weights)?;
    if let Some(p) = metrics {
        write_jsonl(BufWriter::new(File::create(p)?), &report.epochs)?;
    }
    let ckpt = Checkpoint {
        vocab,
        params: report.params,
    };
    save_checkpoint(out, &ckpt)?;
    let summary = TrainSummary {
        steps: report.steps.len(),
        epochs: report.epochs.len(),
        checksum: ckpt.params.checksum(),
        val_caption_accuracy: if val_set.is_empty() {
            None
        } else {
            Some(caption_accuracy(&ckpt.params, &val_set)?)
        },
    };
    if json {
        return print_json(&summary);
    }
    println!("steps {} epochs {}", summary.steps, summary.epochs);
    if let Some(a) = summary.val_caption_accuracy {
        println!("val caption accuracy {a:.4}");
    }
    println!("checksum {}", summary.checksum);
    Ok(())
}

#[derive(Serialize)]
struct JointLine {
    image_id: String,
    caption: String,
    boxes: AlignedTrace,
}

pub fn generate_files(
    task: GenTask,
    ckpt: &Path,
    data: &Path,
    features: &Path,
    beam: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let ckpt = load_checkpoint(ckpt)?;
    let feats = load_region_features(features)?;
    let records = load_narratives(data)?;
    let examples = prepare_examples(&records, &feats, &ckpt.vocab)?;
    let p = &ckpt.params;
    let mut w = output(out)?;
    let words = |c: &CaptionTokens| ckpt.vocab.decode(c).join(" ");
    for e in &examples {
        let line = match task {
            GenTask::Caption => {
                let c = generate_caption(p, &e.features, &e.trace, beam)?;
                serde_json::to_string(&CandidateLine {
                    image_id: e.image_id.clone(),
                    caption: words(&c),
                })
            }
            GenTask::Trace => serde_json::to_string(&TraceLine {
                image_id: e.image_id.clone(),
                boxes: generate_trace(p, &e.features, &e.caption)?,
            }),
            GenTask::Joint => {
                let (c, t) = generate_joint(p, &e.features)?;
                serde_json::to_string(&JointLine {
                    image_id: e.image_id.clone(),
                    caption: words(&c),
                    boxes: t,
                })
            }
        }
        .map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaptionScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// Corpus scores of `cands` against `refs`, matched by image id.
pub fn score_captions(
    cands: &[CandidateLine],
    refs: &[ReferenceLine],
) -> Result<CaptionScores, CliError> {
    let by_id: BTreeMap<&str, &ReferenceLine> =
        refs.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut c_toks = Vec::with_capacity(cands.len());
    let mut r_toks = Vec::with_capacity(cands.len());
    for c in cands {
        let r = by_id
            .get(c.image_id.as_str())
            .ok_or_else(|| CliError::Data(format!("no references for image {:?}", c.image_id)))?;
        if r.captions.is_empty() {
            return Err(CliError::Data(format!(
                "image {:?} has an empty reference list",
                c.image_id
            )));
        }
        c_toks.push(tokenize(&c.caption));
        r_toks.push(r.captions.iter().map(|s| tokenize(s)).collect::<Vec<_>>());
    }
    let n = cands.len().max(1) as f64;
    Ok(CaptionScores {
        bleu1: corpus_bleu(&c_toks, &r_toks, 1),
        bleu4: corpus_bleu(&c_toks, &r_toks, 4),
        rouge_l: c_toks
            .iter()
            .zip(&r_toks)
            .map(|(c, r)| rouge_l(c, r))
            .sum::<f64>()
            / n,
        cider: cider(&c_toks, &r_toks).iter().sum::<f64>() / n,
    })
}

pub fn eval_caption_files(cand: &Path, reference: &Path, json: bool) -> Result<(), CliError> {
    let cands: Vec<CandidateLine> = read_jsonl(cand)?;
    let refs: Vec<ReferenceLine> = read_jsonl(reference)?;
    let s = score_captions(&cands, &refs)?;
    if json {
        return print_json(&s);
    }
    println!("BLEU-1  {:.4}", s.bleu1);
    println!("BLEU-4  {:.4}", s.bleu4);
    println!("ROUGE-L {:.4}", s.rouge_l);
    println!("CIDEr   {:.4}", s.cider);
    Ok(())
}

fn random_trace(rng: &mut ChaCha8Rng, n: usize) -> AlignedTrace {
    AlignedTrace::new(
        (0..n)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                let (c, d): (f64, f64) = (rng.gen(), rng.gen());
                TraceBox::from_corners(a.min(b), c.min(d), a.max(b), c.max(d))
            })
            .collect(),
    )
}

fn check_matcher() -> Result<bool, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let q = rng.gen_range(1..=5);
        let m = rng.gen_range(q..=5);
        let a = random_trace(&mut rng, q);
        let b = random_trace(&mut rng, m);
        for k in 0..3 {
            if (lbm_score(&a, &b, k)? - lbm_brute_force(&a, &b, k)?).abs() > 1e-9 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn check_band() -> Result<bool, CliError> {
    let band = band_mask(6, 6, 1)?;
    Ok((0..6).all(|i| band.allowed(i) == (i.saturating_sub(1)..(i + 2).min(6))))
}

fn check_masks() -> bool {
    let joint = build_masks(TaskMode::Joint, 4, 4);
    let cc = build_masks(TaskMode::ControlledCaption, 4, 4);
    let ct = build_masks(TaskMode::ControlledTrace, 4, 4);
    joint.caption_self.is_causal()
        && joint.trace_self.is_causal()
        && cc.caption_self.is_causal()
        && !cc.trace_self.is_causal()
        && ct.trace_self.is_causal()
        && !ct.caption_self.is_causal()
}

fn check_gradients() -> Result<bool, CliError> {
    let mut config = ModelConfig::desk(9, 6);
    config.max_len = 8;
    let p = ModelParams::init(config, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::matrix(3, 6, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let cap = CaptionTokens((0..4).map(|_| rng.gen_range(4..9)).collect());
    let tr = random_trace(&mut rng, 4);
    let f = |tape: &mut Tape, nodes: &[NodeId]| -> Result<NodeId, ModelError> {
        let b = p.bound(nodes);
        let out = mitr_forward(tape, &b, TaskMode::Joint, &x, &cap, &tr)?;
        let s = teacher_inputs(TaskMode::Joint, &cap, &tr);
        let ce = tape.cross_entropy(out.logits.expect("caption head"), &s.caption_target)?;
        let boxes = tape.slice(
            out.boxes.expect("trace head"),
            crate::autodiff::Axis::Rows,
            0,
            tr.len(),
        )?;
        let data = s.trace_target.iter().flat_map(|b| b.to_array()).collect();
        let target = tape.constant(Tensor::matrix(tr.len(), 5, data)?);
        let l1 = tape.l1(boxes, target)?;
        Ok(tape.add(ce, l1)?)
    };
    let coords = sample_coords(p.store(), 20, &mut rng, |_| true);
    Ok(grad_check(f, p.store(), &coords, 1e-6)? <= 1e-4)
}

#[derive(Serialize)]
struct SelftestReport {
    passed: usize,
    total: usize,
    checks: BTreeMap<&'static str, bool>,
}

pub fn selftest(json: bool) -> Result<(), CliError> {
    let mut checks = BTreeMap::new();
    checks.insert("lbm_matches_brute_force", check_matcher()?);
    checks.insert("band_fixture", check_band()?);
    checks.insert("attention_masks", check_masks());
    checks.insert("gradients", check_gradients()?);
    let passed = checks.values().filter(|&&ok| ok).count();
    let total = checks.len();
    if json {
        print_json(&SelftestReport {
            passed,
            total,
            checks,
        })?;
    } else {
        for (name, ok) in &checks {
            println!("{} {name}", if *ok { "ok  " } else { "FAIL" });
        }
        println!("{passed}/{total} checks passed");
    }
    if passed == total {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{} self checks failed",
            total - passed
        )))
    }
}
