//! Command-line surface: `gen`, `train`, `eval`, `inspect`.
//!
//! A corpus directory holds `corpus.jsonl` (a header line, then one record
//! per sample), `align/<id>.alnm` tensors and `manifest.json`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignError, CompactAlignment};
use crate::config::{Config, ConfigError};
use crate::detector::{read_checkpoint, write_checkpoint, DetectorError, ModelParams};
use crate::metrics::{MetricsError, Report};
use crate::phonology::{Lexicon, PhonemeToken, SILENCE};
use crate::simulate::{bundled_texts, generate_corpus, Annotation, Sample, SimulateError, TimedPhoneme};
use crate::train::{compact_alignment, evaluate, split_corpus, train_model, Example, TrainError};
use crate::FRAME_MS;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const ALIGN_DIR: &str = "align";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("sample {0} not found")]
    NotFound(usize),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Detector(DetectorError::NumericalError(_))
            | CliError::Train(TrainError::Numerical { .. })
            | CliError::Train(TrainError::Detector(DetectorError::NumericalError(_))) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dysfl", version, about = "Synthetic dysfluency corpora and region-wise detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus with alignments.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus directory (default: $YS_DATA_DIR/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train a detector on a corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: $YS_DATA_DIR/run).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Needed to reproduce the train/test split.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Report path (default: $YS_DATA_DIR/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one sample.
    Inspect {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        id: usize,
    },
}

fn default_out(out: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    if let Some(p) = out {
        return Ok(p);
    }
    match std::env::var_os("YS_DATA_DIR") {
        Some(root) => Ok(PathBuf::from(root).join(name)),
        None => Err(CliError::Usage("--out is required when YS_DATA_DIR is unset".into())),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, CliError> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// First line of `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub frame_ms: f64,
    pub n_samples: usize,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub sym: String,
    pub start_f: usize,
    pub end_f: usize,
    pub src: Option<usize>,
    pub w: usize,
}

/// One sample as stored in `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub seed: u64,
    pub text: String,
    pub ref_ipa: Vec<String>,
    pub ref_word: Vec<usize>,
    pub dysfluent: Vec<SegmentRecord>,
    pub annotation: Annotation,
}

impl CorpusRecord {
    pub fn from_sample(s: &Sample) -> Self {
        Self {
            id: s.id,
            seed: s.seed,
            text: s.text.clone(),
            ref_ipa: s.ref_ipa(),
            ref_word: s.ref_tokens.iter().map(|t| t.word_index).collect(),
            dysfluent: s
                .dysfluent
                .iter()
                .map(|t| SegmentRecord {
                    sym: if t.is_silence() { SILENCE.to_string() } else { t.token.marked() },
                    start_f: t.start_frame,
                    end_f: t.end_frame,
                    src: t.source,
                    w: t.token.word_index,
                })
                .collect(),
            annotation: s.annotation,
        }
    }

    /// Rebuilds the sample (syllable structure is not stored).
    pub fn to_sample(&self) -> Option<Sample> {
        let token = |sym: &str, w: usize| {
            if sym == SILENCE {
                Some(PhonemeToken::silence(w))
            } else {
                PhonemeToken::parse_marked(sym, w)
            }
        };
        let ref_tokens = self
            .ref_ipa
            .iter()
            .zip(&self.ref_word)
            .map(|(s, &w)| token(s, w))
            .collect::<Option<Vec<_>>>()?;
        let dysfluent = self
            .dysfluent
            .iter()
            .map(|d| {
                Some(TimedPhoneme {
                    token: token(&d.sym, d.w)?,
                    start_frame: d.start_f,
                    end_frame: d.end_f,
                    source: d.src,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Sample {
            id: self.id,
            seed: self.seed,
            text: self.text.clone(),
            ref_tokens,
            dysfluent,
            annotation: self.annotation,
        })
    }

    pub fn t_len(&self) -> usize {
        self.dysfluent.last().map_or(0, |d| d.end_f)
    }
}

pub fn align_path(corpus: &Path, id: usize) -> PathBuf {
    corpus.join(ALIGN_DIR).join(format!("{id:06}.alnm"))
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusHeader, Vec<CorpusRecord>), CliError> {
    let path = dir.join(CORPUS_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, e: serde_json::Error| CliError::Format {
        path: path.display().to_string(),
        reason: format!("line {line}: {e}"),
    };
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::Format {
            path: path.display().to_string(),
            reason: "missing header".into(),
        })?
        .map_err(io_err(&path))?;
    let header: CorpusHeader = serde_json::from_str(&header_line).map_err(|e| bad(1, e))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, e))?);
    }
    Ok((header, records))
}

pub fn read_alignment(corpus: &Path, id: usize) -> Result<CompactAlignment, CliError> {
    let path = align_path(corpus, id);
    let file = File::open(&path).map_err(io_err(&path))?;
    Ok(CompactAlignment::read_from(BufReader::new(file))?)
}

/// Provenance written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(io_err(path))
    }
}

fn manifest(command: &str, cfg: Option<&Config>, inputs: &[&Path], outputs: &[&Path], seed: Option<u64>, started: Instant) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config_digest: cfg.map(Config::digest).unwrap_or_default(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

fn write_params(params: &ModelParams, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, &mut w)?;
    w.flush().map_err(io_err(path))
}

pub fn cmd_gen(config: Option<&Path>, seed: Option<u64>, out: &Path, jobs: usize, quiet: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = load_config(config, seed)?;
    let samples = generate_corpus(&cfg.gen, Lexicon::bundled(), &bundled_texts(), jobs)?;
    let align_dir = out.join(ALIGN_DIR);
    fs::create_dir_all(&align_dir).map_err(io_err(&align_dir))?;
    let corpus_path = out.join(CORPUS_FILE);
    let file = File::create(&corpus_path).map_err(io_err(&corpus_path))?;
    let mut w = BufWriter::new(file);
    let header = CorpusHeader {
        format: "dysfluency-corpus".into(),
        version: 1,
        frame_ms: FRAME_MS,
        n_samples: samples.len(),
        config_digest: cfg.digest(),
    };
    let line = |v: String| v + "\n";
    w.write_all(line(serde_json::to_string(&header).expect("header")).as_bytes())
        .map_err(io_err(&corpus_path))?;
    for s in &samples {
        let rec = CorpusRecord::from_sample(s);
        w.write_all(line(serde_json::to_string(&rec).expect("record")).as_bytes())
            .map_err(io_err(&corpus_path))?;
        let compact = compact_alignment(s, &cfg.align, &cfg.model)?;
        let path = align_path(out, s.id);
        let f = File::create(&path).map_err(io_err(&path))?;
        let mut aw = BufWriter::new(f);
        compact.write_to(&mut aw)?;
        aw.flush().map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&corpus_path))?;
    let mut inputs = Vec::new();
    if let Some(c) = config {
        inputs.push(c);
    }
    manifest("gen", Some(&cfg), &inputs, &[&corpus_path, &align_dir], Some(cfg.gen.seed), started)
        .write(&out.join(MANIFEST_FILE))?;
    if !quiet {
        println!("wrote {} samples to {}", samples.len(), out.display());
    }
    Ok(())
}

fn load_examples(corpus: &Path, cfg: &crate::detector::ModelConfig) -> Result<Vec<Example>, CliError> {
    let (_, records) = read_corpus(corpus)?;
    records
        .iter()
        .map(|r| Ok(Example::new(r.id, read_alignment(corpus, r.id)?, r.annotation, cfg)?))
        .collect()
}

pub fn cmd_train(config: Option<&Path>, corpus: &Path, seed: Option<u64>, out: &Path, quiet: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let cfg = load_config(config, seed)?;
    let examples = load_examples(corpus, &cfg.model)?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus.into());
    }
    let (train, test) = split_corpus(&examples, cfg.train.split_ratio, cfg.train.seed);
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(METRICS_LOG);
    let log_file = File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(log_file);
    let mut write_err: Option<CliError> = None;
    let every = cfg.train.checkpoint_every;
    let outcome = train_model(cfg.model, &cfg.train, &train, &test, |entry, params| {
        if write_err.is_some() {
            return;
        }
        let line = serde_json::to_string(entry).expect("log entry") + "\n";
        if let Err(e) = log.write_all(line.as_bytes()).and_then(|_| log.flush()) {
            write_err = Some(io_err(&log_path)(e));
            return;
        }
        if every > 0 && entry.epoch % every == 0 {
            if let Err(e) = write_params(params, &out.join(format!("epoch_{:04}.ckpt", entry.epoch))) {
                write_err = Some(e);
            }
        }
        if !quiet {
            println!("{}", line.trim_end());
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let outcome = outcome?;
    let best = out.join(BEST_CHECKPOINT);
    let last = out.join(LAST_CHECKPOINT);
    write_params(&outcome.best, &best)?;
    write_params(&outcome.last, &last)?;
    let mut inputs: Vec<&Path> = vec![corpus];
    if let Some(c) = config {
        inputs.push(c);
    }
    manifest("train", Some(&cfg), &inputs, &[&log_path, &best, &last], Some(cfg.train.seed), started)
        .write(&out.join(MANIFEST_FILE))?;
    if !quiet {
        println!("best epoch {} -> {}", outcome.best_epoch, best.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    corpus: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    split: Split,
    out: &Path,
    quiet: bool,
) -> Result<Report, CliError> {
    let started = Instant::now();
    let file = File::open(checkpoint).map_err(io_err(checkpoint))?;
    let params = read_checkpoint(BufReader::new(file))?;
    let cfg = match config {
        Some(_) => Some(load_config(config, seed)?),
        None if split == Split::All => None,
        None => return Err(CliError::Usage("--split train/test needs --config".into())),
    };
    let examples = load_examples(corpus, &params.config)?;
    let examples = match (&cfg, split) {
        (_, Split::All) | (None, _) => examples,
        (Some(c), s) => {
            let (tr, te) = split_corpus(&examples, c.train.split_ratio, c.train.seed);
            if s == Split::Train {
                tr
            } else {
                te
            }
        }
    };
    if examples.is_empty() {
        return Err(MetricsError::EmptyEval("no samples").into());
    }
    let weights = cfg.as_ref().map(|c| c.train.loss).unwrap_or_default();
    let (_, records) = evaluate(&params, &examples, &weights)?;
    let digest = cfg.as_ref().map(Config::digest).unwrap_or_default();
    let report = Report::compute(&records, &digest)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report") + "\n";
    fs::write(out, json).map_err(io_err(out))?;
    let mut inputs: Vec<&Path> = vec![checkpoint, corpus];
    if let Some(c) = config {
        inputs.push(c);
    }
    let manifest_path = out.with_extension("manifest.json");
    manifest("eval", cfg.as_ref(), &inputs, &[out], cfg.as_ref().map(|c| c.train.seed), started).write(&manifest_path)?;
    if !quiet {
        print!("{}", report.table());
    }
    Ok(report)
}

/// Columns of the argmax rendering.
const RENDER_WIDTH: usize = 100;

pub fn render_inspect(record: &CorpusRecord, alignment: &CompactAlignment) -> String {
    let mut out = String::new();
    let a = &record.annotation;
    out.push_str(&format!("sample {} (seed {})\n", record.id, record.seed));
    out.push_str(&format!("text: {}\n", record.text));
    out.push_str(&format!("reference: {}\n", record.ref_ipa.join(" ")));
    out.push_str("dysfluent:\n");
    for d in &record.dysfluent {
        let src = d.src.map_or("-".to_string(), |s| s.to_string());
        out.push_str(&format!("  [{:>4}, {:>4})  {:<6} src {}\n", d.start_f, d.end_f, d.sym, src));
    }
    out.push_str(&format!(
        "annotation: {} ({}) frames [{}, {}) = {:.0}-{:.0} ms\n",
        a.dtype,
        serde_json::to_value(a.level).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        a.start_frame,
        a.end_frame,
        a.start_frame as f64 * FRAME_MS,
        a.end_frame as f64 * FRAME_MS,
    ));
    let full = alignment.expand();
    let t_len = full.t_len;
    let step = t_len.div_ceil(RENDER_WIDTH).max(1);
    let cols: Vec<usize> = (0..t_len).step_by(step).collect();
    let path: Vec<usize> = cols.iter().map(|&t| full.argmax_row(t)).collect();
    out.push_str(&format!("alignment argmax (one column = {step} frame(s)):\n"));
    for r in 0..full.c_len {
        let label = record.ref_ipa.get(r).map_or("?", String::as_str);
        let line: String = path.iter().map(|&p| if p == r { '#' } else { '.' }).collect();
        out.push_str(&format!("{r:>4} {label:<6}|{line}|\n"));
    }
    out
}

pub fn cmd_inspect(corpus: &Path, id: usize) -> Result<String, CliError> {
    let (_, records) = read_corpus(corpus)?;
    let record = records.into_iter().find(|r| r.id == id).ok_or(CliError::NotFound(id))?;
    let alignment = read_alignment(corpus, id)?;
    Ok(render_inspect(&record, &alignment))
}

/// Parses arguments and runs; returns the process exit code.
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
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Gen { config, seed, out, jobs } => {
            let out = default_out(out, "corpus")?;
            cmd_gen(config.as_deref(), seed, &out, jobs, quiet)
        }
        Command::Train { config, corpus, seed, out } => {
            let out = default_out(out, "run")?;
            cmd_train(config.as_deref(), &corpus, seed, &out, quiet)
        }
        Command::Eval {
            checkpoint,
            corpus,
            config,
            seed,
            split,
            out,
        } => {
            let out = default_out(out, "report.json")?;
            cmd_eval(&checkpoint, &corpus, config.as_deref(), seed, split, &out, quiet).map(|_| ())
        }
        Command::Inspect { corpus, id } => {
            print!("{}", cmd_inspect(&corpus, id)?);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate_sample, GenConfig, TextPool};

    fn sample() -> Sample {
        let cfg = GenConfig::default();
        let pool = TextPool::new(Lexicon::bundled(), &bundled_texts()).unwrap();
        generate_sample(&cfg, &pool, 3).unwrap()
    }

    #[test]
    fn record_roundtrip_preserves_alignment_inputs() {
        let s = sample();
        let rec = CorpusRecord::from_sample(&s);
        let json = serde_json::to_string(&rec).unwrap();
        let back: CorpusRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        let rebuilt = back.to_sample().unwrap();
        assert_eq!(rebuilt.annotation, s.annotation);
        assert_eq!(rebuilt.dysfluent_ipa(), s.dysfluent_ipa());
        assert_eq!(rec.t_len(), s.total_frames());
        let params = crate::align::AlignParams::default();
        assert_eq!(rebuilt.alignment(&params).unwrap(), s.alignment(&params).unwrap());
    }

    #[test]
    fn annotation_serializes_with_frame_keys() {
        let rec = CorpusRecord::from_sample(&sample());
        let v = serde_json::to_value(&rec).unwrap();
        for k in ["type", "level", "start_f", "end_f"] {
            assert!(v["annotation"].get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn inspect_names_the_type() {
        let s = sample();
        let rec = CorpusRecord::from_sample(&s);
        let cfg = Config::default();
        let compact = compact_alignment(&s, &cfg.align, &cfg.model).unwrap();
        let text = render_inspect(&rec, &compact);
        assert!(text.contains(&s.annotation.dtype.to_string()));
        assert!(text.contains('#'));
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["dysfl", "frobnicate"]), 1);
        assert_eq!(run(["dysfl", "--help"]), 0);
    }

    #[test]
    fn numerical_errors_exit_with_two() {
        let e = CliError::Train(TrainError::Numerical {
            epoch: 1,
            batch: 0,
            source: DetectorError::NumericalError("x".into()),
        });
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::NotFound(3).exit_code(), 1);
    }
}
