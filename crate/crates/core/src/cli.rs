//! Command-line surface. [`run`] is the whole program minus process exit so
//! it can be driven from tests.
//!
//! Exit codes: 0 success, 1 I/O or malformed file, 2 invalid arguments,
//! 3 non-finite values during training or sampling.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{short_hash, write_atomic, Checkpoint, ImportedEmbeddings};
use crate::config::RunConfig;
use crate::decoding::{caption_shape, DecodeSettings, Pooling, ShapeCaption};
use crate::denoiser::DenoiserParams;
use crate::embedding::{Vocabulary, ViewPatchGrid};
use crate::error::{invalid, Error, Result};
use crate::metrics::MetricsReport;
use crate::rng::{derive_seed, rng_from_seed};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::synthdata::{drop_patches, generate_corpus, mix_patches, Dataset, PartKind, ShapeRecord, Split, ViewSpec};
use crate::train::{training_pairs, write_curve_header, write_curve_row, TrainState, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const GEN_MANIFEST_FILE: &str = "gen_manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CURVE_FILE: &str = "curve.csv";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EXAMPLES_FILE: &str = "examples.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::OutOfRange(_) | Error::Shape(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        Error::Io(_) | Error::Json(_) | Error::Format(_) => EXIT_IO,
    }
}

#[derive(Debug, Parser)]
#[command(name = "diffcap", version, about = "Partial-noising diffusion captioner for multi-view shapes")]
struct Cli {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (must exist)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, repeatable: --set key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shape/view/caption corpus
    GenData {
        #[arg(long)]
        n_shapes: Option<usize>,
        /// Views rendered per shape
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train a denoiser on the train split
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from the checkpoint in --checkpoint (or <out>/checkpoint)
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Total optimizer steps (shapes the learning-rate schedule)
        #[arg(long)]
        steps: Option<usize>,
        /// Stop after this many completed steps without changing the schedule;
        /// continue later with --resume
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Caption shapes and dump candidates, risks and selections as JSON
    Caption {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        shape_id: Option<String>,
        /// Drop every patch of this part kind before captioning
        #[arg(long)]
        drop_part: Option<String>,
        /// Replace --mix-part patches with those of this shape's matching view
        #[arg(long, requires = "mix_part")]
        mix_with: Option<String>,
        #[arg(long, requires = "mix_with")]
        mix_part: Option<String>,
    },
    /// Caption a split and score it
    Eval {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Score the first reference of every shape instead of model output
        #[arg(long)]
        oracle: bool,
    },
    /// Sweep one axis: views, embed_dim, samples, schedule or pooling
    Ablate {
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated values
        #[arg(long)]
        values: String,
    },
    /// Print or write the schedule table
    InspectSchedule {
        #[arg(long, default_value = "sqrt")]
        kind: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        respace: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train or test (default test; caption defaults to all shapes)
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    inference_steps: Option<usize>,
    /// Only the first N selected shapes
    #[arg(long)]
    limit: Option<usize>,
}

/// Runs the CLI with `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    match cli.command {
        Command::GenData { n_shapes, views } => {
            if let Some(n) = n_shapes {
                cfg.n_shapes = n;
            }
            if let Some(v) = views {
                cfg.gen_views = v;
            }
            cmd_gen_data(&cfg)
        }
        Command::Train { dataset, resume, checkpoint, steps, stop_at } => {
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(s) = steps {
                cfg.train_steps = s;
            }
            cmd_train(&cfg, resume, stop_at)
        }
        Command::Caption { decode, shape_id, drop_part, mix_with, mix_part } => {
            let split = decode.apply(&mut cfg)?;
            let edit = ViewEdit {
                drop: drop_part.map(|p| p.parse()).transpose()?,
                mix: match (mix_with, mix_part) {
                    (Some(id), Some(p)) => Some((id, p.parse()?)),
                    _ => None,
                },
            };
            cmd_caption(&cfg, shape_id.as_deref(), split, decode.limit, &edit)
        }
        Command::Eval { decode, oracle } => {
            let split = decode.apply(&mut cfg)?;
            cmd_eval(&cfg, split.unwrap_or(Split::Test), decode.limit, oracle)
        }
        Command::Ablate { decode, axis, values } => {
            let split = decode.apply(&mut cfg)?;
            cmd_ablate(&cfg, &axis, &values, split.unwrap_or(Split::Test), decode.limit)
        }
        Command::InspectSchedule { kind, steps, respace } => cmd_inspect_schedule(&cfg, &kind, steps, respace),
    }
}

impl DecodeArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<Option<Split>> {
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        if let Some(v) = self.views {
            cfg.views = v;
        }
        if let Some(s) = self.samples {
            cfg.samples = s;
        }
        if let Some(p) = &self.pooling {
            cfg.pooling = p.parse()?;
        }
        if let Some(k) = self.inference_steps {
            cfg.inference_steps = k;
        }
        self.split.as_deref().map(parse_split).transpose()
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(invalid(format!("unknown split '{s}'"))),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| invalid("--out is required"))?;
    if !out.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", out.display()),
        )));
    }
    Ok(out)
}

fn checkpoint_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_DIR))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_jsonl(BufReader::new(fs::File::open(path)?))
}

fn dataset_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.dataset.clone().ok_or_else(|| invalid("no dataset given (--dataset or dataset = ...)"))
}

/// Provenance header for CSV outputs.
fn csv_provenance(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg)?;
    let views = ViewSpec::standard(cfg.gen_views)?;
    let grammar = cfg.grammar();
    let ds = generate_corpus(cfg.n_shapes, &views, &grammar, cfg.seed)?;
    #[derive(Serialize)]
    struct GenManifest {
        config_hash: String,
        seed: u64,
        n_shapes: usize,
        views_per_shape: usize,
        view_records: usize,
        train_shapes: usize,
        test_shapes: usize,
        grammar_hash: String,
        dataset_hash: String,
    }
    let blob = ds.to_jsonl();
    let manifest = GenManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        n_shapes: ds.records.len(),
        views_per_shape: views.len(),
        view_records: ds.view_count(),
        train_shapes: ds.split(Split::Train).count(),
        test_shapes: ds.split(Split::Test).count(),
        grammar_hash: grammar.hash(),
        dataset_hash: short_hash(&blob),
    };
    write_atomic(&out.join(DATASET_FILE), &blob)?;
    write_atomic(&out.join(GEN_MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    log::info!("wrote {} shapes ({} view records)", manifest.n_shapes, manifest.view_records);
    Ok(())
}

/// Fresh parameters for `cfg`, with imported token embeddings if configured.
pub fn init_params(cfg: &RunConfig, vocab: &Vocabulary) -> Result<DenoiserParams> {
    let mut params = DenoiserParams::init(cfg.model_config(vocab.len()), &mut rng_from_seed(derive_seed(cfg.seed, &[0x1417])))?;
    if let Some(path) = &cfg.import_embeddings {
        ImportedEmbeddings::read(path)?.install(&mut params)?;
    }
    Ok(params)
}

/// Trains on the train split of `dataset` and writes the checkpoint and the
/// curve CSV. Returns the final checkpoint.
pub fn train_model(
    cfg: &RunConfig,
    dataset: &Dataset,
    out: &Path,
    ckpt_dir: &Path,
    resume: bool,
    stop_at: Option<usize>,
) -> Result<Checkpoint> {
    let grammar = cfg.grammar();
    let mut train_cfg = cfg.train_config();
    let (params, state, vocab) = if resume {
        let ck = Checkpoint::load(ckpt_dir)?;
        train_cfg.seed = ck.train.seed;
        (ck.params, ck.state, ck.vocab)
    } else {
        let vocab = grammar.vocabulary();
        let params = init_params(cfg, &vocab)?;
        let state = TrainState::fresh(&params);
        (params, state, vocab)
    };
    let pairs = training_pairs(dataset, &vocab, params.config.cap_len, Some(Split::Train))?;
    if pairs.is_empty() {
        return Err(invalid("the train split is empty"));
    }
    let curve_path = out.join(CURVE_FILE);
    let mut curve = if resume && curve_path.exists() {
        fs::read_to_string(&curve_path)?
    } else {
        let mut s = csv_provenance(cfg);
        let mut header = Vec::new();
        write_curve_header(&mut header)?;
        s.push_str(&String::from_utf8_lossy(&header));
        s
    };
    let mut trainer = Trainer::resume(params, state, train_cfg.clone())?;
    let config_hash = cfg.hash();
    let every = cfg.checkpoint_every.max(1);
    let start = Instant::now();
    let save = |trainer: &Trainer, curve: &str| -> Result<Checkpoint> {
        let ck = Checkpoint {
            params: trainer.params.clone(),
            train: train_cfg.clone(),
            state: trainer.state.clone(),
            vocab: vocab.clone(),
            config_hash: config_hash.clone(),
        };
        ck.save(ckpt_dir)?;
        write_atomic(&curve_path, curve.as_bytes())?;
        Ok(ck)
    };
    let last = stop_at.map_or(trainer.config.train_steps, |s| s.min(trainer.config.train_steps));
    while trainer.state.step < last {
        let row = trainer.step(&pairs)?;
        let mut line = Vec::new();
        write_curve_row(&mut line, &row)?;
        curve.push_str(&String::from_utf8_lossy(&line));
        if row.step % every == 0 {
            save(&trainer, &curve)?;
            log::info!("step {} loss {:.4} avg {:.4} ({:.0}s)", row.step, row.loss.total, row.moving_average, start.elapsed().as_secs_f64());
        }
    }
    save(&trainer, &curve)
}

fn cmd_train(cfg: &RunConfig, resume: bool, stop_at: Option<usize>) -> Result<()> {
    let out = out_dir(cfg)?;
    cfg.validate()?;
    let dataset = load_dataset(&dataset_path(cfg)?)?;
    let ckpt = checkpoint_dir(cfg, &out);
    train_model(cfg, &dataset, &out, &ckpt, resume, stop_at)?;
    Ok(())
}

/// The reverse schedule used at inference: the training schedule, respaced to
/// `steps` when that is smaller.
pub fn inference_schedule(ck: &Checkpoint, steps: usize) -> Result<NoiseSchedule> {
    let full = NoiseSchedule::build(ck.train.schedule, ck.train.diffusion_steps)?;
    if steps == full.steps() {
        Ok(full)
    } else {
        full.respace(steps)
    }
}

#[derive(Debug, Default)]
struct ViewEdit {
    drop: Option<PartKind>,
    mix: Option<(String, PartKind)>,
}

fn select_views(record: &ShapeRecord, count: usize) -> Result<&[ViewPatchGrid]> {
    if count == 0 || count > record.views.len() {
        return Err(invalid(format!("{}: {count} views requested, {} available", record.shape_id, record.views.len())));
    }
    Ok(&record.views[..count])
}

/// One caption decision per record, plus the decoded caption strings.
pub fn caption_records(
    params: &DenoiserParams,
    vocab: &Vocabulary,
    records: &[&ShapeRecord],
    views: usize,
    schedule: &NoiseSchedule,
    settings: &DecodeSettings,
) -> Result<Vec<(ShapeCaption, String)>> {
    records
        .iter()
        .map(|r| {
            let out = caption_shape(params, select_views(r, views)?, schedule, settings)?;
            let text = vocab.decode(&out.tokens).join(" ");
            Ok((out, text))
        })
        .collect()
}

/// Captions `records` and scores them against their references.
pub fn evaluate(
    params: &DenoiserParams,
    vocab: &Vocabulary,
    records: &[&ShapeRecord],
    views: usize,
    schedule: &NoiseSchedule,
    settings: &DecodeSettings,
) -> Result<MetricsReport> {
    let captions = caption_records(params, vocab, records, views, schedule, settings)?;
    let ids: Vec<String> = records.iter().map(|r| r.shape_id.clone()).collect();
    let cands: Vec<String> = captions.into_iter().map(|(_, t)| t).collect();
    let refs: Vec<Vec<String>> = records.iter().map(|r| r.captions.clone()).collect();
    MetricsReport::compute(&ids, &cands, &refs)
}

fn pick_records<'a>(ds: &'a Dataset, split: Option<Split>, limit: Option<usize>) -> Vec<&'a ShapeRecord> {
    let it = ds.records.iter().filter(|r| split.is_none_or(|s| r.split == s));
    match limit {
        Some(n) => it.take(n).collect(),
        None => it.collect(),
    }
}

#[derive(Serialize)]
struct CandidateJson {
    caption: String,
    risk: f64,
}

#[derive(Serialize)]
struct ViewJson {
    view_index: usize,
    candidates: Vec<CandidateJson>,
    selected: usize,
}

#[derive(Serialize)]
struct Timings {
    decode: f64,
    total: f64,
}

#[derive(Serialize)]
struct CaptionRecordJson {
    shape_id: String,
    views: Vec<ViewJson>,
    final_caption: String,
    references: Vec<String>,
    timings_ms: Timings,
}

#[derive(Serialize)]
struct CaptionFileJson {
    config_hash: String,
    seed: u64,
    checkpoint_hash: String,
    inference_steps: usize,
    views: usize,
    samples: usize,
    pooling: Pooling,
    records: Vec<CaptionRecordJson>,
}

fn cmd_caption(cfg: &RunConfig, shape_id: Option<&str>, split: Option<Split>, limit: Option<usize>, edit: &ViewEdit) -> Result<()> {
    let out = out_dir(cfg)?;
    let ds = load_dataset(&dataset_path(cfg)?)?;
    let ck = Checkpoint::load(&checkpoint_dir(cfg, &out))?;
    let schedule = inference_schedule(&ck, cfg.inference_steps)?;
    let records: Vec<&ShapeRecord> = match shape_id {
        Some(id) => vec![ds.find(id).ok_or_else(|| invalid(format!("unknown shape id '{id}'")))?],
        None => pick_records(&ds, split, limit),
    };
    let mix_source = match &edit.mix {
        Some((id, kind)) => Some((ds.find(id).ok_or_else(|| invalid(format!("unknown shape id '{id}'")))?, *kind)),
        None => None,
    };
    let settings = cfg.decode_settings();
    let mut json_records = Vec::with_capacity(records.len());
    for r in records {
        let started = Instant::now();
        let mut views = select_views(r, cfg.views)?.to_vec();
        for (i, v) in views.iter_mut().enumerate() {
            if let Some(kind) = edit.drop {
                *v = drop_patches(v, kind);
            }
            if let Some((src, kind)) = mix_source {
                let other = src.views.get(i).ok_or_else(|| invalid(format!("{} has no view {i}", src.shape_id)))?;
                *v = mix_patches(v, other, kind)?;
            }
        }
        let t0 = Instant::now();
        let result = caption_shape(&ck.params, &views, &schedule, &settings)?;
        let decode_ms = t0.elapsed().as_secs_f64() * 1e3;
        let text = |tokens: &[u32]| ck.vocab.decode(tokens).join(" ");
        json_records.push(CaptionRecordJson {
            shape_id: r.shape_id.clone(),
            views: result
                .views
                .iter()
                .map(|d| ViewJson {
                    view_index: d.set.view_index,
                    candidates: d
                        .set
                        .candidates
                        .iter()
                        .zip(&d.risks)
                        .map(|(c, &risk)| CandidateJson { caption: text(&c.tokens), risk })
                        .collect(),
                    selected: d.selected,
                })
                .collect(),
            final_caption: text(&result.tokens),
            references: r.captions.clone(),
            timings_ms: Timings { decode: decode_ms, total: started.elapsed().as_secs_f64() * 1e3 },
        });
    }
    let file = CaptionFileJson {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoint_hash: ck.params_hash(),
        inference_steps: schedule.steps(),
        views: cfg.views,
        samples: cfg.samples,
        pooling: cfg.pooling,
        records: json_records,
    };
    write_atomic(&out.join(CAPTIONS_FILE), &serde_json::to_vec_pretty(&file)?)
}

#[derive(Serialize)]
struct MetricsFileJson<'a> {
    config_hash: String,
    seed: u64,
    checkpoint_hash: Option<String>,
    split: Split,
    oracle: bool,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

fn cmd_eval(cfg: &RunConfig, split: Split, limit: Option<usize>, oracle: bool) -> Result<()> {
    let out = out_dir(cfg)?;
    let ds = load_dataset(&dataset_path(cfg)?)?;
    let records = pick_records(&ds, Some(split), limit);
    if records.is_empty() {
        return Err(invalid(format!("the {split:?} split is empty")));
    }
    let (report, checkpoint_hash) = if oracle {
        let ids: Vec<String> = records.iter().map(|r| r.shape_id.clone()).collect();
        let cands: Vec<String> = records.iter().map(|r| r.captions[0].clone()).collect();
        let refs: Vec<Vec<String>> = records.iter().map(|r| r.captions.clone()).collect();
        (MetricsReport::compute(&ids, &cands, &refs)?, None)
    } else {
        let ck = Checkpoint::load(&checkpoint_dir(cfg, &out))?;
        let schedule = inference_schedule(&ck, cfg.inference_steps)?;
        let report = evaluate(&ck.params, &ck.vocab, &records, cfg.views, &schedule, &cfg.decode_settings())?;
        (report, Some(ck.params_hash()))
    };
    let file = MetricsFileJson { config_hash: cfg.hash(), seed: cfg.seed, checkpoint_hash, split, oracle, report: &report };
    write_atomic(&out.join(METRICS_FILE), &serde_json::to_vec_pretty(&file)?)?;
    let csv = csv_provenance(cfg) + &report.examples_csv();
    write_atomic(&out.join(EXAMPLES_FILE), csv.as_bytes())
}

/// The sweepable axes of `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Views,
    EmbedDim,
    Samples,
    Schedule,
    Pooling,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "views" | "V" | "v" => Ok(Self::Views),
            "embed_dim" | "H" | "h" => Ok(Self::EmbedDim),
            "samples" | "S" | "s" => Ok(Self::Samples),
            "schedule" => Ok(Self::Schedule),
            "pooling" => Ok(Self::Pooling),
            other if other.contains(',') || other.contains('+') => {
                Err(invalid(format!("ablate sweeps exactly one axis, got '{other}'")))
            }
            other => Err(invalid(format!("unknown ablation axis '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Views => "views",
            Self::EmbedDim => "embed_dim",
            Self::Samples => "samples",
            Self::Schedule => "schedule",
            Self::Pooling => "pooling",
        }
    }

    /// Whether a value change needs a freshly trained model.
    pub fn retrains(self) -> bool {
        matches!(self, Self::EmbedDim | Self::Schedule)
    }
}

fn cmd_ablate(cfg: &RunConfig, axis: &str, values: &str, split: Split, limit: Option<usize>) -> Result<()> {
    let out = out_dir(cfg)?;
    let axis = AblationAxis::parse(axis)?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(invalid("no sweep values given"));
    }
    let ds = load_dataset(&dataset_path(cfg)?)?;
    let records = pick_records(&ds, Some(split), limit);
    if records.is_empty() {
        return Err(invalid(format!("the {split:?} split is empty")));
    }
    // Validate every value before doing any work.
    let mut variants = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = cfg.clone();
        match axis {
            AblationAxis::Views => c.views = v.parse().map_err(|_| invalid(format!("bad view count '{v}'")))?,
            AblationAxis::EmbedDim => c.embed_dim = v.parse().map_err(|_| invalid(format!("bad dimension '{v}'")))?,
            AblationAxis::Samples => c.samples = v.parse().map_err(|_| invalid(format!("bad sample count '{v}'")))?,
            AblationAxis::Schedule => c.schedule = v.parse::<ScheduleKind>()?,
            AblationAxis::Pooling => c.pooling = v.parse()?,
        }
        c.validate()?;
        variants.push(c);
    }

    let shared = if axis.retrains() { None } else { Some(Checkpoint::load(&checkpoint_dir(cfg, &out))?) };
    let mut csv = csv_provenance(cfg);
    csv.push_str("axis,value,checkpoint_hash,bleu1,bleu2,bleu3,bleu4,rouge_l,cider,distinct1,distinct2,exact_match\n");
    for (value, c) in values.iter().zip(&variants) {
        let trained;
        let ck = match &shared {
            Some(ck) => ck,
            None => {
                let dir = out.join(format!("ablate_{}_{}", axis.name(), value));
                fs::create_dir_all(&dir)?;
                trained = train_model(c, &ds, &dir, &dir.join(CHECKPOINT_DIR), false, None)?;
                &trained
            }
        };
        let schedule = inference_schedule(ck, c.inference_steps.min(ck.train.diffusion_steps))?;
        let r = evaluate(&ck.params, &ck.vocab, &records, c.views, &schedule, &c.decode_settings())?;
        let hash = ck.params_hash();
        log::info!("{}={value}: bleu4 {:.4} (checkpoint {hash})", axis.name(), r.bleu4);
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            axis.name(),
            value,
            hash,
            r.bleu1,
            r.bleu2,
            r.bleu3,
            r.bleu4,
            r.rouge_l,
            r.cider,
            r.distinct1,
            r.distinct2,
            r.exact_match
        ));
    }
    write_atomic(&out.join(format!("ablate_{}.csv", axis.name())), csv.as_bytes())
}

fn cmd_inspect_schedule(cfg: &RunConfig, kind: &str, steps: usize, respace: Option<usize>) -> Result<()> {
    let kind: ScheduleKind = kind.parse()?;
    let mut schedule = NoiseSchedule::build(kind, steps)?;
    for w in schedule.validate()? {
        log::warn!("{w}");
    }
    if let Some(k) = respace {
        schedule = schedule.respace(k)?;
    }
    let mut body = Vec::new();
    schedule.write_csv(&mut body)?;
    match &cfg.out {
        Some(_) => {
            let out = out_dir(cfg)?;
            let mut text = csv_provenance(cfg).into_bytes();
            text.extend(body);
            write_atomic(&out.join(SCHEDULE_FILE), &text)
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&body)?;
            Ok(())
        }
    }
}
