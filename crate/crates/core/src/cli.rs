//! The `visaff` command line: synthetic bundles, remote extraction, training,
//! evaluation, confidence bins and the risk and bound checks.
//!
//! Exit codes: 0 on success, 1 on validation errors or missing
//! prerequisites, 2 on I/O or remote failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datamodel::{Conversation, Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{read_traces, write_traces, RetrievalKeys, TraceRecord};
use crate::prompting::{build_prompt_bundle, sample_frame_indices, PromptConfig, PromptTemplates, VadLexicon};
use crate::providers::bundle::{write_bundle, SyntheticBundleSpec};
use crate::providers::{
    extract_remote, CacheSet, EmbeddingClient, EndpointConfig, FeatureCache, FeatureKey, FeatureRecord, Modality,
    Provider,
};
use crate::theory::{bound_check, gate_loss_correlation, risk_decomposition, risk_samples, BoundCheckConfig};
use crate::training::{
    bin_by_confidence, evaluate, load_checkpoint, save_checkpoint, seed_average, train, uniform_edges, write_log,
    BinSample, MetricsReport, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "visaff",
    version,
    about = "Reliability-gated multimodal emotion recognition toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its feature caches.
    GenSynthetic(GenArgs),
    /// Fill the visual feature cache from a remote embedding service.
    Extract(ExtractArgs),
    /// Train the fusion model on cached features.
    Train(TrainArgs),
    /// Score a checkpoint on one split and export gate traces.
    Eval(EvalArgs),
    /// Visual-only vs full W-F1 per reliability bin.
    Bins(BinsArgs),
    /// Risk decomposition on traces and the generalization bound experiment.
    VerifyBound(VerifyArgs),
    /// Train and evaluate over several seeds and aggregate the metrics.
    Seeds(SeedsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// JSON bundle spec; built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Dataset JSONL; media paths resolve relative to its directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Feature directory holding the visual cache.
    #[arg(long)]
    pub cache: PathBuf,
    /// Service base URL; VISAFF_ENDPOINT overrides it.
    #[arg(long, default_value_t = EndpointConfig::default().url)]
    pub endpoint: String,
    #[arg(long, default_value_t = PromptConfig::default().frames_per_clip)]
    pub frames_per_clip: usize,
    #[arg(long, default_value_t = PromptConfig::default().context_window)]
    pub context_window: usize,
    #[arg(long, default_value_t = PromptConfig::default().vad_top_n)]
    pub vad_top_n: usize,
    /// Prompt template file; bundled templates when omitted.
    #[arg(long)]
    pub template_file: Option<PathBuf>,
    /// VAD lexicon TSV; bundled lexicon when omitted.
    #[arg(long)]
    pub vad_lexicon: Option<PathBuf>,
    /// Continue into an existing cache, skipping cached utterances.
    #[arg(long)]
    pub resume: bool,
    /// Concurrent requests.
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = EndpointConfig::default().timeout_ms)]
    pub timeout_ms: u64,
    #[arg(long, default_value_t = EndpointConfig::default().max_retries)]
    pub max_retries: u32,
    #[arg(long, default_value_t = EndpointConfig::default().backoff_base_ms)]
    pub backoff_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrievalArg {
    Causal,
    Current,
}

impl From<RetrievalArg> for RetrievalKeys {
    fn from(r: RetrievalArg) -> Self {
        match r {
            RetrievalArg::Causal => RetrievalKeys::Causal,
            RetrievalArg::Current => RetrievalKeys::Current,
        }
    }
}

/// Training flags. Values given on the command line override `--config`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    /// JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().patience)]
    pub patience: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = TrainConfig::default().proj_dim)]
    pub proj_dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().lambda_cl)]
    pub lambda_cl: f64,
    #[arg(long, default_value_t = TrainConfig::default().lambda_aux)]
    pub lambda_aux: f64,
    #[arg(long, default_value_t = TrainConfig::default().tau_infonce)]
    pub tau_infonce: f64,
    #[arg(long, default_value_t = TrainConfig::default().tau_supcon)]
    pub tau_supcon: f64,
    #[arg(long, value_enum, default_value_t = RetrievalArg::Causal)]
    pub retrieval: RetrievalArg,
    /// Hold the gate at 1 (no complement).
    #[arg(long)]
    pub gate_off: bool,
    /// Let classification gradients reach the reliability branch.
    #[arg(long)]
    pub gate_gradient: bool,
    #[arg(long)]
    pub no_text: bool,
    #[arg(long)]
    pub no_audio: bool,
    #[arg(long)]
    pub no_infonce: bool,
    #[arg(long)]
    pub no_supcon: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Feature directory with visual, text and audio caches.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BinsArgs {
    /// Trace JSONL written by `eval`.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of equal-width bins over [0, 1].
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Trace JSONL for the risk decomposition; skipped when omitted.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = BoundCheckConfig::default().n)]
    pub n: usize,
    #[arg(long, default_value_t = BoundCheckConfig::default().delta)]
    pub delta: f64,
    #[arg(long, default_value_t = BoundCheckConfig::default().resamples)]
    pub resamples: usize,
    #[arg(long, default_value_t = BoundCheckConfig::default().sign_draws)]
    pub sign_draws: usize,
    #[arg(long, default_value_t = BoundCheckConfig::default().hypotheses)]
    pub hypotheses: usize,
    #[arg(long, default_value_t = BoundCheckConfig::default().heldout)]
    pub heldout: usize,
    #[arg(long, default_value_t = BoundCheckConfig::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SeedsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of runs; seeds are `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    pub flags: TrainFlags,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match dispatch(cli.command, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, m: &ArgMatches) -> Result<()> {
    match cmd {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => run_train(a, m),
        Command::Eval(a) => run_eval(a),
        Command::Bins(a) => run_bins(a),
        Command::VerifyBound(a) => verify_bound(a),
        Command::Seeds(a) => run_seeds(a, m),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("missing prerequisite {}", path.display())))
    }
}

fn require_features(dir: &Path) -> Result<()> {
    require(dir)?;
    for m in Modality::ALL {
        require(&CacheSet::path(dir, m))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn report(path: &Path) {
    println!("{}", path.display());
}

fn gen_synthetic(a: GenArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            require(p)?;
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<SyntheticBundleSpec>(&text).map_err(|e| Error::Parse {
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => SyntheticBundleSpec::default(),
    };
    let (_, _, paths) = write_bundle(&a.out, &spec, a.seed)?;
    report(&paths.dataset);
    report(&paths.spec);
    for p in &paths.caches {
        report(p);
    }
    Ok(())
}

/// Frame files of one clip: the files of a directory in name order, or the
/// file itself.
fn clip_frames(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

struct Job<'a> {
    seq: usize,
    conv: &'a Conversation,
    index: usize,
}

fn extract_one(
    job: &Job<'_>,
    base: &Path,
    templates: &PromptTemplates,
    lex: &VadLexicon,
    pcfg: &PromptConfig,
    client: &EmbeddingClient,
    expected_dim: Option<usize>,
) -> Result<FeatureRecord> {
    let u = &job.conv.utterances[job.index];
    let video = u
        .media
        .video_path
        .as_ref()
        .ok_or_else(|| Error::invalid("utterance has no video_path"))?;
    let files = clip_frames(&base.join(video))?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no frames under {video}")));
    }
    let bundle = build_prompt_bundle(job.conv, job.index, files.len(), templates, lex, pcfg)?;
    let frames = sample_frame_indices(files.len(), pcfg.frames_per_clip)?
        .into_iter()
        .map(|i| fs::read(&files[i]))
        .collect::<std::io::Result<Vec<_>>>()?;
    let reference = match &u.media.reference_image_path {
        Some(p) => fs::read(base.join(p))?,
        None => Vec::new(),
    };
    extract_remote(&bundle, &frames, &reference, client, expected_dim)
}

#[derive(Debug, Serialize)]
struct Failure {
    key: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct ExtractSummary {
    total: usize,
    skipped: usize,
    written: usize,
    failed: usize,
    requests: usize,
}

fn extract(a: ExtractArgs) -> Result<()> {
    require(&a.dataset)?;
    if a.workers == 0 {
        return Err(Error::invalid("--workers must be positive"));
    }
    let dataset = Dataset::load(&a.dataset)?;
    let base = a.dataset.parent().map(Path::to_path_buf).unwrap_or_default();
    let templates = match &a.template_file {
        Some(p) => {
            require(p)?;
            PromptTemplates::load(p)?
        }
        None => PromptTemplates::bundled(),
    };
    let lex = match &a.vad_lexicon {
        Some(p) => {
            require(p)?;
            VadLexicon::load(p)?
        }
        None => VadLexicon::bundled(),
    };
    let pcfg = PromptConfig {
        frames_per_clip: a.frames_per_clip,
        context_window: a.context_window,
        vad_top_n: a.vad_top_n,
    };
    let endpoint = EndpointConfig {
        url: a.endpoint.clone(),
        timeout_ms: a.timeout_ms,
        max_retries: a.max_retries,
        backoff_base_ms: a.backoff_ms,
    }
    .with_env_override();
    let client = EmbeddingClient::new(endpoint);

    fs::create_dir_all(&a.cache)?;
    let cache_path = CacheSet::path(&a.cache, Modality::Visual);
    let mut cache = if cache_path.exists() {
        if !a.resume {
            return Err(Error::invalid(format!(
                "{} exists; pass --resume to continue it",
                cache_path.display()
            )));
        }
        Some(FeatureCache::open(&cache_path)?)
    } else {
        None
    };
    let expected_dim = cache.as_ref().map(FeatureCache::dim);

    let mut jobs = Vec::new();
    let mut skipped = 0;
    let mut total = 0;
    for conv in &dataset.conversations {
        for index in 0..conv.len() {
            total += 1;
            if cache
                .as_ref()
                .is_some_and(|c| c.contains_utterance(&conv.conv_id, index))
            {
                skipped += 1;
                continue;
            }
            jobs.push(Job {
                seq: jobs.len(),
                conv,
                index,
            });
        }
    }

    let queue = Mutex::new(jobs.iter());
    let (tx, rx) = mpsc::channel::<(usize, Result<FeatureRecord>)>();
    let mut failures = Vec::new();
    let mut written = 0;
    let mut commit_error = None;
    thread::scope(|s| {
        for _ in 0..a.workers.min(jobs.len().max(1)) {
            let tx = tx.clone();
            let (queue, base, templates, lex, pcfg, client) = (&queue, &base, &templates, &lex, &pcfg, &client);
            s.spawn(move || loop {
                let next = queue.lock().expect("queue lock").next();
                let Some(job) = next else { break };
                let res = extract_one(job, base, templates, lex, pcfg, client, expected_dim);
                if tx.send((job.seq, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer, committing in dataset order
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (seq, res) in rx {
            pending.insert(seq, res);
            while let Some(res) = pending.remove(&next) {
                let job = &jobs[next];
                next += 1;
                let key = FeatureKey::new(
                    &job.conv.conv_id,
                    job.index,
                    Modality::Visual,
                    Provider::Remote.as_str(),
                );
                let outcome = res.and_then(|rec| {
                    if cache.is_none() {
                        cache = Some(FeatureCache::create(&cache_path, rec.dim(), Modality::Visual)?);
                    }
                    cache.as_mut().expect("cache exists").put(rec)
                });
                match outcome {
                    Ok(_) => written += 1,
                    Err(e @ Error::Io(_)) if commit_error.is_none() => commit_error = Some(e),
                    Err(e) => failures.push(Failure {
                        key: key.to_string(),
                        error: e.to_string(),
                    }),
                }
                if next % 100 == 0 {
                    eprintln!("extract: {next}/{} processed", jobs.len());
                }
            }
        }
    });
    if let Some(e) = commit_error {
        return Err(e);
    }

    let manifest = a.cache.join("failures.json");
    write_json(&manifest, &failures)?;
    let summary_path = a.cache.join("extract_summary.json");
    write_json(
        &summary_path,
        &ExtractSummary {
            total,
            skipped,
            written,
            failed: failures.len(),
            requests: client.requests_sent(),
        },
    )?;
    if cache.is_some() {
        report(&cache_path);
    }
    report(&manifest);
    report(&summary_path);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Remote(format!(
            "{} utterance(s) failed; see {}",
            failures.len(),
            manifest.display()
        )))
    }
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Config file (or defaults) with command-line flags applied on top.
fn resolve_config(f: &TrainFlags, m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match &f.config {
        Some(p) => {
            require(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {$(
            if from_cli(m, stringify!($field)) {
                cfg.$field = f.$field.clone().into();
            }
        )*};
    }
    apply!(
        seed,
        epochs,
        patience,
        batch_size,
        learning_rate,
        hidden,
        proj_dim,
        lambda_cl,
        lambda_aux,
        tau_infonce,
        tau_supcon,
        retrieval,
        gate_off,
        gate_gradient
    );
    if from_cli(m, "no_text") {
        cfg.use_text = false;
    }
    if from_cli(m, "no_audio") {
        cfg.use_audio = false;
    }
    if from_cli(m, "no_infonce") {
        cfg.use_infonce = false;
    }
    if from_cli(m, "no_supcon") {
        cfg.use_supcon = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    best_epoch: Option<usize>,
    best_val_wf1: Option<f64>,
    epochs_run: usize,
}

struct TrainPaths {
    checkpoint: PathBuf,
}

fn train_into(cfg: &TrainConfig, dataset: &Dataset, store: &CacheSet, out: &Path) -> Result<TrainPaths> {
    fs::create_dir_all(out)?;
    let outcome = train(cfg, dataset, store)?;
    let config_path = out.join("train_config.json");
    write_json(&config_path, cfg)?;
    let log_path = out.join("train_log.jsonl");
    write_log(BufWriter::new(File::create(&log_path)?), &outcome.log)?;
    let checkpoint = out.join("model.ckpt");
    save_checkpoint(&checkpoint, &outcome.model, cfg)?;
    let summary_path = out.join("train_summary.json");
    write_json(
        &summary_path,
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val_wf1: outcome.best_val_wf1,
            epochs_run: outcome.log.len(),
        },
    )?;
    for p in [&config_path, &log_path, &checkpoint, &summary_path] {
        report(p);
    }
    Ok(TrainPaths { checkpoint })
}

fn load_inputs(dataset: &Path, features: &Path) -> Result<(Dataset, CacheSet)> {
    require(dataset)?;
    require_features(features)?;
    Ok((Dataset::load(dataset)?, CacheSet::open_dir(features)?))
}

fn run_train(a: TrainArgs, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(&a.flags, m)?;
    let (dataset, store) = load_inputs(&a.dataset, &a.features)?;
    train_into(&cfg, &dataset, &store, &a.out)?;
    Ok(())
}

fn eval_into(
    checkpoint: &Path,
    dataset: &Dataset,
    store: &CacheSet,
    split: Split,
    out: &Path,
) -> Result<MetricsReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let ev = evaluate(&model, dataset, split, store)?;
    fs::create_dir_all(out)?;
    let metrics = out.join("metrics.json");
    write_json(&metrics, &ev.report)?;
    let traces = out.join("traces.jsonl");
    write_traces(BufWriter::new(File::create(&traces)?), &ev.traces)?;
    report(&metrics);
    report(&traces);
    Ok(ev.report)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    require(&a.checkpoint)?;
    let (dataset, store) = load_inputs(&a.dataset, &a.features)?;
    eval_into(&a.checkpoint, &dataset, &store, a.split, &a.out)?;
    Ok(())
}

fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    require(path)?;
    read_traces(BufReader::new(File::open(path)?))
}

fn run_bins(a: BinsArgs) -> Result<()> {
    if a.bins == 0 {
        return Err(Error::invalid("--bins must be positive"));
    }
    let records = load_traces(&a.traces)?;
    let k = records
        .first()
        .map(|r| r.logits.len())
        .ok_or_else(|| Error::invalid("trace file is empty"))?;
    let samples: Vec<BinSample> = records.iter().filter_map(BinSample::from_record).collect();
    let bins = bin_by_confidence(&samples, &uniform_edges(a.bins), k)?;
    fs::create_dir_all(&a.out)?;
    let csv = a.out.join("bins.csv");
    fs::write(&csv, bins.to_csv())?;
    let json = a.out.join("bins.json");
    write_json(&json, &bins)?;
    report(&csv);
    report(&json);
    Ok(())
}

fn verify_bound(a: VerifyArgs) -> Result<()> {
    let records = a.traces.as_deref().map(load_traces).transpose()?;
    fs::create_dir_all(&a.out)?;
    if let Some(records) = records {
        let samples = risk_samples(&records)?;
        let decomposition = a.out.join("decomposition_report.json");
        write_json(&decomposition, &risk_decomposition(&samples)?)?;
        let correlation = a.out.join("gate_loss_correlation.json");
        write_json(&correlation, &gate_loss_correlation(&samples)?)?;
        report(&decomposition);
        report(&correlation);
    }
    let cfg = BoundCheckConfig {
        n: a.n,
        delta: a.delta,
        resamples: a.resamples,
        sign_draws: a.sign_draws,
        hypotheses: a.hypotheses,
        heldout: a.heldout,
        seed: a.seed,
        ..Default::default()
    };
    let bound = a.out.join("bound_report.json");
    write_json(&bound, &bound_check(&cfg)?)?;
    report(&bound);
    Ok(())
}

fn run_seeds(a: SeedsArgs, m: &ArgMatches) -> Result<()> {
    if a.n < 2 {
        return Err(Error::invalid("--n must be at least 2"));
    }
    let base = resolve_config(&a.flags, m)?;
    let (dataset, store) = load_inputs(&a.dataset, &a.features)?;
    let mut runs = Vec::with_capacity(a.n);
    for i in 0..a.n as u64 {
        let cfg = TrainConfig {
            seed: base.seed + i,
            ..base.clone()
        };
        let dir = a.out.join(format!("seed_{}", cfg.seed));
        let paths = train_into(&cfg, &dataset, &store, &dir)?;
        let metrics = eval_into(&paths.checkpoint, &dataset, &store, a.split, &dir)?;
        runs.push((cfg, metrics));
    }
    let aggregate = a.out.join("seeds_aggregate.json");
    write_json(&aggregate, &seed_average(&runs)?)?;
    report(&aggregate);
    Ok(())
}
