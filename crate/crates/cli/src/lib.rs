//! `auscultqa` subcommands. [`run`] parses argv and returns the exit code:
//! 0 on success, 1 on usage errors, 2 on data or validation errors.

use std::path::{Path, PathBuf};

use auscultqa_core::data::{ClipCache, Manifest, DATA_ROOT_ENV};
use auscultqa_core::eval::{evaluate, read_predictions, write_predictions, Embedder, FileEmbedder, HashEmbedder};
use auscultqa_core::lm::save_text_lm;
use auscultqa_core::synth::{generate, MURMUR_QUESTION, SITE_QUESTION};
use auscultqa_core::train::{
    ablate_context, evaluate_split, make_splits, pretrain_on_split, train, BagSource, FusionModel, MainRun,
    ManifestSource, SplitManifest, TrainConfig, BEST_CHECKPOINT,
};
use auscultqa_core::{Error, RunConfig};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "auscultqa", version, about = "Patient-level auscultation audio question answering")]
pub struct Cli {
    /// Seed for every random component; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Workflow config JSON with optional `synth`, `lm`, `pretrain` and `train` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted events.
    Synth(SynthArgs),
    /// Decode, resample, truncate and pad every clip into a cache directory.
    Preprocess(PreprocessArgs),
    /// Train the text-only decoder on the train split's transcripts.
    PretrainLm(PretrainArgs),
    /// Train encoder and adapters against the frozen decoder.
    Train(TrainArgs),
    /// Answer questions about one patient, printing the assembled prompt.
    Infer(InferArgs),
    /// Score predictions, either from a file or from a checkpoint.
    Eval(EvalArgs),
    /// Retrain at several context lengths and compare test metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patients: Option<usize>,
    /// Alternate abnormal patients between murmurs and crackles.
    #[arg(long)]
    pub crackles: bool,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    pub max_seconds: f64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest file or the directory holding `manifest.jsonl`. Defaults to
    /// the data root environment variable.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Clip cache written by `preprocess`; filled on demand.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output text-LM checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Text-LM checkpoint from `pretrain-lm`.
    #[arg(long)]
    pub lm: PathBuf,
    /// Run directory for checkpoints, metric log and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub patient: String,
    /// Question to ask; repeatable. Defaults to the patient's own questions.
    #[arg(long)]
    pub question: Vec<String>,
    /// Decode without audio (all gates closed).
    #[arg(long)]
    pub no_audio: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions JSONL to score.
    #[arg(long, conflicts_with_all = ["checkpoint", "data", "cache", "split", "no_audio"])]
    pub pred: Option<PathBuf>,
    /// Checkpoint to predict with when `--pred` is absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub no_audio: bool,
    /// Word-vector file (`word v1 v2 ...` per line) for the embedding score.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Report JSON path. Predictions go next to it as `<stem>.predictions.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub lm: PathBuf,
    /// Comma-separated context lengths in seconds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seconds: Vec<f64>,
    /// Finished `train` run to reuse for its own context length.
    #[arg(long)]
    pub main: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn manifest_path(d: &DataArgs) -> CliResult<PathBuf> {
    match &d.data {
        Some(p) => Ok(p.clone()),
        None => match std::env::var_os(DATA_ROOT_ENV) {
            Some(r) if !r.is_empty() => Ok(PathBuf::from(r)),
            _ => Err(CliError::Usage(format!("--data is required when {DATA_ROOT_ENV} is unset"))),
        },
    }
}

fn source(d: &DataArgs, cfg: &TrainConfig, max_seconds: f64) -> CliResult<(Manifest, ManifestSource)> {
    let manifest = Manifest::load(manifest_path(d)?)?;
    let mut src = ManifestSource::for_encoder(manifest.clone(), max_seconds, cfg.encoder.kind);
    if let Some(c) = &d.cache {
        src.cache = Some(ClipCache::new(c)?);
    }
    Ok((manifest, src))
}

fn split_of(src: &ManifestSource, cfg: &TrainConfig) -> CliResult<SplitManifest> {
    Ok(make_splits(&src.patients(), cfg.split, cfg.seed)?)
}

fn embedder(path: Option<&Path>) -> CliResult<Box<dyn Embedder>> {
    Ok(match path {
        Some(p) => Box::new(FileEmbedder::open(p)?),
        None => Box::new(HashEmbedder::default()),
    })
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult<()> {
    ensure_parent(path)?;
    let s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    std::fs::write(path, s + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Preprocess(a) => preprocess(a),
        Command::PretrainLm(a) => pretrain(cfg, a),
        Command::Train(a) => train_cmd(cfg, a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(cfg, a),
    }
}

fn synth(cfg: RunConfig, a: &SynthArgs) -> CliResult<()> {
    let mut spec = cfg.synth;
    if let Some(n) = a.patients {
        spec.n_patients = n;
    }
    spec.crackles |= a.crackles;
    let truth = generate(&spec, &a.out)?;
    let abnormal = truth.iter().filter(|t| !t.events.is_empty()).count();
    println!("wrote {} patients ({abnormal} abnormal) to {}", truth.len(), a.out.display());
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> CliResult<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let cache = ClipCache::new(&a.out)?;
    let mut n = 0;
    for e in &manifest.entries {
        for i in 0..e.clips.len() {
            cache.get(&manifest, e, i, a.max_seconds)?;
            n += 1;
        }
    }
    println!("cached {n} clips in {}", a.out.display());
    Ok(())
}

fn pretrain(cfg: RunConfig, a: &PretrainArgs) -> CliResult<()> {
    let manifest = Manifest::load(manifest_path(&a.data)?)?;
    let patients: Vec<(String, String)> = manifest
        .entries
        .iter()
        .map(|e| (e.patient_id.clone(), e.dataset.clone()))
        .collect();
    let split = make_splits(&patients, cfg.train.split, cfg.train.seed)?;
    let (vocab, store, report) = pretrain_on_split(&manifest, &split, cfg.lm.clone(), &cfg.pretrain)?;
    let hash = save_text_lm(&a.out, &cfg.lm, &vocab, &store, Some(&report))?;
    println!(
        "vocab {} perplexity {:.3} -> {:.3}; wrote {} ({hash})",
        vocab.len(),
        report.initial_perplexity,
        report.final_perplexity,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(cfg: RunConfig, a: &TrainArgs) -> CliResult<()> {
    let tc = &cfg.train;
    let (_, src) = source(&a.data, tc, tc.max_seconds)?;
    let split = split_of(&src, tc)?;
    let (model, mut store) = FusionModel::from_text_lm_file(tc, &a.lm)?;
    write_json(&a.out.join("split.json"), &split)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let report = train(&model, &mut store, &src, &split, Some(&a.out))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    println!(
        "{} steps; best epoch {} val loss {:.4}; lm sha {}",
        report.steps, report.best_epoch, report.best_val_loss, report.lm_digest_after
    );
    Ok(())
}

fn infer(a: &InferArgs) -> CliResult<()> {
    let (model, store) = FusionModel::load(&a.checkpoint)?;
    let (manifest, src) = source(&a.data, &model.config, model.config.max_seconds)?;
    let bag = src.bag(&a.patient)?;
    let questions: Vec<String> = if !a.question.is_empty() {
        a.question.clone()
    } else if manifest.get(&a.patient).is_some_and(|e| !e.qa.is_empty()) {
        bag.qa_pairs.iter().map(|q| q.question.clone()).collect()
    } else {
        vec![MURMUR_QUESTION.into(), SITE_QUESTION.into()]
    };
    let z = if a.no_audio { None } else { Some(model.latents_value(&store, &bag)?) };
    for q in &questions {
        let (prompt, answer) = model.answer(&store, &bag, q, z.as_ref())?;
        let tokens: Vec<&str> = prompt.ids.iter().map(|&i| model.vocab.token(i)).collect();
        println!("prompt: {}", tokens.join(" "));
        println!("answer: {answer}");
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let emb = embedder(a.embeddings.as_deref())?;
    let preds = match (&a.pred, &a.checkpoint) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(ck)) => {
            let (model, store) = FusionModel::load(ck)?;
            let (_, src) = source(&a.data, &model.config, model.config.max_seconds)?;
            let split = split_of(&src, &model.config)?;
            let ids = match a.split {
                SplitName::Train => &split.train,
                SplitName::Val => &split.val,
                SplitName::Test => &split.test,
            };
            let (_, preds) = evaluate_split(&model, &store, &src, ids, !a.no_audio, emb.as_ref())?;
            let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let p = a.out.with_file_name(format!("{stem}.predictions.jsonl"));
            ensure_parent(&p)?;
            write_predictions(&p, &preds)?;
            preds
        }
        (None, None) => return Err(CliError::Usage("eval needs --pred or --checkpoint".into())),
    };
    let report = evaluate(&preds, emb.as_ref())?;
    write_json(&a.out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn ablate(cfg: RunConfig, a: &AblateArgs) -> CliResult<()> {
    if a.seconds.iter().any(|s| !(*s > 0.0 && *s <= 30.0)) {
        return Err(CliError::Usage("--seconds values must lie in (0, 30]".into()));
    }
    let emb = embedder(a.embeddings.as_deref())?;
    let base = cfg.train.clone();
    let manifest = Manifest::load(manifest_path(&a.data)?)?;
    let cache = a.data.cache.as_ref().map(ClipCache::new).transpose()?;
    let make_source = |s: f64| {
        let mut src = ManifestSource::for_encoder(manifest.clone(), s, base.encoder.kind);
        src.cache.clone_from(&cache);
        src
    };
    let split = split_of(&make_source(base.max_seconds), &base)?;
    let main = match &a.main {
        Some(dir) => {
            let (model, store) = FusionModel::load(dir.join(BEST_CHECKPOINT))?;
            let src = make_source(model.config.max_seconds);
            let (report, _) = evaluate_split(&model, &store, &src, &split.test, true, emb.as_ref())?;
            Some((model.config, report))
        }
        None => None,
    };
    let build = |c: &TrainConfig| FusionModel::from_text_lm_file(c, &a.lm);
    let source_for = |s: f64| Ok(Box::new(make_source(s)) as Box<dyn BagSource>);
    let report = ablate_context(
        &base,
        &a.seconds,
        &build,
        &source_for,
        &split,
        emb.as_ref(),
        main.as_ref().map(|(c, r)| MainRun { config: c, report: r }),
        Some(&a.out),
    )?;
    write_json(&a.out.join("ablation.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}
