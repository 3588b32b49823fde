//! `concord` command line: paraphrase, filter, generate, score, consistency,
//! accuracy, report, annotate and validate.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::accuracy::{self, AccuracyFlag, AccuracyLine, AccuracyMetric, AccuracyScope};
use crate::agreement::{AgreementContext, AgreementName};
use crate::annotation::{self, AnnotationService, LabelRecord, LabelStore, PairTask};
use crate::config::{Config, ReferenceSet};
use crate::consistency::{self, ConsistencyResult, PairMatrix, PairScore, PP_PLUS_ACC};
use crate::dataset::{
    self, load_paraphrases, load_questions, load_records, questions_from_truthfulqa_csv, save_records, ParaphraseRecord, ParaphraseSource,
    ParaphraseStatus, Question, RunManifest,
};
use crate::gateway::{Gateway, ScorerEndpoint};
use crate::generation::{self, AnswerSet, DecodingConfig, GenerationFailure};
use crate::paraphrase::{self, ExternalParaphrase};
use crate::report::{self, CorrelationSection, HumanAgreement, ReportInput, ReportRow, CORRELATION_ORDER};
use crate::stats;

pub const FAILURES_FILE: &str = "generation_failures.jsonl";
const DEFAULT_CONFIG: &str = "concord.toml";

#[derive(Debug, Parser)]
#[command(name = "concord", version, about = "Semantic consistency evaluation for generative QA models")]
pub struct Cli {
    /// Configuration file (defaults to ./concord.toml when present).
    #[arg(long, global = true, env = "CONCORD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum in-flight requests per scorer endpoint.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate, ingest and score candidate paraphrases.
    Paraphrase(ParaphraseArgs),
    /// Apply the threshold and top-k filter, or a manual review.
    Filter(FilterArgs),
    /// Generate one answer per kept paraphrase.
    Generate(GenerateArgs),
    /// Score every ordered answer pair with agreement functions.
    Score(ScoreArgs),
    /// Per-question consistency from pair scores.
    Consistency(ConsistencyArgs),
    /// Flag answers accurate or not against reference answers.
    Accuracy(AccuracyArgs),
    /// Render report tables across runs.
    Report(ReportArgs),
    /// Serve the pairwise annotation API for the human study.
    Annotate(AnnotateArgs),
    /// Check a data file against its record schema.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ParaphraseArgs {
    /// Few-shot samples per question (0 disables LLM generation).
    #[arg(long)]
    pub k: Option<usize>,
    /// Few-shot prompt with a `{question}` slot.
    #[arg(long)]
    pub template_file: Option<PathBuf>,
    /// JSONL files of externally generated paraphrases.
    #[arg(long)]
    pub ingest: Vec<PathBuf>,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Output file (defaults to the configured paraphrase file).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Write kept paraphrases to a CSV for manual review.
    #[arg(long)]
    pub export_review: Option<PathBuf>,
    /// Apply keep/drop verdicts from a reviewed CSV instead of filtering.
    #[arg(long, conflicts_with_all = ["threshold", "top_k", "export_review"])]
    pub import_review: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecodingArg {
    Greedy,
    Nucleus,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Run id (defaults to `<model-tag>-<decoding>`).
    #[arg(long)]
    pub run: Option<String>,
    /// Generator endpoint name (defaults to the `generator` role).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Override the endpoint's model tag.
    #[arg(long)]
    pub model_tag: Option<String>,
    #[arg(long, value_enum, default_value = "greedy")]
    pub decoding: DecodingArg,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Answer prompt template with a `{question}` slot.
    #[arg(long)]
    pub template_file: Option<PathBuf>,
    /// Answer every candidate paraphrase, not only the kept ones.
    #[arg(long)]
    pub unfiltered: bool,
    /// Keep existing answer sets and only generate missing questions.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct AgreementSelection {
    /// Agreement functions (comma separated); defaults to every function
    /// whose endpoint is configured.
    #[arg(long, value_delimiter = ',')]
    pub agreement: Vec<AgreementName>,
    /// Use classifier probabilities instead of hard decisions.
    #[arg(long)]
    pub soft: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub run: String,
    #[command(flatten)]
    pub select: AgreementSelection,
}

#[derive(Debug, Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub run: String,
    #[command(flatten)]
    pub select: AgreementSelection,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    #[arg(long)]
    pub run: String,
    /// Metrics (comma separated); defaults to r1a plus bleurt when configured.
    #[arg(long, value_delimiter = ',')]
    pub metric: Vec<AccuracyMetric>,
    #[arg(long, value_enum)]
    pub accuracy_scope: Option<AccuracyScope>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Question,
    Pair,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Runs to tabulate, in row order.
    #[arg(long, required = true)]
    pub run: Vec<String>,
    /// Output directory (defaults to `<runs_dir>/report`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run whose scores are correlated (defaults to the first run).
    #[arg(long)]
    pub correlation_run: Option<String>,
    /// Correlate per-question scores or per-pair scores.
    #[arg(long, value_enum, default_value = "question")]
    pub level: Level,
    /// Agreement functions for question-set consistency.
    #[arg(long, value_delimiter = ',')]
    pub question_sets: Vec<AgreementName>,
    #[arg(long, value_enum)]
    pub accuracy_scope: Option<AccuracyScope>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub run: String,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Questions sampled into the batch.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Registered annotator ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub annotators: Vec<String>,
    /// Directory of the static UI bundle.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Write labels.jsonl and exit without serving.
    #[arg(long)]
    pub export: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileKind {
    Questions,
    Paraphrases,
    Answers,
    PairScores,
    Consistency,
    Accuracy,
    Labels,
    Manifest,
    Config,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
    /// Record type (inferred from the file name when omitted).
    #[arg(long, value_enum)]
    pub kind: Option<FileKind>,
    /// Question file to resolve paraphrase question ids against.
    #[arg(long)]
    pub questions: Option<PathBuf>,
}

/// Parses arguments, runs, and maps the outcome to an exit status: 0 on
/// success, 1 on a pipeline error, 2 on a usage error.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Validate(args) = &cli.command {
        return validate(args);
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        for ep in &mut cfg.endpoints {
            ep.concurrency = jobs;
        }
    }
    match &cli.command {
        Command::Paraphrase(a) => cmd_paraphrase(&cfg, a),
        Command::Filter(a) => cmd_filter(&cfg, a),
        Command::Generate(a) => cmd_generate(&cfg, a),
        Command::Score(a) => cmd_score(&cfg, a),
        Command::Consistency(a) => cmd_consistency(&cfg, a),
        Command::Accuracy(a) => cmd_accuracy(&cfg, a),
        Command::Report(a) => cmd_report(&cfg, a),
        Command::Annotate(a) => cmd_annotate(&cfg, a),
        Command::Validate(_) => unreachable!("handled above"),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None if Path::new(DEFAULT_CONFIG).exists() => Ok(Config::load(Path::new(DEFAULT_CONFIG))?),
        None => Ok(Config::default()),
    }
}

fn questions(cfg: &Config) -> anyhow::Result<Vec<Question>> {
    let path = cfg.resolve(&cfg.questions);
    let mut qs = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        questions_from_truthfulqa_csv(&path)?
    } else {
        load_questions(&path)?
    };
    if cfg.accuracy.references == ReferenceSet::Best {
        for q in &mut qs {
            q.true_refs = vec![q.best_answer.clone()];
        }
    }
    Ok(qs)
}

fn corpus(cfg: &Config) -> anyhow::Result<(Vec<Question>, Vec<ParaphraseRecord>)> {
    let qs = questions(cfg)?;
    let ps = load_paraphrases(&cfg.resolve(&cfg.paraphrases), &qs)?;
    Ok((qs, ps))
}

fn run_dir(cfg: &Config, run: &str) -> anyhow::Result<PathBuf> {
    if run.is_empty() || run.contains(['/', '\\']) || run == "." || run == ".." {
        bail!("invalid run id {run:?}");
    }
    Ok(cfg.run_dir(run))
}

fn load_manifest(dir: &Path) -> anyhow::Result<RunManifest> {
    let path = dir.join(dataset::MANIFEST_FILE);
    if !path.exists() {
        bail!("{} does not exist; run `concord generate` first", path.display());
    }
    Ok(RunManifest::load(&path)?)
}

fn load_sets(dir: &Path) -> anyhow::Result<Vec<AnswerSet>> {
    let path = dir.join(dataset::ANSWERS_FILE);
    if !path.exists() {
        bail!("{} does not exist; run `concord generate` first", path.display());
    }
    Ok(load_records(&path)?)
}

fn record_scorers(cfg: &Config, dir: &Path) -> anyhow::Result<()> {
    let mut m = load_manifest(dir)?;
    m.scorer_versions.extend(cfg.scorer_versions());
    m.save(&dir.join(dataset::MANIFEST_FILE))?;
    Ok(())
}

fn cmd_paraphrase(cfg: &Config, a: &ParaphraseArgs) -> anyhow::Result<()> {
    let qs = questions(cfg)?;
    let gateway = cfg.gateway()?;
    let k = a.k.unwrap_or(cfg.filter.per_method);
    let mut candidates = Vec::new();

    let paraphraser = cfg.role("paraphraser");
    if k > 0 {
        if let Some(ep) = &paraphraser {
            let template = match a.template_file.as_ref().or(cfg.filter.template_file.as_ref()) {
                Some(p) => {
                    let p = cfg.resolve(p);
                    std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?
                }
                None => paraphrase::DEFAULT_FEWSHOT_TEMPLATE.to_owned(),
            };
            let mut decoding = DecodingConfig::nucleus(a.top_p.unwrap_or(cfg.decoding.top_p), cfg.seed);
            decoding.temperature = cfg.decoding.temperature;
            decoding.max_new_tokens = cfg.decoding.max_new_tokens;
            decoding.validate().map_err(|e| anyhow!(e))?;
            candidates.extend(paraphrase::generate_candidates(&gateway, &qs, ep, k, &template, &decoding)?);
        }
    }
    for path in &a.ingest {
        let external: Vec<ExternalParaphrase> = load_records(&cfg.resolve(path))?;
        candidates.extend(paraphrase::ingest_candidates(&qs, &external)?);
    }
    if candidates.is_empty() && paraphraser.is_none() && a.ingest.is_empty() {
        bail!("no `paraphraser` endpoint is configured and no --ingest files were given");
    }

    let mut records = Vec::new();
    for q in &qs {
        if cfg.filter.include_original {
            records.push(paraphrase::original_record(q));
        }
    }
    records.extend(candidates);

    let scorer = cfg.require_role("paraphrase")?;
    let outcome = paraphrase::score_candidates(&gateway, &records, &qs, &scorer)?;
    let out = a.out.as_ref().map_or_else(|| cfg.resolve(&cfg.paraphrases), |p| cfg.resolve(p));
    save_records(&outcome.records, &out)?;
    let originals = outcome.records.iter().filter(|r| r.is_original()).count();
    println!(
        "{} candidate paraphrases (+{originals} originals) for {} questions -> {}",
        outcome.records.len() - originals,
        qs.len(),
        out.display()
    );
    if !outcome.failures.is_empty() {
        for f in &outcome.failures {
            eprintln!("scoring failed: {f}");
        }
        bail!(
            "{} paraphrases could not be scored; rerun to retry (scored requests are cached)",
            outcome.failures.len()
        );
    }
    Ok(())
}

fn cmd_filter(cfg: &Config, a: &FilterArgs) -> anyhow::Result<()> {
    let (qs, ps) = corpus(cfg)?;
    let path = cfg.resolve(&cfg.paraphrases);
    if let Some(review) = &a.import_review {
        let (updated, report) = paraphrase::import_review(&ps, &cfg.resolve(review))?;
        save_records(&updated, &path)?;
        println!("review applied: {} kept, {} dropped", report.kept, report.dropped);
        for q in &report.flagged_questions {
            eprintln!("warning: question {q} has fewer than 2 kept paraphrases");
        }
        return Ok(());
    }
    let threshold = a.threshold.unwrap_or(cfg.filter.threshold);
    let top_k = a.top_k.unwrap_or(cfg.filter.top_k);
    let filtered = paraphrase::filter_paraphrases(&ps, threshold, top_k)?;
    save_records(&filtered, &path)?;
    let candidates = filtered.iter().filter(|r| !r.is_original()).count();
    let kept = filtered.iter().filter(|r| !r.is_original() && r.status.is_kept()).count();
    println!("{kept} of {candidates} paraphrases kept (threshold {threshold}, top_k {top_k})");
    if let Some(review) = &a.export_review {
        let n = paraphrase::export_review(&filtered, &qs, &cfg.resolve(review))?;
        println!("{n} rows written to {}", cfg.resolve(review).display());
    }
    Ok(())
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

fn cmd_generate(cfg: &Config, a: &GenerateArgs) -> anyhow::Result<()> {
    let mut endpoint: ScorerEndpoint = match &a.endpoint {
        Some(name) => cfg
            .endpoint(name)
            .cloned()
            .ok_or_else(|| anyhow!("no endpoint named {name:?} is configured"))?,
        None => cfg.require_role("generator")?,
    };
    if let Some(tag) = &a.model_tag {
        endpoint.model_tag = tag.clone();
    }
    let mut decoding = match a.decoding {
        DecodingArg::Greedy => DecodingConfig::greedy(),
        DecodingArg::Nucleus => {
            let mut d = DecodingConfig::nucleus(a.top_p.unwrap_or(cfg.decoding.top_p), cfg.seed);
            d.temperature = cfg.decoding.temperature;
            d
        }
    };
    decoding.max_new_tokens = cfg.decoding.max_new_tokens;
    decoding.stop_sequences = cfg.decoding.stop_sequences.clone();
    decoding.validate().map_err(|e| anyhow!(e))?;
    let decoding = decoding.canonical();
    let template = match &a.template_file {
        Some(p) => std::fs::read_to_string(cfg.resolve(p)).with_context(|| format!("reading {}", p.display()))?,
        None => cfg.decoding.answer_template.clone(),
    };

    let (qs, mut ps) = corpus(cfg)?;
    if a.unfiltered {
        for p in &mut ps {
            p.status = ParaphraseStatus::AutoKept;
        }
    }
    let run = a.run.clone().unwrap_or_else(|| {
        let mut id = format!("{}-{}", sanitize(&endpoint.model_tag), decoding.mode.as_str());
        if a.unfiltered {
            id.push_str("-unfiltered");
        }
        id
    });
    let dir = run_dir(cfg, &run)?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let manifest_path = dir.join(dataset::MANIFEST_FILE);
    let mut created_at = Utc::now();
    let mut old_annotation_seed = None;
    if manifest_path.exists() {
        let old = RunManifest::load(&manifest_path)?;
        if old.model_tag != endpoint.model_tag
            || old.decoding != decoding
            || old.unfiltered != a.unfiltered
            || old.answer_template.as_deref() != Some(template.as_str())
        {
            bail!("run {run} already exists with different settings; choose another --run");
        }
        created_at = old.created_at;
        old_annotation_seed = old.annotation_seed;
    }

    let answers_path = dir.join(dataset::ANSWERS_FILE);
    let mut existing: Vec<AnswerSet> = if a.resume && answers_path.exists() {
        load_records(&answers_path)?
    } else {
        Vec::new()
    };
    let done: HashSet<&str> = existing.iter().map(|s| s.question_id.as_str()).collect();
    let todo: Vec<Question> = qs.iter().filter(|q| !done.contains(q.id.as_str())).cloned().collect();

    let gateway = cfg.gateway()?;
    let outcome = generation::generate_answer_sets(&gateway, &todo, &ps, &endpoint, &decoding, &template)?;
    existing.extend(outcome.sets);
    let order: HashMap<&str, usize> = qs.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    existing.sort_by_key(|s| order.get(s.question_id.as_str()).copied().unwrap_or(usize::MAX));
    save_records(&existing, &answers_path)?;

    let manifest = RunManifest {
        run_id: run.clone(),
        model_tag: endpoint.model_tag.clone(),
        decoding,
        corpus_hash: dataset::corpus_hash(&qs, &ps),
        scorer_versions: cfg.scorer_versions(),
        created_at,
        answer_template: Some(template),
        unfiltered: a.unfiltered,
        seed: cfg.seed,
        annotation_seed: old_annotation_seed,
    };
    manifest.save(&manifest_path)?;

    let failures_path = dir.join(FAILURES_FILE);
    println!("run {run}: {} answer sets -> {}", existing.len(), answers_path.display());
    if outcome.failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).with_context(|| format!("removing {}", failures_path.display()))?;
        }
        return Ok(());
    }
    save_records::<GenerationFailure>(&outcome.failures, &failures_path)?;
    let questions: BTreeSet<&str> = outcome.failures.iter().map(|f| f.question_id.as_str()).collect();
    bail!(
        "{} generations failed across {} questions (see {}); rerun with --resume to retry",
        outcome.failures.len(),
        questions.len(),
        failures_path.display()
    )
}

fn available_functions(ctx: &AgreementContext<'_>) -> Vec<AgreementName> {
    AgreementName::ALL
        .into_iter()
        .filter(|n| match n {
            AgreementName::Equality | AgreementName::Rouge1 => true,
            AgreementName::NerOverlap => ctx.ner.is_some(),
            AgreementName::Bertscore => ctx.bertscore.is_some(),
            AgreementName::Paraphrase => ctx.paraphrase.is_some(),
            AgreementName::Entailment | AgreementName::Contradiction => ctx.nli.is_some(),
        })
        .collect()
}

/// Stored name for a function's pair scores; soft variants are kept apart.
fn stored_name(name: AgreementName, soft: bool) -> String {
    if soft && !matches!(name, AgreementName::Equality | AgreementName::Rouge1) && name.binary() {
        format!("{}_soft", name.as_str())
    } else {
        name.as_str().to_owned()
    }
}

fn selected(ctx: &AgreementContext<'_>, sel: &AgreementSelection) -> Vec<AgreementName> {
    if sel.agreement.is_empty() {
        available_functions(ctx)
    } else {
        sel.agreement.clone()
    }
}

fn load_pair_scores(dir: &Path) -> anyhow::Result<BTreeMap<String, Vec<PairScore>>> {
    let path = dir.join(dataset::PAIR_SCORES_FILE);
    let mut by_fn: BTreeMap<String, Vec<PairScore>> = BTreeMap::new();
    if path.exists() {
        for s in load_records::<PairScore>(&path)? {
            by_fn.entry(s.fn_name.clone()).or_default().push(s);
        }
    }
    Ok(by_fn)
}

fn save_pair_scores(dir: &Path, by_fn: &BTreeMap<String, Vec<PairScore>>) -> anyhow::Result<()> {
    let all: Vec<PairScore> = by_fn.values().flatten().cloned().collect();
    save_records(&all, &dir.join(dataset::PAIR_SCORES_FILE))?;
    Ok(())
}

/// Scores the listed functions over the run's answer sets, replacing any
/// stored scores for them.
fn score_functions(
    ctx: &AgreementContext<'_>,
    names: &[AgreementName],
    soft: bool,
    sets: &[AnswerSet],
    by_fn: &mut BTreeMap<String, Vec<PairScore>>,
) -> anyhow::Result<()> {
    let scorable: Vec<&AnswerSet> = sets.iter().filter(|s| s.n() >= 2).collect();
    for s in sets.iter().filter(|s| s.n() < 2) {
        log::warn!("question {} has {} answer(s); consistency undefined", s.question_id, s.n());
    }
    let texts: Vec<Vec<&str>> = scorable.iter().map(|s| s.texts()).collect();
    for &name in names {
        let f = ctx.build(name)?;
        let matrices = consistency::pair_matrices(&texts, f.as_ref())?;
        let fn_name = stored_name(name, soft);
        let scores = scorable
            .iter()
            .zip(&matrices)
            .flat_map(|(s, m)| m.pair_scores(&s.question_id, &fn_name))
            .collect();
        by_fn.insert(fn_name, scores);
    }
    Ok(())
}

fn cmd_score(cfg: &Config, a: &ScoreArgs) -> anyhow::Result<()> {
    let dir = run_dir(cfg, &a.run)?;
    let sets = load_sets(&dir)?;
    let gateway = cfg.gateway()?;
    let mut ctx = cfg.agreement_context(&gateway);
    ctx.soft |= a.select.soft;
    let names = selected(&ctx, &a.select);
    let mut by_fn = load_pair_scores(&dir)?;
    score_functions(&ctx, &names, ctx.soft, &sets, &mut by_fn)?;
    save_pair_scores(&dir, &by_fn)?;
    record_scorers(cfg, &dir)?;
    let total: usize = names.iter().map(|n| by_fn[&stored_name(*n, ctx.soft)].len()).sum();
    println!("{total} pair scores for {} functions -> {}", names.len(), dir.join(dataset::PAIR_SCORES_FILE).display());
    Ok(())
}

fn load_flags(dir: &Path, metric: AccuracyMetric) -> anyhow::Result<Option<Vec<AccuracyFlag>>> {
    let path = dir.join(dataset::ACCURACY_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let flags: Vec<AccuracyFlag> = load_records::<AccuracyLine>(&path)?
        .into_iter()
        .filter_map(|l| match l {
            AccuracyLine::Answer(f) if f.metric == metric => Some(f),
            _ => None,
        })
        .collect();
    Ok((!flags.is_empty()).then_some(flags))
}

fn original_ids(ps: &[ParaphraseRecord]) -> HashSet<String> {
    ps.iter()
        .filter(|p| p.source == ParaphraseSource::Original)
        .map(|p| p.id.clone())
        .collect()
}

fn flags_for(
    cfg: &Config,
    gateway: &Gateway,
    dir: &Path,
    sets: &[AnswerSet],
    metric: AccuracyMetric,
) -> anyhow::Result<Vec<AccuracyFlag>> {
    if let Some(flags) = load_flags(dir, metric)? {
        return Ok(flags);
    }
    let (qs, ps) = corpus(cfg)?;
    let bleurt = cfg.role("bleurt");
    Ok(accuracy::flag_answers(sets, &qs, &original_ids(&ps), metric, bleurt.as_ref().map(|e| (gateway, e)))?)
}

fn cmd_consistency(cfg: &Config, a: &ConsistencyArgs) -> anyhow::Result<()> {
    let dir = run_dir(cfg, &a.run)?;
    let sets = load_sets(&dir)?;
    let gateway = cfg.gateway()?;
    let mut ctx = cfg.agreement_context(&gateway);
    ctx.soft |= a.select.soft;
    let names = selected(&ctx, &a.select);

    let mut by_fn = load_pair_scores(&dir)?;
    let missing: Vec<AgreementName> = names
        .iter()
        .copied()
        .filter(|n| !by_fn.contains_key(&stored_name(*n, ctx.soft)))
        .collect();
    if !missing.is_empty() {
        score_functions(&ctx, &missing, ctx.soft, &sets, &mut by_fn)?;
        save_pair_scores(&dir, &by_fn)?;
    }

    let scorable: Vec<&AnswerSet> = sets.iter().filter(|s| s.n() >= 2).collect();
    let mut results: BTreeMap<String, Vec<ConsistencyResult>> = BTreeMap::new();
    let mut matrices: HashMap<(String, String), PairMatrix> = HashMap::new();
    for &name in &names {
        let fn_name = stored_name(name, ctx.soft);
        let mut per_q: HashMap<&str, Vec<&PairScore>> = HashMap::new();
        for s in &by_fn[&fn_name] {
            per_q.entry(s.question_id.as_str()).or_default().push(s);
        }
        let out = results.entry(fn_name.clone()).or_default();
        for set in &scorable {
            let scores = per_q.remove(set.question_id.as_str()).unwrap_or_default();
            let m = PairMatrix::from_pair_scores(set.n(), scores)
                .with_context(|| format!("stored {fn_name} scores for {}; rerun `concord score`", set.question_id))?;
            out.push(ConsistencyResult {
                question_id: set.question_id.clone(),
                fn_name: fn_name.clone(),
                n: set.n(),
                score: m.consistency()?,
            });
            matrices.insert((fn_name.clone(), set.question_id.clone()), m);
        }
    }
    if !names.contains(&AgreementName::Equality) {
        let out = results.entry(AgreementName::Equality.as_str().to_owned()).or_default();
        for set in &scorable {
            out.push(consistency::lexical_consistency(&set.question_id, &set.texts())?);
        }
    }

    if names.contains(&AgreementName::Paraphrase) && !ctx.soft {
        let metric = cfg.accuracy.pp_plus_acc_metric;
        let flags = flags_for(cfg, &gateway, &dir, &sets, metric)?;
        let accurate: HashMap<(&str, &str), bool> = flags
            .iter()
            .map(|f| ((f.question_id.as_str(), f.paraphrase_id.as_str()), f.accurate))
            .collect();
        let out = results.entry(PP_PLUS_ACC.to_owned()).or_default();
        for set in &scorable {
            let subset: Vec<usize> = set
                .answers
                .iter()
                .enumerate()
                .filter(|(_, ans)| accurate.get(&(set.question_id.as_str(), ans.paraphrase_id.as_str())) == Some(&true))
                .map(|(i, _)| i)
                .collect();
            if subset.len() < 2 {
                continue;
            }
            let m = &matrices[&(AgreementName::Paraphrase.as_str().to_owned(), set.question_id.clone())];
            out.push(ConsistencyResult {
                question_id: set.question_id.clone(),
                fn_name: PP_PLUS_ACC.to_owned(),
                n: subset.len(),
                score: m.consistency_over(&subset)?,
            });
        }
    }

    let all: Vec<ConsistencyResult> = results.values().flatten().cloned().collect();
    save_records(&all, &dir.join(dataset::CONSISTENCY_FILE))?;
    record_scorers(cfg, &dir)?;
    for (name, mean) in consistency::aggregate(&all) {
        println!("{name}\t{}", consistency::format_percent(Some(mean)));
    }
    Ok(())
}

fn cmd_accuracy(cfg: &Config, a: &AccuracyArgs) -> anyhow::Result<()> {
    let dir = run_dir(cfg, &a.run)?;
    let sets = load_sets(&dir)?;
    let (qs, ps) = corpus(cfg)?;
    let gateway = cfg.gateway()?;
    let bleurt = cfg.role("bleurt");
    let metrics = if a.metric.is_empty() {
        let mut m = vec![AccuracyMetric::R1a];
        if bleurt.is_some() {
            m.push(AccuracyMetric::Bleurt);
        }
        m
    } else {
        a.metric.clone()
    };
    let originals = original_ids(&ps);
    let mut lines = Vec::new();
    for &metric in &metrics {
        let flags = accuracy::flag_answers(&sets, &qs, &originals, metric, bleurt.as_ref().map(|e| (&gateway, e)))?;
        for scope in [AccuracyScope::All, AccuracyScope::Original] {
            if let Some(acc) = accuracy::model_accuracy(&flags, scope) {
                let answers = flags.iter().filter(|f| scope == AccuracyScope::All || f.original).count();
                lines.push(AccuracyLine::Aggregate {
                    metric,
                    scope,
                    answers,
                    accuracy: acc,
                });
            }
        }
        let scope = a.accuracy_scope.unwrap_or(cfg.accuracy.scope);
        println!("{metric}\t{}", consistency::format_percent(accuracy::model_accuracy(&flags, scope)));
        lines.extend(flags.into_iter().map(AccuracyLine::Answer));
    }
    save_records(&lines, &dir.join(dataset::ACCURACY_FILE))?;
    record_scorers(cfg, &dir)?;
    Ok(())
}

fn load_consistency(dir: &Path) -> anyhow::Result<Vec<ConsistencyResult>> {
    let path = dir.join(dataset::CONSISTENCY_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(load_records(&path)?)
}

fn load_accuracy_lines(dir: &Path) -> anyhow::Result<Vec<AccuracyLine>> {
    let path = dir.join(dataset::ACCURACY_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(load_records(&path)?)
}

fn report_row(dir: &Path, scope: AccuracyScope) -> anyhow::Result<(ReportRow, bool)> {
    let m = load_manifest(dir)?;
    let mut values = consistency::aggregate(&load_consistency(dir)?);
    for line in load_accuracy_lines(dir)? {
        if let AccuracyLine::Aggregate {
            metric,
            scope: s,
            accuracy,
            ..
        } = line
        {
            if s == scope {
                values.insert(metric.as_str().to_owned(), accuracy);
            }
        }
    }
    Ok((
        ReportRow {
            model: m.model_tag,
            decoding: m.decoding.mode,
            values,
        },
        m.unfiltered,
    ))
}

struct HumanData {
    labels: Vec<LabelRecord>,
    tasks: Vec<PairTask>,
}

fn load_human(dir: &Path) -> anyhow::Result<Option<HumanData>> {
    let labels_path = dir.join(dataset::LABELS_FILE);
    let tasks_path = dir.join("annotation").join(annotation::TASKS_FILE);
    if !labels_path.exists() || !tasks_path.exists() {
        return Ok(None);
    }
    let labels: Vec<LabelRecord> = load_records(&labels_path)?;
    if labels.is_empty() {
        return Ok(None);
    }
    Ok(Some(HumanData {
        labels,
        tasks: load_records(&tasks_path)?,
    }))
}

fn ordered_keys<'a>(keys: impl Iterator<Item = &'a String>) -> Vec<String> {
    let present: BTreeSet<&String> = keys.collect();
    let mut out: Vec<String> = CORRELATION_ORDER
        .iter()
        .filter(|k| present.iter().any(|p| p.as_str() == **k))
        .map(|k| k.to_string())
        .collect();
    for p in present {
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
    out
}

fn question_vectors(
    dir: &Path,
    human: Option<&HumanData>,
) -> anyhow::Result<Vec<(String, BTreeMap<String, f64>)>> {
    let mut by_name: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in load_consistency(dir)? {
        if r.fn_name == PP_PLUS_ACC || r.fn_name == AgreementName::Equality.as_str() {
            continue;
        }
        by_name.entry(r.fn_name).or_default().insert(r.question_id, r.score);
    }
    let lines = load_accuracy_lines(dir)?;
    for metric in [AccuracyMetric::R1a, AccuracyMetric::Bleurt] {
        let flags: Vec<AccuracyFlag> = lines
            .iter()
            .filter_map(|l| match l {
                AccuracyLine::Answer(f) if f.metric == metric => Some(f.clone()),
                _ => None,
            })
            .collect();
        if !flags.is_empty() {
            by_name.insert(metric.as_str().to_owned(), accuracy::question_accuracy(&flags));
        }
    }
    if let Some(h) = human {
        let index: HashMap<String, String> = h.tasks.iter().map(|t| (t.pair_id.clone(), t.question_id.clone())).collect();
        by_name.insert("human".into(), stats::human_question_scores(&h.labels, &index)?);
    }
    // Align everything to the human sample, or else to the consistency
    // questions.
    let base: Option<BTreeSet<String>> = by_name
        .get("human")
        .or_else(|| by_name.iter().find(|(k, _)| !matches!(k.as_str(), "r1a" | "bleurt")).map(|(_, v)| v))
        .map(|v| v.keys().cloned().collect());
    let Some(base) = base else {
        return Ok(Vec::new());
    };
    let order = ordered_keys(by_name.keys());
    order
        .into_iter()
        .map(|name| {
            let v = &by_name[&name];
            let mut aligned = BTreeMap::new();
            for q in &base {
                let s = v
                    .get(q)
                    .ok_or_else(|| anyhow!("metric {name} has no score for question {q}"))?;
                aligned.insert(q.clone(), *s);
            }
            Ok((name, aligned))
        })
        .collect()
}

fn pair_vectors(dir: &Path, human: &HumanData) -> anyhow::Result<Vec<(String, BTreeMap<String, f64>)>> {
    let verdicts = stats::majority_verdicts(&human.labels)?;
    let mut by_name: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    by_name.insert(
        "human".into(),
        verdicts.iter().map(|(p, v)| (p.clone(), if *v { 1.0 } else { 0.0 })).collect(),
    );
    let by_fn = load_pair_scores(dir)?;
    for (fn_name, scores) in &by_fn {
        let lookup: HashMap<(&str, usize, usize), f64> =
            scores.iter().map(|s| ((s.question_id.as_str(), s.i, s.j), s.value)).collect();
        let mut v = BTreeMap::new();
        for t in &human.tasks {
            if !verdicts.contains_key(&t.pair_id) {
                continue;
            }
            let fwd = lookup.get(&(t.question_id.as_str(), t.i, t.j));
            let bwd = lookup.get(&(t.question_id.as_str(), t.j, t.i));
            let (Some(f), Some(b)) = (fwd, bwd) else {
                bail!("{fn_name} has no score for annotated pair {}", t.pair_id);
            };
            v.insert(t.pair_id.clone(), (f + b) / 2.0);
        }
        by_name.insert(fn_name.clone(), v);
    }
    by_name.remove(AgreementName::Equality.as_str());
    Ok(ordered_keys(by_name.keys())
        .into_iter()
        .map(|n| {
            let v = by_name.remove(&n).expect("key from map");
            (n, v)
        })
        .collect())
}

fn cmd_report(cfg: &Config, a: &ReportArgs) -> anyhow::Result<()> {
    let scope = a.accuracy_scope.unwrap_or(cfg.accuracy.scope);
    let mut input = ReportInput::default();
    for run in &a.run {
        let (row, unfiltered) = report_row(&run_dir(cfg, run)?, scope)?;
        if unfiltered {
            input.unfiltered_rows.push(row);
        } else {
            input.rows.push(row);
        }
    }

    let corr_run = a.correlation_run.as_ref().unwrap_or(&a.run[0]);
    let corr_dir = run_dir(cfg, corr_run)?;
    let manifest = load_manifest(&corr_dir)?;
    let human = load_human(&corr_dir)?;
    let (vectors, unit) = match a.level {
        Level::Question => (question_vectors(&corr_dir, human.as_ref())?, "questions"),
        Level::Pair => {
            let h = human
                .as_ref()
                .ok_or_else(|| anyhow!("pair-level correlation needs labels.jsonl in run {corr_run}"))?;
            (pair_vectors(&corr_dir, h)?, "answer pairs")
        }
    };
    let items = vectors.first().map_or(0, |(_, v)| v.len());
    if vectors.len() >= 2 && items >= 3 {
        input.correlation = Some(CorrelationSection {
            matrix: stats::correlation_matrix(&vectors)?,
            caption: format!(
                "Run {corr_run} ({}, {}), {items} {unit}.",
                manifest.model_tag,
                manifest.decoding.mode.as_str()
            ),
        });
    } else {
        log::warn!("run {corr_run}: not enough aligned scores for a correlation table");
    }

    if let Some(h) = &human {
        let annotators: BTreeSet<&str> = h.labels.iter().map(|l| l.annotator_id.as_str()).collect();
        let pairs: BTreeSet<&str> = h.labels.iter().map(|l| l.pair_id.as_str()).collect();
        match stats::label_kappa(&h.labels) {
            Ok(kappa) => {
                input.human_agreement = Some(HumanAgreement {
                    kappa,
                    pairs: pairs.len(),
                    annotators: annotators.len(),
                })
            }
            Err(e) => log::warn!("inter-annotator agreement unavailable: {e}"),
        }
    }

    let gateway = cfg.gateway()?;
    let ctx = cfg.agreement_context(&gateway);
    let qs_fns: Vec<AgreementName> = if a.question_sets.is_empty() {
        ctx.paraphrase.iter().map(|_| AgreementName::Paraphrase).collect()
    } else {
        a.question_sets.clone()
    };
    if !qs_fns.is_empty() {
        let (_, ps) = corpus(cfg)?;
        for name in qs_fns {
            let f = ctx.build(name)?;
            input.question_sets.push(paraphrase::question_set_summary(&ps, f.as_ref())?);
        }
    }

    let out = a.out.as_ref().map_or_else(|| cfg.runs_dir().join("report"), |p| cfg.resolve(p));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let md = report::render_markdown(&input);
    write_file(&out.join("report.md"), &md)?;
    write_file(&out.join("report.csv"), &report::render_results_csv(&input))?;
    if let Some(c) = &input.correlation {
        write_file(&out.join("correlations.csv"), &report::render_correlations_csv(&c.matrix))?;
    }
    print!("{md}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_annotate(cfg: &Config, a: &AnnotateArgs) -> anyhow::Result<()> {
    let dir = run_dir(cfg, &a.run)?;
    let ann_dir = dir.join("annotation");
    std::fs::create_dir_all(&ann_dir).with_context(|| format!("creating {}", ann_dir.display()))?;
    let tasks_path = ann_dir.join(annotation::TASKS_FILE);
    let tasks: Vec<PairTask> = if tasks_path.exists() {
        load_records(&tasks_path)?
    } else {
        let sets = load_sets(&dir)?;
        let qs = questions(cfg)?;
        let with_pairs: HashSet<&str> = sets.iter().filter(|s| s.n() >= 2).map(|s| s.question_id.as_str()).collect();
        let eligible: Vec<Question> = qs.iter().filter(|q| with_pairs.contains(q.id.as_str())).cloned().collect();
        let n = a.sample.unwrap_or(cfg.annotation.sample).min(eligible.len());
        let sampled: HashSet<String> = generation::sample_questions(&eligible, n, cfg.seed)?
            .into_iter()
            .map(|q| q.id)
            .collect();
        let chosen: Vec<AnswerSet> = sets.into_iter().filter(|s| sampled.contains(&s.question_id)).collect();
        let tasks = annotation::build_annotation_batch(&chosen, &qs, cfg.seed);
        save_records(&tasks, &tasks_path)?;
        let mut m = load_manifest(&dir)?;
        m.annotation_seed = Some(cfg.seed);
        m.save(&dir.join(dataset::MANIFEST_FILE))?;
        println!("{} tasks over {} questions -> {}", tasks.len(), chosen.len(), tasks_path.display());
        tasks
    };
    let store = LabelStore::open(&ann_dir.join(annotation::STORE_FILE))?;
    let annotators = if a.annotators.is_empty() {
        cfg.annotation.annotators.clone()
    } else {
        a.annotators.clone()
    };
    let service = AnnotationService::new(tasks, &annotators, store).with_export_path(dir.join(dataset::LABELS_FILE));
    if a.export {
        let n = service.export_labels(&dir.join(dataset::LABELS_FILE))?;
        println!("{n} labels -> {}", dir.join(dataset::LABELS_FILE).display());
        return Ok(());
    }
    let port = a.port.unwrap_or(cfg.annotation.port);
    let addr: SocketAddr = format!("{}:{port}", a.host)
        .parse()
        .with_context(|| format!("invalid listen address {}:{port}", a.host))?;
    let ui_dir = a.ui_dir.clone().or_else(|| cfg.annotation.ui_dir.as_ref().map(|p| cfg.resolve(p)));
    annotation::serve(Arc::new(service), addr, ui_dir)?;
    Ok(())
}

fn infer_kind(path: &Path) -> Option<FileKind> {
    let name = path.file_name()?.to_str()?;
    Some(match name {
        n if n.ends_with(".toml") => FileKind::Config,
        n if n.contains("question") => FileKind::Questions,
        n if n.contains("paraphrase") => FileKind::Paraphrases,
        n if n.contains("answer") => FileKind::Answers,
        n if n.contains("pair_score") => FileKind::PairScores,
        n if n.contains("consistency") => FileKind::Consistency,
        n if n.contains("accuracy") => FileKind::Accuracy,
        n if n.contains("label") => FileKind::Labels,
        n if n.contains("manifest") => FileKind::Manifest,
        _ => return None,
    })
}

fn validate(a: &ValidateArgs) -> anyhow::Result<()> {
    let kind = a
        .kind
        .or_else(|| infer_kind(&a.path))
        .ok_or_else(|| anyhow!("cannot infer the record type of {}; pass --kind", a.path.display()))?;
    let n = match kind {
        FileKind::Questions => load_questions(&a.path)?.len(),
        FileKind::Paraphrases => match &a.questions {
            Some(q) => load_paraphrases(&a.path, &load_questions(q)?)?.len(),
            None => load_records::<ParaphraseRecord>(&a.path)?.len(),
        },
        FileKind::Answers => load_records::<AnswerSet>(&a.path)?.len(),
        FileKind::PairScores => load_records::<PairScore>(&a.path)?.len(),
        FileKind::Consistency => load_records::<ConsistencyResult>(&a.path)?.len(),
        FileKind::Accuracy => load_records::<AccuracyLine>(&a.path)?.len(),
        FileKind::Labels => load_records::<LabelRecord>(&a.path)?.len(),
        FileKind::Manifest => {
            RunManifest::load(&a.path)?;
            1
        }
        FileKind::Config => {
            Config::load(&a.path)?;
            1
        }
    };
    println!("{}: {n} valid records", a.path.display());
    Ok(())
}
