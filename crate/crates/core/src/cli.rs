//! Command-line interface.
//!
//! Exit codes: 0 success, 1 fatal runtime error, 2 configuration or usage
//! error, 3 run finished but some sentences failed.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decision::{DecisionCase, DecisionRule, DEFAULT_THETA, THETA_GRID};
use crate::grouping::{build_groups, default_group_count, similarity_matrix, vectorize_explanations, GroupingMethod, RelationGroups};
use crate::llm::{
    Backend, CompletionParams, MockBackend, Recorder, RemoteBackend, RemoteConfig, ReplayBackend, DEFAULT_TEMPERATURE,
};
use crate::metrics::{self, EvalPair, ReportEntry};
use crate::pipeline::{self, balance_na, AnnotationRecord, LabeledSample, Mode, RunSettings, RunStats};
use crate::prompt::{build_binary_prompt, build_multi_prompt, PromptTemplates, Query, DEFAULT_DEMOS_PER_RELATION};
use crate::schema::{load_corpus, load_schema, RelationSchema};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

pub const ENV_ENDPOINT: &str = "RELMINE_ENDPOINT";
pub const ENV_API_KEY: &str = "RELMINE_API_KEY";
pub const ENV_MODEL: &str = "RELMINE_MODEL";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Fatal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Fatal(_) => EXIT_FATAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Fatal(m) => write!(f, "error: {m}"),
        }
    }
}

fn config<E: fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn fatal<E: fmt::Display>(e: E) -> CliError {
    CliError::Fatal(e.to_string())
}

/// Group count: `auto` means `max(1, floor(N / 6))` over all labels including NA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KSpec {
    #[default]
    Auto,
    Fixed(usize),
}

impl KSpec {
    pub fn resolve(self, schema: &RelationSchema) -> usize {
        match self {
            KSpec::Auto => default_group_count(schema.total_labels()),
            KSpec::Fixed(k) => k,
        }
    }
}

impl FromStr for KSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(KSpec::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(KSpec::Fixed(k)),
            _ => Err(format!("k must be \"auto\" or a positive integer, got {s:?}")),
        }
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Auto => f.write_str("auto"),
            KSpec::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            KSpec::Auto => s.serialize_str("auto"),
            KSpec::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => KSpec::from_str(&k.to_string()),
            Raw::Str(s) => KSpec::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Loads a schema from a path, or one of the bundled schemas as `bundled:tacred`
/// / `bundled:semeval`.
pub fn resolve_schema(arg: &str) -> Result<RelationSchema, CliError> {
    match arg.strip_prefix("bundled:") {
        Some(name) => RelationSchema::bundled(name).map_err(config),
        None => load_schema(arg).map_err(config),
    }
}

fn resolve_templates(dir: Option<&PathBuf>) -> Result<PromptTemplates, CliError> {
    match dir {
        Some(d) => PromptTemplates::from_dir(d).map_err(config),
        None => Ok(PromptTemplates::builtin()),
    }
}

#[derive(Parser, Debug)]
#[command(name = "relmine", version, about = "Mine relation-extraction training data with an LLM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Partition a schema's relations into groups and save them.
    Group(GroupArgs),
    /// Annotate a corpus and write dataset, trace and stats files.
    Run(RunOptions),
    /// Downsample NA samples of a dataset to the mean non-NA relation count.
    Balance(BalanceArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Render the prompts a run would send, without calling a backend.
    InspectPrompts(InspectArgs),
    /// Re-run the label decision of a recorded trace over a theta grid.
    SweepTheta(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GroupArgs {
    /// Schema file, or bundled:tacred / bundled:semeval.
    #[arg(long)]
    pub schema: String,
    #[arg(long, default_value = "auto")]
    pub k: KSpec,
    #[arg(long, default_value = "algorithmic")]
    pub method: GroupingMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the explanation similarity matrix as JSON.
    #[arg(long)]
    pub similarity_out: Option<PathBuf>,
}

/// Options of `run`. Every field may also come from `--config`; flags win.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// JSON file with any of these options (snake_case keys).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// mbre, multi or binary.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Relation groups file; otherwise groups are built from --k and --grouping.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<KSpec>,
    #[arg(long)]
    pub grouping: Option<GroupingMethod>,
    #[arg(long)]
    pub theta: Option<f64>,
    /// In the multi-Yes case, emit NA instead of the most confident relation
    /// when none clears the threshold.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strict_multiyes: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// OpenAI-compatible base URL. Falls back to $RELMINE_ENDPOINT when no
    /// other backend is chosen.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, env = ENV_API_KEY, hide_env_values = true)]
    #[serde(skip)]
    pub api_key: Option<String>,
    #[arg(long, env = ENV_MODEL)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub top_logprobs: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Worker threads and maximum concurrent requests.
    #[arg(long)]
    pub max_parallel: Option<usize>,
    /// Scripted mock replies (JSONL).
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Answer from a recorded cassette only.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Record every exchange of the endpoint or mock backend to this cassette.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long)]
    pub out_dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_trace: Option<PathBuf>,
    #[arg(long)]
    pub out_stats: Option<PathBuf>,
    #[arg(long)]
    pub demos_per_relation: Option<usize>,
    #[arg(long)]
    pub pairs_per_sentence: Option<usize>,
    /// Directory overriding the built-in prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Include wall-clock time in the stats file (makes it run-dependent).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub wall_time: Option<bool>,
}

macro_rules! prefer {
    ($flags:ident, $file:ident; $($field:ident),*) => {
        RunOptions { $($field: $flags.$field.clone().or($file.$field.clone()),)* }
    };
}

impl RunOptions {
    /// Field-wise `self` over `file`.
    pub fn over(&self, file: &RunOptions) -> RunOptions {
        let flags = self;
        prefer!(flags, file; config, schema, corpus, mode, groups, k, grouping, theta, strict_multiyes, seed,
            endpoint, api_key, model, temperature, max_tokens, top_logprobs, timeout_secs, max_parallel,
            mock_script, replay, record, out_dataset, out_trace, out_stats, demos_per_relation,
            pairs_per_sentence, templates, run_id, wall_time)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Remote,
    Mock,
    Replay,
}

/// Resolved `run` configuration. Its serialized form is echoed into the stats
/// report; it leaves out secrets, output paths and parallelism, none of which
/// affect the results.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub schema: String,
    pub corpus: String,
    pub mode: Mode,
    pub k: KSpec,
    pub resolved_k: Option<usize>,
    pub groups: Option<String>,
    pub grouping: GroupingMethod,
    pub theta: f64,
    pub strict_multiyes: bool,
    pub seed: u64,
    pub backend: BackendChoice,
    pub endpoint: Option<String>,
    pub mock_script: Option<String>,
    pub replay: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub demos_per_relation: usize,
    pub pairs_per_sentence: usize,
    pub templates: Option<String>,
    pub run_id: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    #[serde(skip)]
    pub timeout: Duration,
    #[serde(skip)]
    pub max_parallel: usize,
    #[serde(skip)]
    pub record: Option<PathBuf>,
    #[serde(skip)]
    pub out_dataset: PathBuf,
    #[serde(skip)]
    pub out_trace: PathBuf,
    #[serde(skip)]
    pub out_stats: PathBuf,
    #[serde(skip)]
    pub wall_time: bool,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl RunConfig {
    /// Applies defaults and validates option combinations. No file other than
    /// the config file itself is read here.
    pub fn resolve(flags: &RunOptions) -> Result<RunConfig, CliError> {
        let file = match &flags.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<RunOptions>(&text).map_err(|e| config(format!("{}: {e}", p.display())))?
            }
            None => RunOptions::default(),
        };
        let mut o = flags.over(&file);
        if o.endpoint.is_none() && o.mock_script.is_none() && o.replay.is_none() {
            o.endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|e| !e.is_empty());
        }
        let schema = o.schema.clone().ok_or_else(|| config("--schema is required"))?;
        let corpus = o.corpus.clone().ok_or_else(|| config("--corpus is required"))?;
        let mode = o.mode.unwrap_or(Mode::Mbre);
        let sources = [o.endpoint.is_some(), o.mock_script.is_some(), o.replay.is_some()];
        let backend = match sources {
            [true, false, false] => BackendChoice::Remote,
            [false, true, false] => BackendChoice::Mock,
            [false, false, true] => BackendChoice::Replay,
            [false, false, false] => {
                return Err(config(format!("no backend: pass --endpoint (or {ENV_ENDPOINT}), --mock-script or --replay")))
            }
            _ => return Err(config("--endpoint, --mock-script and --replay are mutually exclusive")),
        };
        if backend == BackendChoice::Replay && o.record.is_some() {
            return Err(config("--record cannot be combined with --replay"));
        }
        if mode != Mode::Mbre && (o.groups.is_some() || o.k.is_some() || o.grouping.is_some()) {
            return Err(config(format!("--groups, --k and --grouping only apply to mode mbre, not {}", mode.as_str())));
        }
        let theta = o.theta.unwrap_or(DEFAULT_THETA);
        DecisionRule::new(theta).map_err(config)?;
        let temperature = o.temperature.unwrap_or(DEFAULT_TEMPERATURE);
        let max_parallel = o.max_parallel.unwrap_or(1);
        if max_parallel == 0 {
            return Err(config("--max-parallel must be >= 1"));
        }
        let pairs_per_sentence = o.pairs_per_sentence.unwrap_or(1);
        if pairs_per_sentence == 0 {
            return Err(config("--pairs-per-sentence must be >= 1"));
        }
        let defaults = CompletionParams::default();
        let out_dataset = o.out_dataset.clone().ok_or_else(|| config("--out-dataset is required"))?;
        let mut cfg = RunConfig {
            schema,
            corpus: corpus.display().to_string(),
            mode,
            k: o.k.unwrap_or_default(),
            resolved_k: None,
            groups: path_str(&o.groups),
            grouping: o.grouping.unwrap_or(GroupingMethod::Algorithmic),
            theta,
            strict_multiyes: o.strict_multiyes.unwrap_or(false),
            seed: o.seed.unwrap_or(0),
            backend,
            endpoint: o.endpoint.clone(),
            mock_script: path_str(&o.mock_script),
            replay: path_str(&o.replay),
            model: o.model.clone().unwrap_or(defaults.model),
            temperature,
            max_tokens: o.max_tokens.unwrap_or(defaults.max_tokens),
            top_logprobs: o.top_logprobs.unwrap_or(defaults.top_logprobs),
            demos_per_relation: o.demos_per_relation.unwrap_or(DEFAULT_DEMOS_PER_RELATION),
            pairs_per_sentence,
            templates: path_str(&o.templates),
            run_id: String::new(),
            api_key: o.api_key.clone(),
            timeout: Duration::from_secs(o.timeout_secs.unwrap_or(120)),
            max_parallel,
            record: o.record.clone(),
            out_trace: o.out_trace.clone().unwrap_or_else(|| out_dataset.with_extension("trace.jsonl")),
            out_stats: o.out_stats.clone().unwrap_or_else(|| out_dataset.with_extension("stats.json")),
            out_dataset,
            wall_time: o.wall_time.unwrap_or(false),
        };
        check_params(&cfg.params())?;
        cfg.run_id = match &o.run_id {
            Some(id) => id.clone(),
            None => {
                let echo = serde_json::to_string(&cfg).expect("config serializes");
                let digest = Sha256::digest(echo.as_bytes());
                digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
            }
        };
        Ok(cfg)
    }

    pub fn params(&self) -> CompletionParams {
        CompletionParams {
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            top_logprobs: self.top_logprobs,
        }
    }

    pub fn rule(&self) -> DecisionRule {
        DecisionRule {
            theta: self.theta,
            strict_multiyes: self.strict_multiyes,
        }
    }
}

fn check_params(p: &CompletionParams) -> Result<(), CliError> {
    p.validate().map_err(config)
}

fn groups_for_run(cfg: &mut RunConfig, schema: &RelationSchema) -> Result<Option<RelationGroups>, CliError> {
    if cfg.mode != Mode::Mbre {
        return Ok(None);
    }
    let groups = match &cfg.groups {
        Some(p) => {
            let g = RelationGroups::load(p).map_err(|e| config(format!("{p}: {e}")))?;
            if let KSpec::Fixed(k) = cfg.k {
                if k != g.k {
                    return Err(config(format!("--k {k} disagrees with groups file k = {}", g.k)));
                }
            }
            g
        }
        None => build_groups(schema, cfg.k.resolve(schema), cfg.grouping, cfg.seed).map_err(config)?,
    };
    groups.check_against(schema).map_err(config)?;
    cfg.resolved_k = Some(groups.k);
    Ok(Some(groups))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(fatal)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(fatal)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn cmd_group(args: &GroupArgs) -> Result<i32, CliError> {
    let schema = resolve_schema(&args.schema)?;
    let k = args.k.resolve(&schema);
    let groups = build_groups(&schema, k, args.method, args.seed).map_err(config)?;
    groups.save(&args.out).map_err(fatal)?;
    if let Some(p) = &args.similarity_out {
        let tfidf = vectorize_explanations(&schema).map_err(config)?;
        let sim = similarity_matrix(&tfidf);
        write_json(p, &serde_json::json!({ "relations": tfidf.names, "similarity": sim.rows() }))?;
    }
    let sizes: Vec<String> = groups.groups.iter().map(|g| g.len().to_string()).collect();
    println!("k = {} (sizes {})", groups.k, sizes.join(", "));
    Ok(EXIT_OK)
}

fn make_backend(cfg: &RunConfig) -> Result<Arc<dyn Backend>, CliError> {
    Ok(match cfg.backend {
        BackendChoice::Mock => {
            Arc::new(MockBackend::load(cfg.mock_script.as_deref().expect("mock path")).map_err(config)?)
        }
        BackendChoice::Replay => Arc::new(ReplayBackend::load(cfg.replay.as_deref().expect("replay path")).map_err(config)?),
        BackendChoice::Remote => {
            let mut rc = RemoteConfig::new(cfg.endpoint.clone().expect("endpoint"));
            rc.api_key = cfg.api_key.clone();
            rc.timeout = cfg.timeout;
            rc.max_in_flight = cfg.max_parallel;
            Arc::new(RemoteBackend::new(rc))
        }
    })
}

fn cmd_run(opts: &RunOptions) -> Result<i32, CliError> {
    let mut cfg = RunConfig::resolve(opts)?;
    let schema = resolve_schema(&cfg.schema)?;
    let corpus = load_corpus(&cfg.corpus).map_err(config)?;
    let templates = resolve_templates(cfg.templates.as_ref().map(PathBuf::from).as_ref())?;
    let groups = groups_for_run(&mut cfg, &schema)?;
    let backend = make_backend(&cfg)?;
    let recorder = cfg.record.as_ref().map(|_| Recorder::new(backend.clone()));
    let active: &dyn Backend = match &recorder {
        Some(r) => r,
        None => backend.as_ref(),
    };
    log::info!("backend {}", active.describe());

    let settings = RunSettings {
        mode: cfg.mode,
        rule: cfg.rule(),
        params: cfg.params(),
        seed: cfg.seed,
        workers: cfg.max_parallel,
        pairs_per_sentence: cfg.pairs_per_sentence,
        demos_per_relation: cfg.demos_per_relation,
        run_id: cfg.run_id.clone(),
    };
    let result = pipeline::run_corpus(&corpus, &schema, groups.as_ref(), &templates, active, &settings);
    if let (Some(r), Some(p)) = (&recorder, &cfg.record) {
        r.save(p).map_err(fatal)?;
    }
    let mut out = result.map_err(fatal)?;
    if !cfg.wall_time {
        out.stats.wall_time_ms = None;
    }
    out.stats.config = Some(serde_json::to_value(&cfg).map_err(fatal)?);
    write_jsonl(&cfg.out_dataset, &out.samples)?;
    write_jsonl(&cfg.out_trace, &out.records)?;
    write_json(&cfg.out_stats, &out.stats)?;
    eprintln!(
        "{} sentences: {} annotated, {} skipped, {} failed; {} samples; calls multi={} binary={}",
        out.stats.sentences,
        out.stats.annotated_sentences,
        out.stats.skipped.len(),
        out.stats.failures.len(),
        out.stats.emitted_samples,
        out.stats.calls_multi,
        out.stats.calls_binary
    );
    Ok(if out.stats.failures.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// NA label; defaults to the schema's when --schema is given.
    #[arg(long)]
    pub na_label: Option<String>,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn na_label_of(na_label: &Option<String>, schema: &Option<String>) -> Result<String, CliError> {
    match (na_label, schema) {
        (Some(l), _) => Ok(l.clone()),
        (None, Some(s)) => Ok(resolve_schema(s)?.na_label),
        (None, None) => Err(config("pass --na-label or --schema")),
    }
}

fn cmd_balance(args: &BalanceArgs) -> Result<i32, CliError> {
    let na = na_label_of(&args.na_label, &args.schema)?;
    let samples: Vec<LabeledSample> = read_jsonl(&args.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let kept = balance_na(&samples, &na, &mut rng);
    write_jsonl(&args.out, &kept)?;
    eprintln!("kept {} of {} samples", kept.len(), samples.len());
    Ok(EXIT_OK)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSONL of {"prediction", "confidences"?, "gold"}.
    #[arg(long, conflicts_with = "trace")]
    pub predictions: Option<PathBuf>,
    /// Annotation trace(s) to score against --gold; repeat to compare runs.
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// Stats files aligned with --trace, for call counts and time.
    #[arg(long)]
    pub stats: Vec<PathBuf>,
    /// JSONL of {"sentence_id", "pair_index"?, "gold"}.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub na_label: Option<String>,
    #[arg(long)]
    pub schema: Option<String>,
    /// Report path (JSON); the table goes next to it with a .txt extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Deserialize)]
struct GoldLine {
    sentence_id: String,
    #[serde(default)]
    pair_index: usize,
    gold: GoldLabels,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GoldLabels {
    One(String),
    Many(Vec<String>),
}

type GoldMap = HashMap<(String, usize), Vec<String>>;

fn load_gold(path: &Path) -> Result<GoldMap, CliError> {
    let lines: Vec<GoldLine> = read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .map(|g| {
            let labels = match g.gold {
                GoldLabels::One(s) => vec![s],
                GoldLabels::Many(v) => v,
            };
            ((g.sentence_id, g.pair_index), labels)
        })
        .collect())
}

/// Pairs up decisions with gold labels; records without gold are skipped.
pub fn pairs_from_records<'a>(
    records: impl IntoIterator<Item = (&'a AnnotationRecord, &'a crate::decision::Decision)>,
    gold: &GoldMap,
) -> (Vec<EvalPair>, usize) {
    let mut pairs = Vec::new();
    let mut missing = 0;
    for (record, decision) in records {
        let Some(g) = gold.get(&(record.sentence_id.clone(), record.pair_index)) else {
            missing += 1;
            continue;
        };
        let confidences = decision
            .labels
            .iter()
            .zip(&decision.retained_confidences)
            .filter_map(|(l, c)| c.map(|c| (l.clone(), c)));
        pairs.push(EvalPair::new(decision.labels.clone(), g.clone()).with_confidences(confidences));
    }
    (pairs, missing)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32, CliError> {
    let na = na_label_of(&args.na_label, &args.schema)?;
    let mut entries = Vec::new();
    if let Some(p) = &args.predictions {
        let pairs = metrics::load_eval_jsonl(p).map_err(config)?;
        let report = metrics::evaluate(&pairs, &na).map_err(config)?;
        entries.push(ReportEntry::new(p.display().to_string(), report));
    } else if !args.trace.is_empty() {
        if !args.stats.is_empty() && args.stats.len() != args.trace.len() {
            return Err(config("--stats must be given once per --trace"));
        }
        let gold = load_gold(args.gold.as_deref().ok_or_else(|| config("--trace needs --gold"))?)?;
        for (i, path) in args.trace.iter().enumerate() {
            let records: Vec<AnnotationRecord> = read_jsonl(path)?;
            let (pairs, missing) = pairs_from_records(records.iter().map(|r| (r, &r.decision)), &gold);
            if missing > 0 {
                log::warn!("{}: {missing} records without gold", path.display());
            }
            let report = metrics::evaluate(&pairs, &na).map_err(config)?;
            let label = records
                .first()
                .map(|r| r.mode.as_str().to_string())
                .unwrap_or_else(|| path.display().to_string());
            let mut entry = ReportEntry::new(label, report);
            if let Some(sp) = args.stats.get(i) {
                let text = fs::read_to_string(sp).map_err(|e| config(format!("{}: {e}", sp.display())))?;
                let stats: RunStats = serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", sp.display())))?;
                entry = entry.with_stats(&stats);
            }
            entries.push(entry);
        }
    } else {
        return Err(config("pass --predictions or --trace"));
    }
    let table = metrics::emit_report(&entries, &args.out).map_err(fatal)?;
    print!("{}", fs::read_to_string(table).map_err(fatal)?);
    Ok(EXIT_OK)
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub schema: String,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "mbre")]
    pub mode: Mode,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    pub k: KSpec,
    #[arg(long, default_value = "algorithmic")]
    pub grouping: GroupingMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only this sentence; otherwise the first --limit sentences.
    #[arg(long)]
    pub sentence: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub limit: usize,
    /// In mbre mode, also render the binary prompt for this relation.
    #[arg(long)]
    pub relation: Option<String>,
    #[arg(long)]
    pub demos_per_relation: Option<usize>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_inspect(args: &InspectArgs) -> Result<i32, CliError> {
    let schema = resolve_schema(&args.schema)?;
    let corpus = load_corpus(&args.corpus).map_err(config)?;
    let templates = resolve_templates(args.templates.as_ref())?;
    let demos = args.demos_per_relation.unwrap_or(DEFAULT_DEMOS_PER_RELATION);
    let groups = match (args.mode, &args.groups) {
        (Mode::Mbre, Some(p)) => Some(RelationGroups::load(p).map_err(config)?),
        (Mode::Mbre, None) => Some(build_groups(&schema, args.k.resolve(&schema), args.grouping, args.seed).map_err(config)?),
        _ => None,
    };
    if let Some(r) = &args.relation {
        if !schema.contains(r) || *r == schema.na_label {
            return Err(config(format!("relation {r:?} is not a non-NA schema relation")));
        }
    }
    let selected: Vec<_> = match &args.sentence {
        Some(id) => {
            let s: Vec<_> = corpus.iter().filter(|s| &s.id == id).collect();
            if s.is_empty() {
                return Err(config(format!("sentence {id:?} not in corpus")));
            }
            s
        }
        None => corpus.iter().take(args.limit).collect(),
    };
    let mut out = String::new();
    for sentence in selected {
        let mut rng = pipeline::sentence_rng(args.seed, &sentence.id);
        let Some((head, tail)) = pipeline::sample_entity_pair(sentence, &mut rng) else {
            out.push_str(&format!("### {}: fewer than two entities, skipped\n\n", sentence.id));
            continue;
        };
        let query = Query::new(sentence, &head, &tail);
        let mut prompts = Vec::new();
        match args.mode {
            Mode::Mbre => {
                let groups = groups.as_ref().expect("groups built for mbre");
                for (gi, names) in groups.groups.iter().enumerate() {
                    let rels: Vec<_> = names.iter().filter_map(|n| schema.get(n)).collect();
                    prompts.push(build_multi_prompt(&templates, &rels, Some(gi), &schema.na_label, query, demos).map_err(config)?);
                }
                if let Some(r) = &args.relation {
                    prompts.push(build_binary_prompt(&templates, schema.get(r).expect("checked"), query).map_err(config)?);
                }
            }
            Mode::Multi => {
                let rels: Vec<_> = schema.non_na().collect();
                prompts.push(build_multi_prompt(&templates, &rels, None, &schema.na_label, query, demos).map_err(config)?);
            }
            Mode::Binary => {
                for rel in schema.non_na() {
                    prompts.push(build_binary_prompt(&templates, rel, query).map_err(config)?);
                }
            }
        }
        for p in prompts {
            out.push_str(&format!("### {} {} {} (head {:?}, tail {:?})\n", p.sentence_id, p.kind.as_str(), p.target(), p.head, p.tail));
            out.push_str(&p.text);
            if !p.text.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
        }
    }
    match &args.out {
        Some(p) => fs::write(p, out).map_err(|e| fatal(format!("{}: {e}", p.display())))?,
        None => print!("{out}"),
    }
    Ok(EXIT_OK)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Annotation trace written by `run`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = THETA_GRID.to_vec())]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub na_label: Option<String>,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub strict_multiyes: bool,
    /// Optional gold labels; adds metrics to each report.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct SweepReport {
    theta: f64,
    records: usize,
    emitted_samples: usize,
    na_samples: usize,
    decision_cases: BTreeMap<String, usize>,
    fallbacks: usize,
    relation_histogram: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<metrics::EvalReport>,
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32, CliError> {
    let na = na_label_of(&args.na_label, &args.schema)?;
    if args.grid.is_empty() {
        return Err(config("--grid is empty"));
    }
    let records: Vec<AnnotationRecord> = read_jsonl(&args.trace)?;
    let gold = args.gold.as_deref().map(load_gold).transpose()?;
    fs::create_dir_all(&args.out_dir).map_err(|e| fatal(format!("{}: {e}", args.out_dir.display())))?;
    let mut entries = Vec::new();
    for &theta in &args.grid {
        let rule = DecisionRule {
            theta,
            strict_multiyes: args.strict_multiyes,
        };
        rule.validate().map_err(config)?;
        let decisions = records
            .iter()
            .map(|r| pipeline::redecide(r, rule, &na))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fatal)?;
        let mut report = SweepReport {
            theta,
            records: records.len(),
            emitted_samples: 0,
            na_samples: 0,
            decision_cases: BTreeMap::new(),
            fallbacks: 0,
            relation_histogram: BTreeMap::new(),
            metrics: None,
        };
        for d in &decisions {
            *report.decision_cases.entry(d.case.as_str().to_string()).or_default() += 1;
            report.fallbacks += d.fallback as usize;
            for l in &d.labels {
                report.emitted_samples += 1;
                if *l == na {
                    report.na_samples += 1;
                }
                *report.relation_histogram.entry(l.clone()).or_default() += 1;
            }
        }
        if let Some(gold) = &gold {
            let (pairs, _) = pairs_from_records(records.iter().zip(&decisions), gold);
            let m = metrics::evaluate(&pairs, &na).map_err(config)?;
            entries.push(ReportEntry::new(format!("theta={theta}"), m.clone()));
            report.metrics = Some(m);
        }
        write_json(&args.out_dir.join(format!("theta_{theta}.json")), &report)?;
        let multi = report.decision_cases.get(DecisionCase::MultiYes.as_str()).copied().unwrap_or(0);
        println!("theta={theta}: {} samples, {} MultiYes, {} fallbacks", report.emitted_samples, multi, report.fallbacks);
    }
    if !entries.is_empty() {
        metrics::emit_report(&entries, args.out_dir.join("summary.json")).map_err(fatal)?;
    }
    Ok(EXIT_OK)
}

pub fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Group(a) => cmd_group(a),
        Command::Run(a) => cmd_run(a),
        Command::Balance(a) => cmd_balance(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectPrompts(a) => cmd_inspect(a),
        Command::SweepTheta(a) => cmd_sweep(a),
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
