//! Declarative run configuration and command dispatch. Every command writes
//! one self-describing artifact directory under the run's output directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{evaluate_checkpoint, retrain, DistillConfig, RetrainConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{project_embeddings, FilterScope, MetricsReport, Setting};
use crate::kg::{
    load_alignment, load_split, load_triplets, merge_aligned, relation_pairs_from_alignment, remove_leakage,
    write_alignment, write_triplets, AlignmentSet, DatasetSplit, KnowledgeGraph, MultiSourceCollection,
};
use crate::manifest::{file_checksum, sha256_hex, Manifest};
use crate::objective::NceConfig;
use crate::paths::{sample_paths, write_corpus, write_corpus_text, AugmentConfig, WalkConfig};
use crate::pretrain::{load_checkpoint, pretrain, save_checkpoint, Checkpoint, PretrainConfig, TrainConfig};
use crate::rules::{mine_rules, rule_report, RuleFormat};
use crate::subgraph::{extract_subgraph, load_subgraph, save_subgraph, SampledSubgraph};

pub const CONFIG_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "KGTRANSFER_THREADS";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_MANIFEST: &str = "run_manifest.txt";
pub const RUN_FORMAT: &str = "kgtransfer-run";
pub const RUN_VERSION: u32 = 1;
pub const CONFIG_ECHO: &str = "config.resolved.toml";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<PathBuf>,
    /// `background<TAB>target` entity-name pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<PathBuf>,
    #[serde(default = "default_target_name")]
    pub target_name: String,
    #[serde(default = "default_background_name")]
    pub background_name: String,
}

fn default_target_name() -> String {
    "target".into()
}

fn default_background_name() -> String {
    "background".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeakageConfig {
    /// `strict` (any relation), `relation` (paired relations only) or `off`.
    pub mode: String,
}

impl Default for LeakageConfig {
    fn default() -> Self {
        LeakageConfig { mode: "strict".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubgraphConfig {
    /// Triplet budget `b` of the sampled subgraph.
    pub budget: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Existing teacher checkpoint; otherwise `pretrain` builds one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Teacher training schedule; the run's `train` block when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Teacher architecture; the run's `encoder` block when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `train` or `all`.
    pub scope: String,
    /// `test` or `valid`.
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scope: "train".into(),
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesConfig {
    pub max_body: usize,
    pub min_confidence: f64,
    pub min_support: usize,
    /// `text` or `tsv`.
    pub format: String,
}

impl Default for RulesConfig {
    fn default() -> Self {
        RulesConfig {
            max_body: 2,
            min_confidence: 0.5,
            min_support: 2,
            format: "text".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// Entity names of the target graph, one per line; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entities: Option<PathBuf>,
    /// `student` or `teacher`.
    pub source: String,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            entities: None,
            source: "student".into(),
        }
    }
}

/// One experiment. Module `seed` keys are overwritten by the run `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// `lp`, `joint-lp` or `pr4lp`.
    pub setting: String,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `KGTRANSFER_THREADS` or 1 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub output: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub leakage: LeakageConfig,
    #[serde(default)]
    pub walk: WalkConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub nce: NceConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub subgraph: SubgraphConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub rules: RulesConfig,
    #[serde(default)]
    pub project: ProjectConfig,
}

/// A configuration violation located by its dotted field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn issue(path: &str, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

/// Locates a TOML error span as `table.key` for reporting.
fn span_path(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else {
        return "<document>".into();
    };
    let start = span.start.min(text.len());
    let key = text[start..]
        .split(['=', '\n'])
        .next()
        .unwrap_or("")
        .trim()
        .trim_matches(|c| c == '[' || c == ']' || c == '"');
    let table = text[..start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_owned());
    match (table, key.is_empty()) {
        (Some(t), false) if t != key => format!("{t}.{key}"),
        (Some(t), _) => t,
        (None, false) => key.to_owned(),
        (None, true) => "<document>".into(),
    }
}

impl RunConfig {
    pub fn setting(&self) -> Setting {
        Setting::parse(&self.setting).unwrap_or_default()
    }

    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(1)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            walk: self.walk.clone(),
            augment: self.augment.clone(),
            nce: self.nce.clone(),
            train: self.teacher.train.clone().unwrap_or_else(|| self.train.clone()),
            encoder: self.teacher.encoder.clone().unwrap_or_else(|| self.encoder.clone()),
            allow_single_graph: true,
        }
    }

    pub fn retrain_config(&self) -> RetrainConfig {
        RetrainConfig {
            walk: self.walk.clone(),
            augment: self.augment.clone(),
            nce: self.nce.clone(),
            train: self.train.clone(),
            encoder: self.encoder.clone(),
            distill: self.distill.clone(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output);
        join(&mut self.data.train);
        join(&mut self.data.valid);
        join(&mut self.data.test);
        for p in [
            &mut self.data.background,
            &mut self.data.alignment,
            &mut self.teacher.checkpoint,
            &mut self.project.entities,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        self.setting = self.setting.to_ascii_lowercase();
        if self.threads.is_none() {
            self.threads = Some(
                std::env::var(THREADS_ENV)
                    .ok()
                    .and_then(|v| v.trim().parse().ok())
                    .filter(|&n| n > 0)
                    .unwrap_or(1),
            );
        }
        self.apply_seed(self.seed);
    }

    /// Sets the run seed and every module seed derived from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.walk.seed = seed;
        self.augment.seed = seed;
        self.nce.seed = seed;
        self.train.seed = seed;
        if let Some(t) = &mut self.teacher.train {
            t.seed = seed;
        }
    }

    fn check(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |p: &str, r: Result<()>| {
            if let Err(e) = r {
                out.push(issue(p, strip(&e)));
            }
        };
        if self.version != CONFIG_VERSION {
            push(
                "version",
                Err(Error::config(format!("unsupported version {} (expected {CONFIG_VERSION})", self.version))),
            );
        }
        let setting = match self.setting.as_str() {
            "lp" => Some(Setting::Lp),
            "joint-lp" => Some(Setting::JointLp),
            "pr4lp" => Some(Setting::Pr4lp),
            _ => None,
        };
        if setting.is_none() {
            push(
                "setting",
                Err(Error::config(format!("unknown setting {:?} (lp | joint-lp | pr4lp)", self.setting))),
            );
        }
        if self.threads == Some(0) {
            push("threads", Err(Error::config("must be positive")));
        }
        let exists = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::config(format!("{} does not exist", p.display())))
            }
        };
        push("data.train", exists(&self.data.train));
        push("data.valid", exists(&self.data.valid));
        push("data.test", exists(&self.data.test));
        if let Some(p) = &self.data.background {
            push("data.background", exists(p));
        }
        if let Some(p) = &self.data.alignment {
            push("data.alignment", exists(p));
        }
        if self.data.target_name == self.data.background_name {
            push("data.background_name", Err(Error::config("must differ from data.target_name")));
        }
        for (p, name) in [
            ("data.target_name", &self.data.target_name),
            ("data.background_name", &self.data.background_name),
        ] {
            if name.is_empty() || name.contains(':') {
                push(p, Err(Error::config("must be non-empty and free of ':'")));
            }
        }
        if matches!(setting, Some(Setting::JointLp | Setting::Pr4lp)) {
            if self.data.background.is_none() {
                push("data.background", Err(Error::config(format!("required by setting {}", self.setting))));
            }
            if self.data.alignment.is_none() {
                push("data.alignment", Err(Error::config(format!("required by setting {}", self.setting))));
            }
        }
        if setting == Some(Setting::Pr4lp) {
            match (&self.teacher.checkpoint, &self.teacher.train) {
                (None, None) => push(
                    "teacher",
                    Err(Error::config("pr4lp requires teacher.checkpoint or a teacher.train block")),
                ),
                (Some(p), _) => push("teacher.checkpoint", exists(p)),
                _ => {}
            }
        }
        if !["strict", "relation", "off"].contains(&self.leakage.mode.as_str()) {
            push(
                "leakage.mode",
                Err(Error::config(format!("unknown mode {:?} (strict | relation | off)", self.leakage.mode))),
            );
        }
        push("walk", self.walk.validate());
        push("train", self.train.validate());
        push("encoder", self.encoder.validate());
        push("distill", self.distill.validate());
        if self.walk.path_length > self.encoder.max_positions {
            push(
                "walk.path_length",
                Err(Error::config(format!(
                    "exceeds encoder.max_positions {}",
                    self.encoder.max_positions
                ))),
            );
        }
        if let Some(t) = &self.teacher.train {
            push("teacher.train", t.validate());
        }
        if let Some(e) = &self.teacher.encoder {
            push("teacher.encoder", e.validate());
        }
        push("eval.scope", FilterScope::parse(&self.eval.scope).map(|_| ()));
        if !["test", "valid"].contains(&self.eval.split.as_str()) {
            push(
                "eval.split",
                Err(Error::config(format!("unknown split {:?} (test | valid)", self.eval.split))),
            );
        }
        if !(1..=2).contains(&self.rules.max_body) {
            push("rules.max_body", Err(Error::config("must be 1 or 2")));
        }
        if !(0.0..=1.0).contains(&self.rules.min_confidence) {
            push("rules.min_confidence", Err(Error::config("must lie in [0, 1]")));
        }
        push("rules.format", RuleFormat::parse(&self.rules.format).map(|_| ()));
        if let Some(p) = &self.project.entities {
            push("project.entities", exists(p));
        }
        if !["student", "teacher"].contains(&self.project.source.as_str()) {
            push(
                "project.source",
                Err(Error::config(format!("unknown source {:?} (student | teacher)", self.project.source))),
            );
        }
        out
    }
}

/// Error text without the error-kind prefix.
fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Data(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Parses and checks a configuration document. Relative paths resolve
/// against `base`. Every violation is reported with its field path.
pub fn validate_config(text: &str, base: &Path) -> std::result::Result<RunConfig, Vec<ConfigIssue>> {
    let mut config: RunConfig = toml::from_str(text).map_err(|e| {
        vec![ConfigIssue {
            path: span_path(text, e.span()),
            message: e.message().trim().to_owned(),
        }]
    })?;
    config.resolve(base);
    let issues = config.check();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(issues)
    }
}

/// Reads and validates a configuration file; relative paths resolve
/// against its directory.
pub fn load_config(path: &Path) -> std::result::Result<RunConfig, Vec<ConfigIssue>> {
    let text = fs::read_to_string(path).map_err(|e| vec![issue("<file>", format!("{}: {e}", path.display()))])?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_config(&text, base)
}

/// Joins configuration issues into one configuration error.
pub fn issues_error(issues: &[ConfigIssue]) -> Error {
    Error::config(issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))
}

/// Writes the resolved configuration into the output directory.
pub fn write_config_echo(config: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&config.output).map_err(|e| Error::io(&config.output, e))?;
    let p = config.output.join(CONFIG_ECHO);
    fs::write(&p, config.to_toml()).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

// ---------------------------------------------------------------------------
// Logging

/// A line-oriented `key=value` log record.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub stage: &'static str,
    pub fields: Vec<(String, String)>,
}

impl LogRecord {
    fn new(stage: &'static str) -> Self {
        LogRecord {
            stage,
            fields: Vec::new(),
        }
    }

    fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    /// Parses `k=v` tokens of an existing record line.
    fn with_line(mut self, line: &str) -> Self {
        for tok in line.split_whitespace() {
            if let Some((k, v)) = tok.split_once('=') {
                self.fields.push((k.into(), v.into()));
            }
        }
        self
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("stage={}", self.stage);
        for (k, v) in &self.fields {
            s.push(' ');
            s.push_str(k);
            s.push('=');
            s.push_str(v);
        }
        s
    }

    pub fn to_pretty(&self) -> String {
        let body: Vec<String> = self.fields.iter().map(|(k, v)| format!("{k}: {v}")).collect();
        format!("[{:>14}] {}", self.stage, body.join(", "))
    }
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    Ingest,
    SamplePaths,
    Pretrain,
    BuildSubgraph,
    Retrain,
    Eval,
    MineRules,
    Project,
    /// Every stage the setting needs, ending with `eval`.
    All,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Ingest,
        Command::SamplePaths,
        Command::Pretrain,
        Command::BuildSubgraph,
        Command::Retrain,
        Command::Eval,
        Command::MineRules,
        Command::Project,
        Command::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::SamplePaths => "sample-paths",
            Command::Pretrain => "pretrain",
            Command::BuildSubgraph => "build-subgraph",
            Command::Retrain => "retrain",
            Command::Eval => "eval",
            Command::MineRules => "mine-rules",
            Command::Project => "project",
            Command::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown command {s:?}")))
    }

    /// Artifact directory name under the output directory.
    pub fn artifact_dir(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::SamplePaths => "paths",
            Command::Pretrain => "teacher",
            Command::BuildSubgraph => "subgraph",
            Command::Retrain => "student",
            Command::Eval => "eval",
            Command::MineRules => "rules",
            Command::Project => "projection",
            Command::All => "eval",
        }
    }
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    /// Human-readable report (metrics, rules) for the console.
    pub report: Option<String>,
    pub metrics: Option<MetricsReport>,
}

type Log<'a> = &'a mut (dyn FnMut(&LogRecord) + Send);

/// Runs `command` with intra-command parallelism bounded by the configured
/// thread count.
pub fn run(config: &RunConfig, command: Command, log: Log<'_>) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads())
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(config, command, log))
}

fn dispatch(config: &RunConfig, command: Command, log: Log<'_>) -> Result<Outcome> {
    match command {
        Command::Ingest => ingest(config, log),
        Command::SamplePaths => paths_stage(config, log),
        Command::Pretrain => pretrain_stage(config, log),
        Command::BuildSubgraph => subgraph_stage(config, log),
        Command::Retrain => retrain_stage(config, log),
        Command::Eval => eval_stage(config, log),
        Command::MineRules => rules_stage(config, log),
        Command::Project => project_stage(config, log),
        Command::All => {
            let mut chain = vec![Command::Ingest];
            match config.setting() {
                Setting::Lp => {}
                Setting::JointLp => chain.push(Command::BuildSubgraph),
                Setting::Pr4lp => {
                    if config.teacher.checkpoint.is_none() {
                        chain.push(Command::Pretrain);
                    }
                    chain.push(Command::BuildSubgraph);
                }
            }
            chain.push(Command::Retrain);
            for c in chain {
                dispatch(config, c, log)?;
            }
            dispatch(config, Command::Eval, log)
        }
    }
}

/// Checksums of every file under `dir`, keyed by `prefix/relative path`.
fn dir_checksums(dir: &Path, prefix: &str, out: &mut Vec<(String, String)>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let key = format!("{prefix}/{name}");
        if p.is_dir() {
            dir_checksums(&p, &key, out)?;
        } else {
            out.push((key, file_checksum(&p)?));
        }
    }
    Ok(())
}

/// Inputs consumed by a command, recorded in its manifest.
#[derive(Default)]
struct Inputs(Vec<(String, String)>);

impl Inputs {
    fn file(&mut self, key: &str, p: &Path) -> Result<()> {
        self.0.push((key.into(), file_checksum(p)?));
        Ok(())
    }

    fn dir(&mut self, key: &str, p: &Path) -> Result<()> {
        dir_checksums(p, key, &mut self.0)
    }
}

/// Builds an artifact directory in `<name>.partial`, then publishes it
/// under `<name>`; a failed build is moved to `<name>.failed`.
fn stage<T>(
    config: &RunConfig,
    command: Command,
    body: impl FnOnce(&Path, &mut Inputs) -> Result<T>,
) -> Result<(PathBuf, T)> {
    let name = command.artifact_dir();
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let final_dir = out.join(name);
    let partial = out.join(format!("{name}.partial"));
    let failed = out.join(format!("{name}.failed"));
    let clear = |p: &Path| -> Result<()> {
        if p.exists() {
            fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };
    clear(&partial)?;
    fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut inputs = Inputs::default();
    let result = body(&partial, &mut inputs).and_then(|v| {
        let mut m = Manifest::new(RUN_FORMAT, RUN_VERSION);
        m.set("command", command.as_str());
        m.set("setting", &config.setting);
        m.set("tool_version", TOOL_VERSION);
        m.set("config_hash", config.hash());
        m.set("seed", config.seed);
        m.set("threads", config.threads());
        for (k, v) in &inputs.0 {
            m.set(&format!("input.{k}"), v);
        }
        m.write(&partial.join(RUN_MANIFEST))?;
        let echo = partial.join(CONFIG_ECHO);
        fs::write(&echo, config.to_toml()).map_err(|e| Error::io(&echo, e))?;
        Ok(v)
    });
    match result {
        Ok(v) => {
            clear(&final_dir)?;
            fs::rename(&partial, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
            Ok((final_dir, v))
        }
        Err(e) => {
            clear(&failed)?;
            let _ = fs::rename(&partial, &failed);
            Err(e)
        }
    }
}

fn require_dir(config: &RunConfig, command: Command) -> Result<PathBuf> {
    let p = config.output.join(command.artifact_dir());
    if p.join(RUN_MANIFEST).exists() {
        Ok(p)
    } else {
        Err(Error::data(format!(
            "missing artifact {}; run `{}` first",
            p.display(),
            command.as_str()
        )))
    }
}

/// Target split plus the optional leakage-filtered background.
pub struct Ingested {
    pub target: KnowledgeGraph,
    pub split: DatasetSplit,
    pub background: Option<(KnowledgeGraph, AlignmentSet)>,
}

impl Ingested {
    fn background(&self) -> Result<&(KnowledgeGraph, AlignmentSet)> {
        self.background
            .as_ref()
            .ok_or_else(|| Error::config("this command needs data.background and data.alignment"))
    }
}

fn ingest(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let d = &config.data;
    let (dir, ()) = stage(config, Command::Ingest, |dir, inputs| {
        inputs.file("train", &d.train)?;
        inputs.file("valid", &d.valid)?;
        inputs.file("test", &d.test)?;
        let (target, split, dropped) = load_split(&d.train, &d.valid, &d.test, &d.target_name)?;
        target.validate()?;
        split.validate(&target)?;
        write_triplets(&dir.join("train.tsv"), &target, &split.train)?;
        write_triplets(&dir.join("valid.tsv"), &target, &split.valid)?;
        write_triplets(&dir.join("test.tsv"), &target, &split.test)?;
        let mut m = Manifest::new("kgtransfer-ingest", 1);
        m.set("target.entities", target.num_entities());
        m.set("target.relations", target.num_relations());
        m.set("target.train", split.train.len());
        m.set("target.valid", split.valid.len());
        m.set("target.test", split.test.len());
        m.set("target.dropped_unseen", dropped);
        if let (Some(bp), Some(ap)) = (&d.background, &d.alignment) {
            inputs.file("background", bp)?;
            inputs.file("alignment", ap)?;
            let background = load_triplets(bp, &d.background_name)?;
            let alignment = load_alignment(ap, &background, &target)?;
            let (filtered, report) = match config.leakage.mode.as_str() {
                "off" => (background.clone(), Default::default()),
                "relation" => {
                    let map: HashSet<(u32, u32)> =
                        relation_pairs_from_alignment(&background, &split.train, &alignment);
                    remove_leakage(&background, &split, &alignment, Some(&map))
                }
                _ => remove_leakage(&background, &split, &alignment, None),
            };
            write_triplets(&dir.join("background.tsv"), &filtered, filtered.triplets())?;
            write_alignment(&dir.join("alignment.tsv"), &alignment, &background, &target)?;
            m.set("background.triplets", background.len());
            m.set("background.kept", filtered.len());
            m.set("alignment.pairs", alignment.len());
            m.set("leakage.mode", &config.leakage.mode);
            m.set("leakage.deleted", report.deleted.len());
            m.set("leakage.deleted_inverse", report.deleted_inverse);
            log(&LogRecord::new("ingest")
                .with("leakage_deleted", report.deleted.len())
                .with("background_kept", filtered.len()));
        }
        log(&LogRecord::new("ingest")
            .with("train", split.train.len())
            .with("valid", split.valid.len())
            .with("test", split.test.len())
            .with("dropped_unseen", dropped));
        m.write(&dir.join("ingest.txt"))
    })?;
    Ok(Outcome {
        dir,
        report: None,
        metrics: None,
    })
}

/// Reads the ingest artifact back.
pub fn load_ingested(config: &RunConfig) -> Result<Ingested> {
    let dir = require_dir(config, Command::Ingest)?;
    let d = &config.data;
    let (target, split, _) = load_split(
        &dir.join("train.tsv"),
        &dir.join("valid.tsv"),
        &dir.join("test.tsv"),
        &d.target_name,
    )?;
    let bg_path = dir.join("background.tsv");
    let background = if bg_path.exists() {
        let bg = load_triplets(&bg_path, &d.background_name)?;
        // Aligned entities whose every background triplet was deleted drop out.
        let mut a = AlignmentSet::new(bg.name(), target.name());
        let text = fs::read_to_string(dir.join("alignment.tsv")).map_err(|e| Error::io(dir.join("alignment.tsv"), e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some((l, r)) = line.split_once('\t') {
                if let (Some(li), Some(ri)) = (bg.entities().get(l), target.entities().get(r)) {
                    a.insert(li, ri);
                }
            }
        }
        Some((bg, a))
    } else {
        None
    };
    Ok(Ingested {
        target,
        split,
        background,
    })
}

fn paths_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let (dir, ()) = stage(config, Command::SamplePaths, |dir, inputs| {
        inputs.dir("ingest", &config.output.join(Command::Ingest.artifact_dir()))?;
        let mut graphs = vec![data.target.add_reverse_triplets()?];
        if let Some((bg, _)) = &data.background {
            graphs.push(bg.add_reverse_triplets()?);
        }
        for (tag, kg) in graphs.iter().enumerate() {
            let corpus = sample_paths(kg, tag as u16, &config.walk)?;
            write_corpus(&corpus, &dir.join(format!("{}.corpus", kg.name())))?;
            let p = dir.join(format!("{}.paths.tsv", kg.name()));
            let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = std::io::BufWriter::new(f);
            write_corpus_text(&corpus, &[(tag as u16, kg)], &mut w)
                .and_then(|()| std::io::Write::flush(&mut w))
                .map_err(|e| Error::io(&p, e))?;
            log(&LogRecord::new("sample-paths")
                .with("graph", kg.name())
                .with("paths", corpus.len()));
        }
        Ok(())
    })?;
    Ok(Outcome {
        dir,
        report: None,
        metrics: None,
    })
}

fn pretrain_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let (bg, _) = data.background()?;
    let (dir, ()) = stage(config, Command::Pretrain, |dir, inputs| {
        inputs.dir("ingest", &config.output.join(Command::Ingest.artifact_dir()))?;
        let mut lines = String::new();
        let mut ckpt = pretrain(
            &MultiSourceCollection::new(vec![bg.clone()]),
            &config.pretrain_config(),
            &mut |r| {
                lines.push_str(&format!("{}\t{:?}\n", r.epoch, r.mean_loss));
                log(&LogRecord::new("pretrain").with_line(&r.to_line()));
            },
        )?;
        ckpt.provenance.push(("source".into(), bg.name().into()));
        save_checkpoint(&ckpt, &dir.join("checkpoint"))?;
        let p = dir.join("epochs.tsv");
        fs::write(&p, format!("epoch\tmean_loss\n{lines}")).map_err(|e| Error::io(&p, e))
    })?;
    Ok(Outcome {
        dir,
        report: None,
        metrics: None,
    })
}

fn subgraph_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let (dir, ()) = stage(config, Command::BuildSubgraph, |dir, inputs| {
        inputs.dir("ingest", &config.output.join(Command::Ingest.artifact_dir()))?;
        let sub = match config.setting() {
            Setting::Lp => SampledSubgraph::empty(&data.target),
            Setting::JointLp => {
                let (bg, a) = data.background()?;
                SampledSubgraph::whole(bg, &data.target, a)?
            }
            Setting::Pr4lp => {
                let (bg, a) = data.background()?;
                extract_subgraph(bg, &data.target, a, config.subgraph.budget, config.seed)?
            }
        };
        log(&LogRecord::new("build-subgraph")
            .with("linked", sub.full_size)
            .with("core", sub.core_size)
            .with("sampled", sub.triplets.len())
            .with("shortfall", sub.shortfall()));
        save_subgraph(&sub, &data.target, dir)
    })?;
    Ok(Outcome {
        dir,
        report: None,
        metrics: None,
    })
}

fn load_teacher(config: &RunConfig, inputs: &mut Inputs) -> Result<Checkpoint> {
    let dir = match &config.teacher.checkpoint {
        Some(p) => p.clone(),
        None => require_dir(config, Command::Pretrain)?.join("checkpoint"),
    };
    inputs.dir("teacher", &dir)?;
    load_checkpoint(&dir)
}

fn retrain_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let setting = config.setting();
    let (dir, ()) = stage(config, Command::Retrain, |dir, inputs| {
        inputs.dir("ingest", &config.output.join(Command::Ingest.artifact_dir()))?;
        let sub = match setting {
            Setting::Lp => SampledSubgraph::empty(&data.target),
            _ => {
                let p = require_dir(config, Command::BuildSubgraph)?;
                inputs.dir("subgraph", &p)?;
                load_subgraph(&p, &data.target)?
            }
        };
        let teacher = match setting {
            Setting::Pr4lp => Some(load_teacher(config, inputs)?),
            _ => None,
        };
        let mut lines = String::new();
        let student = retrain(
            &data.target,
            &data.split,
            &sub,
            teacher.as_ref(),
            &config.retrain_config(),
            setting,
            &mut |r| {
                let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:?}"));
                lines.push_str(&format!(
                    "{}\t{:?}\t{}\t{}\t{}\n",
                    r.epoch,
                    r.path_loss,
                    opt(r.kd_loss),
                    opt(r.valid_mrr),
                    opt(r.valid_hits1)
                ));
                log(&LogRecord::new("retrain").with_line(&r.to_line()));
            },
        )?;
        log(&LogRecord::new("retrain")
            .with("best_epoch", student.best_epoch)
            .with("best_valid_mrr", format!("{:.6}", student.best_valid_mrr))
            .with("distilled", student.distilled));
        save_checkpoint(&student.checkpoint, &dir.join("checkpoint"))?;
        let p = dir.join("history.tsv");
        fs::write(&p, format!("epoch\tpath_loss\tkd_loss\tvalid_mrr\tvalid_hits1\n{lines}")).map_err(|e| Error::io(&p, e))
    })?;
    Ok(Outcome {
        dir,
        report: None,
        metrics: None,
    })
}

fn eval_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let scope = FilterScope::parse(&config.eval.scope)?;
    let (dir, report) = stage(config, Command::Eval, |dir, inputs| {
        inputs.dir("ingest", &config.output.join(Command::Ingest.artifact_dir()))?;
        let ckpt_dir = require_dir(config, Command::Retrain)?.join("checkpoint");
        inputs.dir("student", &ckpt_dir)?;
        let ckpt = load_checkpoint(&ckpt_dir)?;
        let queries = if config.eval.split == "valid" {
            &data.split.valid
        } else {
            &data.split.test
        };
        let report = evaluate_checkpoint(&ckpt, &data.target, &data.split, queries, scope, config.setting())?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("metrics.txt", report.to_text())?;
        write("metrics.tsv", report.to_tsv())?;
        write("ranks.tsv", report.ranks_tsv())?;
        log(&LogRecord::new("eval")
            .with("setting", report.setting.as_str())
            .with("queries", report.queries)
            .with("mrr", format!("{:.6}", report.mrr))
            .with("hits1", format!("{:.6}", report.hits1))
            .with("hits10", format!("{:.6}", report.hits10)));
        Ok(report)
    })?;
    Ok(Outcome {
        dir,
        report: Some(report.to_text()),
        metrics: Some(report),
    })
}

fn rules_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let (bg, a) = data.background()?;
    let format = RuleFormat::parse(&config.rules.format)?;
    let (dir, text) = stage(config, Command::MineRules, |dir, inputs| {
        inputs.dir("ingest", &config.output.join(Command::Ingest.artifact_dir()))?;
        let mut c = MultiSourceCollection::new(vec![bg.clone(), data.target.clone()]);
        c.add_alignment(0, 1, a.clone())?;
        let joint = merge_aligned(&c)?;
        let r = &config.rules;
        let rules = mine_rules(&joint.kg, r.max_body, r.min_confidence, r.min_support);
        log(&LogRecord::new("mine-rules")
            .with("joint_triplets", joint.kg.len())
            .with("rules", rules.len()));
        let text = rule_report(&rules, format);
        let name = if format == RuleFormat::Tsv { "rules.tsv" } else { "rules.txt" };
        let p = dir.join(name);
        fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
        Ok(text)
    })?;
    Ok(Outcome {
        dir,
        report: Some(text),
        metrics: None,
    })
}

fn project_stage(config: &RunConfig, log: Log<'_>) -> Result<Outcome> {
    let data = load_ingested(config)?;
    let (dir, ()) = stage(config, Command::Project, |dir, inputs| {
        let (ckpt, graph) = if config.project.source == "teacher" {
            let (bg, _) = data.background()?;
            (load_teacher(config, inputs)?, bg)
        } else {
            let p = require_dir(config, Command::Retrain)?.join("checkpoint");
            inputs.dir("student", &p)?;
            (load_checkpoint(&p)?, &data.target)
        };
        let tag = ckpt
            .vocab
            .graph_tag(graph.name())
            .ok_or_else(|| Error::data(format!("checkpoint does not cover graph {}", graph.name())))?;
        let names: Vec<String> = match &config.project.entities {
            Some(p) => {
                inputs.file("entities", p)?;
                fs::read_to_string(p)
                    .map_err(|e| Error::io(p, e))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_owned)
                    .collect()
            }
            None => graph.entities().names().to_vec(),
        };
        let ids = names
            .iter()
            .map(|n| {
                ckpt.vocab
                    .entity(tag, n)
                    .ok_or_else(|| Error::data(format!("entity {n:?} not in the checkpoint")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut proj = project_embeddings(&ckpt, &ids)?;
        proj.labels = names;
        log(&LogRecord::new("project").with("entities", ids.len()));
        let p = dir.join("projection.tsv");
        fs::write(&p, proj.to_tsv()).map_err(|e| Error::io(&p, e))
    })?;
    Ok(Outcome {
        dir,
        report: None,
        metrics: None,
    })
}
