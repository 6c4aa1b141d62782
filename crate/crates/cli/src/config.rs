use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dualrec::agent::simulated::SimulatedModelConfig;
use dualrec::agent::{AgentConfig, ItemDomain, ParseMode};
use dualrec::corpus::{DuplicatePolicy, RawFormat, DEFAULT_KCORE, DEFAULT_MAX_LEN};
use dualrec::eval::{ActivityDataset, EvalProtocol, DEFAULT_BEST_OF_N};
use dualrec::grpo::ToyExperiment;
use dualrec::llm::{BackendConfig, ScriptMode};
use dualrec::sftgen::SftConfig;
use dualrec::{seed, Schedule};

/// One run's configuration. Every table is optional in the TOML file and
/// falls back to the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub corpus: CorpusConfig,
    pub agent: AgentSection,
    pub protocol: EvalProtocol,
    pub reward: Schedule,
    pub simulate: SimulateConfig,
    pub eval: EvalConfig,
    pub sft: SftSection,
    pub grpo: GrpoSection,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            corpus: CorpusConfig::default(),
            agent: AgentSection::default(),
            protocol: EvalProtocol::default(),
            reward: Schedule::default(),
            simulate: SimulateConfig::default(),
            eval: EvalConfig::default(),
            sft: SftSection::default(),
            grpo: GrpoSection::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub format: RawFormat,
    pub raw_dir: PathBuf,
    /// Canonical corpus read by `simulate`, `eval` and `sft-gen`.
    /// Defaults to `<out_dir>/corpus`, where `ingest` writes it.
    pub corpus_dir: Option<PathBuf>,
    pub activity_bands: ActivityDataset,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            format: RawFormat::Movielens,
            raw_dir: PathBuf::from("data/ml-1m"),
            corpus_dir: None,
            activity_bands: ActivityDataset::Ml1m,
        }
    }
}

impl DatasetConfig {
    pub fn domain(&self) -> ItemDomain {
        match self.format {
            RawFormat::Movielens => ItemDomain::Movies,
            RawFormat::Amazon => ItemDomain::Cds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub kcore: usize,
    pub max_len: usize,
    /// Users with shorter (capped) sequences are not sampled.
    pub min_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    pub duplicates: DuplicatePolicy,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            kcore: DEFAULT_KCORE,
            max_len: DEFAULT_MAX_LEN,
            min_len: 2,
            n_train: 1000,
            n_test: 1000,
            split_seed: 0,
            duplicates: DuplicatePolicy::Strict,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Simulated,
    Mock,
    Http,
}

/// Where completions come from. The auth token for `http` is read from
/// `DUALREC_API_KEY` and never from this file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint_url: String,
    pub max_retries: u32,
    pub backoff_initial_ms: u64,
    pub backoff_multiplier: f64,
    pub backoff_max_ms: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    /// Newline-delimited scripts for the `mock` backend.
    pub mock_scripts: Option<PathBuf>,
    /// Unscripted mock prompts fall through to the simulated model.
    pub mock_fallback: bool,
    pub simulated: SimulatedModelConfig,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = BackendConfig::default();
        BackendSection {
            kind: BackendKind::Simulated,
            endpoint_url: http.endpoint_url,
            max_retries: http.max_retries,
            backoff_initial_ms: http.backoff_initial_ms,
            backoff_multiplier: http.backoff_multiplier,
            backoff_max_ms: http.backoff_max_ms,
            timeout_ms: http.timeout_ms,
            max_in_flight: http.max_in_flight,
            mock_scripts: None,
            mock_fallback: true,
            simulated: SimulatedModelConfig::default(),
        }
    }
}

impl BackendSection {
    pub fn http_config(&self) -> BackendConfig {
        BackendConfig {
            endpoint_url: self.endpoint_url.clone(),
            auth_token: Default::default(),
            max_retries: self.max_retries,
            backoff_initial_ms: self.backoff_initial_ms,
            backoff_multiplier: self.backoff_multiplier,
            backoff_max_ms: self.backoff_max_ms,
            timeout_ms: self.timeout_ms,
            max_in_flight: self.max_in_flight,
        }
    }

    fn check(&self, at: &str, errors: &mut Vec<FieldError>) {
        let mut push = |field: &str, message: &str| errors.push(FieldError::new(format!("{at}.{field}"), message));
        if self.timeout_ms == 0 {
            push("timeout_ms", "must be positive");
        }
        if !(self.backoff_multiplier >= 1.0) {
            push("backoff_multiplier", "must be at least 1");
        }
        if self.max_in_flight == 0 {
            push("max_in_flight", "must be at least 1");
        }
        if self.kind == BackendKind::Http && self.endpoint_url.trim().is_empty() {
            push("endpoint_url", "required for the http backend");
        }
        if self.kind == BackendKind::Mock && self.mock_scripts.is_none() && !self.mock_fallback {
            push("mock_scripts", "required for the mock backend unless mock_fallback is set");
        }
        if !(self.simulated.noise >= 0.0) {
            push("simulated.noise", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.simulated.flaw_rate) {
            push("simulated.flaw_rate", "must lie in [0, 1]");
        }
    }
}

fn default_agent_config() -> AgentConfig {
    AgentConfig { model_name: "Qwen2.5-7B".into(), ..Default::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub backend: BackendSection,
    pub config: AgentConfig,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection { backend: BackendSection::default(), config: default_agent_config() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_users: usize,
    /// Agent cycles per user, over the most recent interactions.
    pub steps_per_user: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n_users: 50, steps_per_user: 5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RankerSpec {
    Agent,
    Oracle,
    Worst,
    Random { seed: u64 },
    Popularity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rankers: Vec<RankerSpec>,
    /// Evaluate only the first `n_users` test users by id.
    pub n_users: Option<usize>,
    /// `memories.jsonl` from a `simulate` run; matching users start from
    /// that preference description.
    pub memories: Option<PathBuf>,
    pub best_of_n: Vec<usize>,
    /// Agent ranking temperature when more than one attempt is drawn.
    pub sampling_temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rankers: vec![RankerSpec::Agent, RankerSpec::Popularity, RankerSpec::Random { seed: 0 }],
            n_users: None,
            memories: None,
            best_of_n: DEFAULT_BEST_OF_N.to_vec(),
            sampling_temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub backend: BackendSection,
    pub config: SftConfig,
    /// Training users drawn as scenarios.
    pub scenarios: usize,
    pub scenario_seed: u64,
    pub with_reflection: bool,
    pub include_failed: bool,
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection {
            backend: BackendSection::default(),
            config: SftConfig { teacher_model: "DeepSeek-R1-Distill-Qwen-32B".into(), ..Default::default() },
            scenarios: 100,
            scenario_seed: 0,
            with_reflection: true,
            include_failed: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub experiment: ToyExperiment,
    /// Training seeds; each runs once anchored and once cold.
    pub seeds: Vec<u64>,
    pub fd_d_user: usize,
    pub fd_d_item: usize,
    pub fd_candidates: usize,
    pub fd_groups: usize,
    pub fd_probes: usize,
    pub fd_step: f64,
    pub fd_seed: u64,
}

impl Default for GrpoSection {
    fn default() -> Self {
        GrpoSection {
            experiment: ToyExperiment::default(),
            seeds: (0..5).collect(),
            fd_d_user: 10,
            fd_d_item: 12,
            fd_candidates: 8,
            fd_groups: 6,
            fd_probes: 120,
            fd_step: 1e-6,
            fd_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Records files, or directories searched for `records*.jsonl`.
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Read { path: PathBuf, source: std::io::Error },
    Parse { path: PathBuf, message: String },
    Invalid(Vec<FieldError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, source } => write!(f, "cannot read {}: {source}", path.display()),
            ConfigError::Parse { path, message } => write!(f, "{}: {}", path.display(), message.trim_end()),
            ConfigError::Invalid(errors) => {
                writeln!(f, "invalid configuration:")?;
                for e in errors {
                    writeln!(f, "  {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// `Some(true)` for `--strict`, `Some(false)` for `--lenient`.
    pub strict: Option<bool>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })
    }

    /// Defaults when `path` is `None`; otherwise the file layered over them.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                Self::from_toml(&text, p)
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        if let Some(s) = o.seed {
            self.set_seed(s);
        }
        if let Some(strict) = o.strict {
            self.agent.config.parse_mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
            self.corpus.duplicates = if strict { DuplicatePolicy::Strict } else { DuplicatePolicy::Lenient };
        }
    }

    /// Points every seed at a stream derived from `s`.
    pub fn set_seed(&mut self, s: u64) {
        let d = |name: &str| seed::derive(s, &[name]);
        self.corpus.split_seed = d("split");
        self.protocol.negative_sampling_seed = d("negatives");
        self.agent.backend.simulated.seed = d("agent");
        self.sft.backend.simulated.seed = d("teacher");
        self.sft.config.seed = d("sft");
        self.sft.scenario_seed = d("scenarios");
        self.grpo.experiment.env_seed = d("toy-env");
        self.grpo.fd_seed = d("fd");
        let n = self.grpo.seeds.len().max(1);
        self.grpo.seeds = (0..n).map(|i| seed::derive(s, &["toy", &i.to_string()])).collect();
        for r in &mut self.eval.rankers {
            if let RankerSpec::Random { seed } = r {
                *seed = d("random-ranker");
            }
        }
    }

    /// Every seed in the run, in a fixed order.
    pub fn seeds(&self) -> Vec<(String, u64)> {
        let mut out = vec![
            ("split".to_owned(), self.corpus.split_seed),
            ("negatives".to_owned(), self.protocol.negative_sampling_seed),
            ("agent".to_owned(), self.agent.backend.simulated.seed),
            ("teacher".to_owned(), self.sft.backend.simulated.seed),
            ("sft".to_owned(), self.sft.config.seed),
            ("scenarios".to_owned(), self.sft.scenario_seed),
            ("toy_env".to_owned(), self.grpo.experiment.env_seed),
            ("fd".to_owned(), self.grpo.fd_seed),
        ];
        out.extend(self.grpo.seeds.iter().enumerate().map(|(i, &s)| (format!("toy_{i}"), s)));
        out.extend(self.eval.rankers.iter().filter_map(|r| match r {
            RankerSpec::Random { seed } => Some(("random_ranker".to_owned(), *seed)),
            _ => None,
        }));
        out
    }

    /// SHA-256 of the configuration with the output directory blanked, so the
    /// same settings written to two places share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        seed::json_digest(&c)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dataset.corpus_dir.clone().unwrap_or_else(|| self.out_dir.join("corpus"))
    }

    pub fn mock_mode(&self) -> ScriptMode {
        match self.agent.config.parse_mode {
            ParseMode::Strict => ScriptMode::Strict,
            ParseMode::Lenient => ScriptMode::Lenient,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut e = Vec::new();
        let mut push = |field: &str, message: &str| e.push(FieldError::new(field, message));
        if self.out_dir.as_os_str().is_empty() {
            push("out_dir", "must not be empty");
        }
        let c = &self.corpus;
        if c.kcore == 0 {
            push("corpus.kcore", "must be at least 1");
        }
        if c.max_len < 2 {
            push("corpus.max_len", "must be at least 2 for leave-one-out");
        }
        if c.min_len < 2 {
            push("corpus.min_len", "must be at least 2 for leave-one-out");
        }
        if c.min_len > c.max_len {
            push("corpus.min_len", "must not exceed corpus.max_len");
        }
        if c.n_train + c.n_test == 0 {
            push("corpus.n_train", "n_train and n_test cannot both be 0");
        }
        let p = &self.protocol;
        if p.k_values.is_empty() {
            push("protocol.k_values", "must list at least one cutoff");
        }
        if p.k_values.contains(&0) {
            push("protocol.k_values", "cutoffs must be at least 1");
        }
        if p.n_negatives == 0 {
            push("protocol.n_negatives", "must be at least 1");
        }
        if p.repeats == 0 {
            push("protocol.repeats", "must be at least 1");
        }
        if p.attempts == 0 {
            push("protocol.attempts", "must be at least 1");
        }
        if let Err(err) = self.reward.validate() {
            push("reward", &err.to_string());
        }
        if self.simulate.n_users == 0 {
            push("simulate.n_users", "must be at least 1");
        }
        if self.simulate.steps_per_user == 0 {
            push("simulate.steps_per_user", "must be at least 1");
        }
        if self.eval.rankers.is_empty() {
            push("eval.rankers", "must list at least one ranker");
        }
        if self.eval.best_of_n.is_empty() || self.eval.best_of_n.contains(&0) {
            push("eval.best_of_n", "must be a non-empty list of positive counts");
        }
        if !(self.eval.sampling_temperature >= 0.0) {
            push("eval.sampling_temperature", "must be non-negative");
        }
        let a = &self.agent.config;
        if a.model_name.trim().is_empty() {
            push("agent.config.model_name", "must not be empty");
        }
        if a.liked_cutoff == 0 {
            push("agent.config.liked_cutoff", "must be at least 1");
        }
        if !(a.rank_temperature >= 0.0) || !(a.reflect_temperature >= 0.0) {
            push("agent.config", "temperatures must be non-negative");
        }
        let s = &self.sft.config;
        if s.teacher_model.trim().is_empty() {
            push("sft.config.teacher_model", "must not be empty");
        }
        if !(s.temperature >= 0.0) {
            push("sft.config.temperature", "must be non-negative");
        }
        if s.draws_per_scenario == 0 {
            push("sft.config.draws_per_scenario", "must be at least 1");
        }
        if s.keywords.iter().all(|k| k.trim().is_empty()) {
            push("sft.config.keywords", "must contain at least one keyword");
        }
        if !(0.0..=1.0).contains(&s.quality_threshold) {
            push("sft.config.quality_threshold", "must lie in [0, 1]");
        }
        if self.sft.scenarios == 0 {
            push("sft.scenarios", "must be at least 1");
        }
        let g = &self.grpo;
        let x = &g.experiment;
        if x.d_user == 0 || x.d_item == 0 {
            push("grpo.experiment", "d_user and d_item must be positive");
        }
        if x.n_candidates < 2 {
            push("grpo.experiment.n_candidates", "must be at least 2");
        }
        if let Err(err) = x.grpo.validate() {
            push("grpo.experiment.grpo", &err.to_string());
        }
        if x.options.eval_every == 0 {
            push("grpo.experiment.options.eval_every", "must be at least 1");
        }
        if x.options.eval_queries == 0 || x.options.eval_samples == 0 {
            push("grpo.experiment.options", "eval_queries and eval_samples must be positive");
        }
        if x.anchor.epochs == 0 || x.anchor.demonstrations == 0 {
            push("grpo.experiment.anchor", "demonstrations and epochs must be positive");
        }
        if g.seeds.is_empty() {
            push("grpo.seeds", "must list at least one seed");
        }
        if !(g.fd_step > 0.0) {
            push("grpo.fd_step", "must be positive");
        }
        if g.fd_groups == 0 || g.fd_candidates < 2 || g.fd_d_user == 0 || g.fd_d_item == 0 {
            push("grpo.fd", "fd_groups, fd_d_user and fd_d_item must be positive and fd_candidates at least 2");
        }
        self.agent.backend.check("agent.backend", &mut e);
        self.sft.backend.check("sft.backend", &mut e);
        if e.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let c = RunConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn defaults_carry_run_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.corpus.max_len, 40);
        assert_eq!(c.corpus.kcore, 10);
        assert_eq!((c.corpus.n_train, c.corpus.n_test), (1000, 1000));
        assert_eq!(c.protocol.n_negatives, 19);
        assert_eq!(c.protocol.k_values, vec![1, 5, 10, 20]);
        assert_eq!(c.grpo.experiment.grpo.group_size, 8);
        assert_eq!(c.grpo.experiment.grpo.batch_size, 64);
        assert_eq!(c.grpo.experiment.grpo.kl_coefficient, 1e-3);
        assert_eq!(c.eval.best_of_n, vec![1, 5, 10, 20, 50]);
        assert_eq!(c.agent.config.rank_temperature, 0.2);
        assert_eq!(c.eval.sampling_temperature, 1.0);
    }

    #[test]
    fn layering_keeps_untouched_fields() {
        let c = RunConfig::from_toml("[protocol]\nrepeats = 1\n", Path::new("x.toml")).unwrap();
        assert_eq!(c.protocol.repeats, 1);
        assert_eq!(c.protocol.n_negatives, 19);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = RunConfig::from_toml("[corpus]\nkcor = 3\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("kcor"), "{err}");
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::default();
        c.protocol.n_negatives = 0;
        c.corpus.min_len = 50;
        c.agent.backend.timeout_ms = 0;
        let ConfigError::Invalid(errs) = c.validate().unwrap_err() else { panic!() };
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"protocol.n_negatives"));
        assert!(fields.contains(&"corpus.min_len"));
        assert!(fields.contains(&"agent.backend.timeout_ms"));
    }

    #[test]
    fn digest_ignores_out_dir_but_not_seeds() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.set_seed(5);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn seed_override_reaches_every_seed() {
        let mut c = RunConfig::default();
        c.set_seed(11);
        let d = RunConfig::default();
        for ((name, a), (_, b)) in c.seeds().iter().zip(d.seeds().iter()) {
            assert_ne!(a, b, "{name} not overridden");
        }
    }
}
