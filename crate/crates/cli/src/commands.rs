use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dualrec::agent::simulated::SimulatedModel;
use dualrec::agent::{Agent, AgentConfig, AgentMemory, Feedback, HistoryEntry, Ranker};
use dualrec::corpus::{
    build_sequences, cap_report, compute_catalog_stats, compute_sequence_stats, compute_stats, kcore_filter, load_raw,
    read_canonical, synthetic, write_canonical, CapReport, DatasetStats, Interaction, RawFormat, CATALOG_FILE,
    INTERACTIONS_FILE, USERS_FILE,
};
use dualrec::eval::{
    candidates_from_seed, eval_users, leave_one_out_eval, ndcg_at_k, read_records, reference_ranker, write_records,
    Catalog, EvalRecord, EvalUser, ReferenceKind,
};
use dualrec::grpo::{fd_setup, finite_diff_check, run_toy_experiment, write_checkpoint, FdReport, TrainingCurve};
use dualrec::llm::{HttpBackend, LlmClient, MockBackend};
use dualrec::seed;
use dualrec::sftgen::{export_corpus, run_pipeline, scenarios_from_users, write_batch};

use crate::config::{BackendKind, BackendSection, RankerSpec, RunConfig};
use crate::report::{emit_report, render_csv, render_text, ReportContext, ReportShape, Table, INCOMPLETE_MARKER};

pub const MANIFEST_FILE: &str = "run.json";

/// An output directory being filled. It carries an INCOMPLETE marker from
/// creation until [`Stage::finish`].
pub struct Stage {
    pub dir: PathBuf,
    files: Vec<PathBuf>,
    keep_marker: bool,
}

impl Stage {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(INCOMPLETE_MARKER), "in progress\n")?;
        Ok(Stage { dir: dir.to_path_buf(), files: Vec::new(), keep_marker: false })
    }

    pub fn write(&mut self, name: &str, body: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path.clone());
        Ok(path)
    }

    pub fn track(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn report(&mut self, records: &[EvalRecord], shape: ReportShape, ctx: &ReportContext) -> Result<()> {
        for f in emit_report(records, shape, ctx, &self.dir)? {
            self.track(f);
        }
        if records.is_empty() {
            self.keep_marker = true;
        }
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            config_digest: String,
            seeds: BTreeMap<String, u64>,
            files: BTreeMap<String, String>,
        }
        self.files.sort();
        self.files.dedup();
        let mut files = BTreeMap::new();
        for f in &self.files {
            let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            let name = f.strip_prefix(&self.dir).unwrap_or(f).to_string_lossy().into_owned();
            files.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
        let m = Manifest { command, config_digest: cfg.digest(), seeds: cfg.seeds().into_iter().collect(), files };
        fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
        if !self.keep_marker {
            let _ = fs::remove_file(self.dir.join(INCOMPLETE_MARKER));
        }
        Ok(())
    }
}

/// Runs `body` in a stage directory; on failure the marker records the error.
fn staged<T>(dir: &Path, command: &str, cfg: &RunConfig, body: impl FnOnce(&mut Stage) -> Result<T>) -> Result<T> {
    let mut stage = Stage::open(dir)?;
    match body(&mut stage) {
        Ok(v) => {
            stage.finish(command, cfg)?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::write(dir.join(INCOMPLETE_MARKER), format!("{command} failed: {e:#}\n"));
            Err(e)
        }
    }
}

fn report_context(cfg: &RunConfig) -> ReportContext {
    ReportContext {
        config_digest: cfg.digest(),
        seeds: cfg.seeds(),
        k_values: cfg.protocol.k_values.clone(),
        activity: cfg.dataset.activity_bands,
        best_of_n: cfg.eval.best_of_n.clone(),
    }
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn build_client(section: &BackendSection, cfg: &RunConfig) -> Result<LlmClient> {
    let simulated = || Arc::new(SimulatedModel::new(section.simulated.clone()));
    Ok(match section.kind {
        BackendKind::Simulated => LlmClient::direct(simulated()),
        BackendKind::Mock => {
            let mut mock = MockBackend::new(cfg.mock_mode());
            if let Some(p) = &section.mock_scripts {
                let n = mock.load_scripts(p)?;
                log::info!("loaded {n} mock scripts from {}", p.display());
            }
            if section.mock_fallback {
                mock = mock.with_fallback(simulated());
            }
            LlmClient::direct(Arc::new(mock))
        }
        BackendKind::Http => {
            let http = section.http_config();
            let client = HttpBackend::new(&http)?;
            LlmClient::new(Arc::new(client), http.retry_policy(), http.max_in_flight)
        }
    })
}

fn agent_config(cfg: &RunConfig) -> AgentConfig {
    AgentConfig { domain: cfg.dataset.domain(), ..cfg.agent.config.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IngestStats {
    pub full: DatasetStats,
    pub filtered: DatasetStats,
    pub eligible_users: usize,
    pub train: DatasetStats,
    pub test: DatasetStats,
    pub train_cap: CapReport,
    pub test_cap: CapReport,
}

fn stats_table(s: &IngestStats) -> Table {
    let row = |name: &str, d: &DatasetStats| {
        vec![
            Some(name.to_owned()),
            Some(d.n_users.to_string()),
            Some(d.n_items.to_string()),
            Some(d.n_interactions.to_string()),
            (!d.degenerate).then(|| format!("{:.2}", d.sparsity_percent())),
        ]
    };
    Table {
        header: ["dataset", "users", "items", "interactions", "sparsity%"].map(String::from).to_vec(),
        rows: vec![row("full", &s.full), row("filtered", &s.filtered), row("train", &s.train), row("test", &s.test)],
    }
}

/// Loads the raw dataset, filters, truncates, samples and writes the
/// canonical corpus plus statistics.
pub fn ingest(cfg: &RunConfig) -> Result<IngestStats> {
    let dir = cfg.corpus_dir();
    staged(&dir, "ingest", cfg, |stage| {
        let c = &cfg.corpus;
        let raw = load_raw(cfg.dataset.format, &cfg.dataset.raw_dir)?;
        let full = compute_catalog_stats(&raw);
        let filtered_rows = kcore_filter(&raw.interactions, c.kcore);
        let filtered = compute_stats(&filtered_rows);
        let sequences = build_sequences(&filtered_rows, c.max_len, c.duplicates)?;
        let eligible: Vec<_> = sequences.into_iter().filter(|s| s.len() >= c.min_len).collect();
        let split = dualrec::corpus::sample_split(&eligible, c.n_train, c.n_test, c.split_seed)?;
        let stats = IngestStats {
            full,
            filtered,
            eligible_users: eligible.len(),
            train: compute_sequence_stats(&split.train),
            test: compute_sequence_stats(&split.test),
            train_cap: cap_report(&split.train, c.max_len),
            test_cap: cap_report(&split.test, c.max_len),
        };
        if stats.train_cap.shortfall > 0 {
            log::warn!(
                "{} of {} train users reach length {}; {} interactions short of {}",
                stats.train_cap.users_at_cap,
                stats.train_cap.users,
                c.max_len,
                stats.train_cap.shortfall,
                stats.train_cap.interactions_if_all_capped
            );
        }
        write_canonical(stage.dir.as_path(), &raw.catalog, &raw.users, &split)?;
        for f in [CATALOG_FILE, USERS_FILE, INTERACTIONS_FILE] {
            stage.track(stage.dir.join(f));
        }
        stage.write("stats.json", serde_json::to_string_pretty(&stats)? + "\n")?;
        let ctx = report_context(cfg);
        let table = stats_table(&stats);
        stage.write("stats.csv", render_csv(&table, &ctx))?;
        let mut txt = render_text(&table, &ctx);
        let cap = &stats.train_cap;
        let _ = writeln!(
            txt,
            "# train users at length cap: {}/{}; shortfall {} interactions",
            cap.users_at_cap, cap.users, cap.shortfall
        );
        stage.write("stats.txt", txt)?;
        Ok(stats)
    })
}

fn load_corpus(cfg: &RunConfig) -> Result<(dualrec::corpus::CanonicalCorpus, Catalog)> {
    let dir = cfg.corpus_dir();
    let corpus =
        read_canonical(&dir).with_context(|| format!("reading corpus in {} (run `ingest` first)", dir.display()))?;
    let catalog = Catalog::new(corpus.catalog.clone());
    Ok((corpus, catalog))
}

/// One prediction, comparison and reflection step of the simulation log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleLog {
    pub user_id: String,
    pub step: usize,
    pub positive_item_id: String,
    pub rank_of_positive: Option<usize>,
    pub predicted: Option<String>,
    pub actual: Feedback,
    pub discrepant: Option<bool>,
    pub reflected: bool,
    pub memory_version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub users: usize,
    pub cycles: usize,
    pub failures: usize,
}

pub const SIMULATE_DIR: &str = "simulate";
pub const EVAL_DIR: &str = "eval";
pub const SFT_DIR: &str = "sft";
pub const TOY_DIR: &str = "toy";
pub const REPORT_DIR: &str = "report";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MEMORIES_FILE: &str = "memories.jsonl";

fn simulate_user(
    agent: &Agent,
    user: &EvalUser,
    catalog: &Catalog,
    cfg: &RunConfig,
) -> Result<(AgentMemory, Vec<EvalRecord>, Vec<CycleLog>)> {
    let seq = &user.sequence.interactions;
    let uid = &user.user.user_id;
    let steps = cfg.simulate.steps_per_user.min(seq.len().saturating_sub(1));
    let start = seq.len() - steps;
    let mut history = Vec::with_capacity(start);
    for it in &seq[..start] {
        let item = catalog.get(&it.item_id).with_context(|| format!("unknown item {}", it.item_id))?;
        history.push(HistoryEntry { item: item.clone(), feedback: Feedback::from_positive(it.positive) });
    }
    let mut memory = AgentMemory::new(user.user.clone()).with_history(history);
    let (mut records, mut log) = (Vec::new(), Vec::new());
    let label = agent.label();
    for (step, t) in (start..seq.len()).enumerate() {
        let prefix = EvalUser {
            sequence: dualrec::corpus::InteractionSequence {
                user_id: uid.clone(),
                interactions: seq[..=t].to_vec(),
                raw_length: user.sequence.raw_length,
            },
            ..user.clone()
        };
        let cseed = seed::derive(cfg.protocol.negative_sampling_seed, &["simulate", &uid.0, &t.to_string()]);
        let task = candidates_from_seed(&prefix, catalog, &cfg.protocol, cseed)?;
        let positive = task.positive_item_id.clone().expect("positive");
        let actual = Feedback::from_positive(seq[t].positive);
        let mut rec = EvalRecord {
            user_id: uid.clone(),
            repeat_index: step,
            attempt: 0,
            ranker: label.clone(),
            candidate_seed: cseed,
            candidate_item_ids: task.candidates.iter().map(|c| c.item_id.clone()).collect(),
            positive_item_id: Some(positive.clone()),
            rank_of_positive: None,
            ndcg: BTreeMap::new(),
            user_activity: user.activity(),
            failure: None,
        };
        let mut entry = CycleLog {
            user_id: uid.0.clone(),
            step,
            positive_item_id: positive.0.clone(),
            rank_of_positive: None,
            predicted: None,
            actual,
            discrepant: None,
            reflected: false,
            memory_version: memory.version,
            failure: None,
        };
        match agent.run_cycle(&memory, &task.candidates, &positive, actual) {
            Ok(out) => {
                let rank = out.ranking.rank_of(&positive);
                rec.rank_of_positive = rank;
                rec.ndcg = cfg.protocol.k_values.iter().map(|&k| (k, ndcg_at_k::<f64>(rank, k))).collect();
                entry.rank_of_positive = rank;
                entry.predicted = Some(format!("{:?}", out.signal.predicted));
                entry.discrepant = Some(out.signal.discrepant);
                entry.reflected = out.reflected;
                entry.memory_version = out.memory.version;
                memory = out.memory;
                records.push(rec);
                log.push(entry);
            }
            Err(e) => {
                rec.failure = Some(e.to_string());
                entry.failure = Some(e.to_string());
                records.push(rec);
                log.push(entry);
                break;
            }
        }
    }
    Ok((memory, records, log))
}

/// Runs agent cycles over the first `simulate.n_users` training users.
pub fn simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    let (corpus, catalog) = load_corpus(cfg)?;
    let dir = cfg.out_dir.join(SIMULATE_DIR);
    staged(&dir, "simulate", cfg, |stage| {
        let agent = Agent::new(build_client(&cfg.agent.backend, cfg)?, agent_config(cfg));
        let users: Vec<EvalUser> =
            eval_users(&corpus.users, &corpus.train).into_iter().take(cfg.simulate.n_users).collect();
        let (mut memories, mut records, mut logs) = (Vec::new(), Vec::new(), Vec::new());
        for u in &users {
            let (m, r, l) = simulate_user(&agent, u, &catalog, cfg)?;
            memories.push(m);
            records.extend(r);
            logs.extend(l);
        }
        let failures = records.iter().filter(|r| r.failed()).count();
        stage.write(MEMORIES_FILE, jsonl(&memories)?)?;
        stage.write(RECORDS_FILE, jsonl(&records)?)?;
        stage.write("cycles.jsonl", jsonl(&logs)?)?;
        stage.report(&records, ReportShape::MetricsTable, &report_context(cfg))?;
        Ok(SimulateSummary { users: users.len(), cycles: records.len(), failures })
    })
}

fn read_memories(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let m: AgentMemory =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.insert(m.user.user_id.0, m.preference_description);
    }
    Ok(out)
}

fn make_ranker(spec: RankerSpec, cfg: &RunConfig, train: &[Interaction]) -> Result<Box<dyn Ranker>> {
    Ok(match spec {
        RankerSpec::Agent => {
            let mut ac = agent_config(cfg);
            if cfg.protocol.attempts > 1 {
                ac.rank_temperature = cfg.eval.sampling_temperature;
            }
            Box::new(Agent::new(build_client(&cfg.agent.backend, cfg)?, ac))
        }
        RankerSpec::Oracle => reference_ranker(ReferenceKind::Oracle, train),
        RankerSpec::Worst => reference_ranker(ReferenceKind::Worst, train),
        RankerSpec::Random { seed } => reference_ranker(ReferenceKind::Random { seed }, train),
        RankerSpec::Popularity => reference_ranker(ReferenceKind::Popularity, train),
    })
}

/// Leave-one-out evaluation of every configured ranker on the test users.
pub fn eval(cfg: &RunConfig) -> Result<Vec<EvalRecord>> {
    let (corpus, catalog) = load_corpus(cfg)?;
    let dir = cfg.out_dir.join(EVAL_DIR);
    staged(&dir, "eval", cfg, |stage| {
        let mut users = eval_users(&corpus.users, &corpus.test);
        if let Some(n) = cfg.eval.n_users {
            users.truncate(n);
        }
        if let Some(p) = &cfg.eval.memories {
            let descriptions = read_memories(p)?;
            for u in &mut users {
                if let Some(d) = descriptions.get(&u.user.user_id.0) {
                    u.description = d.clone();
                }
            }
        }
        let train: Vec<Interaction> = corpus.train.iter().flat_map(|s| s.interactions.iter().cloned()).collect();
        let mut records = Vec::new();
        for &spec in &cfg.eval.rankers {
            let ranker = make_ranker(spec, cfg, &train)?;
            let run = leave_one_out_eval(ranker.as_ref(), &users, &catalog, &cfg.protocol)?;
            log::info!("{}: {:?}", run.summary.ranker, run.summary.ndcg_percent);
            records.extend(run.records);
        }
        let path = stage.dir.join(RECORDS_FILE);
        write_records(&path, &records)?;
        stage.track(path);
        let ctx = report_context(cfg);
        for shape in [ReportShape::MetricsTable, ReportShape::ActivityGroups, ReportShape::BestOfN] {
            stage.report(&records, shape, &ctx)?;
        }
        Ok(records)
    })
}

/// Teacher generation, screening and rethink over sampled training users.
pub fn sft_gen(cfg: &RunConfig) -> Result<dualrec::sftgen::Manifest> {
    let (corpus, catalog) = load_corpus(cfg)?;
    let dir = cfg.out_dir.join(SFT_DIR);
    staged(&dir, "sft-gen", cfg, |stage| {
        let users = eval_users(&corpus.users, &corpus.train);
        let s = &cfg.sft;
        let scenarios =
            scenarios_from_users(&users, &catalog, &cfg.protocol, s.scenarios, s.scenario_seed, s.with_reflection);
        if scenarios.is_empty() {
            bail!("no usable scenarios among {} training users", users.len());
        }
        let sft_config = dualrec::sftgen::SftConfig { domain: cfg.dataset.domain(), ..s.config.clone() };
        let client = build_client(&s.backend, cfg)?;
        let batch = run_pipeline(&client, &scenarios, &sft_config);
        let batch_path = stage.dir.join("batch.json");
        write_batch(&batch_path, &batch)?;
        stage.track(batch_path);
        let manifest = export_corpus(&batch, &sft_config, &stage.dir, s.include_failed)?;
        stage.track(stage.dir.join(&manifest.corpus_file));
        stage.track(stage.dir.join("sft_manifest.json"));
        Ok(manifest)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToySeedResult {
    pub seed: u64,
    pub anchored_steps: Option<usize>,
    pub cold_steps: Option<usize>,
    pub anchored_final: f64,
    pub cold_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToySummary {
    pub budget: usize,
    pub threshold: f64,
    pub seeds: Vec<ToySeedResult>,
    /// Medians with "never reached" counted as budget + 1.
    pub anchored_median_steps: usize,
    pub cold_median_steps: usize,
    pub anchored_within_budget: bool,
    pub anchored_no_slower: bool,
    pub finite_difference: FdReport,
}

pub fn median_steps(steps: &[Option<usize>], budget: usize) -> usize {
    let mut v: Vec<usize> = steps.iter().map(|s| s.unwrap_or(budget + 1)).collect();
    v.sort_unstable();
    if v.is_empty() {
        return budget + 1;
    }
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]).div_ceil(2)
    }
}

fn curve_rows(out: &mut String, variant: &str, seed: u64, curve: &TrainingCurve) {
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{variant},{seed},{},{},{},{},{}",
            p.step, p.objective, p.expected_reward, p.kl, p.mean_reward
        );
    }
}

/// SFT anchor fit, anchored and cold-start GRPO per seed, and a finite
/// difference check of the objective gradient.
pub fn toy_train(cfg: &RunConfig) -> Result<ToySummary> {
    let dir = cfg.out_dir.join(TOY_DIR);
    staged(&dir, "toy-train", cfg, |stage| {
        let g = &cfg.grpo;
        let mut exp = g.experiment.clone();
        exp.grpo.schedule = cfg.reward.clone();
        let budget = exp.options.steps;
        let digest = cfg.digest();
        let mut csv = String::from("variant,seed,step,objective,expected_reward,kl,mean_reward\n");
        let mut seeds = Vec::new();
        for &s in &g.seeds {
            let anchored = run_toy_experiment(&exp, s, true)?;
            let cold = run_toy_experiment(&exp, s, false)?;
            curve_rows(&mut csv, "anchored", s, &anchored);
            curve_rows(&mut csv, "cold", s, &cold);
            for (name, c) in [("anchored", &anchored), ("cold", &cold)] {
                let path = stage.dir.join(format!("checkpoint-{name}-{s}.txt"));
                write_checkpoint(&path, &c.final_state, &digest)?;
                stage.track(path);
            }
            let last = |c: &TrainingCurve| c.points.last().map_or(f64::NAN, |p| p.expected_reward);
            log::info!("seed {s}: anchored {:?}, cold {:?}", anchored.steps_to_threshold, cold.steps_to_threshold);
            seeds.push(ToySeedResult {
                seed: s,
                anchored_steps: anchored.steps_to_threshold,
                cold_steps: cold.steps_to_threshold,
                anchored_final: last(&anchored),
                cold_final: last(&cold),
            });
        }
        stage.write("curves.csv", csv)?;
        let fd_cfg = exp.grpo.clone();
        let setup = fd_setup(g.fd_d_user, g.fd_d_item, g.fd_candidates, g.fd_groups, &fd_cfg, g.fd_seed)?;
        let fd = finite_diff_check(
            &setup.theta,
            &setup.theta_old,
            &setup.theta_ref,
            &setup.groups,
            &fd_cfg,
            g.fd_probes,
            g.fd_step,
            g.fd_seed,
        )?;
        stage.write(
            "fd_report.txt",
            format!(
                "finite-difference max relative error: {:e}\nprobes checked: {}\nprobes on clip kinks: {}\nkink max relative error: {:e}\nstep: {:e}\n",
                fd.max_relative_error, fd.checked, fd.kinks, fd.max_kink_error, g.fd_step
            ),
        )?;
        let a: Vec<_> = seeds.iter().map(|r| r.anchored_steps).collect();
        let c: Vec<_> = seeds.iter().map(|r| r.cold_steps).collect();
        let (am, cm) = (median_steps(&a, budget), median_steps(&c, budget));
        let summary = ToySummary {
            budget,
            threshold: exp.options.threshold,
            anchored_median_steps: am,
            cold_median_steps: cm,
            anchored_within_budget: am <= budget,
            anchored_no_slower: am <= cm,
            seeds,
            finite_difference: fd,
        };
        stage.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(summary)
    })
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("records") && n.ends_with(".jsonl"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            bail!("report input {} does not exist", p.display());
        }
    }
    Ok(out)
}

/// Merges stored records from earlier runs into the three report shapes.
pub fn report(cfg: &RunConfig, extra_inputs: &[PathBuf]) -> Result<usize> {
    let mut inputs = cfg.report.inputs.clone();
    inputs.extend(extra_inputs.iter().cloned());
    let dir = cfg.out_dir.join(REPORT_DIR);
    staged(&dir, "report", cfg, |stage| {
        let mut records = Vec::new();
        for f in collect_inputs(&inputs)? {
            records.extend(read_records(&f).with_context(|| format!("reading {}", f.display()))?);
        }
        let ctx = report_context(cfg);
        for shape in [ReportShape::MetricsTable, ReportShape::ActivityGroups, ReportShape::BestOfN] {
            stage.report(&records, shape, &ctx)?;
        }
        Ok(records.len())
    })
}

/// Writes a seeded synthetic dataset in one of the raw layouts.
pub fn make_fixture(format: RawFormat, dir: &Path, spec: &synthetic::SynthSpec) -> Result<()> {
    match format {
        RawFormat::Movielens => synthetic::write_movielens(dir, spec)?,
        RawFormat::Amazon => synthetic::write_amazon(dir, spec)?,
    }
    Ok(())
}
