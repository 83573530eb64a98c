// Copyright 2026 The Ephemera Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! The two experiments behind the command line: a simulated deployment
//! (`run`) and the ε sweep (`sweep`). Both write into a staging directory
//! that replaces the output directory only on success.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::client::{CompiledQuery, ConstraintPolicy, HistogramBinding, Tier};
use crate::config::{parse_variants, ConfigError, ExperimentConfig};
use crate::dp::{self, DpError, MechanismConfig, ReleaseMetadata, Variant};
use crate::eval::{
    self, calibrate, device_reach, evaluation_floor, generate_corpus, per_user_mean_error, run_epsilon_sweep, summarize,
    weighted_relative_error, window_histograms, Calibrations, SweepInput, WindowTruth,
};
use crate::histogram::IndexedHistogram;
use crate::model::{HistIndex, Metric, Schema, TripRecord};
use crate::query::{parse_for_device_stream, Diagnostics, QuerySpec, SplitQuery};
use crate::server::{ServerError, TaskRequest};
use crate::sim::{self, assign_profiles, SimConfig, SimError, SimOutcome, WindowOutput};
use crate::time::{round_down_window, TimeWindow, Timestamp, DAY, HOUR};

/// File that marks a directory as written by this tool.
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    /// 1 validation, 2 config, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Validation(_) => 1,
            ExperimentError::Config(_) => 2,
            ExperimentError::Runtime(_) => 3,
        }
    }
}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Runtime(format!("i/o error: {e}"))
    }
}

fn from_dp(e: DpError) -> ExperimentError {
    match e {
        DpError::Config(_) | DpError::InvalidScale(_) => ExperimentError::Config(e.to_string()),
        DpError::Model(_) => ExperimentError::Runtime(e.to_string()),
    }
}

fn from_sim(e: SimError) -> ExperimentError {
    match e {
        SimError::Server(ServerError::RetrospectiveQuery { start, now }) => ExperimentError::Config(format!(
            "retrospective query: first window starts at {start}, before registration at {now}; \
             retrospective windows are not supported"
        )),
        SimError::Server(e @ (ServerError::MissingApprover(_) | ServerError::InvalidTask(_))) => {
            ExperimentError::Config(e.to_string())
        }
        SimError::Dp(e) => from_dp(e),
        SimError::Config(m) => ExperimentError::Config(m),
        other => ExperimentError::Runtime(other.to_string()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Worker threads; 1 keeps everything on one thread.
    pub jobs: usize,
    /// Restricts the sweep to these variants.
    pub variants: Option<Vec<Variant>>,
}

/// Reads and validates the task's query file.
pub fn load_query(cfg: &ExperimentConfig) -> Result<SplitQuery, ExperimentError> {
    let path = cfg.resolve(&cfg.task.query_path);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ExperimentError::Config(format!("cannot read query {}: {e}", path.display())))?;
    parse_for_device_stream(&text).map_err(|d: Diagnostics| {
        ExperimentError::Validation(format!("query {} is invalid:\n{d}", path.display()))
    })
}

fn corpus_for(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<TripRecord>>, ExperimentError> {
    generate_corpus(&cfg.corpus_config(seed)?).map_err(ExperimentError::Config)
}

fn proxy_histograms(cfg: &ExperimentConfig) -> Result<Vec<IndexedHistogram>, ExperimentError> {
    let proxy_cfg = cfg.corpus_config(cfg.seed.wrapping_add(cfg.corpus.proxy_seed_offset))?;
    let proxy = generate_corpus(&proxy_cfg).map_err(ExperimentError::Config)?;
    let schema = cfg.schema();
    Ok(proxy_cfg.windows().iter().flat_map(|w| window_histograms(schema, &proxy, w)).collect())
}

/// Calibrations from the proxy corpus, honouring a configured scale table.
pub fn calibrations(cfg: &ExperimentConfig) -> Result<Calibrations, ExperimentError> {
    let schema = cfg.schema();
    let proxy = proxy_histograms(cfg)?;
    let mut cal = calibrate(schema, &proxy, cfg.mechanism.quantile).map_err(from_dp)?;
    if let Some(table) = cfg.scale_table(schema)? {
        let scaled: Vec<IndexedHistogram> =
            proxy.iter().map(|h| h.scale_by_table(&table, false)).collect::<Result<_, _>>().map_err(|e| {
                ExperimentError::Config(format!("scale table does not fit the schema: {e}"))
            })?;
        cal.scaled_clip = dp::calibrate_clip(&scaled, cfg.mechanism.quantile).expect("proxy is non-empty");
        cal.scales = table;
    }
    Ok(cal)
}

/// The mechanism of a `run`: explicit bounds where configured, proxy
/// calibrations for the rest.
pub fn run_mechanism(cfg: &ExperimentConfig) -> Result<MechanismConfig, ExperimentError> {
    let m = &cfg.mechanism;
    let schema = cfg.schema();
    let variant = cfg.variant();
    let explicit = match variant {
        Variant::JointClipping => m.clip.map(|c| MechanismConfig::joint_clipping(m.epsilon, c)),
        Variant::BudgetSplit => m.clip_table.clone().map(|t| MechanismConfig::budget_split(m.epsilon, t)),
        Variant::ActivityMetricScaling => match (m.clip, cfg.scale_table(schema)?) {
            (Some(c), Some(s)) => Some(MechanismConfig::activity_metric_scaling(m.epsilon, c, s)),
            _ => None,
        },
    };
    let base = match explicit {
        Some(b) => b,
        None => {
            let cal = calibrations(cfg)?;
            let mut b = cal.mechanism(variant, m.epsilon);
            if let (Variant::ActivityMetricScaling, Some(c)) = (variant, m.clip) {
                b.clip = c;
            }
            b
        }
    };
    let mech = cfg.finish_mechanism(base);
    mech.validate(&schema).map_err(from_dp)?;
    Ok(mech)
}

/// Windows of the task: as configured, or every window the corpus covers.
pub fn task_windows(cfg: &ExperimentConfig) -> Result<(Timestamp, usize), ExperimentError> {
    let start = cfg.window_start()?;
    if let Some(n) = cfg.task.num_windows {
        return Ok((start, n));
    }
    let corpus_end = cfg.corpus_config(cfg.seed)?.windows().last().map(|w| w.end).unwrap_or(start);
    let mut w = round_down_window(start, cfg.task.alignment);
    let mut n = 0;
    while w.end <= corpus_end {
        n += 1;
        w = w.next(cfg.task.alignment);
    }
    if n == 0 {
        return Err(ExperimentError::Config("the corpus covers no complete task window".into()));
    }
    Ok((start, n))
}

pub fn task_request(cfg: &ExperimentConfig, query: SplitQuery) -> Result<TaskRequest, ExperimentError> {
    let (first_window_start, num_windows) = task_windows(cfg)?;
    Ok(TaskRequest {
        query_id: cfg.task.query_id.clone(),
        spec: QuerySpec {
            query,
            window_alignment: cfg.task.alignment,
            grace_period_s: cfg.task.grace_hours as i64 * HOUR,
            min_contributions: cfg.task.min_contributions,
            mechanism: cfg.mechanism.variant.clone(),
        },
        first_window_start,
        num_windows,
        eligibility: cfg.eligibility(),
        population: cfg.task.population.clone(),
        approver: cfg.task.approver.clone(),
    })
}

pub fn sim_config(cfg: &ExperimentConfig, policy: ConstraintPolicy) -> SimConfig {
    let f = &cfg.fleet;
    let tick_s = f.tick_hours as i64 * HOUR;
    SimConfig {
        schema: cfg.schema(),
        policy,
        server: cfg.server_config(),
        tick_s,
        device_ttl_s: f.device_ttl_days as i64 * DAY,
        rollup_every_ticks: (f.rollup_every_hours as i64 * HOUR / tick_s).max(1) as u64,
        crash_every_ticks: f.crash_every_hours.map(|h| (h as i64 * HOUR / tick_s).max(1) as u64),
        seed: cfg.seed,
    }
}

/// Truth projected onto the coordinates the query produces; unbound
/// dimensions collapse to 0. Every metric is kept so that trip counts can
/// weight the error.
pub fn project_truth(binding: &HistogramBinding, schema: Schema, corpus: &[Vec<TripRecord>], window: &TimeWindow) -> WindowTruth {
    let project = |r: &TripRecord| {
        (
            if binding.activity_key.is_some() { r.activity } else { 0 },
            if binding.region_key.is_some() { r.region } else { 0 },
            if binding.direction_key.is_some() { r.direction.index() } else { 0 },
        )
    };
    let mut histogram = IndexedHistogram::new(schema);
    let mut device_counts: BTreeMap<(u32, u32, u32), u64> = BTreeMap::new();
    for recs in corpus {
        let mut seen = BTreeSet::new();
        for r in recs.iter().filter(|r| window.contains(r.event_time)) {
            let (a, reg, d) = project(r);
            for m in Metric::ALL {
                histogram.add_at(HistIndex::new(a, m.index(), reg, d), r.metric_value(m)).expect("record fits schema");
            }
            seen.insert((a, reg, d));
        }
        for k in seen {
            *device_counts.entry(k).or_default() += 1;
        }
    }
    WindowTruth { histogram, device_counts }
}

// ---------------------------------------------------------------------------
// Output directory handling

/// Staging area next to `out`; renamed over it on success.
struct Staging {
    out: PathBuf,
    dir: PathBuf,
}

impl Staging {
    fn new(out: &Path) -> Result<Staging, ExperimentError> {
        if out.exists() {
            let empty = std::fs::read_dir(out)?.next().is_none();
            if !empty && !out.join(MANIFEST).is_file() {
                return Err(ExperimentError::Config(format!(
                    "output directory {} is not empty and was not written by this tool",
                    out.display()
                )));
            }
        }
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let dir = out.with_file_name(format!(".{name}.partial"));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Staging { out: out.to_path_buf(), dir })
    }

    fn commit(self) -> Result<(), ExperimentError> {
        if self.out.exists() {
            std::fs::remove_dir_all(&self.out)?;
        }
        std::fs::rename(&self.dir, &self.out)?;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.dir.exists() {
            let _ = std::fs::remove_dir_all(&self.dir);
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, ExperimentError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Runtime(format!("cannot start workers: {e}")))
}

/// Writes one noised release as `a,m,r,d,value` rows.
pub fn write_release_csv(path: &Path, h: &IndexedHistogram) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["a", "m", "r", "d", "value"])?;
    for (idx, v) in h.iter() {
        w.write_record([
            idx.activity.to_string(),
            idx.metric.to_string(),
            idx.region.to_string(),
            idx.direction.to_string(),
            v.to_string(),
        ])?;
    }
    w.flush()
}

/// Text of the marker file left for a suppressed window.
pub const SUPPRESSED_MARKER: &str = "insufficient contributions\n";

// ---------------------------------------------------------------------------
// run

#[derive(Clone, Debug, Serialize)]
struct WindowEntry {
    window: String,
    start: String,
    end: String,
    status: &'static str,
    file: String,
    suppressed_partitions: usize,
}

#[derive(Clone, Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    seed: u64,
    query_id: String,
    mechanism: ReleaseMetadata,
    policies: Vec<String>,
    windows: Vec<WindowEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReachRow {
    pub policy: String,
    pub country_stratum: String,
    pub window: String,
    pub h: f64,
}

/// Reach of one simulated policy, per tier and overall.
pub fn reach_rows(policy: &str, outcome: &SimOutcome) -> Vec<ReachRow> {
    let mut rows = Vec::new();
    for (window, sets) in &outcome.reach {
        let strata: [(&str, Option<Tier>); 3] =
            [("all", None), (Tier::HighEnd.name(), Some(Tier::HighEnd)), (Tier::LowEnd.name(), Some(Tier::LowEnd))];
        for (name, tier) in strata {
            let keep = |s: &BTreeSet<u64>| -> BTreeSet<u64> {
                s.iter().copied().filter(|d| tier.is_none_or(|t| outcome.tiers[*d as usize] == t)).collect()
            };
            let active = keep(&sets.active);
            if active.is_empty() {
                continue;
            }
            let report = device_reach(&active, &keep(&sets.downloaded), &keep(&sets.uploaded));
            rows.push(ReachRow { policy: policy.into(), country_stratum: name.into(), window: window.clone(), h: report.h });
        }
    }
    rows
}

pub struct RunReport {
    pub outcomes: Vec<(String, SimOutcome)>,
    pub mechanism: MechanismConfig,
    pub reach: Vec<ReachRow>,
}

/// Simulates every configured policy and returns the outcomes in memory.
pub fn simulate_policies(cfg: &ExperimentConfig, opts: &Options) -> Result<RunReport, ExperimentError> {
    let query = load_query(cfg)?;
    let mechanism = run_mechanism(cfg)?;
    let request = task_request(cfg, query)?;
    let corpus = corpus_for(cfg, cfg.seed)?;
    let registered_at = cfg.registered_at()?;
    let profiles = assign_profiles(
        corpus.len(),
        cfg.fleet.high_end_share,
        &cfg.profile(Tier::HighEnd),
        &cfg.profile(Tier::LowEnd),
        cfg.seed,
    );
    let policies = cfg.policies()?;
    let names = cfg.fleet.policies.clone();
    info!("simulating {} devices under {} policies", corpus.len(), policies.len());
    let pool = thread_pool(opts.jobs)?;
    let outcomes: Vec<SimOutcome> = pool.install(|| {
        policies
            .par_iter()
            .map(|p| sim::simulate(&sim_config(cfg, *p), &corpus, &profiles, request.clone(), &mechanism, registered_at))
            .collect::<Result<Vec<_>, _>>()
            .map_err(from_sim)
    })?;
    let mut reach = Vec::new();
    for (name, o) in names.iter().zip(&outcomes) {
        reach.extend(reach_rows(name, o));
    }
    Ok(RunReport { outcomes: names.into_iter().zip(outcomes).collect(), mechanism, reach })
}

/// `run`: simulate, release and write the output tree.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, opts: &Options) -> Result<(), ExperimentError> {
    let staging = Staging::new(out)?;
    let report = simulate_policies(cfg, opts)?;
    let (_, primary) = &report.outcomes[0];
    let dir = &staging.dir;
    let releases = dir.join("releases");
    std::fs::create_dir_all(&releases)?;

    let query = load_query(cfg)?;
    let compiled = CompiledQuery::compile(&cfg.task.query_id, &query, cfg.task.alignment)
        .map_err(|e| ExperimentError::Validation(e.to_string()))?;
    let schema = cfg.schema();
    let corpus = corpus_for(cfg, cfg.seed)?;
    let floor = evaluation_floor(corpus.len());

    let mut entries = Vec::new();
    let mut eval_rows: Vec<[String; 4]> = Vec::new();
    for res in &primary.windows {
        let stem = format!("{}__{}", cfg.task.query_id, res.window.id);
        let entry = match &res.output {
            WindowOutput::Released(rel) => {
                let file = format!("{stem}.csv");
                write_release_csv(&releases.join(&file), &rel.histogram)?;
                let truth = project_truth(&compiled.binding, schema, &corpus, &res.window);
                let wre = weighted_relative_error(&truth.histogram, &rel.histogram, &truth.device_counts, floor);
                for &m in &compiled.binding.value_metrics {
                    let metric = Metric::ALL[m as usize];
                    let only = |h: &IndexedHistogram| {
                        let mut s = h.clone();
                        s.retain(|i, _| i.metric == m);
                        s
                    };
                    let pume = per_user_mean_error(&only(&rel.histogram), &only(&truth.histogram), &truth.device_counts);
                    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
                    eval_rows.push([res.window.id.clone(), metric.name().into(), fmt(wre[m as usize]), fmt(pume)]);
                }
                WindowEntry {
                    window: res.window.id.clone(),
                    start: res.window.start.to_string(),
                    end: res.window.end.to_string(),
                    status: "released",
                    file: format!("releases/{file}"),
                    suppressed_partitions: rel.suppressed,
                }
            }
            WindowOutput::InsufficientContributions => {
                let file = format!("{stem}.suppressed");
                std::fs::write(releases.join(&file), SUPPRESSED_MARKER)?;
                WindowEntry {
                    window: res.window.id.clone(),
                    start: res.window.start.to_string(),
                    end: res.window.end.to_string(),
                    status: "insufficient_contributions",
                    file: format!("releases/{file}"),
                    suppressed_partitions: 0,
                }
            }
        };
        entries.push(entry);
    }

    std::fs::write(dir.join("events.jsonl"), primary.log.to_jsonl())?;

    let mut w = csv::Writer::from_path(dir.join("reach.csv")).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    w.write_record(["policy", "country_stratum", "window", "H"]).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    for r in &report.reach {
        w.write_record([r.policy.as_str(), &r.country_stratum, &r.window, &r.h.to_string()])
            .map_err(|e| ExperimentError::Runtime(e.to_string()))?;
    }
    w.flush()?;

    let mut f = std::fs::File::create(dir.join("evaluation.csv"))?;
    writeln!(f, "window,metric,weighted_relative_error,per_user_mean_error")?;
    for r in &eval_rows {
        writeln!(f, "{}", r.join(","))?;
    }

    write_json(
        &dir.join(MANIFEST),
        &RunManifest {
            command: "run",
            seed: cfg.seed,
            query_id: cfg.task.query_id.clone(),
            mechanism: report.mechanism.metadata(),
            policies: cfg.fleet.policies.clone(),
            windows: entries,
        },
    )?;
    staging.commit()
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, Serialize)]
struct SweepManifest {
    command: &'static str,
    seed: u64,
    window: String,
    num_devices: usize,
    floor: u64,
    quantile: f64,
    joint_clip: f64,
    scaled_clip: f64,
    scale_digest: String,
    variants: Vec<&'static str>,
    epsilons: Vec<f64>,
    seeds: u64,
    target_weighted_relative_error: f64,
}

pub struct SweepReport {
    pub rows: Vec<eval::SweepRow>,
    pub summary: Vec<eval::SummaryRow>,
}

/// Runs the sweep grid on the first corpus week.
pub fn sweep(cfg: &ExperimentConfig, opts: &Options) -> Result<(SweepReport, SweepManifestParts), ExperimentError> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ExperimentError::Config("config has no [sweep] section".into()))?;
    let variants = match &opts.variants {
        Some(v) => v.clone(),
        None => parse_variants(&grid.variants)?,
    };
    let schema = cfg.schema();
    let corpus_cfg = cfg.corpus_config(cfg.seed)?;
    let corpus = corpus_for(cfg, cfg.seed)?;
    let window = corpus_cfg.windows()[0].clone();
    let devices = window_histograms(schema, &corpus, &window);
    let truth = eval::exact_workload(schema, &corpus, &window);
    let cal = calibrations(cfg)?;
    let floor = evaluation_floor(corpus.len());
    let input = SweepInput {
        schema,
        devices: &devices,
        truth: &truth,
        calibrations: &cal,
        window_id: &window.id,
        floor,
        tau: cfg.mechanism.tau,
    };
    let seeds: Vec<u64> = (0..grid.seeds).collect();
    let pool = thread_pool(opts.jobs)?;
    let rows = pool.install(|| run_epsilon_sweep(&input, &variants, &grid.epsilons, &seeds)).map_err(from_dp)?;
    let summary = summarize(&rows);
    let parts = SweepManifestParts {
        window: window.id.clone(),
        num_devices: corpus.len(),
        floor,
        cal,
        variants,
        epsilons: grid.epsilons.clone(),
        seeds: grid.seeds,
    };
    Ok((SweepReport { rows, summary }, parts))
}

pub struct SweepManifestParts {
    window: String,
    num_devices: usize,
    floor: u64,
    cal: Calibrations,
    variants: Vec<Variant>,
    epsilons: Vec<f64>,
    seeds: u64,
}

/// `sweep`: results.csv, summary.csv and a manifest.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, opts: &Options) -> Result<(), ExperimentError> {
    let staging = Staging::new(out)?;
    let (report, p) = sweep(cfg, opts)?;
    eval::write_results_csv(&staging.dir.join("results.csv"), &report.rows)?;
    eval::write_summary_csv(&staging.dir.join("summary.csv"), &report.summary)?;
    write_json(
        &staging.dir.join(MANIFEST),
        &SweepManifest {
            command: "sweep",
            seed: cfg.seed,
            window: p.window,
            num_devices: p.num_devices,
            floor: p.floor,
            quantile: p.cal.quantile,
            joint_clip: p.cal.joint_clip,
            scaled_clip: p.cal.scaled_clip,
            scale_digest: p.cal.scales.digest(),
            variants: p.variants.iter().map(|v| v.name()).collect(),
            epsilons: p.epsilons,
            seeds: p.seeds,
            target_weighted_relative_error: eval::TARGET_WEIGHTED_ERROR,
        },
    )?;
    staging.commit()
}
