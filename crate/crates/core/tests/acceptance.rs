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

//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so every criterion reports even when an earlier one
//! fails; the process exits nonzero if any gating criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use ephemera::aggcore::{encode_key, AggCoreConfig, AggregationCore, Payload};
use ephemera::client::{AvailabilityProfile, ConstraintPolicy, DeviceState, Tier};
use ephemera::config::ExperimentConfig;
use ephemera::dp::{self, MechanismConfig, Variant};
use ephemera::eval::{
    calibrate, exact_workload, generate_corpus, run_epsilon_sweep, summarize, window_histograms, SweepInput,
    SyntheticCorpusConfig,
};
use ephemera::exact::ExactSum;
use ephemera::experiment::{self, Options, SUPPRESSED_MARKER};
use ephemera::histogram::IndexedHistogram;
use ephemera::model::{HistIndex, Metric, ScaleTable, Schema};
use ephemera::query::{parse_for_device_stream, QuerySpec, EXAMPLE_QUERY};
use ephemera::rng::CounterRng;
use ephemera::server::{
    ClientUpdate, EligibilityConfig, FederatedServer, IngestError, ReleaseOutcome, ServerConfig, SessionId, TaskRequest,
};
use ephemera::sim::{self, SimConfig, WindowOutput};
use ephemera::time::{TimeWindow, Timestamp, WindowAlignment, DAY, HOUR};

const WORKLOAD: &str = "\
SELECT activity, region, direction, privacy_time_unit,
  SUM(trip_count) AS n, SUM(trip_distance) AS dist, SUM(trip_duration) AS dur
FROM DeviceDataStream
GROUP BY activity, region, direction, privacy_time_unit;
SELECT activity, region, direction, privacy_time_unit, SUM(n), SUM(dist), SUM(dur)
FROM UserResults
GROUP BY activity, region, direction, privacy_time_unit;";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn workload_task(start: Timestamp, windows: usize, alignment: WindowAlignment, grace_s: i64, min: u64) -> TaskRequest {
    TaskRequest {
        query_id: "workload".into(),
        spec: QuerySpec {
            query: parse_for_device_stream(WORKLOAD).expect("workload query is valid"),
            window_alignment: alignment,
            grace_period_s: grace_s,
            min_contributions: min,
            mechanism: "acceptance".into(),
        },
        first_window_start: start,
        num_windows: windows,
        eligibility: EligibilityConfig::default(),
        population: "acceptance".into(),
        approver: Some("second-approver".into()),
    }
}

// 1 -------------------------------------------------------------------------

fn no_privacy_oracle() -> Outcome {
    let cc = SyntheticCorpusConfig { num_devices: 1000, num_weeks: 2, seed: 11, ..Default::default() };
    let corpus = generate_corpus(&cc).unwrap();
    let schema = cc.schema();
    let profiles = vec![AvailabilityProfile::always_on(Tier::HighEnd); corpus.len()];
    let cfg = SimConfig::new(schema, ConstraintPolicy::IDLE_ONLY, 5);
    let mech = MechanismConfig::joint_clipping(f64::INFINITY, f64::INFINITY);
    let task = workload_task(cc.start, 2, WindowAlignment::CivilWeek, 2 * DAY, 1);
    let out = sim::simulate(&cfg, &corpus, &profiles, task, &mech, cc.start).unwrap();
    let mut compared = 0usize;
    let mut mismatches = 0usize;
    for (w, res) in cc.windows().iter().zip(&out.windows) {
        let truth = exact_workload(schema, &corpus, w).histogram;
        let WindowOutput::Released(rel) = &res.output else {
            return outcome(false, format!("window {} suppressed", w.id));
        };
        for idx in schema.indices() {
            compared += 1;
            if rel.histogram.get(&idx).to_bits() != truth.get(&idx).to_bits() {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && out.windows.len() == 2,
        format!("{compared} (window, metric, partition) cells, {mismatches} mismatches"),
    )
}

// 2 -------------------------------------------------------------------------

fn clipping_sensitivity() -> Outcome {
    let cc = SyntheticCorpusConfig { num_devices: 2000, seed: 21, ..Default::default() };
    let schema = cc.schema();
    let corpus = generate_corpus(&cc).unwrap();
    let week = &cc.windows()[0];
    let devices = window_histograms(schema, &corpus, week);
    let proxy = generate_corpus(&SyntheticCorpusConfig { seed: 1021, ..cc.clone() }).unwrap();
    let cal = calibrate(schema, &window_histograms(schema, &proxy, week), 0.95).unwrap();
    let rng = CounterRng::new(21, "adjacent-pairs");

    // A pathological extra device: every slice populated with large values.
    let heavy = {
        let mut h = IndexedHistogram::new(schema);
        for idx in schema.indices() {
            h.set(idx, 1e4 * (1 + idx.activity) as f64).unwrap();
        }
        h
    };
    let mut worst = [0.0f64; 3];
    let mut violations = 0;
    for pair in 0..100u64 {
        let base: Vec<IndexedHistogram> =
            devices.iter().enumerate().filter(|(i, _)| rng.uniform_at(pair, *i as u64) < 0.1).map(|(_, h)| h.clone()).collect();
        let extra = if pair % 4 == 0 {
            heavy.clone()
        } else {
            devices[(rng.u64_at(pair, 1 << 32) % devices.len() as u64) as usize].clone()
        };
        let mut with = base.clone();
        with.push(extra);
        for (k, variant) in Variant::ALL.iter().enumerate() {
            let cfg = cal.mechanism(*variant, 1.0);
            let a = dp::pre_noise_aggregate(&cfg, schema, &base).unwrap();
            let b = dp::pre_noise_aggregate(&cfg, schema, &with).unwrap();
            match variant {
                Variant::BudgetSplit => {
                    for act in 0..schema.num_activities {
                        for m in 0..schema.num_metrics {
                            let bound = cal.slice_clips[(act * schema.num_metrics + m) as usize];
                            let d = a.slice_l1_distance(&b, act, m);
                            worst[k] = worst[k].max(d / bound);
                            if d > bound + 1e-9 {
                                violations += 1;
                            }
                        }
                    }
                }
                _ => {
                    let d = a.l1_distance(&b);
                    worst[k] = worst[k].max(d / cfg.clip);
                    if d > cfg.clip + 1e-9 {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "100 pairs, {violations} violations; max diff/bound jc={:.6} bs={:.6} ams={:.6}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn dp_ratio_smoke() -> Outcome {
    // A one-partition domain with sensitivity 1 and epsilon 1. The
    // noising step is called directly: the release threshold would
    // otherwise remove negative outputs.
    let schema = Schema::new(1, 1, 1).unwrap();
    let cfg = MechanismConfig::joint_clipping(1.0, 1.0);
    let scale = |i: &HistIndex| cfg.noise_scale(&schema, i);
    let idx = HistIndex::new(0, 0, 0, 0);
    let mut h0 = IndexedHistogram::new(schema);
    h0.set(idx, 0.0).unwrap();
    let mut h1 = IndexedHistogram::new(schema);
    h1.set(idx, 1.0).unwrap();
    const RUNS: u64 = 1_000_000;
    const BINS: usize = 50;
    let (lo, hi) = (-6.0, 7.0);
    let bin = |v: f64| -> Option<usize> {
        let b = ((v - lo) / (hi - lo) * BINS as f64).floor();
        (b >= 0.0 && b < BINS as f64).then_some(b as usize)
    };
    let mut c0 = [0u64; BINS];
    let mut c1 = [0u64; BINS];
    for seed in 0..RUNS {
        let a = dp::laplace_mechanism(&h0, cfg.noise_domain, seed, "smoke", scale).get(&idx);
        let b = dp::laplace_mechanism(&h1, cfg.noise_domain, seed + RUNS, "smoke", scale).get(&idx);
        if let Some(i) = bin(a) {
            c0[i] += 1;
        }
        if let Some(i) = bin(b) {
            c1[i] += 1;
        }
    }
    let mut checked = 0;
    let mut worst = f64::NEG_INFINITY;
    let mut bad = 0;
    for i in 0..BINS {
        let (n0, n1) = (c0[i] as f64, c1[i] as f64);
        if n0 < 100.0 || n1 < 100.0 {
            continue;
        }
        checked += 1;
        let se = (1.0 / n0 + 1.0 / n1).sqrt();
        let log_ratio = (n0 / n1).ln().abs();
        worst = worst.max(log_ratio - 1.0 - 3.0 * se);
        if log_ratio > 1.0 + 3.0 * se {
            bad += 1;
        }
    }
    outcome(
        bad == 0 && checked > 10,
        format!("{checked} bins checked, {bad} exceed e^1 by more than 3 s.e. (worst margin {worst:.4})"),
    )
}

// 4 -------------------------------------------------------------------------

fn laplace_moments() -> Outcome {
    let mut rng = CounterRng::new(4, "moments").stream(0);
    let n = 1_000_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let x = dp::sample_laplace(1.0, &mut rng).unwrap();
        sum += x;
        sq += x * x;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let q = dp::laplace_inverse_cdf(0.75, 1.0);
    let ok = mean.abs() < 0.01 && (var - 2.0).abs() < 0.05 && (q - 2f64.ln()).abs() < 1e-12;
    outcome(ok, format!("mean={mean:.5} var={var:.5} F^-1(0.75)-ln2={:.2e}", q - 2f64.ln()))
}

// 5 and 6 -----------------------------------------------------------------------

struct SweepResult {
    means: BTreeMap<(Variant, u32), Vec<(f64, f64)>>,
}

fn default_sweep() -> SweepResult {
    let cc = SyntheticCorpusConfig::default();
    let schema = cc.schema();
    let corpus = generate_corpus(&cc).unwrap();
    let week = &cc.windows()[0];
    let proxy = generate_corpus(&SyntheticCorpusConfig { seed: cc.seed + 1000, ..cc.clone() }).unwrap();
    let cal = calibrate(schema, &window_histograms(schema, &proxy, week), 0.95).unwrap();
    let devices = window_histograms(schema, &corpus, week);
    let truth = exact_workload(schema, &corpus, week);
    let input = SweepInput {
        schema,
        devices: &devices,
        truth: &truth,
        calibrations: &cal,
        window_id: &week.id,
        floor: ephemera::eval::evaluation_floor(corpus.len()),
        tau: 0.0,
    };
    let grid = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
    let seeds: Vec<u64> = (0..10).collect();
    let rows = run_epsilon_sweep(&input, &Variant::ALL, &grid, &seeds).unwrap();
    let mut means: BTreeMap<(Variant, u32), Vec<(f64, f64)>> = BTreeMap::new();
    for s in summarize(&rows) {
        means.entry((s.variant, s.metric.index())).or_default().push((s.epsilon, s.mean));
    }
    SweepResult { means }
}

fn mechanism_ordering(s: &SweepResult) -> Outcome {
    let at2 = |v: Variant, m: u32| s.means[&(v, m)].iter().find(|(e, _)| *e == 2.0).unwrap().1;
    let mut ok = true;
    let mut parts = Vec::new();
    for m in Metric::ALL {
        let (jc, bs, ams) = (
            at2(Variant::JointClipping, m.index()),
            at2(Variant::BudgetSplit, m.index()),
            at2(Variant::ActivityMetricScaling, m.index()),
        );
        ok &= ams < jc && ams < bs;
        parts.push(format!("{}: ams={ams:.3} jc={jc:.3} bs={bs:.3}", m.name()));
    }
    outcome(ok, parts.join("; "))
}

fn epsilon_monotonicity(s: &SweepResult) -> Outcome {
    let mut worst = 0;
    let mut total = 0;
    for series in s.means.values() {
        let inversions = series.windows(2).filter(|w| w[1].1 > w[0].1).count();
        worst = worst.max(inversions);
        total += inversions;
    }
    outcome(worst <= 1, format!("{} series, {total} adjacent inversions, at most {worst} in one series", s.means.len()))
}

// 7 -------------------------------------------------------------------------

fn variant_degeneracies() -> Outcome {
    let cc = SyntheticCorpusConfig { num_devices: 500, seed: 7, ..Default::default() };
    let schema = cc.schema();
    let corpus = generate_corpus(&cc).unwrap();
    let devices = window_histograms(schema, &corpus, &cc.windows()[0]);
    let clip = 500.0;
    let jc = MechanismConfig::joint_clipping(1.5, clip);
    let ams = MechanismConfig::activity_metric_scaling(1.5, clip, ScaleTable::identity(schema));

    // A single-slice domain: one activity, one metric.
    let one = Schema::new(1, 1, cc.num_regions).unwrap();
    let single: Vec<IndexedHistogram> = devices
        .iter()
        .map(|h| {
            let mut s = IndexedHistogram::new(one);
            for (idx, v) in h.iter().filter(|(i, _)| i.metric == Metric::Distance.index()) {
                s.add_at(HistIndex::new(0, 0, idx.region, idx.direction), *v).unwrap();
            }
            s
        })
        .collect();
    let jc1 = MechanismConfig::joint_clipping(1.5, clip);
    let bs1 = MechanismConfig::budget_split(1.5, vec![clip]);

    let mut differing = 0;
    for seed in 0..20 {
        let a = dp::run_mechanism(&jc, schema, &devices, "W", seed).unwrap().histogram;
        let b = dp::run_mechanism(&ams, schema, &devices, "W", seed).unwrap().histogram;
        let c = dp::run_mechanism(&jc1, one, &single, "W", seed).unwrap().histogram;
        let d = dp::run_mechanism(&bs1, one, &single, "W", seed).unwrap().histogram;
        differing += usize::from(a.encode() != b.encode()) + usize::from(c.encode() != d.encode());
    }
    outcome(differing == 0, format!("20 seeds x 2 pairs, {differing} differing releases"))
}

// 8 -------------------------------------------------------------------------

fn merge_tree_invariance() -> Outcome {
    let cfg = AggCoreConfig {
        key_columns: vec!["region".into(), "privacy_time_unit".into()],
        value_columns: vec!["a".into(), "b".into()],
        min_contributions: 1,
    };
    let rng = CounterRng::new(8, "updates");
    let updates: Vec<Payload> = (0..10_000u64)
        .map(|u| {
            let rows = 1 + rng.u64_at(u, 0) % 20;
            Payload::new(
                (0..rows)
                    .map(|r| {
                        let key = encode_key(&[format!("r{}", rng.u64_at(u, 1 + 3 * r) % 300), "W20".to_string()]);
                        let x = (rng.uniform_at(u, 2 + 3 * r) - 0.3) * 1e3;
                        let y = rng.uniform_at(u, 3 + 3 * r) * 1e-3;
                        (key, vec![x, y])
                    })
                    .collect(),
            )
        })
        .collect();
    let mut reference = AggregationCore::init(cfg.clone()).unwrap();
    for p in &updates {
        reference.accumulate(p).unwrap();
    }
    let want = reference.serialize_state();
    let mut differing = 0;
    for tree in 0..20u64 {
        let shuffle = CounterRng::new(tree, "merge-tree");
        let mut cores: Vec<AggregationCore> = updates
            .iter()
            .map(|p| {
                let mut c = AggregationCore::init(cfg.clone()).unwrap();
                c.accumulate(p).unwrap();
                c
            })
            .collect();
        let mut step = 0u64;
        while cores.len() > 1 {
            let i = (shuffle.u64_at(0, step) % cores.len() as u64) as usize;
            let a = cores.swap_remove(i);
            let j = (shuffle.u64_at(1, step) % cores.len() as u64) as usize;
            let b = cores.swap_remove(j);
            cores.push(if step.is_multiple_of(2) { a.merge(b).unwrap() } else { b.merge(a).unwrap() });
            step += 1;
        }
        let got = cores.pop().unwrap();
        if got.serialize_state() != want || got.contribution_count() != 10_000 {
            differing += 1;
        }
    }
    outcome(differing == 0, format!("10000 updates, 20 random merge trees, {differing} differ from the sequential core"))
}

// 9 -------------------------------------------------------------------------

type Rows = Vec<(String, Vec<f64>)>;

struct Outstanding {
    update: ClientUpdate,
    window: TimeWindow,
    device: usize,
    rows: Rows,
    /// Simulated client delay: the upload is not attempted before this.
    not_before: Timestamp,
}

fn exactly_once_fuzz() -> Outcome {
    let cc = SyntheticCorpusConfig { num_devices: 300, num_regions: 8, seed: 9, ..Default::default() };
    let schema = cc.schema();
    let corpus = generate_corpus(&cc).unwrap();
    let grace = 12 * HOUR;
    let mut server = FederatedServer::new(ServerConfig { batch_size: 25, num_nodes: 3, ..ServerConfig::default() }, 9);
    let reg = server
        .register(workload_task(cc.start, 7, WindowAlignment::CivilDay, grace, 5), cc.start)
        .unwrap()
        .clone();
    let criteria = reg.criteria();
    let query = ephemera::client::CompiledQuery::compile("workload", &reg.spec.query, WindowAlignment::CivilDay).unwrap();
    let mech = MechanismConfig::joint_clipping(1.0, 1e4);
    let mut devices: Vec<DeviceState> = (0..corpus.len())
        .map(|d| DeviceState::new(d as u64, AvailabilityProfile::always_on(Tier::LowEnd), WindowAlignment::CivilDay, 28 * DAY, cc.start))
        .collect();
    let mut cursor = vec![0usize; corpus.len()];
    let rng = CounterRng::new(9, "fuzz");

    let mut now = cc.start;
    let mut outstanding: Vec<Outstanding> = Vec::new();
    let mut acked: Vec<(SessionId, u64, String, Rows)> = Vec::new();
    let mut acked_updates: Vec<ClientUpdate> = Vec::new();
    let mut released: BTreeMap<SessionId, Timestamp> = BTreeMap::new();
    let mut raw: BTreeMap<String, ReleaseOutcome> = BTreeMap::new();
    let (mut replay_accepted, mut post_release, mut late_accepted, mut late_rejected) = (0, 0, 0, 0);
    let mut events = 0u64;
    let horizon = criteria.last_window_end.plus(grace + 2 * HOUR);
    while events < 10_000 || now <= horizon {
        let roll = rng.uniform_at(0, events);
        let pick = rng.u64_at(1, events);
        if roll < 0.02 || events >= 10_000 {
            now = now.plus(HOUR);
            for (d, dev) in devices.iter_mut().enumerate() {
                dev.advance_watermarks(now).unwrap();
                while cursor[d] < corpus[d].len() && corpus[d][cursor[d]].event_time <= now {
                    dev.record_event(corpus[d][cursor[d]].clone()).unwrap();
                    cursor[d] += 1;
                }
            }
            server.tick(now);
            if pick.is_multiple_of(5) {
                server.rollup(now);
            }
            if pick.is_multiple_of(7) {
                server.crash_node((pick % 3) as usize, now);
            }
            for rel in server.trigger_release(now) {
                released.insert(rel.session, now);
                raw.insert(rel.window.id.clone(), rel.outcome);
            }
        } else if roll < 0.40 {
            let d = (pick % devices.len() as u64) as usize;
            for a in server.check_in(&devices[d], now).unwrap() {
                if outstanding.iter().any(|o| o.device == d && o.window.id == a.window.id) {
                    continue;
                }
                let rows = devices[d].build_update(&query, schema, &a.window, &mech).unwrap();
                let update = ClientUpdate {
                    query_id: a.query_id,
                    window_id: a.window.id.clone(),
                    payload: Payload::new(rows.clone()).encode(),
                    token: a.token,
                };
                let delay = if pick.is_multiple_of(4) { (pick >> 8) as i64 % (48 * HOUR) } else { 0 };
                outstanding.push(Outstanding { update, window: a.window, device: d, rows, not_before: now.plus(delay) });
            }
        } else if roll < 0.85 && outstanding.iter().any(|o| o.not_before <= now) {
            // Upload now, possibly long after the assignment (late).
            let ready: Vec<usize> = (0..outstanding.len()).filter(|&i| outstanding[i].not_before <= now).collect();
            let o = outstanding.swap_remove(ready[(pick % ready.len() as u64) as usize]);
            let deadline = o.window.end.plus(grace);
            match server.ingest_upload(&o.update, now) {
                Ok(ack) => {
                    if now > deadline {
                        late_accepted += 1;
                    }
                    if released.contains_key(&ack.session) {
                        post_release += 1;
                    }
                    devices[o.device].on_ack(&criteria, &o.window);
                    acked.push((ack.session, ack.epoch, o.window.id.clone(), o.rows));
                    acked_updates.push(o.update);
                }
                Err(IngestError::SessionClosed) => late_rejected += 1,
                Err(e) => panic!("unexpected rejection {e:?}"),
            }
        } else if !acked_updates.is_empty() {
            let u = &acked_updates[(pick % acked_updates.len() as u64) as usize];
            if server.ingest_upload(u, now).is_ok() {
                replay_accepted += 1;
            }
        }
        events += 1;
    }

    let lost: BTreeSet<(SessionId, u64)> = server.lost_epochs().iter().copied().collect();
    let mut mismatched = 0;
    let mut released_windows = 0;
    for (window, out) in &raw {
        let mut oracle: BTreeMap<String, Vec<ExactSum>> = BTreeMap::new();
        let mut count = 0u64;
        for (s, e, w, rows) in &acked {
            if w != window || lost.contains(&(*s, *e)) {
                continue;
            }
            count += 1;
            for (k, vs) in rows {
                let slot = oracle.entry(k.clone()).or_insert_with(|| vec![ExactSum::ZERO; vs.len()]);
                for (x, v) in slot.iter_mut().zip(vs) {
                    x.add_f64(*v).unwrap();
                }
            }
        }
        match out {
            ReleaseOutcome::Ready { sums } => {
                released_windows += 1;
                if sums.sums != oracle || sums.contribution_count != count {
                    mismatched += 1;
                }
            }
            ReleaseOutcome::InsufficientContributions => {
                if count >= 5 {
                    mismatched += 1;
                }
            }
        }
    }
    let ok = mismatched == 0 && replay_accepted == 0 && post_release == 0 && late_accepted == 0 && released_windows > 0;
    outcome(
        ok,
        format!(
            "{events} events, {} acked, {} lost epochs, {released_windows}/{} windows released; mismatches={mismatched} \
             late rejected={late_rejected}; replays accepted={replay_accepted} post-release ingestions={post_release} late accepted={late_accepted}",
            acked.len(),
            lost.len(),
            raw.len()
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn write_query(dir: &Path) {
    std::fs::write(dir.join("workload.sql"), WORKLOAD).unwrap();
}

fn small_config(dir: &Path, devices: usize, extra: &str) -> ExperimentConfig {
    write_query(dir);
    let text = format!(
        "seed = 3\n[corpus]\nnum_devices = {devices}\nnum_regions = 6\nnum_weeks = 1\n\
         [fleet]\npolicies = [\"idle\"]\n\
         [task]\nquery_path = \"workload.sql\"\napprover = \"b\"\nmin_contributions = 1\n{extra}"
    );
    ExperimentConfig::from_toml(&text, dir).unwrap()
}

fn thresholds() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 40, "");
    cfg.task.min_contributions = 1000;
    let out = dir.path().join("out");
    experiment::cmd_run(&cfg, &out, &Options { jobs: 1, variants: None }).unwrap();
    let files: Vec<std::path::PathBuf> =
        std::fs::read_dir(out.join("releases")).unwrap().map(|e| e.unwrap().path()).collect();
    let marker_ok = !files.is_empty()
        && files.iter().all(|p| {
            p.extension().is_some_and(|e| e == "suppressed")
                && std::fs::read_to_string(p).is_ok_and(|s| s == SUPPRESSED_MARKER)
        });

    let cc = SyntheticCorpusConfig { num_devices: 3000, seed: 10, ..Default::default() };
    let schema = cc.schema();
    let corpus = generate_corpus(&cc).unwrap();
    let devices = window_histograms(schema, &corpus, &cc.windows()[0]);
    let cal = calibrate(schema, &devices, 0.95).unwrap();
    let tau = 25.0;
    let mut below = 0;
    let mut scanned = 0;
    let mut suppressed = 0;
    for seed in 0..100u64 {
        let mut mech = cal.mechanism(Variant::ActivityMetricScaling, 1.0);
        mech.tau = tau;
        let rel = dp::run_mechanism(&mech, schema, &devices, "W20", seed).unwrap();
        suppressed += rel.suppressed;
        let path = dir.path().join(format!("release-{seed}.csv"));
        experiment::write_release_csv(&path, &rel.histogram).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        for row in reader.records() {
            let v: f64 = row.unwrap()[4].parse().unwrap();
            scanned += 1;
            if v < tau {
                below += 1;
            }
        }
    }
    outcome(
        marker_ok && below == 0 && scanned > 0,
        format!(
            "suppression marker {}; 100 releases, {scanned} rows scanned, {suppressed} partitions thresholded, {below} below tau",
            if marker_ok { "present" } else { "MISSING" }
        ),
    )
}

// 11 ------------------------------------------------------------------------

fn reach_ordering() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for (alignment, label, windows) in [("week", "weekly", 1), ("day", "daily", 7)] {
        let cfg = small_config(
            dir.path(),
            10_000,
            &format!("alignment = \"{alignment}\"\nnum_windows = {windows}\ngrace_hours = 48\n"),
        );
        let mut cfg = cfg;
        cfg.corpus.num_regions = 50;
        cfg.fleet.policies = vec!["idle".into(), "idle+wifi+charging".into()];
        let report = experiment::simulate_policies(&cfg, &Options { jobs: 2, variants: None }).unwrap();
        let h = |policy: &str| -> BTreeMap<(String, String), f64> {
            report
                .reach
                .iter()
                .filter(|r| r.policy == policy)
                .map(|r| ((r.country_stratum.clone(), r.window.clone()), r.h))
                .collect()
        };
        let (relaxed, strict) = (h("idle"), h("idle+wifi+charging"));
        let violations = relaxed.iter().filter(|(k, v)| strict.get(*k).is_some_and(|s| s > *v)).count();
        ok &= violations == 0 && !relaxed.is_empty();
        let mean = |m: &BTreeMap<(String, String), f64>| {
            let all: Vec<f64> = m.iter().filter(|((s, _), _)| s == "all").map(|(_, v)| *v).collect();
            all.iter().sum::<f64>() / all.len() as f64
        };
        parts.push(format!(
            "{label}: H(idle)={:.3} H(idle+wifi+charging)={:.3}, {violations} violations",
            mean(&relaxed),
            mean(&strict)
        ));
    }
    outcome(ok, parts.join("; "))
}

// 12 ------------------------------------------------------------------------

fn query_gate() -> Outcome {
    let groupable = ["activity", "region", "direction"];
    let summable = ["trip_count", "trip_distance", "trip_duration"];
    let mut cases: Vec<(String, &[&str])> = Vec::new();
    for i in 0..13 {
        let (g, s) = (groupable[i % 3], summable[(i / 3) % 3]);
        // Server statement without GROUP BY.
        cases.push((
            format!(
                "SELECT {g}, privacy_time_unit, SUM({s}) AS v FROM DeviceDataStream GROUP BY {g}, privacy_time_unit;\n\
                 SELECT {g}, privacy_time_unit, SUM(v) FROM UserResults;"
            ),
            &["NonAggregatingQuery"],
        ));
    }
    let aggs = ["AVG", "MAX", "MIN", "COUNT"];
    for i in 0..13 {
        let (g, s, a) = (groupable[i % 3], summable[i % 3], aggs[i % 4]);
        let (client_agg, server_agg) = if i % 2 == 0 { (a, "SUM") } else { ("SUM", a) };
        cases.push((
            format!(
                "SELECT {g}, privacy_time_unit, {client_agg}({s}) AS v FROM DeviceDataStream GROUP BY {g}, privacy_time_unit;\n\
                 SELECT {g}, privacy_time_unit, {server_agg}(v) FROM UserResults GROUP BY {g}, privacy_time_unit;"
            ),
            &["UnsupportedAggregate"],
        ));
    }
    for i in 0..12 {
        let (g, s) = (groupable[i % 3], summable[(i + 1) % 3]);
        cases.push((
            format!(
                "SELECT {g}, SUM({s}) AS v FROM DeviceDataStream GROUP BY {g};\n\
                 SELECT {g}, SUM(v) FROM UserResults GROUP BY {g};"
            ),
            &["MissingPrivacyTimeUnit"],
        ));
    }
    let unknown = ["planet", "altitude", "speed", "weather"];
    for i in 0..12 {
        let (g, s, u) = (groupable[i % 3], summable[i % 3], unknown[i % 4]);
        let text = if i % 2 == 0 {
            format!(
                "SELECT {g}, {u}, privacy_time_unit, SUM({s}) AS v FROM DeviceDataStream GROUP BY {g}, {u}, privacy_time_unit;\n\
                 SELECT {g}, privacy_time_unit, SUM(v) FROM UserResults GROUP BY {g}, privacy_time_unit;"
            )
        } else {
            format!(
                "SELECT {g}, privacy_time_unit, SUM(trip_{u}) AS v FROM DeviceDataStream GROUP BY {g}, privacy_time_unit;\n\
                 SELECT {g}, privacy_time_unit, SUM(v) FROM UserResults GROUP BY {g}, privacy_time_unit;"
            )
        };
        cases.push((text, &["UnknownColumn"]));
    }
    let mut rejected = 0;
    let mut wrong_class = Vec::new();
    for (text, expected) in &cases {
        match parse_for_device_stream(text) {
            Ok(_) => wrong_class.push(format!("accepted: {text}")),
            Err(d) => {
                rejected += 1;
                if !d.classes().iter().any(|c| expected.contains(c)) {
                    wrong_class.push(format!("{:?} for {text}", d.classes()));
                }
            }
        }
    }
    let example_ok = parse_for_device_stream(EXAMPLE_QUERY).is_ok();
    outcome(
        example_ok && wrong_class.is_empty() && rejected == cases.len() && cases.len() == 50,
        format!(
            "{rejected}/{} malformed queries rejected, {} with an unexpected class{}; example query {}",
            cases.len(),
            wrong_class.len(),
            wrong_class.first().map(|w| format!(" (first: {w})")).unwrap_or_default(),
            if example_ok { "accepted" } else { "REJECTED" }
        ),
    )
}

// 13 ------------------------------------------------------------------------

fn throughput() -> Outcome {
    let cfg = AggCoreConfig {
        key_columns: vec!["activity".into(), "region".into(), "direction".into(), "privacy_time_unit".into()],
        value_columns: vec!["n".into(), "dist".into(), "dur".into()],
        min_contributions: 1,
    };
    let rng = CounterRng::new(13, "throughput");
    let payloads: Vec<Vec<u8>> = (0..20_000u64)
        .map(|u| {
            let rows = 1 + rng.u64_at(u, 0) % 100;
            Payload::new(
                (0..rows)
                    .map(|r| {
                        let k = rng.u64_at(u, r + 1);
                        let key = encode_key(&[
                            (k % 9).to_string(),
                            ((k >> 8) % 50).to_string(),
                            ((k >> 16) % 3).to_string(),
                            "2024-W20".to_string(),
                        ]);
                        (key, vec![1.0, (k % 1000) as f64 / 8.0, (k % 7200) as f64])
                    })
                    .collect(),
            )
            .encode()
        })
        .collect();
    let mut core = AggregationCore::init(cfg).unwrap();
    let start = Instant::now();
    for p in &payloads {
        core.accumulate(&Payload::decode(p, 3).unwrap()).unwrap();
    }
    let rate = payloads.len() as f64 / start.elapsed().as_secs_f64();
    outcome(rate >= 5000.0, format!("{rate:.0} updates/s (decode + accumulate, 1-100 rows each, one shard)"))
}

// 14 ------------------------------------------------------------------------

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 800, "grace_hours = 24\n");
    cfg.corpus.num_weeks = 2;
    cfg.fleet.policies = vec!["idle".into(), "idle+wifi+charging".into()];
    cfg.fleet.crash_every_hours = Some(37);
    cfg.fleet.batch_size = 50;
    cfg.mechanism.tau = 5.0;
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    experiment::cmd_run(&cfg, &a, &Options { jobs: 1, variants: None }).unwrap();
    experiment::cmd_run(&cfg, &b, &Options { jobs: 2, variants: None }).unwrap();
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    let bytes: usize = ta.values().map(Vec::len).sum();
    outcome(ta == tb && ta.len() >= 6, format!("{} files, {bytes} bytes, trees {}", ta.len(), if ta == tb { "identical" } else { "DIFFER" }))
}

// ---------------------------------------------------------------------------

fn main() {
    struct Criterion {
        id: u32,
        name: &'static str,
        gating: bool,
        limit: Option<Duration>,
    }
    let run = |c: Criterion, f: &mut dyn FnMut() -> Outcome, failures: &mut Vec<u32>| {
        let start = Instant::now();
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(&mut *f));
        let elapsed = start.elapsed();
        let mut o = caught.unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if let Some(limit) = c.limit {
            if elapsed > limit {
                o.pass = false;
                o.detail.push_str(&format!("; exceeded {limit:?}"));
            }
        }
        let status = match (o.pass, c.gating) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "INFO",
        };
        println!("criterion {:>2} {status} {:<36} {} [{:.1}s]", c.id, c.name, o.detail, elapsed.as_secs_f64());
        if !o.pass && c.gating {
            failures.push(c.id);
        }
    };
    let secs = |s| Some(Duration::from_secs(s));
    let mut failures = Vec::new();
    run(Criterion { id: 1, name: "no-privacy oracle equivalence", gating: true, limit: secs(30) }, &mut no_privacy_oracle, &mut failures);
    run(Criterion { id: 2, name: "clipping sensitivity", gating: true, limit: secs(60) }, &mut clipping_sensitivity, &mut failures);
    run(Criterion { id: 3, name: "DP ratio smoke test", gating: true, limit: secs(120) }, &mut dp_ratio_smoke, &mut failures);
    run(Criterion { id: 4, name: "Laplace moments", gating: true, limit: None }, &mut laplace_moments, &mut failures);
    let sweep_start = Instant::now();
    let sweep = std::panic::catch_unwind(default_sweep).ok();
    let sweep_time = sweep_start.elapsed();
    let sweep = &sweep;
    let from_sweep = |f: fn(&SweepResult) -> Outcome| {
        move || match sweep {
            Some(s) => f(s),
            None => outcome(false, "sweep panicked"),
        }
    };
    let mut five = from_sweep(mechanism_ordering);
    let limit5 = Duration::from_secs(600).checked_sub(sweep_time);
    run(Criterion { id: 5, name: "mechanism ordering at epsilon=2", gating: true, limit: limit5.or(Some(Duration::ZERO)) }, &mut five, &mut failures);
    let mut six = from_sweep(epsilon_monotonicity);
    run(Criterion { id: 6, name: "epsilon monotonicity", gating: true, limit: None }, &mut six, &mut failures);
    run(Criterion { id: 7, name: "variant degeneracies", gating: true, limit: None }, &mut variant_degeneracies, &mut failures);
    run(Criterion { id: 8, name: "merge-tree invariance", gating: true, limit: None }, &mut merge_tree_invariance, &mut failures);
    run(Criterion { id: 9, name: "exactly-once and lateness", gating: true, limit: None }, &mut exactly_once_fuzz, &mut failures);
    run(Criterion { id: 10, name: "thresholds", gating: true, limit: None }, &mut thresholds, &mut failures);
    run(Criterion { id: 11, name: "reach ordering", gating: true, limit: None }, &mut reach_ordering, &mut failures);
    run(Criterion { id: 12, name: "query gate", gating: true, limit: None }, &mut query_gate, &mut failures);
    run(Criterion { id: 13, name: "throughput (informational)", gating: false, limit: None }, &mut throughput, &mut failures);
    run(Criterion { id: 14, name: "determinism", gating: true, limit: None }, &mut determinism, &mut failures);
    println!("sweep for criteria 5 and 6 took {:.1}s", sweep_time.as_secs_f64());
    if failures.is_empty() {
        println!("acceptance: all gating criteria passed");
    } else {
        println!("acceptance: FAILED criteria {failures:?}");
        std::process::exit(1);
    }
}
