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

//! Discrete-event simulation of one deployment: a fleet of devices checking
//! in on a fixed tick, the federated server, and the DP release of every
//! window. Fully single-threaded and seeded.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::aggcore::{GroupedSums, Payload};
use crate::client::{
    AvailabilityProfile, ClientError, CompiledQuery, ConstraintPolicy, DeviceState, EligibilityCriteria, HistogramBinding,
    Tier,
};
use crate::dp::{self, DpError, MechanismConfig, NoisedRelease};
use crate::exact::ExactSum;
use crate::histogram::IndexedHistogram;
use crate::model::{HistIndex, Schema, TripRecord};
use crate::rng::CounterRng;
use crate::server::{
    Assignment, ClientUpdate, EventLog, FederatedServer, IngestError, ReleaseOutcome, ServerConfig, ServerError, SessionId,
    TaskRequest,
};
use crate::time::{TimeWindow, Timestamp, HOUR};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("invalid simulation config: {0}")]
    Config(String),
}

/// Knobs of the simulated deployment that are not part of the task.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub schema: Schema,
    pub policy: ConstraintPolicy,
    pub server: ServerConfig,
    /// Simulated seconds per tick.
    pub tick_s: i64,
    /// How long a device keeps trips in its event cache.
    pub device_ttl_s: i64,
    /// Roll level-0 partials up every this many ticks.
    pub rollup_every_ticks: u64,
    /// Crash one random node every this many ticks.
    pub crash_every_ticks: Option<u64>,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(schema: Schema, policy: ConstraintPolicy, seed: u64) -> Self {
        SimConfig {
            schema,
            policy,
            server: ServerConfig::default(),
            tick_s: HOUR,
            device_ttl_s: 28 * crate::time::DAY,
            rollup_every_ticks: 24,
            crash_every_ticks: None,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.tick_s <= 0 {
            return bad("tick must be positive");
        }
        if self.device_ttl_s <= 0 {
            return bad("device ttl must be positive");
        }
        if self.rollup_every_ticks == 0 || self.crash_every_ticks == Some(0) {
            return bad("tick intervals must be positive");
        }
        if self.server.num_nodes == 0 || self.server.batch_size == 0 {
            return bad("server needs at least one node and a positive batch size");
        }
        Ok(())
    }
}

/// Tier of each device: high-end with probability `high_end_share`.
pub fn assign_profiles(
    num_devices: usize,
    high_end_share: f64,
    high_end: &AvailabilityProfile,
    low_end: &AvailabilityProfile,
    seed: u64,
) -> Vec<AvailabilityProfile> {
    let rng = CounterRng::new(seed, "fleet");
    (0..num_devices as u64)
        .map(|d| if rng.uniform_at(d, 0) < high_end_share { high_end.clone() } else { low_end.clone() })
        .collect()
}

/// What the analyst receives for one window.
#[derive(Clone, Debug, PartialEq)]
pub enum WindowOutput {
    Released(NoisedRelease),
    /// Fewer contributions than the release threshold.
    InsufficientContributions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowResult {
    pub window: TimeWindow,
    pub output: WindowOutput,
}

/// An upload the server acknowledged, kept for the replay oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct AckedUpload {
    pub session: SessionId,
    pub epoch: u64,
    pub window_id: String,
    pub time: Timestamp,
    pub rows: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReachSets {
    /// Devices with data in the window.
    pub active: BTreeSet<u64>,
    /// Devices that received an assignment for the window.
    pub downloaded: BTreeSet<u64>,
    /// Devices whose upload the server accepted.
    pub uploaded: BTreeSet<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimCounters {
    pub check_ins: u64,
    pub uploads_attempted: u64,
    pub uploads_lost_in_transit: u64,
    pub acks_lost: u64,
    pub replays_rejected: u64,
    pub late_rejected: u64,
    pub other_rejected: u64,
}

pub struct SimOutcome {
    pub windows: Vec<WindowResult>,
    pub log: EventLog,
    /// Reach sets per window id.
    pub reach: BTreeMap<String, ReachSets>,
    pub tiers: Vec<Tier>,
    pub trace: Vec<AckedUpload>,
    pub lost_epochs: Vec<(SessionId, u64)>,
    /// Raw final aggregates, kept in memory for audits. Never written out.
    pub raw_aggregates: BTreeMap<String, GroupedSums>,
    pub counters: SimCounters,
}

impl SimOutcome {
    /// Sum of the acked uploads of `window_id` that were not lost, per key.
    pub fn replay_oracle(&self, window_id: &str) -> BTreeMap<String, Vec<ExactSum>> {
        let lost: BTreeSet<(SessionId, u64)> = self.lost_epochs.iter().copied().collect();
        let mut out: BTreeMap<String, Vec<ExactSum>> = BTreeMap::new();
        for u in self.trace.iter().filter(|u| u.window_id == window_id && !lost.contains(&(u.session, u.epoch))) {
            for (k, vs) in &u.rows {
                let slot = out.entry(k.clone()).or_insert_with(|| vec![ExactSum::ZERO; vs.len()]);
                for (s, v) in slot.iter_mut().zip(vs) {
                    s.add_f64(*v).expect("bounded inputs");
                }
            }
        }
        out
    }
}

/// Whether `idx` is a coordinate the query can produce.
pub fn in_query_domain(binding: &HistogramBinding, idx: &HistIndex) -> bool {
    (binding.activity_key.is_some() || idx.activity == 0)
        && (binding.region_key.is_some() || idx.region == 0)
        && (binding.direction_key.is_some() || idx.direction == 0)
        && binding.value_metrics.contains(&idx.metric)
}

struct Pending {
    window: TimeWindow,
    update: ClientUpdate,
    rows: Vec<(String, Vec<f64>)>,
}

enum UploadResult {
    Committed,
    Retry,
    Dropped,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    server: FederatedServer,
    criteria: EligibilityCriteria,
    uploads_rng: CounterRng,
    trace: Vec<AckedUpload>,
    reach: BTreeMap<String, ReachSets>,
    counters: SimCounters,
}

impl Sim<'_> {
    fn upload(&mut self, dev: &mut DeviceState, p: &Pending, now: Timestamp, draw: u64) -> UploadResult {
        self.counters.uploads_attempted += 1;
        let id = dev.device_id;
        if self.uploads_rng.uniform_at(id, 2 * draw) < dev.profile.p_upload_failure {
            self.counters.uploads_lost_in_transit += 1;
            return UploadResult::Retry;
        }
        match self.server.ingest_upload(&p.update, now) {
            Ok(ack) => {
                self.trace.push(AckedUpload {
                    session: ack.session,
                    epoch: ack.epoch,
                    window_id: p.window.id.clone(),
                    time: now,
                    rows: p.rows.clone(),
                });
                self.reach.entry(p.window.id.clone()).or_default().uploaded.insert(id);
                if self.uploads_rng.uniform_at(id, 2 * draw + 1) < dev.profile.p_ack_loss {
                    self.counters.acks_lost += 1;
                    return UploadResult::Retry;
                }
                dev.on_ack(&self.criteria, &p.window);
                UploadResult::Committed
            }
            // The token was consumed by an earlier attempt whose ack was lost.
            Err(IngestError::TokenReplay) => {
                self.counters.replays_rejected += 1;
                dev.on_ack(&self.criteria, &p.window);
                UploadResult::Committed
            }
            Err(IngestError::SessionClosed) => {
                self.counters.late_rejected += 1;
                UploadResult::Dropped
            }
            Err(_) => {
                self.counters.other_rejected += 1;
                UploadResult::Dropped
            }
        }
    }
}

/// Runs the deployment until every window of the task is released.
///
/// `corpus[d]` holds device d's trips in time order; each trip reaches the
/// device when the clock passes its event time. `registered_at` is the
/// simulation start and the task registration time.
pub fn simulate(
    cfg: &SimConfig,
    corpus: &[Vec<TripRecord>],
    profiles: &[AvailabilityProfile],
    task: TaskRequest,
    mechanism: &MechanismConfig,
    registered_at: Timestamp,
) -> Result<SimOutcome, SimError> {
    cfg.validate()?;
    if profiles.len() != corpus.len() {
        return Err(SimError::Config(format!("{} profiles for {} devices", profiles.len(), corpus.len())));
    }
    for p in profiles {
        p.validate().map_err(SimError::Config)?;
    }
    mechanism.validate(&cfg.schema)?;

    let mut server = FederatedServer::new(cfg.server.clone(), cfg.seed);
    let reg = server.register(task, registered_at)?.clone();
    let criteria = reg.criteria();
    let alignment = reg.spec.window_alignment;
    let query = CompiledQuery::compile(&reg.query_id, &reg.spec.query, alignment)?;

    let mut reach: BTreeMap<String, ReachSets> = BTreeMap::new();
    for w in &reg.windows {
        let active = corpus
            .iter()
            .enumerate()
            .filter(|(_, recs)| recs.iter().any(|r| w.contains(r.event_time)))
            .map(|(d, _)| d as u64)
            .collect();
        reach.insert(w.id.clone(), ReachSets { active, ..ReachSets::default() });
    }

    let mut devices: Vec<DeviceState> = profiles
        .iter()
        .enumerate()
        .map(|(d, p)| DeviceState::new(d as u64, p.clone(), alignment, cfg.device_ttl_s, registered_at))
        .collect();
    let mut cursors = vec![0usize; corpus.len()];
    let mut pending: Vec<Vec<Pending>> = (0..corpus.len()).map(|_| Vec::new()).collect();

    let conditions_rng = CounterRng::new(cfg.seed, "conditions");
    let crash_rng = CounterRng::new(cfg.seed, "crashes");
    let mut sim = Sim {
        cfg,
        server,
        criteria: criteria.clone(),
        uploads_rng: CounterRng::new(cfg.seed, "uploads"),
        trace: Vec::new(),
        reach,
        counters: SimCounters::default(),
    };

    let horizon = criteria.last_window_end.plus(criteria.grace_period_s + 2 * cfg.tick_s);
    let mut windows = Vec::new();
    let mut raw_aggregates = BTreeMap::new();
    let mut tick: u64 = 0;
    let mut now = registered_at;
    while now <= horizon && windows.len() < reg.windows.len() {
        for d in 0..devices.len() {
            let dev = &mut devices[d];
            dev.advance_watermarks(now)?;
            let recs = &corpus[d];
            while cursors[d] < recs.len() && recs[cursors[d]].event_time <= now {
                dev.record_event(recs[cursors[d]].clone())?;
                cursors[d] += 1;
            }
            let cond = dev.profile.conditions(&conditions_rng, d as u64, tick);
            if !cond.wants_check_in || !sim.cfg.policy.allows(&cond) {
                continue;
            }
            // Draw counters: 64 upload attempts per device-tick are plenty.
            let mut draw = tick * 64;
            let retries = std::mem::take(&mut pending[d]);
            for p in retries {
                if let UploadResult::Retry = sim.upload(dev, &p, now, draw) {
                    pending[d].push(p);
                }
                draw += 1;
            }
            if dev.check_in_due(sim.cfg.server.min_check_in_spacing_s) {
                dev.mark_check_in();
                sim.counters.check_ins += 1;
                let assignments: Vec<Assignment> = sim.server.check_in(dev, now)?;
                for a in assignments {
                    if pending[d].iter().any(|p| p.window.id == a.window.id) {
                        continue;
                    }
                    sim.reach.entry(a.window.id.clone()).or_default().downloaded.insert(d as u64);
                    let rows = dev.build_update(&query, sim.cfg.schema, &a.window, mechanism)?;
                    let update = ClientUpdate {
                        query_id: a.query_id.clone(),
                        window_id: a.window.id.clone(),
                        payload: Payload::new(rows.clone()).encode(),
                        token: a.token,
                    };
                    let p = Pending { window: a.window, update, rows };
                    if let UploadResult::Retry = sim.upload(dev, &p, now, draw) {
                        pending[d].push(p);
                    }
                    draw += 1;
                }
            }
            dev.settle_high_watermark(&criteria);
            dev.gc_memo();
        }

        sim.server.tick(now);
        if tick > 0 && tick.is_multiple_of(sim.cfg.rollup_every_ticks) {
            sim.server.rollup(now);
        }
        if let Some(every) = sim.cfg.crash_every_ticks {
            if tick > 0 && tick.is_multiple_of(every) {
                let node = (crash_rng.u64_at(0, tick) % sim.cfg.server.num_nodes as u64) as usize;
                sim.server.crash_node(node, now);
            }
        }
        for rel in sim.server.trigger_release(now) {
            let output = match rel.outcome {
                ReleaseOutcome::Ready { sums } => {
                    let h = query.binding.rows_to_histogram(cfg.schema, &sums.rows())?;
                    raw_aggregates.insert(rel.window.id.clone(), sums);
                    let mut released = dp::release(mechanism, &h, &rel.window.id, cfg.seed)?;
                    released.histogram.retain(|idx, _| in_query_domain(&query.binding, idx));
                    WindowOutput::Released(released)
                }
                ReleaseOutcome::InsufficientContributions => WindowOutput::InsufficientContributions,
            };
            sim.server.close(rel.session, now);
            windows.push(WindowResult { window: rel.window, output });
        }
        tick += 1;
        now = now.plus(cfg.tick_s);
    }
    windows.sort_by_key(|a| a.window.start);

    let lost_epochs = sim.server.lost_epochs().to_vec();
    Ok(SimOutcome {
        windows,
        log: std::mem::take(&mut sim.server.log),
        reach: sim.reach,
        tiers: profiles.iter().map(|p| p.tier).collect(),
        trace: sim.trace,
        lost_epochs,
        raw_aggregates,
        counters: sim.counters,
    })
}

/// Turns grouped sums back into a histogram of exact values.
pub fn sums_to_histogram(
    binding: &HistogramBinding,
    schema: Schema,
    sums: &BTreeMap<String, Vec<ExactSum>>,
) -> Result<IndexedHistogram, ClientError> {
    let rows: Vec<(String, Vec<f64>)> =
        sums.iter().map(|(k, vs)| (k.clone(), vs.iter().map(|v| v.to_f64()).collect())).collect();
    binding.rows_to_histogram(schema, &rows)
}
