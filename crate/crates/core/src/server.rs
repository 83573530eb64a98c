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

//! Federated server and aggregation service.
//!
//! Tasks are registered ahead of their first window. At check-in the server
//! hands each device its eligibility criteria, the device picks windows, and
//! the server returns one single-use token per window, bound to that
//! window's session. Sessions accumulate uploads into an in-memory shard
//! core; full shards are checkpointed as level-0 partials with a short TTL
//! and periodically rolled up into level-1 partials with a longer TTL. Once
//! `now > window.end + grace` the session is released: everything left is
//! merged and either handed on for noising or suppressed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggcore::{AggCoreConfig, AggError, AggregationCore, GroupedSums, Payload};
use crate::client::{DeviceState, EligibilityCriteria};
use crate::query::QuerySpec;
use crate::rng::CounterRng;
use crate::time::{consecutive_windows, round_down_window, TimeWindow, Timestamp, DAY};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ServerError {
    #[error("RetrospectiveQuery: first window starts at {start}, before registration time {now}")]
    RetrospectiveQuery { start: Timestamp, now: Timestamp },
    #[error("task {0} has no second approver")]
    MissingApprover(String),
    #[error("task {0} is already registered")]
    DuplicateTask(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Agg(#[from] AggError),
}

/// Why an upload was not accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum IngestError {
    #[error("InvalidToken")]
    InvalidToken,
    #[error("TokenReplay")]
    TokenReplay,
    #[error("SessionClosed")]
    SessionClosed,
    #[error("MalformedUpdate")]
    MalformedUpdate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AuthToken(pub u128);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

/// One device's focused update for one window. Carries no device identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub query_id: String,
    pub window_id: String,
    /// Encoded [`Payload`].
    pub payload: Vec<u8>,
    pub token: AuthToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EligibilityConfig {
    pub min_days_between_participation: u32,
    pub require_new_data: bool,
}

impl Default for EligibilityConfig {
    fn default() -> Self {
        EligibilityConfig { min_days_between_participation: 0, require_new_data: true }
    }
}

/// What an analyst submits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRequest {
    pub query_id: String,
    pub spec: QuerySpec,
    pub first_window_start: Timestamp,
    pub num_windows: usize,
    pub eligibility: EligibilityConfig,
    pub population: String,
    pub approver: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRegistration {
    pub query_id: String,
    pub spec: QuerySpec,
    pub windows: Vec<TimeWindow>,
    pub eligibility: EligibilityConfig,
    pub population: String,
    pub approver: String,
    pub active: bool,
}

impl TaskRegistration {
    pub fn criteria(&self) -> EligibilityCriteria {
        EligibilityCriteria {
            query_id: self.query_id.clone(),
            alignment: self.spec.window_alignment,
            grace_period_s: self.spec.grace_period_s,
            first_window_start: self.windows[0].start,
            last_window_end: self.windows.last().expect("at least one window").end,
            min_days_between_participation: self.eligibility.min_days_between_participation,
            require_new_data: self.eligibility.require_new_data,
        }
    }
}

/// Validates a request and fixes its windows.
pub fn register_task(req: TaskRequest, now: Timestamp) -> Result<TaskRegistration, ServerError> {
    let approver = match req.approver {
        Some(a) if !a.trim().is_empty() => a,
        _ => return Err(ServerError::MissingApprover(req.query_id)),
    };
    if req.num_windows == 0 {
        return Err(ServerError::InvalidTask("num_windows must be at least 1".into()));
    }
    if req.spec.grace_period_s < 0 {
        return Err(ServerError::InvalidTask("grace period must be non-negative".into()));
    }
    let first = round_down_window(req.first_window_start, req.spec.window_alignment);
    if first.start != req.first_window_start {
        return Err(ServerError::InvalidTask(format!(
            "first window start {} is not aligned to {}",
            req.first_window_start,
            req.spec.window_alignment.name()
        )));
    }
    if first.start < now {
        return Err(ServerError::RetrospectiveQuery { start: first.start, now });
    }
    req.spec.to_agg_config().validate()?;
    Ok(TaskRegistration {
        query_id: req.query_id,
        windows: consecutive_windows(first.start, req.spec.window_alignment, req.num_windows),
        spec: req.spec,
        eligibility: req.eligibility,
        population: req.population,
        approver,
        active: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Collecting,
    Grace,
    Released,
    Closed,
}

#[derive(Debug)]
pub struct AggregationSession {
    pub id: SessionId,
    pub query_id: String,
    pub window: TimeWindow,
    pub node: usize,
    shard: Option<AggregationCore>,
    /// Incremented every time the shard is checkpointed or lost.
    pub shard_epoch: u64,
    pub issued_tokens: u64,
    pub status: SessionStatus,
}

impl AggregationSession {
    fn live(&self) -> bool {
        matches!(self.status, SessionStatus::Collecting | SessionStatus::Grace)
    }

    pub fn shard_count(&self) -> u64 {
        self.shard.as_ref().map_or(0, AggregationCore::contribution_count)
    }
}

/// A checkpointed, partially aggregated state. `epochs` lists the shard
/// epochs folded into it so losses can be attributed.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAggregate {
    pub level: u32,
    pub session: SessionId,
    pub window_id: String,
    pub sums: GroupedSums,
    pub created_at: Timestamp,
    pub ttl_s: i64,
    pub epochs: Vec<u64>,
}

impl PartialAggregate {
    pub fn expired(&self, now: Timestamp) -> bool {
        self.created_at.plus(self.ttl_s) < now
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub num_nodes: usize,
    pub batch_size: u64,
    pub level0_ttl_s: i64,
    pub level1_ttl_s: i64,
    /// Gate on each level-0 shard report.
    pub level0_min_contributions: u64,
    /// Minimum spacing between a device's check-ins.
    pub min_check_in_spacing_s: i64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            num_nodes: 4,
            batch_size: 1000,
            level0_ttl_s: 3 * DAY,
            level1_ttl_s: 21 * DAY,
            level0_min_contributions: 1,
            min_check_in_spacing_s: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub query_id: String,
    pub window: TimeWindow,
    pub session: SessionId,
    pub token: AuthToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ack {
    pub session: SessionId,
    pub epoch: u64,
}

/// Outcome of a release trigger for one window.
#[derive(Clone, Debug, PartialEq)]
pub enum ReleaseOutcome {
    /// Raw final aggregate for the DP module. Never written as-is.
    Ready { sums: GroupedSums },
    /// Fewer contributions than required; nothing is released.
    InsufficientContributions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRelease {
    pub query_id: String,
    pub window: TimeWindow,
    pub session: SessionId,
    pub outcome: ReleaseOutcome,
}

/// A simulation event. Holds ids and counts only, never payloads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    TaskRegistered { query_id: String, windows: usize },
    SessionCreated { session: u64, query_id: String, window: String, node: usize },
    CheckIn { assignments: usize },
    UploadAck { session: u64, epoch: u64 },
    UploadReject { reason: IngestError },
    Checkpoint { session: u64, level: u32, contributions: u64 },
    Rollup { session: u64, partials: usize, contributions: u64 },
    PartialExpired { session: u64, level: u32, contributions: u64 },
    NodeCrash { node: usize, sessions: usize, contributions_lost: u64 },
    Release { session: u64, query_id: String, window: String, suppressed: bool },
    SessionClosed { session: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub time: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    fn push(&mut self, time: Timestamp, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(Event { seq, time, kind });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct TokenEntry {
    session: SessionId,
    consumed: bool,
}

pub struct FederatedServer {
    pub config: ServerConfig,
    tasks: BTreeMap<String, TaskRegistration>,
    agg_configs: BTreeMap<String, AggCoreConfig>,
    sessions: BTreeMap<SessionId, AggregationSession>,
    by_window: BTreeMap<(String, String), SessionId>,
    tokens: BTreeMap<AuthToken, TokenEntry>,
    token_rng: CounterRng,
    tokens_issued: u64,
    partials: Vec<PartialAggregate>,
    /// (session, epoch) pairs whose acked uploads were lost.
    lost_epochs: Vec<(SessionId, u64)>,
    pub log: EventLog,
}

impl FederatedServer {
    pub fn new(config: ServerConfig, seed: u64) -> Self {
        FederatedServer {
            config,
            tasks: BTreeMap::new(),
            agg_configs: BTreeMap::new(),
            sessions: BTreeMap::new(),
            by_window: BTreeMap::new(),
            tokens: BTreeMap::new(),
            token_rng: CounterRng::new(seed, "tokens"),
            tokens_issued: 0,
            partials: Vec::new(),
            lost_epochs: Vec::new(),
            log: EventLog::default(),
        }
    }

    pub fn register(&mut self, req: TaskRequest, now: Timestamp) -> Result<&TaskRegistration, ServerError> {
        if self.tasks.contains_key(&req.query_id) {
            return Err(ServerError::DuplicateTask(req.query_id));
        }
        let reg = register_task(req, now)?;
        let id = reg.query_id.clone();
        self.agg_configs.insert(id.clone(), reg.spec.to_agg_config());
        self.log.push(now, EventKind::TaskRegistered { query_id: id.clone(), windows: reg.windows.len() });
        Ok(self.tasks.entry(id).or_insert(reg))
    }

    pub fn task(&self, query_id: &str) -> Option<&TaskRegistration> {
        self.tasks.get(query_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskRegistration> {
        self.tasks.values()
    }

    pub fn session(&self, id: SessionId) -> Option<&AggregationSession> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &AggregationSession> {
        self.sessions.values()
    }

    pub fn partials(&self) -> &[PartialAggregate] {
        &self.partials
    }

    pub fn lost_epochs(&self) -> &[(SessionId, u64)] {
        &self.lost_epochs
    }

    fn live_load(&self, node: usize) -> usize {
        self.sessions.values().filter(|s| s.node == node && s.live()).count()
    }

    fn session_for(&mut self, query_id: &str, window: &TimeWindow, now: Timestamp) -> Result<SessionId, ServerError> {
        let key = (query_id.to_string(), window.id.clone());
        if let Some(id) = self.by_window.get(&key) {
            return Ok(*id);
        }
        let node = (0..self.config.num_nodes.max(1)).min_by_key(|&n| (self.live_load(n), n)).unwrap_or(0);
        let id = SessionId(self.sessions.len() as u64);
        let cfg = self.agg_configs[query_id].with_threshold(self.config.level0_min_contributions.max(1));
        self.sessions.insert(
            id,
            AggregationSession {
                id,
                query_id: query_id.to_string(),
                window: window.clone(),
                node,
                shard: Some(AggregationCore::init(cfg)?),
                shard_epoch: 0,
                issued_tokens: 0,
                status: if now < window.end { SessionStatus::Collecting } else { SessionStatus::Grace },
            },
        );
        self.by_window.insert(key, id);
        self.log.push(
            now,
            EventKind::SessionCreated { session: id.0, query_id: query_id.into(), window: window.id.clone(), node },
        );
        Ok(id)
    }

    fn fresh_token(&mut self, session: SessionId) -> AuthToken {
        loop {
            let n = self.tokens_issued;
            self.tokens_issued += 1;
            let hi = self.token_rng.u64_at(0, 2 * n) as u128;
            let lo = self.token_rng.u64_at(0, 2 * n + 1) as u128;
            let token = AuthToken((hi << 64) | lo);
            if let std::collections::btree_map::Entry::Vacant(e) = self.tokens.entry(token) {
                e.insert(TokenEntry { session, consumed: false });
                return token;
            }
        }
    }

    /// Serves a check-in: the device filters windows against each task's
    /// criteria and receives one fresh token per chosen window.
    pub fn check_in(&mut self, device: &DeviceState, now: Timestamp) -> Result<Vec<Assignment>, ServerError> {
        let mut out = Vec::new();
        let criteria: Vec<EligibilityCriteria> =
            self.tasks.values().filter(|t| t.active).map(TaskRegistration::criteria).collect();
        for c in criteria {
            for window in device.eligible_windows(&c) {
                let session = self.session_for(&c.query_id, &window, now)?;
                if !self.sessions[&session].live() {
                    continue;
                }
                let token = self.fresh_token(session);
                self.sessions.get_mut(&session).expect("session exists").issued_tokens += 1;
                out.push(Assignment { query_id: c.query_id.clone(), window, session, token });
            }
        }
        self.log.push(now, EventKind::CheckIn { assignments: out.len() });
        Ok(out)
    }

    /// Verifies and consumes the token, then accumulates into the shard.
    pub fn ingest_upload(&mut self, update: &ClientUpdate, now: Timestamp) -> Result<Ack, IngestError> {
        let result = self.try_ingest(update, now);
        match &result {
            Ok(ack) => self.log.push(now, EventKind::UploadAck { session: ack.session.0, epoch: ack.epoch }),
            Err(reason) => self.log.push(now, EventKind::UploadReject { reason: *reason }),
        }
        if let Ok(ack) = result {
            if self.sessions[&ack.session].shard_count() >= self.config.batch_size {
                self.checkpoint_partials(ack.session, now);
            }
        }
        result
    }

    fn try_ingest(&mut self, update: &ClientUpdate, now: Timestamp) -> Result<Ack, IngestError> {
        let entry = *self.tokens.get(&update.token).ok_or(IngestError::InvalidToken)?;
        if entry.consumed {
            return Err(IngestError::TokenReplay);
        }
        let session = self.sessions.get_mut(&entry.session).ok_or(IngestError::InvalidToken)?;
        if session.query_id != update.query_id || session.window.id != update.window_id {
            return Err(IngestError::InvalidToken);
        }
        if !session.live() || now > session.window.end.plus(self.tasks[&session.query_id].spec.grace_period_s) {
            return Err(IngestError::SessionClosed);
        }
        if now >= session.window.end {
            session.status = SessionStatus::Grace;
        }
        let shard = session.shard.as_mut().expect("live session has a shard");
        let payload = Payload::decode(&update.payload, shard.config().value_columns.len())
            .map_err(|_| IngestError::MalformedUpdate)?;
        shard.accumulate(&payload).map_err(|_| IngestError::MalformedUpdate)?;
        self.tokens.get_mut(&update.token).expect("token exists").consumed = true;
        Ok(Ack { session: session.id, epoch: session.shard_epoch })
    }

    /// Persists the session's shard as a level-0 partial and resets it.
    /// Returns None when the shard is empty or below the level-0 gate.
    pub fn checkpoint_partials(&mut self, id: SessionId, now: Timestamp) -> Option<&PartialAggregate> {
        let session = self.sessions.get_mut(&id)?;
        let shard = session.shard.as_ref()?;
        if shard.contribution_count() == 0 || !shard.can_report() {
            return None;
        }
        let fresh = AggregationCore::init(shard.config().clone()).expect("valid config");
        let sums = session.shard.replace(fresh).expect("shard").report().expect("gate checked");
        let epoch = session.shard_epoch;
        session.shard_epoch += 1;
        let contributions = sums.contribution_count;
        self.partials.push(PartialAggregate {
            level: 0,
            session: id,
            window_id: session.window.id.clone(),
            sums,
            created_at: now,
            ttl_s: self.config.level0_ttl_s,
            epochs: vec![epoch],
        });
        self.log.push(now, EventKind::Checkpoint { session: id.0, level: 0, contributions });
        self.partials.last()
    }

    /// Purges expired partials, then combines each session's level-0
    /// partials into one level-1 partial.
    pub fn rollup(&mut self, now: Timestamp) {
        self.purge_expired(now);
        let mut groups: BTreeMap<SessionId, Vec<PartialAggregate>> = BTreeMap::new();
        let mut kept = Vec::new();
        for p in self.partials.drain(..) {
            if p.level == 0 {
                groups.entry(p.session).or_default().push(p);
            } else {
                kept.push(p);
            }
        }
        for (session, parts) in groups {
            let mut sums = GroupedSums::default();
            let mut epochs = Vec::new();
            for p in &parts {
                sums.merge(&p.sums).expect("same query shape");
                epochs.extend(&p.epochs);
            }
            self.log.push(
                now,
                EventKind::Rollup { session: session.0, partials: parts.len(), contributions: sums.contribution_count },
            );
            kept.push(PartialAggregate {
                level: 1,
                session,
                window_id: parts[0].window_id.clone(),
                sums,
                created_at: now,
                ttl_s: self.config.level1_ttl_s,
                epochs,
            });
        }
        self.partials = kept;
    }

    fn purge_expired(&mut self, now: Timestamp) {
        let mut kept = Vec::new();
        for p in self.partials.drain(..) {
            if p.expired(now) {
                self.log.push(
                    now,
                    EventKind::PartialExpired { session: p.session.0, level: p.level, contributions: p.sums.contribution_count },
                );
                self.lost_epochs.extend(p.epochs.iter().map(|e| (p.session, *e)));
            } else {
                kept.push(p);
            }
        }
        self.partials = kept;
    }

    /// Drops the in-memory shards of every live session on `node`.
    pub fn crash_node(&mut self, node: usize, now: Timestamp) {
        let mut sessions = 0;
        let mut lost = 0;
        for s in self.sessions.values_mut().filter(|s| s.node == node && s.live()) {
            let count = s.shard_count();
            if count > 0 {
                let cfg = s.shard.as_ref().expect("live").config().clone();
                s.shard = Some(AggregationCore::init(cfg).expect("valid config"));
                self.lost_epochs.push((s.id, s.shard_epoch));
                s.shard_epoch += 1;
                sessions += 1;
                lost += count;
            }
        }
        self.log.push(now, EventKind::NodeCrash { node, sessions, contributions_lost: lost });
    }

    /// Releases every live session whose grace period has passed.
    pub fn trigger_release(&mut self, now: Timestamp) -> Vec<WindowRelease> {
        self.purge_expired(now);
        let due: Vec<SessionId> = self
            .sessions
            .values()
            .filter(|s| s.live() && now > s.window.end.plus(self.tasks[&s.query_id].spec.grace_period_s))
            .map(|s| s.id)
            .collect();
        let mut out = Vec::new();
        for id in due {
            let session = self.sessions.get_mut(&id).expect("due session");
            let shard = session.shard.take().expect("live session has a shard");
            let mut final_core =
                AggregationCore::init(self.agg_configs[&session.query_id].clone()).expect("validated at registration");
            final_core.absorb(&shard.into_sums()).expect("same shape");
            let mut kept = Vec::new();
            for p in self.partials.drain(..) {
                if p.session == id {
                    final_core.absorb(&p.sums).expect("same shape");
                } else {
                    kept.push(p);
                }
            }
            self.partials = kept;
            session.status = SessionStatus::Released;
            let outcome = if final_core.can_report() {
                ReleaseOutcome::Ready { sums: final_core.report().expect("gate checked") }
            } else {
                ReleaseOutcome::InsufficientContributions
            };
            let suppressed = outcome == ReleaseOutcome::InsufficientContributions;
            self.log.push(
                now,
                EventKind::Release {
                    session: id.0,
                    query_id: session.query_id.clone(),
                    window: session.window.id.clone(),
                    suppressed,
                },
            );
            out.push(WindowRelease { query_id: session.query_id.clone(), window: session.window.clone(), session: id, outcome });
        }
        out
    }

    /// Marks a released session closed once the DP module has taken over.
    pub fn close(&mut self, id: SessionId, now: Timestamp) {
        if let Some(s) = self.sessions.get_mut(&id) {
            if s.status == SessionStatus::Released {
                s.status = SessionStatus::Closed;
                self.log.push(now, EventKind::SessionClosed { session: id.0 });
            }
        }
    }

    /// Moves sessions whose window has ended into the grace state.
    pub fn tick(&mut self, now: Timestamp) {
        for s in self.sessions.values_mut() {
            if s.status == SessionStatus::Collecting && now >= s.window.end {
                s.status = SessionStatus::Grace;
            }
        }
    }
}
