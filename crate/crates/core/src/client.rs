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

//! Simulated devices.
//!
//! A device keeps a TTL-bounded cache of its own trips and two watermarks
//! per query: everything in `[high, low)` is complete, not yet contributed
//! and therefore queryable. The low watermark is the start of the window
//! containing `now`; the high watermark moves up to it once every complete
//! window has been acknowledged, abandoned or found empty.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::aggcore::{decode_key, encode_key};
use crate::dp::{DpError, MechanismConfig};
use crate::histogram::IndexedHistogram;
use crate::model::{HistIndex, Metric, ModelError, Schema, TripRecord};
use crate::query::{SplitQuery, PRIVACY_TIME_UNIT, SUMMABLE_COLUMNS};
use crate::rng::CounterRng;
use crate::time::{round_down_window, TimeWindow, Timestamp, WindowAlignment, DAY};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClientError {
    #[error("clock regression: now {now} is before previous {previous}")]
    ClockRegression { previous: Timestamp, now: Timestamp },
    #[error("event at {event} is after now {now}")]
    FutureEvent { event: Timestamp, now: Timestamp },
    #[error("query cannot be bound to the histogram schema: {0}")]
    Binding(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

// ---------------------------------------------------------------------------
// Availability

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    HighEnd,
    LowEnd,
}

impl Tier {
    pub fn name(self) -> &'static str {
        match self {
            Tier::HighEnd => "high_end",
            Tier::LowEnd => "low_end",
        }
    }
}

/// Per-tick probabilities of the device-side conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityProfile {
    pub tier: Tier,
    /// Probability that the device attempts a check-in on a given tick.
    pub check_in_rate: f64,
    pub p_idle: f64,
    pub p_wifi: f64,
    pub p_charging: f64,
    /// Probability that an upload never reaches the server.
    pub p_upload_failure: f64,
    /// Probability that the server's acknowledgment is lost.
    pub p_ack_loss: f64,
}

impl AvailabilityProfile {
    /// Always available, never fails. Useful for oracle runs.
    pub fn always_on(tier: Tier) -> Self {
        AvailabilityProfile {
            tier,
            check_in_rate: 1.0,
            p_idle: 1.0,
            p_wifi: 1.0,
            p_charging: 1.0,
            p_upload_failure: 0.0,
            p_ack_loss: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("check_in_rate", self.check_in_rate),
            ("p_idle", self.p_idle),
            ("p_wifi", self.p_wifi),
            ("p_charging", self.p_charging),
            ("p_upload_failure", self.p_upload_failure),
            ("p_ack_loss", self.p_ack_loss),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0,1], got {p}"));
            }
        }
        Ok(())
    }

    /// Conditions on `tick`. Draws are addressed by (device, tick), so every
    /// constraint policy sees the same phone state.
    pub fn conditions(&self, rng: &CounterRng, device_id: u64, tick: u64) -> TickConditions {
        let u = |k: u64| rng.uniform_at(device_id, tick * 8 + k);
        TickConditions {
            wants_check_in: u(0) < self.check_in_rate,
            idle: u(1) < self.p_idle,
            unmetered_network: u(2) < self.p_wifi,
            charging: u(3) < self.p_charging,
            battery_level: u(4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TickConditions {
    pub wants_check_in: bool,
    pub idle: bool,
    pub unmetered_network: bool,
    pub charging: bool,
    pub battery_level: f64,
}

/// Which conditions must hold before a device runs any task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintPolicy {
    pub require_idle: bool,
    pub require_unmetered: bool,
    pub require_charging: bool,
    pub min_battery: f64,
}

impl ConstraintPolicy {
    pub const IDLE_ONLY: ConstraintPolicy =
        ConstraintPolicy { require_idle: true, require_unmetered: false, require_charging: false, min_battery: 0.0 };
    pub const IDLE_WIFI_CHARGING: ConstraintPolicy =
        ConstraintPolicy { require_idle: true, require_unmetered: true, require_charging: true, min_battery: 0.0 };

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.require_idle {
            parts.push("idle");
        }
        if self.require_unmetered {
            parts.push("wifi");
        }
        if self.require_charging {
            parts.push("charging");
        }
        let mut s = if parts.is_empty() { "none".to_string() } else { parts.join("+") };
        if self.min_battery > 0.0 {
            s.push_str(&format!("+battery>={}", self.min_battery));
        }
        s
    }

    pub fn parse(s: &str) -> Option<ConstraintPolicy> {
        match s {
            "idle" | "idle_only" => Some(Self::IDLE_ONLY),
            "idle+wifi+charging" | "idle_wifi_charging" => Some(Self::IDLE_WIFI_CHARGING),
            "none" => Some(ConstraintPolicy {
                require_idle: false,
                require_unmetered: false,
                require_charging: false,
                min_battery: 0.0,
            }),
            _ => None,
        }
    }

    pub fn allows(&self, c: &TickConditions) -> bool {
        (!self.require_idle || c.idle)
            && (!self.require_unmetered || c.unmetered_network)
            && (!self.require_charging || c.charging)
            && c.battery_level >= self.min_battery
    }
}

// ---------------------------------------------------------------------------
// Compiled client query

/// A column of the on-device trip stream usable as a group key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamColumn {
    Activity,
    Region,
    Direction,
    Window,
}

impl StreamColumn {
    fn parse(name: &str) -> Option<StreamColumn> {
        match name {
            "activity" => Some(StreamColumn::Activity),
            "region" => Some(StreamColumn::Region),
            "direction" => Some(StreamColumn::Direction),
            PRIVACY_TIME_UNIT => Some(StreamColumn::Window),
            _ => None,
        }
    }

    fn value(self, rec: &TripRecord, window_id: &str) -> String {
        match self {
            StreamColumn::Activity => rec.activity.to_string(),
            StreamColumn::Region => rec.region.to_string(),
            StreamColumn::Direction => rec.direction.index().to_string(),
            StreamColumn::Window => window_id.to_string(),
        }
    }
}

fn metric_of(column: &str) -> Option<Metric> {
    SUMMABLE_COLUMNS.iter().position(|c| *c == column).map(|i| Metric::ALL[i])
}

/// The client statement resolved against the stream, plus the mapping from
/// server rows to histogram coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledQuery {
    pub query_id: String,
    pub alignment: WindowAlignment,
    group_by: Vec<StreamColumn>,
    /// Positions in `group_by` of the selected keys.
    selected: Vec<usize>,
    metrics: Vec<Metric>,
    /// Positions in the selected keys of the server group keys.
    server_keys: Vec<usize>,
    /// Positions in the aggregates of the server sum columns.
    server_values: Vec<usize>,
    pub binding: HistogramBinding,
}

/// How a server row maps onto the (activity, metric, region, direction)
/// histogram. Unbound dimensions collapse to index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramBinding {
    pub activity_key: Option<usize>,
    pub region_key: Option<usize>,
    pub direction_key: Option<usize>,
    pub num_keys: usize,
    /// Metric of each value column.
    pub value_metrics: Vec<u32>,
}

/// One row of the client result: selected keys, then aggregate values.
pub type ResultRow = (Vec<String>, Vec<f64>);

impl CompiledQuery {
    pub fn compile(query_id: &str, query: &SplitQuery, alignment: WindowAlignment) -> Result<Self, ClientError> {
        let bind = |m: String| ClientError::Binding(m);
        let client = &query.client;
        let group_by = client
            .group_by
            .iter()
            .map(|c| StreamColumn::parse(c).ok_or_else(|| bind(format!("unknown group column {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let selected = client
            .selected_group_keys
            .iter()
            .map(|k| client.group_by.iter().position(|g| g == k).ok_or_else(|| bind(format!("{k} is not grouped"))))
            .collect::<Result<Vec<_>, _>>()?;
        let metrics = client
            .aggregates
            .iter()
            .map(|a| metric_of(&a.input).ok_or_else(|| bind(format!("{} is not summable", a.input))))
            .collect::<Result<Vec<_>, _>>()?;
        let server_keys = query
            .server
            .group_keys
            .iter()
            .map(|k| {
                client.selected_group_keys.iter().position(|s| s == k).ok_or_else(|| bind(format!("unknown key {k}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let server_values = query
            .server
            .sum_columns
            .iter()
            .map(|c| client.aggregates.iter().position(|a| &a.alias == c).ok_or_else(|| bind(format!("unknown sum {c}"))))
            .collect::<Result<Vec<_>, _>>()?;

        let key_column = |col: StreamColumn| {
            server_keys.iter().position(|&p| group_by[selected[p]] == col)
        };
        let value_metrics: Vec<u32> = server_values.iter().map(|&p| metrics[p].index()).collect();
        let mut seen = value_metrics.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != value_metrics.len() {
            return Err(bind("each metric may be summed at most once".into()));
        }
        let binding = HistogramBinding {
            activity_key: key_column(StreamColumn::Activity),
            region_key: key_column(StreamColumn::Region),
            direction_key: key_column(StreamColumn::Direction),
            num_keys: server_keys.len(),
            value_metrics,
        };
        Ok(CompiledQuery {
            query_id: query_id.to_string(),
            alignment,
            group_by,
            selected,
            metrics,
            server_keys,
            server_values,
            binding,
        })
    }

    /// The client statement over records of complete windows: grouped sums
    /// in sorted key order.
    pub fn execute(&self, records: &[TripRecord]) -> Vec<ResultRow> {
        let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
        for rec in records {
            let window = round_down_window(rec.event_time, self.alignment);
            let key: Vec<String> = self.group_by.iter().map(|c| c.value(rec, &window.id)).collect();
            let slot = groups.entry(key).or_insert_with(|| vec![0.0; self.metrics.len()]);
            for (v, m) in slot.iter_mut().zip(&self.metrics) {
                *v += rec.metric_value(*m);
            }
        }
        let mut out: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
        for (key, values) in groups {
            let selected: Vec<String> = self.selected.iter().map(|&i| key[i].clone()).collect();
            let slot = out.entry(selected).or_insert_with(|| vec![0.0; values.len()]);
            for (s, v) in slot.iter_mut().zip(values) {
                *s += v;
            }
        }
        out.into_iter().collect()
    }

    /// Projects client rows onto the server's key and value columns, summing
    /// rows that collapse to the same key.
    pub fn focus(&self, rows: &[ResultRow]) -> Vec<(String, Vec<f64>)> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (keys, values) in rows {
            let fields: Vec<&str> = self.server_keys.iter().map(|&p| keys[p].as_str()).collect();
            let slot = out.entry(encode_key(&fields)).or_insert_with(|| vec![0.0; self.server_values.len()]);
            for (s, &p) in slot.iter_mut().zip(&self.server_values) {
                *s += values[p];
            }
        }
        out.into_iter().collect()
    }
}

impl HistogramBinding {
    fn parse_index(fields: &[String], pos: Option<usize>, what: &str) -> Result<u32, ClientError> {
        match pos {
            None => Ok(0),
            Some(p) => fields[p]
                .parse::<u32>()
                .map_err(|_| ClientError::Binding(format!("{what} key {:?} is not an index", fields[p]))),
        }
    }

    /// Server rows (encoded keys) to a histogram.
    pub fn rows_to_histogram(&self, schema: Schema, rows: &[(String, Vec<f64>)]) -> Result<IndexedHistogram, ClientError> {
        let mut h = IndexedHistogram::new(schema);
        for (key, values) in rows {
            let fields = decode_key(key);
            if fields.len() != self.num_keys || values.len() != self.value_metrics.len() {
                return Err(ClientError::Binding(format!("row {key:?} does not match the query shape")));
            }
            let a = Self::parse_index(&fields, self.activity_key, "activity")?;
            let r = Self::parse_index(&fields, self.region_key, "region")?;
            let d = Self::parse_index(&fields, self.direction_key, "direction")?;
            for (v, &m) in values.iter().zip(&self.value_metrics) {
                h.add_at(HistIndex::new(a, m, r, d), *v)?;
            }
        }
        Ok(h)
    }

    /// A histogram back to server rows. `window_key` fills every key column
    /// that is not bound to a histogram dimension (the window id).
    pub fn histogram_to_rows(&self, h: &IndexedHistogram, window_key: &str) -> Vec<(String, Vec<f64>)> {
        let mut rows: BTreeMap<(u32, u32, u32), Vec<f64>> = BTreeMap::new();
        for (idx, v) in h.iter() {
            let Some(col) = self.value_metrics.iter().position(|&m| m == idx.metric) else {
                continue;
            };
            let slot = rows
                .entry((idx.activity, idx.region, idx.direction))
                .or_insert_with(|| vec![0.0; self.value_metrics.len()]);
            slot[col] = *v;
        }
        rows.into_iter()
            .map(|((a, r, d), values)| {
                let fields: Vec<String> = (0..self.num_keys)
                    .map(|i| {
                        if Some(i) == self.activity_key {
                            a.to_string()
                        } else if Some(i) == self.region_key {
                            r.to_string()
                        } else if Some(i) == self.direction_key {
                            d.to_string()
                        } else {
                            window_key.to_string()
                        }
                    })
                    .collect();
                (encode_key(&fields), values)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Device state

/// What the server tells a device about a task at check-in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EligibilityCriteria {
    pub query_id: String,
    pub alignment: WindowAlignment,
    pub grace_period_s: i64,
    pub first_window_start: Timestamp,
    pub last_window_end: Timestamp,
    pub min_days_between_participation: u32,
    pub require_new_data: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct MemoEntry {
    window_end: Timestamp,
    deadline: Timestamp,
}

#[derive(Clone, Debug)]
pub struct DeviceState {
    /// Simulation handle only; never placed in an upload.
    pub device_id: u64,
    pub profile: AvailabilityProfile,
    event_cache: VecDeque<TripRecord>,
    alignment: WindowAlignment,
    ttl_s: i64,
    now: Timestamp,
    low: Timestamp,
    initial_high: Timestamp,
    high: BTreeMap<String, Timestamp>,
    memo: BTreeMap<String, BTreeMap<String, MemoEntry>>,
    last_check_in: Option<Timestamp>,
    last_participation: BTreeMap<String, Timestamp>,
}

impl DeviceState {
    /// A device that joins at `now`. Both watermarks start at the start of
    /// the current window, so nothing before it is ever contributed.
    pub fn new(device_id: u64, profile: AvailabilityProfile, alignment: WindowAlignment, ttl_s: i64, now: Timestamp) -> Self {
        let low = round_down_window(now, alignment).start;
        DeviceState {
            device_id,
            profile,
            event_cache: VecDeque::new(),
            alignment,
            ttl_s,
            now,
            low,
            initial_high: low,
            high: BTreeMap::new(),
            memo: BTreeMap::new(),
            last_check_in: None,
            last_participation: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn low_watermark(&self) -> Timestamp {
        self.low
    }

    pub fn high_watermark(&self, query_id: &str) -> Timestamp {
        self.high.get(query_id).copied().unwrap_or(self.initial_high)
    }

    pub fn cache(&self) -> impl Iterator<Item = &TripRecord> {
        self.event_cache.iter()
    }

    /// Appends a trip that happened at or before `now`, keeping time order.
    pub fn record_event(&mut self, rec: TripRecord) -> Result<(), ClientError> {
        if rec.event_time > self.now {
            return Err(ClientError::FutureEvent { event: rec.event_time, now: self.now });
        }
        let pos = self.event_cache.partition_point(|r| r.event_time <= rec.event_time);
        self.event_cache.insert(pos, rec);
        Ok(())
    }

    /// Moves the clock: low watermark to the current window start, TTL purge.
    pub fn advance_watermarks(&mut self, now: Timestamp) -> Result<(), ClientError> {
        if now < self.now {
            return Err(ClientError::ClockRegression { previous: self.now, now });
        }
        self.now = now;
        self.low = round_down_window(now, self.alignment).start;
        let cutoff = now.minus(self.ttl_s);
        while self.event_cache.front().is_some_and(|r| r.event_time < cutoff) {
            self.event_cache.pop_front();
        }
        Ok(())
    }

    /// Records with high ≤ t < low for `query_id`.
    pub fn visible_records(&self, query_id: &str) -> Vec<TripRecord> {
        let high = self.high_watermark(query_id);
        self.event_cache.iter().filter(|r| r.event_time >= high && r.event_time < self.low).cloned().collect()
    }

    /// Records inside one window that are currently visible.
    pub fn window_records(&self, query_id: &str, window: &TimeWindow) -> Vec<TripRecord> {
        let high = self.high_watermark(query_id);
        self.event_cache
            .iter()
            .filter(|r| window.contains(r.event_time) && r.event_time >= high && r.event_time < self.low)
            .cloned()
            .collect()
    }

    /// Complete windows in `[high, low)` for the query's alignment.
    fn complete_windows(&self, query_id: &str, alignment: WindowAlignment) -> Vec<TimeWindow> {
        let mut out = Vec::new();
        let mut w = round_down_window(self.high_watermark(query_id), alignment);
        while w.end <= self.low {
            out.push(w.clone());
            w = w.next(alignment);
        }
        out
    }

    pub fn may_contribute(&self, query_id: &str, window_id: &str) -> bool {
        exactly_once_guard(self, query_id, window_id)
    }

    /// Windows this device would contribute to under `criteria` right now.
    pub fn eligible_windows(&self, criteria: &EligibilityCriteria) -> Vec<TimeWindow> {
        if criteria.min_days_between_participation > 0 {
            if let Some(last) = self.last_participation.get(&criteria.query_id) {
                if self.now.seconds() - last.seconds() < criteria.min_days_between_participation as i64 * DAY {
                    return Vec::new();
                }
            }
        }
        self.complete_windows(&criteria.query_id, criteria.alignment)
            .into_iter()
            .filter(|w| w.start >= criteria.first_window_start && w.end <= criteria.last_window_end)
            .filter(|w| self.now <= w.end.plus(criteria.grace_period_s))
            .filter(|w| self.may_contribute(&criteria.query_id, &w.id))
            .filter(|w| !criteria.require_new_data || !self.window_records(&criteria.query_id, w).is_empty())
            .collect()
    }

    /// Builds the focused update rows for one window, bounded by `mechanism`.
    pub fn build_update(
        &self,
        query: &CompiledQuery,
        schema: Schema,
        window: &TimeWindow,
        mechanism: &MechanismConfig,
    ) -> Result<Vec<(String, Vec<f64>)>, ClientError> {
        let records = self.window_records(&query.query_id, window);
        let rows = query.focus(&query.execute(&records));
        let raw = query.binding.rows_to_histogram(schema, &rows)?;
        let bounded = mechanism.bound_contribution(&raw)?;
        Ok(query.binding.histogram_to_rows(&bounded, &window.id))
    }

    /// Commit point of an upload: mark the memo and move the high watermark.
    pub fn on_ack(&mut self, criteria: &EligibilityCriteria, window: &TimeWindow) {
        let deadline = window.end.plus(criteria.grace_period_s);
        self.memo
            .entry(criteria.query_id.clone())
            .or_default()
            .insert(window.id.clone(), MemoEntry { window_end: window.end, deadline });
        self.last_participation.insert(criteria.query_id.clone(), self.now);
        self.settle_high_watermark(criteria);
    }

    /// Advances the high watermark over every leading complete window that
    /// is contributed, past its deadline or empty.
    pub fn settle_high_watermark(&mut self, criteria: &EligibilityCriteria) {
        let mut high = self.high_watermark(&criteria.query_id);
        for w in self.complete_windows(&criteria.query_id, criteria.alignment) {
            let done = !self.may_contribute(&criteria.query_id, &w.id)
                || self.now > w.end.plus(criteria.grace_period_s)
                || w.end <= criteria.first_window_start
                || self.window_records(&criteria.query_id, &w).is_empty();
            if !done {
                break;
            }
            high = w.end;
        }
        debug_assert!(high <= self.low);
        self.high.insert(criteria.query_id.clone(), high);
    }

    /// Drops memo entries whose release deadline has passed and that the
    /// high watermark already covers.
    pub fn gc_memo(&mut self) {
        let now = self.now;
        let highs: BTreeMap<String, Timestamp> =
            self.memo.keys().map(|q| (q.clone(), self.high_watermark(q))).collect();
        for (q, entries) in self.memo.iter_mut() {
            let high = highs[q];
            entries.retain(|_, e| !(e.deadline < now && e.window_end <= high));
        }
        self.memo.retain(|_, e| !e.is_empty());
    }

    pub fn memo_len(&self) -> usize {
        self.memo.values().map(BTreeMap::len).sum()
    }

    /// Whether a check-in is permitted by the spacing rule.
    pub fn check_in_due(&self, min_spacing_s: i64) -> bool {
        self.last_check_in.is_none_or(|t| self.now.seconds() - t.seconds() >= min_spacing_s)
    }

    pub fn mark_check_in(&mut self) {
        self.last_check_in = Some(self.now);
    }
}

/// True iff the device has not yet contributed `window_id` to `query_id`.
pub fn exactly_once_guard(d: &DeviceState, query_id: &str, window_id: &str) -> bool {
    !d.memo.get(query_id).is_some_and(|m| m.contains_key(window_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Direction;
    use crate::query::{parse_for_device_stream, EXAMPLE_QUERY};

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    fn trip(t: &str, a: u32, r: u32, dist: f64) -> TripRecord {
        TripRecord {
            event_time: ts(t),
            activity: a,
            region: r,
            direction: Direction::Within,
            distance_km: dist,
            duration_s: 60.0,
        }
    }

    fn criteria() -> EligibilityCriteria {
        EligibilityCriteria {
            query_id: "q".into(),
            alignment: WindowAlignment::CivilWeek,
            grace_period_s: 3 * DAY,
            first_window_start: ts("2024-05-06T00:00:00Z"),
            last_window_end: ts("2024-06-03T00:00:00Z"),
            min_days_between_participation: 0,
            require_new_data: true,
        }
    }

    fn device(now: &str) -> DeviceState {
        DeviceState::new(1, AvailabilityProfile::always_on(Tier::HighEnd), WindowAlignment::CivilWeek, 14 * DAY, ts(now))
    }

    #[test]
    fn watermarks_follow_the_clock() {
        let mut d = device("2024-05-08T10:00:00Z");
        let start = ts("2024-05-06T00:00:00Z");
        assert_eq!(d.low_watermark(), start);
        d.advance_watermarks(ts("2024-05-10T10:00:00Z")).unwrap();
        assert_eq!(d.low_watermark(), start);
        d.advance_watermarks(ts("2024-05-13T00:00:00Z")).unwrap();
        assert_eq!(d.low_watermark(), ts("2024-05-13T00:00:00Z"));
        assert_eq!(d.high_watermark("q"), start);
        let err = d.advance_watermarks(ts("2024-05-12T00:00:00Z")).unwrap_err();
        assert!(matches!(err, ClientError::ClockRegression { .. }));
    }

    #[test]
    fn ttl_purges_old_events() {
        let mut d = device("2024-05-06T01:00:00Z");
        d.record_event(trip("2024-05-06T00:30:00Z", 0, 1, 3.0)).unwrap();
        d.advance_watermarks(ts("2024-05-20T00:30:00Z")).unwrap();
        assert_eq!(d.cache().count(), 1);
        d.advance_watermarks(ts("2024-05-20T00:30:01Z")).unwrap();
        assert_eq!(d.cache().count(), 0);
        assert!(d.record_event(trip("2024-06-01T00:00:00Z", 0, 1, 1.0)).is_err());
    }

    #[test]
    fn current_window_is_never_visible() {
        let mut d = device("2024-05-06T00:00:00Z");
        d.advance_watermarks(ts("2024-05-14T00:00:00Z")).unwrap();
        d.record_event(trip("2024-05-07T00:00:00Z", 0, 1, 3.0)).unwrap();
        d.record_event(trip("2024-05-13T05:00:00Z", 0, 1, 5.0)).unwrap();
        let vis = d.visible_records("q");
        assert_eq!(vis.len(), 1);
        assert_eq!(vis[0].distance_km, 3.0);
    }

    #[test]
    fn client_query_examples() {
        let split = parse_for_device_stream(EXAMPLE_QUERY).unwrap();
        let q = CompiledQuery::compile("q", &split, WindowAlignment::CivilWeek).unwrap();
        let recs = vec![trip("2024-05-07T00:00:00Z", 0, 7, 3.0), trip("2024-05-08T00:00:00Z", 1, 7, 5.0)];
        assert_eq!(q.execute(&recs), vec![(vec!["7".to_string(), "2024-W19".to_string()], vec![8.0])]);
        assert!(q.execute(&[]).is_empty());
        let two = vec![trip("2024-05-07T00:00:00Z", 0, 7, 3.0), trip("2024-05-14T00:00:00Z", 0, 7, 5.0)];
        let rows = q.execute(&two);
        assert_eq!(rows.len(), 2);
        assert_ne!(rows[0].0[1], rows[1].0[1]);
    }

    #[test]
    fn binding_round_trips_rows() {
        let text = "SELECT activity, region, direction, privacy_time_unit, SUM(trip_count) AS n, \
                    SUM(trip_distance) AS dist FROM DeviceDataStream \
                    GROUP BY activity, region, direction, privacy_time_unit;\n\n\
                    SELECT activity, region, direction, privacy_time_unit, SUM(n), SUM(dist) FROM UserResults \
                    GROUP BY activity, region, direction, privacy_time_unit;";
        let split = parse_for_device_stream(text).unwrap();
        let q = CompiledQuery::compile("q", &split, WindowAlignment::CivilWeek).unwrap();
        let schema = Schema::new(2, 3, 8).unwrap();
        let recs = vec![trip("2024-05-07T00:00:00Z", 1, 7, 3.0), trip("2024-05-08T00:00:00Z", 1, 7, 5.0)];
        let rows = q.focus(&q.execute(&recs));
        let h = q.binding.rows_to_histogram(schema, &rows).unwrap();
        assert_eq!(h.get(&HistIndex::new(1, 0, 7, 0)), 2.0);
        assert_eq!(h.get(&HistIndex::new(1, 1, 7, 0)), 8.0);
        assert_eq!(q.binding.histogram_to_rows(&h, "2024-W19"), rows);
    }

    #[test]
    fn exactly_once_memo() {
        let mut d = device("2024-05-06T00:00:00Z");
        d.record_event(trip("2024-05-07T00:00:00Z", 0, 1, 3.0)).ok();
        d.advance_watermarks(ts("2024-05-07T01:00:00Z")).unwrap();
        d.record_event(trip("2024-05-07T00:00:00Z", 0, 1, 3.0)).unwrap();
        d.advance_watermarks(ts("2024-05-14T01:00:00Z")).unwrap();
        let c = criteria();
        let windows = d.eligible_windows(&c);
        assert_eq!(windows.len(), 1);
        assert!(exactly_once_guard(&d, "q", &windows[0].id));
        d.on_ack(&c, &windows[0]);
        assert!(!exactly_once_guard(&d, "q", &windows[0].id));
        assert!(exactly_once_guard(&d, "other", &windows[0].id));
        assert_eq!(d.high_watermark("q"), d.low_watermark());
        assert!(d.eligible_windows(&c).is_empty());
        // memo survives until the deadline has passed
        d.gc_memo();
        assert_eq!(d.memo_len(), 1);
        d.advance_watermarks(ts("2024-05-20T00:00:00Z")).unwrap();
        d.gc_memo();
        assert_eq!(d.memo_len(), 0);
        assert!(d.visible_records("q").is_empty());
    }

    #[test]
    fn late_windows_are_abandoned() {
        let mut d = device("2024-05-06T00:00:00Z");
        d.advance_watermarks(ts("2024-05-07T00:00:00Z")).unwrap();
        d.record_event(trip("2024-05-07T00:00:00Z", 0, 1, 3.0)).unwrap();
        d.advance_watermarks(ts("2024-05-16T00:00:01Z")).unwrap();
        let c = criteria();
        assert!(d.eligible_windows(&c).is_empty());
        d.settle_high_watermark(&c);
        assert_eq!(d.high_watermark("q"), ts("2024-05-13T00:00:00Z"));
    }

    #[test]
    fn policies() {
        let rng = CounterRng::new(1, "conditions");
        let profile = AvailabilityProfile {
            tier: Tier::LowEnd,
            check_in_rate: 0.5,
            p_idle: 0.6,
            p_wifi: 0.5,
            p_charging: 0.3,
            p_upload_failure: 0.1,
            p_ack_loss: 0.0,
        };
        let mut loose = 0;
        let mut strict = 0;
        for tick in 0..2000 {
            let c = profile.conditions(&rng, 4, tick);
            let l = ConstraintPolicy::IDLE_ONLY.allows(&c);
            let s = ConstraintPolicy::IDLE_WIFI_CHARGING.allows(&c);
            assert!(!s || l);
            loose += l as u32;
            strict += s as u32;
        }
        assert!(loose > strict);
        assert_eq!(profile.conditions(&rng, 4, 9), profile.conditions(&rng, 4, 9));
        assert_eq!(ConstraintPolicy::parse("idle+wifi+charging"), Some(ConstraintPolicy::IDLE_WIFI_CHARGING));
        assert_eq!(ConstraintPolicy::IDLE_WIFI_CHARGING.name(), "idle+wifi+charging");
    }
}
