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

//! Simulated UTC time and civil-calendar window alignment.

use std::fmt;

use chrono::{DateTime, Datelike, Duration as ChronoDuration, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};

pub const MINUTE: i64 = 60;
pub const HOUR: i64 = 3_600;
pub const DAY: i64 = 86_400;
pub const WEEK: i64 = 7 * DAY;

/// Seconds since the Unix epoch, UTC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn plus(self, secs: i64) -> Timestamp {
        Timestamp(self.0 + secs)
    }

    pub fn minus(self, secs: i64) -> Timestamp {
        Timestamp(self.0 - secs)
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.0, 0).single().expect("timestamp in chrono range")
    }

    pub fn from_datetime(dt: DateTime<Utc>) -> Timestamp {
        Timestamp(dt.timestamp())
    }

    /// Parses an RFC 3339 instant such as `2024-05-13T00:00:00Z`.
    pub fn parse(s: &str) -> Result<Timestamp, String> {
        DateTime::parse_from_rfc3339(s)
            .map(|dt| Timestamp(dt.timestamp()))
            .map_err(|e| format!("invalid timestamp {s:?}: {e}"))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%SZ"))
    }
}

/// How privacy time units are aligned to the civil calendar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowAlignment {
    #[serde(rename = "ROUND_DOWN_TO_CIVIL_DAY", alias = "day")]
    CivilDay,
    #[serde(rename = "ROUND_DOWN_TO_CIVIL_WEEK", alias = "week")]
    CivilWeek,
    #[serde(rename = "ROUND_DOWN_TO_CIVIL_MONTH", alias = "month")]
    CivilMonth,
}

impl WindowAlignment {
    pub fn name(self) -> &'static str {
        match self {
            WindowAlignment::CivilDay => "ROUND_DOWN_TO_CIVIL_DAY",
            WindowAlignment::CivilWeek => "ROUND_DOWN_TO_CIVIL_WEEK",
            WindowAlignment::CivilMonth => "ROUND_DOWN_TO_CIVIL_MONTH",
        }
    }
}

/// A half-open interval [start, end) with its privacy-time-unit label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
    pub id: String,
}

impl TimeWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }

    /// The window immediately after this one under the same alignment.
    pub fn next(&self, alignment: WindowAlignment) -> TimeWindow {
        round_down_window(self.end, alignment)
    }
}

fn midnight(date: NaiveDate) -> Timestamp {
    Timestamp(date.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp())
}

/// Rounds `t` down to the enclosing civil day, ISO week (Monday 00:00 UTC)
/// or month.
pub fn round_down_window(t: Timestamp, alignment: WindowAlignment) -> TimeWindow {
    let date = t.to_datetime().date_naive();
    match alignment {
        WindowAlignment::CivilDay => {
            let start = midnight(date);
            TimeWindow { start, end: start.plus(DAY), id: date.format("%Y-%m-%d").to_string() }
        }
        WindowAlignment::CivilWeek => {
            let monday = date - ChronoDuration::days(date.weekday().num_days_from_monday() as i64);
            let start = midnight(monday);
            TimeWindow { start, end: start.plus(WEEK), id: monday.format("%G-W%V").to_string() }
        }
        WindowAlignment::CivilMonth => {
            let first = NaiveDate::from_ymd_opt(date.year(), date.month(), 1).unwrap();
            let next = if date.month() == 12 {
                NaiveDate::from_ymd_opt(date.year() + 1, 1, 1).unwrap()
            } else {
                NaiveDate::from_ymd_opt(date.year(), date.month() + 1, 1).unwrap()
            };
            TimeWindow { start: midnight(first), end: midnight(next), id: first.format("%Y-%m").to_string() }
        }
    }
}

/// The `count` consecutive windows starting with the one containing `first`.
pub fn consecutive_windows(first: Timestamp, alignment: WindowAlignment, count: usize) -> Vec<TimeWindow> {
    let mut out = Vec::with_capacity(count);
    let mut w = round_down_window(first, alignment);
    for _ in 0..count {
        let next = w.next(alignment);
        out.push(w);
        w = next;
    }
    out
}
