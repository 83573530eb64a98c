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

//! Shared domain types: the histogram schema, trip records and per-slice
//! scale tables.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::time::Timestamp;

/// Trip directions are fixed: within a region, leaving it, or entering it.
pub const NUM_DIRECTIONS: u32 = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("index {0} is outside the schema")]
    IndexOutOfRange(HistIndex),
    #[error("schema mismatch: {0:?} vs {1:?}")]
    SchemaMismatch(Schema, Schema),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed histogram encoding: {0}")]
    Decode(String),
    #[error("scale table: {0}")]
    ScaleTable(String),
}

/// The standard metrics accumulated per trip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    NumTrips = 0,
    Distance = 1,
    Duration = 2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::NumTrips, Metric::Distance, Metric::Duration];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::NumTrips => "num_trips",
            Metric::Distance => "distance",
            Metric::Duration => "duration",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Within = 0,
    Outbound = 1,
    Inbound = 2,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Within, Direction::Outbound, Direction::Inbound];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Option<Direction> {
        Self::ALL.get(i as usize).copied()
    }
}

/// Dimensions of the (activity, metric, region, direction) index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schema {
    pub num_activities: u32,
    pub num_metrics: u32,
    pub num_regions: u32,
}

impl Schema {
    pub fn new(num_activities: u32, num_metrics: u32, num_regions: u32) -> Result<Self, ModelError> {
        let schema = Schema { num_activities, num_metrics, num_regions };
        schema.validate()?;
        Ok(schema)
    }

    /// Nine activities, three metrics, 50 regions.
    pub fn desk_default() -> Self {
        Schema { num_activities: 9, num_metrics: 3, num_regions: 50 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_activities == 0 || self.num_metrics == 0 || self.num_regions == 0 {
            return Err(ModelError::InvalidSchema(format!(
                "all dimensions must be at least 1, got {}x{}x{}",
                self.num_activities, self.num_metrics, self.num_regions
            )));
        }
        Ok(())
    }

    /// Total number of partitions, A·M·R·3. Computed in u64 so that
    /// large region counts cannot overflow.
    pub fn partition_count(&self) -> u64 {
        self.num_activities as u64 * self.num_metrics as u64 * self.num_regions as u64 * NUM_DIRECTIONS as u64
    }

    pub fn num_slices(&self) -> u32 {
        self.num_activities * self.num_metrics
    }

    pub fn contains(&self, idx: &HistIndex) -> bool {
        idx.activity < self.num_activities
            && idx.metric < self.num_metrics
            && idx.region < self.num_regions
            && idx.direction < NUM_DIRECTIONS
    }

    pub fn check(&self, idx: &HistIndex) -> Result<(), ModelError> {
        if self.contains(idx) {
            Ok(())
        } else {
            Err(ModelError::IndexOutOfRange(*idx))
        }
    }

    /// Row-major position of `idx` in the full domain, in canonical order.
    pub fn linear_index(&self, idx: &HistIndex) -> u64 {
        ((idx.activity as u64 * self.num_metrics as u64 + idx.metric as u64) * self.num_regions as u64
            + idx.region as u64)
            * NUM_DIRECTIONS as u64
            + idx.direction as u64
    }

    /// Every index of the domain in canonical (lexicographic) order.
    pub fn indices(&self) -> impl Iterator<Item = HistIndex> + '_ {
        let s = *self;
        (0..s.num_activities).flat_map(move |a| {
            (0..s.num_metrics).flat_map(move |m| {
                (0..s.num_regions)
                    .flat_map(move |r| (0..NUM_DIRECTIONS).map(move |d| HistIndex::new(a, m, r, d)))
            })
        })
    }
}

/// A cell of the histogram. Ordering is lexicographic on (a, m, r, d).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistIndex {
    pub activity: u32,
    pub metric: u32,
    pub region: u32,
    pub direction: u32,
}

impl HistIndex {
    pub const fn new(activity: u32, metric: u32, region: u32, direction: u32) -> Self {
        HistIndex { activity, metric, region, direction }
    }
}

impl fmt::Display for HistIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.activity, self.metric, self.region, self.direction)
    }
}

/// One timestamped trip logged on a device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub event_time: Timestamp,
    pub activity: u32,
    pub region: u32,
    pub direction: Direction,
    pub distance_km: f64,
    pub duration_s: f64,
}

impl TripRecord {
    pub fn validate(&self, schema: &Schema) -> Result<(), ModelError> {
        if !(self.distance_km >= 0.0 && self.duration_s >= 0.0) {
            return Err(ModelError::InvalidParameter(format!(
                "negative or NaN trip measurement: distance {} duration {}",
                self.distance_km, self.duration_s
            )));
        }
        if self.activity >= schema.num_activities || self.region >= schema.num_regions {
            return Err(ModelError::IndexOutOfRange(self.index(Metric::NumTrips)));
        }
        Ok(())
    }

    pub fn index(&self, metric: Metric) -> HistIndex {
        HistIndex::new(self.activity, metric.index(), self.region, self.direction.index())
    }

    pub fn metric_value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::NumTrips => 1.0,
            Metric::Distance => self.distance_km,
            Metric::Duration => self.duration_s,
        }
    }
}

/// Per (activity, metric) divisors S(a, m). Always strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleTable {
    schema: Schema,
    values: Vec<f64>,
}

impl ScaleTable {
    pub fn new(schema: Schema, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != schema.num_slices() as usize {
            return Err(ModelError::ScaleTable(format!(
                "expected {} entries, got {}",
                schema.num_slices(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(ModelError::ScaleTable(format!("scale {bad} is not strictly positive and finite")));
        }
        Ok(ScaleTable { schema, values })
    }

    pub fn uniform(schema: Schema, value: f64) -> Result<Self, ModelError> {
        Self::new(schema, vec![value; schema.num_slices() as usize])
    }

    pub fn identity(schema: Schema) -> Self {
        ScaleTable { schema, values: vec![1.0; schema.num_slices() as usize] }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn get(&self, activity: u32, metric: u32) -> f64 {
        self.values[(activity * self.schema.num_metrics + metric) as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_identity(&self) -> bool {
        self.values.iter().all(|v| *v == 1.0)
    }

    /// Short hex digest of the table for release metadata.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        let out = hasher.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reads a CSV with header `a,m,S`. Every slice must be present exactly once.
    pub fn read_csv(path: &Path, schema: Schema) -> Result<Self, ModelError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| ModelError::ScaleTable(format!("{}: {e}", path.display())))?;
        let mut values = vec![f64::NAN; schema.num_slices() as usize];
        for row in reader.deserialize::<(u32, u32, f64)>() {
            let (a, m, s) = row.map_err(|e| ModelError::ScaleTable(format!("{}: {e}", path.display())))?;
            if a >= schema.num_activities || m >= schema.num_metrics {
                return Err(ModelError::ScaleTable(format!("slice ({a},{m}) outside schema")));
            }
            let slot = &mut values[(a * schema.num_metrics + m) as usize];
            if !slot.is_nan() {
                return Err(ModelError::ScaleTable(format!("duplicate slice ({a},{m})")));
            }
            *slot = s;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(ModelError::ScaleTable(format!("{}: missing slices", path.display())));
        }
        Self::new(schema, values)
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("a,m,S\n");
        for a in 0..self.schema.num_activities {
            for m in 0..self.schema.num_metrics {
                out.push_str(&format!("{a},{m},{}\n", self.get(a, m)));
            }
        }
        std::fs::write(path, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_count_at_scale() {
        let s = Schema::new(9, 3, 50_000).unwrap();
        assert_eq!(s.partition_count(), 4_050_000);
        assert_eq!(s.partition_count() / s.num_metrics as u64, 1_350_000);
        assert!(Schema::new(0, 3, 1).is_err());
    }

    #[test]
    fn linear_index_follows_canonical_order() {
        let s = Schema::new(2, 3, 4).unwrap();
        let all: Vec<_> = s.indices().collect();
        assert_eq!(all.len() as u64, s.partition_count());
        for (i, idx) in all.iter().enumerate() {
            assert_eq!(s.linear_index(idx), i as u64);
        }
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn scale_table_rejects_non_positive() {
        let s = Schema::new(1, 2, 1).unwrap();
        assert!(ScaleTable::new(s, vec![1.0, 0.0]).is_err());
        assert!(ScaleTable::new(s, vec![1.0]).is_err());
        assert!(ScaleTable::new(s, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn scale_table_csv_round_trip() {
        let s = Schema::new(2, 3, 1).unwrap();
        let t = ScaleTable::new(s, vec![1.0, 2.5, 3.0, 4.0, 5.0, 1e4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scales.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(ScaleTable::read_csv(&p, s).unwrap(), t);
    }

    #[test]
    fn trip_validation() {
        let s = Schema::desk_default();
        let mut t = TripRecord {
            event_time: Timestamp(0),
            activity: 2,
            region: 5,
            direction: Direction::Within,
            distance_km: 1.0,
            duration_s: 60.0,
        };
        assert!(t.validate(&s).is_ok());
        t.distance_km = -1.0;
        assert!(t.validate(&s).is_err());
        t.distance_km = 1.0;
        t.region = 50;
        assert!(t.validate(&s).is_err());
    }
}
