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

//! Mergeable grouped summation with a minimum-contribution reporting gate.
//!
//! A core accepts client payloads (string keys, one f64 per value column),
//! sums them per key, and refuses to report until it has seen at least
//! `min_contributions` client contributions. Cores over disjoint update
//! streams can be merged in any order with bit-identical results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::exact::{ExactError, ExactSum};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AggError {
    #[error("invalid core config: {0}")]
    Config(String),
    #[error("MalformedUpdate: {0}")]
    MalformedUpdate(String),
    #[error("cannot merge cores with different configs")]
    ConfigMismatch,
    #[error("ReportBeforeThreshold: {count} of {required} contributions")]
    ReportBeforeThreshold { count: u64, required: u64 },
    #[error("accumulator: {0}")]
    Exact(#[from] ExactError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggCoreConfig {
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    /// The privacy threshold: reports need at least this many contributions.
    pub min_contributions: u64,
}

impl AggCoreConfig {
    pub fn validate(&self) -> Result<(), AggError> {
        if self.min_contributions < 1 {
            return Err(AggError::Config("min_contributions must be at least 1".into()));
        }
        if self.value_columns.is_empty() {
            return Err(AggError::Config("at least one value column is required".into()));
        }
        Ok(())
    }

    /// The same columns with a different threshold.
    pub fn with_threshold(&self, min_contributions: u64) -> AggCoreConfig {
        AggCoreConfig { min_contributions, ..self.clone() }
    }
}

const KEY_SEPARATOR: char = '\u{1f}';
const KEY_ESCAPE: char = '\\';

/// Joins key fields into one string key. Separator and escape characters
/// inside fields are escaped, so distinct tuples give distinct keys.
pub fn encode_key<S: AsRef<str>>(fields: &[S]) -> String {
    let mut out = String::new();
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            out.push(KEY_SEPARATOR);
        }
        for c in f.as_ref().chars() {
            if c == KEY_SEPARATOR || c == KEY_ESCAPE {
                out.push(KEY_ESCAPE);
            }
            out.push(c);
        }
    }
    out
}

pub fn decode_key(key: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut chars = key.chars();
    while let Some(c) = chars.next() {
        match c {
            KEY_ESCAPE => {
                if let Some(n) = chars.next() {
                    fields.last_mut().unwrap().push(n);
                }
            }
            KEY_SEPARATOR => fields.push(String::new()),
            c => fields.last_mut().unwrap().push(c),
        }
    }
    fields
}

/// Columnar client result: one row per key, one value per value column.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Payload {
    pub fn new(rows: Vec<(String, Vec<f64>)>) -> Self {
        Payload { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Varint row count; per row a varint-length-prefixed UTF-8 key followed
    /// by the little-endian f64 values.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_varint(&mut out, self.rows.len() as u64);
        for (key, values) in &self.rows {
            put_varint(&mut out, key.len() as u64);
            out.extend_from_slice(key.as_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], num_columns: usize) -> Result<Payload, AggError> {
        let bad = |m: &str| AggError::MalformedUpdate(m.to_string());
        let mut at = 0usize;
        let n = get_varint(bytes, &mut at).ok_or_else(|| bad("truncated row count"))?;
        let mut rows = Vec::new();
        for _ in 0..n {
            let len = get_varint(bytes, &mut at).ok_or_else(|| bad("truncated key length"))? as usize;
            let key_bytes = bytes.get(at..at.checked_add(len).ok_or_else(|| bad("key length overflow"))?);
            let key = std::str::from_utf8(key_bytes.ok_or_else(|| bad("truncated key"))?)
                .map_err(|_| bad("key is not UTF-8"))?
                .to_string();
            at += len;
            let mut values = Vec::with_capacity(num_columns);
            for _ in 0..num_columns {
                let chunk = bytes.get(at..at + 8).ok_or_else(|| bad("truncated value"))?;
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                at += 8;
            }
            rows.push((key, values));
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Payload { rows })
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn get_varint(bytes: &[u8], at: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*at)?;
        *at += 1;
        v |= ((b & 0x7f) as u64) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

/// Grouped sums with their contribution count. This is what a core reports
/// and what partial aggregates hold.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedSums {
    pub sums: BTreeMap<String, Vec<ExactSum>>,
    pub contribution_count: u64,
}

impl GroupedSums {
    pub fn merge(&mut self, other: &GroupedSums) -> Result<(), AggError> {
        let mut staged = Vec::with_capacity(other.sums.len());
        for (k, vs) in &other.sums {
            let merged = match self.sums.get(k) {
                Some(mine) => {
                    if mine.len() != vs.len() {
                        return Err(AggError::ConfigMismatch);
                    }
                    mine.iter().zip(vs).map(|(a, b)| a.checked_add(*b)).collect::<Result<Vec<_>, _>>()?
                }
                None => vs.clone(),
            };
            staged.push((k.clone(), merged));
        }
        self.sums.extend(staged);
        self.contribution_count += other.contribution_count;
        Ok(())
    }

    /// Rows as floats in canonical key order.
    pub fn rows(&self) -> Vec<(String, Vec<f64>)> {
        self.sums.iter().map(|(k, vs)| (k.clone(), vs.iter().map(|v| v.to_f64()).collect())).collect()
    }

    /// Canonical byte form: sorted keys with raw accumulator values, then the
    /// count. Used to compare states bit-for-bit.
    pub fn serialize_canonical(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_varint(&mut out, self.sums.len() as u64);
        for (k, vs) in &self.sums {
            put_varint(&mut out, k.len() as u64);
            out.extend_from_slice(k.as_bytes());
            for v in vs {
                out.extend_from_slice(&v.raw().to_le_bytes());
            }
        }
        out.extend_from_slice(&self.contribution_count.to_le_bytes());
        out
    }
}

/// Ephemeral in-memory aggregation state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregationCore {
    config: AggCoreConfig,
    state: GroupedSums,
}

impl AggregationCore {
    pub fn init(config: AggCoreConfig) -> Result<Self, AggError> {
        config.validate()?;
        Ok(AggregationCore { config, state: GroupedSums::default() })
    }

    pub fn config(&self) -> &AggCoreConfig {
        &self.config
    }

    pub fn contribution_count(&self) -> u64 {
        self.state.contribution_count
    }

    pub fn num_keys(&self) -> usize {
        self.state.sums.len()
    }

    /// Adds one client contribution. On error nothing changes.
    pub fn accumulate(&mut self, payload: &Payload) -> Result<(), AggError> {
        let width = self.config.value_columns.len();
        let mut staged: Vec<(&str, Vec<ExactSum>)> = Vec::with_capacity(payload.rows.len());
        for (key, values) in &payload.rows {
            if values.len() != width {
                return Err(AggError::MalformedUpdate(format!(
                    "row {key:?} has {} values, core expects {width}",
                    values.len()
                )));
            }
            let quantized = values.iter().map(|v| ExactSum::from_f64(*v)).collect::<Result<Vec<_>, _>>()?;
            staged.push((key.as_str(), quantized));
        }
        // Overflow is checked before anything is written.
        let mut merged: BTreeMap<&str, Vec<ExactSum>> = BTreeMap::new();
        for (key, vals) in staged {
            let base = match merged.remove(key) {
                Some(v) => v,
                None => self.state.sums.get(key).cloned().unwrap_or_else(|| vec![ExactSum::ZERO; width]),
            };
            let sum = base.iter().zip(&vals).map(|(a, b)| a.checked_add(*b)).collect::<Result<Vec<_>, _>>()?;
            merged.insert(key, sum);
        }
        for (key, sum) in merged {
            match self.state.sums.get_mut(key) {
                Some(slot) => *slot = sum,
                None => {
                    self.state.sums.insert(key.to_string(), sum);
                }
            }
        }
        self.state.contribution_count += 1;
        Ok(())
    }

    pub fn merge(mut self, other: AggregationCore) -> Result<AggregationCore, AggError> {
        if self.config != other.config {
            return Err(AggError::ConfigMismatch);
        }
        self.state.merge(&other.state)?;
        Ok(self)
    }

    /// Folds already-reported sums (e.g. a partial aggregate) into this core.
    pub fn absorb(&mut self, sums: &GroupedSums) -> Result<(), AggError> {
        let width = self.config.value_columns.len();
        if sums.sums.values().any(|v| v.len() != width) {
            return Err(AggError::ConfigMismatch);
        }
        self.state.merge(sums)
    }

    pub fn can_report(&self) -> bool {
        self.state.contribution_count >= self.config.min_contributions
    }

    /// Releases the accumulated sums, consuming the core.
    pub fn report(self) -> Result<GroupedSums, AggError> {
        if !self.can_report() {
            return Err(AggError::ReportBeforeThreshold {
                count: self.state.contribution_count,
                required: self.config.min_contributions,
            });
        }
        Ok(self.state)
    }

    /// Hands the state to another core of the same session without passing
    /// the gate. Only the session layer uses this, for shard roll-up.
    pub(crate) fn into_sums(self) -> GroupedSums {
        self.state
    }

    pub fn serialize_state(&self) -> Vec<u8> {
        self.state.serialize_canonical()
    }
}
