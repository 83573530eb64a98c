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

//! Order-independent summation.
//!
//! Float addition is not associative, so two merge trees over the same
//! updates generally disagree in the last bits. Each input is rounded once
//! onto a fixed 2^-56 grid and accumulated as an `i128`; integer addition is
//! associative, which makes every merge order produce the same bits.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

use crate::histogram::IndexedHistogram;
use crate::model::{HistIndex, ModelError, Schema};

const FRAC_BITS: i32 = 56;
/// Largest accepted input magnitude, 2^52.
pub const MAX_INPUT: f64 = 4_503_599_627_370_496.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExactError {
    #[error("value {0} is not finite or exceeds the accumulator range")]
    OutOfRange(f64),
    #[error("accumulator overflow")]
    Overflow,
}

/// Fixed-point sum with 2^-56 resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExactSum(i128);

impl ExactSum {
    pub const ZERO: ExactSum = ExactSum(0);

    pub fn from_f64(x: f64) -> Result<ExactSum, ExactError> {
        if !x.is_finite() || x.abs() > MAX_INPUT {
            return Err(ExactError::OutOfRange(x));
        }
        let scaled = (x * 2f64.powi(FRAC_BITS)).round();
        Ok(ExactSum(scaled as i128))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 * 2f64.powi(-FRAC_BITS)
    }

    pub fn checked_add(self, other: ExactSum) -> Result<ExactSum, ExactError> {
        self.0.checked_add(other.0).map(ExactSum).ok_or(ExactError::Overflow)
    }

    pub fn add_f64(&mut self, x: f64) -> Result<(), ExactError> {
        *self = self.checked_add(Self::from_f64(x)?)?;
        Ok(())
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn abs(self) -> ExactSum {
        ExactSum(self.0.abs())
    }
}

impl Add for ExactSum {
    type Output = ExactSum;
    fn add(self, rhs: ExactSum) -> ExactSum {
        ExactSum(self.0 + rhs.0)
    }
}

impl AddAssign for ExactSum {
    fn add_assign(&mut self, rhs: ExactSum) {
        self.0 += rhs.0;
    }
}

impl Sub for ExactSum {
    type Output = ExactSum;
    fn sub(self, rhs: ExactSum) -> ExactSum {
        ExactSum(self.0 - rhs.0)
    }
}

/// Cross-device histogram sum on exact accumulators.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistogramAccumulator {
    schema: Schema,
    sums: BTreeMap<HistIndex, ExactSum>,
}

impl HistogramAccumulator {
    pub fn new(schema: Schema) -> Self {
        HistogramAccumulator { schema, sums: BTreeMap::new() }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn add(&mut self, h: &IndexedHistogram) -> Result<(), ModelError> {
        if *h.schema() != self.schema {
            return Err(ModelError::SchemaMismatch(self.schema, *h.schema()));
        }
        for (k, v) in h.iter() {
            let q = ExactSum::from_f64(*v).map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
            let slot = self.sums.entry(*k).or_default();
            *slot = slot.checked_add(q).map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &HistogramAccumulator) -> Result<(), ModelError> {
        if other.schema != self.schema {
            return Err(ModelError::SchemaMismatch(self.schema, other.schema));
        }
        for (k, v) in &other.sums {
            let slot = self.sums.entry(*k).or_default();
            *slot = slot.checked_add(*v).map_err(|e| ModelError::InvalidParameter(e.to_string()))?;
        }
        Ok(())
    }

    pub fn get(&self, idx: &HistIndex) -> ExactSum {
        self.sums.get(idx).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HistIndex, &ExactSum)> {
        self.sums.iter()
    }

    /// L1 norm of `self - other`, computed exactly and rounded once.
    pub fn l1_distance(&self, other: &HistogramAccumulator) -> f64 {
        let mut total = ExactSum::ZERO;
        for k in self.sums.keys().chain(other.sums.keys().filter(|k| !self.sums.contains_key(k))) {
            total += (self.get(k) - other.get(k)).abs();
        }
        total.to_f64()
    }

    /// Per (activity, metric) slice L1 norm of `self - other`.
    pub fn slice_l1_distance(&self, other: &HistogramAccumulator, activity: u32, metric: u32) -> f64 {
        let mut total = ExactSum::ZERO;
        for k in self.sums.keys().chain(other.sums.keys().filter(|k| !self.sums.contains_key(k))) {
            if k.activity == activity && k.metric == metric {
                total += (self.get(k) - other.get(k)).abs();
            }
        }
        total.to_f64()
    }

    pub fn to_histogram(&self) -> IndexedHistogram {
        let mut h = IndexedHistogram::new(self.schema);
        for (k, v) in &self.sums {
            h.set(*k, v.to_f64()).expect("accumulator keys are validated on insert");
        }
        h
    }
}
