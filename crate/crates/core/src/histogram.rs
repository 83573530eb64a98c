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

//! Sparse histograms over the (activity, metric, region, direction) space
//! and the algebra the mechanisms are built from: L1 norm, clipping,
//! pointwise addition and per-slice scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{HistIndex, ModelError, ScaleTable, Schema};

/// Sparse map from index tuple to value. Absent entries are zero; iteration
/// is always in canonical (lexicographic) index order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexedHistogram {
    schema: Schema,
    entries: BTreeMap<HistIndex, f64>,
}

impl PartialEq for IndexedHistogram {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.nonzero().eq(other.nonzero())
    }
}

impl IndexedHistogram {
    pub fn new(schema: Schema) -> Self {
        IndexedHistogram { schema, entries: BTreeMap::new() }
    }

    pub fn from_entries(
        schema: Schema,
        entries: impl IntoIterator<Item = (HistIndex, f64)>,
    ) -> Result<Self, ModelError> {
        let mut h = Self::new(schema);
        for (idx, v) in entries {
            h.add_at(idx, v)?;
        }
        Ok(h)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: &HistIndex) -> f64 {
        self.entries.get(idx).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, idx: HistIndex, value: f64) -> Result<(), ModelError> {
        self.schema.check(&idx)?;
        self.entries.insert(idx, value);
        Ok(())
    }

    pub fn add_at(&mut self, idx: HistIndex, value: f64) -> Result<(), ModelError> {
        self.schema.check(&idx)?;
        *self.entries.entry(idx).or_insert(0.0) += value;
        Ok(())
    }

    pub fn remove(&mut self, idx: &HistIndex) -> Option<f64> {
        self.entries.remove(idx)
    }

    /// Stored entries in canonical order, explicit zeros included.
    pub fn iter(&self) -> impl Iterator<Item = (&HistIndex, &f64)> {
        self.entries.iter()
    }

    /// Entries that are not zero, in canonical order.
    pub fn nonzero(&self) -> impl Iterator<Item = (&HistIndex, &f64)> {
        self.entries.iter().filter(|(_, v)| **v != 0.0)
    }

    pub fn retain(&mut self, f: impl FnMut(&HistIndex, &mut f64) -> bool) {
        self.entries.retain(f)
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.values().map(|v| v.abs()).sum()
    }

    /// L1 norm of the (activity, metric) slice.
    pub fn slice_l1(&self, activity: u32, metric: u32) -> f64 {
        let lo = HistIndex::new(activity, metric, 0, 0);
        let hi = HistIndex::new(activity, metric, u32::MAX, u32::MAX);
        self.entries.range(lo..=hi).map(|(_, v)| v.abs()).sum()
    }

    /// The (activity, metric) slice as its own histogram.
    pub fn slice(&self, activity: u32, metric: u32) -> IndexedHistogram {
        let lo = HistIndex::new(activity, metric, 0, 0);
        let hi = HistIndex::new(activity, metric, u32::MAX, u32::MAX);
        IndexedHistogram {
            schema: self.schema,
            entries: self.entries.range(lo..=hi).map(|(k, v)| (*k, *v)).collect(),
        }
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> IndexedHistogram {
        IndexedHistogram {
            schema: self.schema,
            entries: self.entries.iter().map(|(k, v)| (*k, v * factor)).collect(),
        }
    }

    /// Scales the histogram by min(1, C/‖h‖₁). The zero histogram is returned
    /// unchanged.
    ///
    /// The factor is nudged down until the rounded L1 norm of the result is at
    /// most C, so the bound holds exactly and clipping is idempotent.
    pub fn clip(&self, bound: f64) -> Result<IndexedHistogram, ModelError> {
        let mut factor = clip_factor(self.l1_norm(), bound)?;
        if factor == 1.0 {
            return Ok(self.clone());
        }
        loop {
            let out = self.scaled(factor);
            if out.l1_norm() <= bound {
                return Ok(out);
            }
            factor = factor.next_down();
        }
    }

    /// Pointwise sum. Keys are merged in canonical order.
    pub fn add(&self, other: &IndexedHistogram) -> Result<IndexedHistogram, ModelError> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &IndexedHistogram) -> Result<(), ModelError> {
        if self.schema != other.schema {
            return Err(ModelError::SchemaMismatch(self.schema, other.schema));
        }
        for (k, v) in &other.entries {
            *self.entries.entry(*k).or_insert(0.0) += *v;
        }
        Ok(())
    }

    /// Divides entry (a,m,r,d) by S(a,m), or multiplies by it when `invert`.
    pub fn scale_by_table(&self, table: &ScaleTable, invert: bool) -> Result<IndexedHistogram, ModelError> {
        if self.schema != *table.schema() {
            return Err(ModelError::SchemaMismatch(self.schema, *table.schema()));
        }
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let s = table.get(k.activity, k.metric);
                (*k, if invert { v * s } else { v / s })
            })
            .collect();
        Ok(IndexedHistogram { schema: self.schema, entries })
    }

    /// Canonical binary form: little-endian u32 entry count, then per nonzero
    /// entry four u32 indices and one f64, sorted by index.
    pub fn encode(&self) -> Vec<u8> {
        let rows: Vec<_> = self.nonzero().collect();
        let mut out = Vec::with_capacity(4 + rows.len() * 24);
        out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
        for (k, v) in rows {
            for i in [k.activity, k.metric, k.region, k.direction] {
                out.extend_from_slice(&i.to_le_bytes());
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(schema: Schema, bytes: &[u8]) -> Result<IndexedHistogram, ModelError> {
        let err = |m: &str| ModelError::Decode(m.to_string());
        if bytes.len() < 4 {
            return Err(err("truncated length prefix"));
        }
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[4..];
        if body.len() != n * 24 {
            return Err(err("length prefix does not match payload size"));
        }
        let mut h = IndexedHistogram::new(schema);
        let mut prev: Option<HistIndex> = None;
        for chunk in body.chunks_exact(24) {
            let u = |i: usize| u32::from_le_bytes(chunk[i * 4..i * 4 + 4].try_into().unwrap());
            let idx = HistIndex::new(u(0), u(1), u(2), u(3));
            let v = f64::from_le_bytes(chunk[16..24].try_into().unwrap());
            if prev.is_some_and(|p| p >= idx) {
                return Err(err("entries not in canonical order"));
            }
            prev = Some(idx);
            h.set(idx, v)?;
        }
        Ok(h)
    }
}

/// min(1, C/norm) with the zero-norm convention of factor 1.
pub fn clip_factor(norm: f64, bound: f64) -> Result<f64, ModelError> {
    if !(bound > 0.0) {
        return Err(ModelError::InvalidParameter(format!("clip bound must be > 0, got {bound}")));
    }
    if norm == 0.0 || norm <= bound {
        Ok(1.0)
    } else {
        Ok(bound / norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new(3, 3, 4).unwrap()
    }

    fn idx(a: u32, m: u32, r: u32, d: u32) -> HistIndex {
        HistIndex::new(a, m, r, d)
    }

    fn hist(entries: &[(HistIndex, f64)]) -> IndexedHistogram {
        IndexedHistogram::from_entries(schema(), entries.iter().copied()).unwrap()
    }

    #[test]
    fn l1_norm_examples() {
        assert_eq!(IndexedHistogram::new(schema()).l1_norm(), 0.0);
        assert_eq!(hist(&[(idx(0, 0, 0, 0), 3.0), (idx(1, 1, 1, 1), -4.0)]).l1_norm(), 7.0);
        let ones: Vec<_> = (0..5).map(|i| (idx(i % 3, 0, i % 4, 0), 1.0)).collect();
        assert_eq!(hist(&ones).l1_norm(), 5.0);
    }

    #[test]
    fn clip_examples() {
        let h = hist(&[(idx(0, 0, 0, 0), 0.5), (idx(0, 1, 0, 0), 1.5)]);
        assert_eq!(h.clip(5.0).unwrap(), h);

        let h = hist(&[(idx(0, 0, 0, 0), 3.0), (idx(1, 2, 3, 1), 4.0)]);
        let c = h.clip(3.5).unwrap();
        assert_eq!(c.get(&idx(0, 0, 0, 0)), 1.5);
        assert_eq!(c.get(&idx(1, 2, 3, 1)), 2.0);

        let zero = IndexedHistogram::new(schema());
        assert_eq!(zero.clip(1.0).unwrap(), zero);
        assert!(h.clip(0.0).is_err());
        assert!(h.clip(-1.0).is_err());
        assert!(h.clip(f64::NAN).is_err());
        assert_eq!(h.clip(f64::INFINITY).unwrap(), h);
    }

    #[test]
    fn add_examples() {
        let a = hist(&[(idx(0, 0, 0, 0), 1.0)]);
        assert_eq!(a.add(&IndexedHistogram::new(schema())).unwrap(), a);
        let b = hist(&[(idx(0, 0, 0, 0), 2.0)]);
        assert_eq!(a.add(&b).unwrap().get(&idx(0, 0, 0, 0)), 3.0);
        let mut acc = IndexedHistogram::new(schema());
        for _ in 0..7 {
            acc.add_assign(&a).unwrap();
        }
        assert_eq!(acc.get(&idx(0, 0, 0, 0)), 7.0);
        let other = IndexedHistogram::new(Schema::new(1, 1, 1).unwrap());
        assert!(a.add(&other).is_err());
    }

    #[test]
    fn scale_by_table_examples() {
        let s = schema();
        let h = hist(&[(idx(0, 1, 2, 0), 10.0), (idx(2, 2, 1, 2), 3.0)]);
        assert_eq!(h.scale_by_table(&ScaleTable::identity(s), false).unwrap(), h);

        let mut values = vec![1.0; 9];
        values[1] = 5.0; // S(0, 1)
        let table = ScaleTable::new(s, values).unwrap();
        let scaled = h.scale_by_table(&table, false).unwrap();
        assert_eq!(scaled.get(&idx(0, 1, 2, 0)), 2.0);
        assert_eq!(scaled.get(&idx(2, 2, 1, 2)), 3.0);
    }

    #[test]
    fn explicit_zero_equals_absent() {
        let mut a = hist(&[(idx(0, 0, 0, 0), 1.0)]);
        let b = a.clone();
        a.set(idx(2, 2, 3, 2), 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.encode(), b.encode());
    }

    #[test]
    fn out_of_range_index_rejected() {
        let mut h = IndexedHistogram::new(schema());
        assert!(h.set(idx(3, 0, 0, 0), 1.0).is_err());
        assert!(h.add_at(idx(0, 0, 0, 3), 1.0).is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        let s = schema();
        assert!(IndexedHistogram::decode(s, &[1, 0]).is_err());
        assert!(IndexedHistogram::decode(s, &[1, 0, 0, 0]).is_err());
        let h = hist(&[(idx(0, 0, 0, 0), 1.0), (idx(0, 0, 1, 0), 2.0)]);
        let mut bytes = h.encode();
        // swap the two rows to break canonical order
        let (head, tail) = bytes[4..].split_at_mut(24);
        head.swap_with_slice(tail);
        assert!(IndexedHistogram::decode(s, &bytes).is_err());
    }

    fn arb_hist() -> impl Strategy<Value = IndexedHistogram> {
        prop::collection::vec(((0u32..3, 0u32..3, 0u32..4, 0u32..3), -1e6f64..1e6), 0..30).prop_map(|rows| {
            IndexedHistogram::from_entries(
                schema(),
                rows.into_iter().map(|((a, m, r, d), v)| (HistIndex::new(a, m, r, d), v)),
            )
            .unwrap()
        })
    }

    // Integer-valued entries: f64 sums of these are exact, so associativity
    // can be checked bit-for-bit.
    fn arb_int_hist() -> impl Strategy<Value = IndexedHistogram> {
        prop::collection::vec(((0u32..3, 0u32..3, 0u32..4, 0u32..3), -1_000_000i32..1_000_000), 0..30).prop_map(
            |rows| {
                IndexedHistogram::from_entries(
                    schema(),
                    rows.into_iter().map(|((a, m, r, d), v)| (HistIndex::new(a, m, r, d), v as f64)),
                )
                .unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_bounded(h in arb_hist(), c in 1e-3f64..1e7) {
            let once = h.clip(c).unwrap();
            prop_assert!(once.l1_norm() <= c);
            prop_assert_eq!(once.clip(c).unwrap().encode(), once.encode());
        }

        #[test]
        fn clip_preserves_direction(h in arb_hist(), c in 1e-3f64..1e7) {
            let clipped = h.clip(c).unwrap();
            let factor = clip_factor(h.l1_norm(), c).unwrap();
            for (k, v) in h.iter() {
                let w = clipped.get(k);
                prop_assert!(v.signum() == w.signum() || *v == 0.0);
                if *v != 0.0 {
                    prop_assert!(((w / v) - factor).abs() <= 1e-12 * factor);
                    prop_assert!(w.abs() <= v.abs());
                }
            }
        }

        #[test]
        fn add_commutative(a in arb_hist(), b in arb_hist()) {
            prop_assert_eq!(a.add(&b).unwrap().encode(), b.add(&a).unwrap().encode());
        }

        #[test]
        fn add_associative_on_integer_values(a in arb_int_hist(), b in arb_int_hist(), c in arb_int_hist()) {
            let left = a.add(&b).unwrap().add(&c).unwrap();
            let right = a.add(&b.add(&c).unwrap()).unwrap();
            prop_assert_eq!(left.encode(), right.encode());
        }

        #[test]
        fn scale_round_trip(h in arb_hist(), scales in prop::collection::vec(1e-3f64..1e5, 9)) {
            let table = ScaleTable::new(schema(), scales).unwrap();
            let back = h.scale_by_table(&table, false).unwrap().scale_by_table(&table, true).unwrap();
            for (k, v) in h.iter() {
                prop_assert!((back.get(k) - v).abs() <= 1e-12 * v.abs());
            }
        }

        #[test]
        fn encode_decode(h in arb_hist()) {
            let bytes = h.encode();
            prop_assert_eq!(IndexedHistogram::decode(schema(), &bytes).unwrap(), h);
        }
    }
}
