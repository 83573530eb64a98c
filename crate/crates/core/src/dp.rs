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

//! Differentially private Group-By-Sum mechanisms.
//!
//! Three ways of releasing the (activity, metric, region, direction)
//! histogram under ε-DP with (device, window) as the privacy unit:
//!
//! * [`Variant::JointClipping`]: clip each device's joint histogram to L1
//!   norm C, sum, add Laplace(C/ε) to every coordinate.
//! * [`Variant::BudgetSplit`]: clip each (activity, metric) slice to its own
//!   bound C(a,m) and noise every slice with its share of ε.
//! * [`Variant::ActivityMetricScaling`]: divide each slice by S(a,m), clip
//!   jointly to C, noise with Laplace(C/ε), then multiply back by S(a,m).
//!
//! Noise for coordinate (a,m,r,d) of window w is drawn from a counter-based
//! generator addressed by (seed, w, linear index), so a release is a pure
//! function of its inputs and seed.

use serde::{Deserialize, Serialize};

use crate::exact::HistogramAccumulator;
use crate::histogram::IndexedHistogram;
use crate::model::{HistIndex, Metric, ModelError, ScaleTable, Schema, TripRecord};
use crate::rng::CounterRng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DpError {
    #[error("invalid mechanism config: {0}")]
    Config(String),
    #[error("laplace scale must be > 0, got {0}")]
    InvalidScale(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    JointClipping,
    BudgetSplit,
    ActivityMetricScaling,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::JointClipping, Variant::BudgetSplit, Variant::ActivityMetricScaling];

    pub fn name(self) -> &'static str {
        match self {
            Variant::JointClipping => "joint_clipping",
            Variant::BudgetSplit => "budget_split",
            Variant::ActivityMetricScaling => "activity_metric_scaling",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Which coordinates receive noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDomain {
    /// Every coordinate of the schema, observed or not. Required for DP.
    #[default]
    Full,
    /// Only coordinates present in the aggregate. NOT differentially
    /// private: the set of released keys reveals which partitions had data.
    ObservedOnlyNotDp,
}

/// Parameters of one mechanism instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub variant: Variant,
    /// Per (device, window). `f64::INFINITY` disables noise (not private).
    pub epsilon: f64,
    /// Joint clip bound C for JointClipping and ActivityMetricScaling.
    pub clip: f64,
    /// Per-slice clip bounds C(a,m), row-major over (a, m). BudgetSplit only.
    pub clip_table: Option<Vec<f64>>,
    /// Fraction of ε given to each slice; uniform 1/(A·M) when absent.
    pub budget_allocation: Option<Vec<f64>>,
    /// Scale table S(a,m). ActivityMetricScaling only.
    pub scales: Option<ScaleTable>,
    /// Release threshold; partitions with descaled value < τ are dropped.
    pub tau: f64,
    /// With τ = 0, also drop negative values.
    pub strict_threshold: bool,
    pub quantile: f64,
    pub noise_domain: NoiseDomain,
}

impl MechanismConfig {
    pub fn joint_clipping(epsilon: f64, clip: f64) -> Self {
        MechanismConfig {
            variant: Variant::JointClipping,
            epsilon,
            clip,
            clip_table: None,
            budget_allocation: None,
            scales: None,
            tau: 0.0,
            strict_threshold: false,
            quantile: 0.95,
            noise_domain: NoiseDomain::Full,
        }
    }

    pub fn budget_split(epsilon: f64, clip_table: Vec<f64>) -> Self {
        MechanismConfig {
            variant: Variant::BudgetSplit,
            clip: f64::NAN,
            clip_table: Some(clip_table),
            ..Self::joint_clipping(epsilon, f64::NAN)
        }
    }

    pub fn activity_metric_scaling(epsilon: f64, clip: f64, scales: ScaleTable) -> Self {
        MechanismConfig {
            variant: Variant::ActivityMetricScaling,
            scales: Some(scales),
            ..Self::joint_clipping(epsilon, clip)
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), DpError> {
        let bad = |m: String| Err(DpError::Config(m));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau must be >= 0, got {}", self.tau));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return bad(format!("quantile must lie in (0,1), got {}", self.quantile));
        }
        let check_clip = |c: f64, what: &str| -> Result<(), DpError> {
            if !(c > 0.0) {
                return Err(DpError::Config(format!("{what} must be > 0, got {c}")));
            }
            if c.is_infinite() && self.epsilon.is_finite() {
                return Err(DpError::Config(format!("{what} is unbounded but epsilon is finite")));
            }
            Ok(())
        };
        match self.variant {
            Variant::JointClipping => check_clip(self.clip, "clip")?,
            Variant::ActivityMetricScaling => {
                check_clip(self.clip, "clip")?;
                match &self.scales {
                    None => return bad("activity_metric_scaling requires a scale table".into()),
                    Some(s) if s.schema() != schema => return bad("scale table schema mismatch".into()),
                    Some(_) => {}
                }
            }
            Variant::BudgetSplit => {
                let n = schema.num_slices() as usize;
                let Some(table) = &self.clip_table else {
                    return bad("budget_split requires a per-slice clip table".into());
                };
                if table.len() != n {
                    return bad(format!("clip table has {} entries, expected {n}", table.len()));
                }
                for (i, c) in table.iter().enumerate() {
                    let (a, m) = (i as u32 / schema.num_metrics, i as u32 % schema.num_metrics);
                    check_clip(*c, &format!("clip for slice ({a},{m})"))?;
                }
                if let Some(alloc) = &self.budget_allocation {
                    if alloc.len() != n || alloc.iter().any(|f| !(*f > 0.0)) {
                        return bad("budget allocation needs one positive share per slice".into());
                    }
                    let total: f64 = alloc.iter().sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return bad(format!("budget allocation sums to {total}, expected 1"));
                    }
                }
            }
        }
        Ok(())
    }

    fn slice_clip(&self, schema: &Schema, a: u32, m: u32) -> f64 {
        self.clip_table.as_ref().expect("validated")[(a * schema.num_metrics + m) as usize]
    }

    fn slice_epsilon(&self, schema: &Schema, a: u32, m: u32) -> f64 {
        match &self.budget_allocation {
            Some(alloc) => self.epsilon * alloc[(a * schema.num_metrics + m) as usize],
            None => self.epsilon / schema.num_slices() as f64,
        }
    }

    /// Per-device contribution bounding; the part that runs on the client.
    pub fn bound_contribution(&self, h: &IndexedHistogram) -> Result<IndexedHistogram, DpError> {
        let schema = *h.schema();
        Ok(match self.variant {
            Variant::JointClipping => h.clip(self.clip)?,
            Variant::ActivityMetricScaling => {
                h.scale_by_table(self.scales.as_ref().expect("validated"), false)?.clip(self.clip)?
            }
            Variant::BudgetSplit => {
                let mut out = IndexedHistogram::new(schema);
                for a in 0..schema.num_activities {
                    for m in 0..schema.num_metrics {
                        let slice = h.slice(a, m);
                        if slice.is_empty() {
                            continue;
                        }
                        out.add_assign(&slice.clip(self.slice_clip(&schema, a, m))?)?;
                    }
                }
                out
            }
        })
    }

    /// Laplace scale for a coordinate, in the noised (possibly scaled) domain.
    /// Zero when ε is infinite.
    pub fn noise_scale(&self, schema: &Schema, idx: &HistIndex) -> f64 {
        if self.epsilon.is_infinite() {
            return 0.0;
        }
        match self.variant {
            Variant::JointClipping | Variant::ActivityMetricScaling => self.clip / self.epsilon,
            Variant::BudgetSplit => {
                self.slice_clip(schema, idx.activity, idx.metric) / self.slice_epsilon(schema, idx.activity, idx.metric)
            }
        }
    }

    pub fn metadata(&self) -> ReleaseMetadata {
        ReleaseMetadata {
            variant: self.variant,
            epsilon: format!("{}", self.epsilon),
            clip: match self.variant {
                Variant::BudgetSplit => "per_slice".to_string(),
                _ => format!("{}", self.clip),
            },
            scale_digest: self.scales.as_ref().map(|s| s.digest()),
            tau: self.tau,
            noise_domain: self.noise_domain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReleaseMetadata {
    pub variant: Variant,
    /// Decimal, or "inf".
    pub epsilon: String,
    pub clip: String,
    pub scale_digest: Option<String>,
    pub tau: f64,
    pub noise_domain: NoiseDomain,
}

/// A released, noised histogram for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedRelease {
    pub window_id: String,
    pub histogram: IndexedHistogram,
    pub metadata: ReleaseMetadata,
    pub suppressed: usize,
}

// ---------------------------------------------------------------------------
// Laplace primitive

/// Quantile function of Laplace(0, b): −b·sgn(u−½)·ln(1−2|u−½|).
pub fn laplace_inverse_cdf(u: f64, b: f64) -> f64 {
    let centered = u - 0.5;
    if centered == 0.0 {
        return 0.0;
    }
    -b * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// One Laplace(0, b) draw from `rng` by inversion.
pub fn sample_laplace<R: rand::RngCore>(b: f64, rng: &mut R) -> Result<f64, DpError> {
    if !(b > 0.0) || b.is_infinite() {
        return Err(DpError::InvalidScale(b));
    }
    Ok(laplace_inverse_cdf(crate::rng::to_open_unit(rng.next_u64()), b))
}

fn noise_generator(seed: u64, window_id: &str) -> CounterRng {
    CounterRng::new(seed, &format!("laplace/{window_id}"))
}

/// Adds independent Laplace noise to every coordinate of the domain (or only
/// observed ones in the non-private debug mode). `scale_of` gives the Laplace
/// scale per coordinate; zero means no noise.
pub fn laplace_mechanism(
    aggregate: &IndexedHistogram,
    domain: NoiseDomain,
    seed: u64,
    window_id: &str,
    scale_of: impl Fn(&HistIndex) -> f64,
) -> IndexedHistogram {
    let schema = *aggregate.schema();
    let rng = noise_generator(seed, window_id);
    let noised = |idx: &HistIndex, v: f64| {
        let b = scale_of(idx);
        if b == 0.0 {
            v
        } else {
            v + laplace_inverse_cdf(rng.uniform_at(schema.linear_index(idx), 0), b)
        }
    };
    let mut out = IndexedHistogram::new(schema);
    match domain {
        NoiseDomain::Full => {
            for idx in schema.indices() {
                out.set(idx, noised(&idx, aggregate.get(&idx))).expect("domain index");
            }
        }
        NoiseDomain::ObservedOnlyNotDp => {
            for (idx, v) in aggregate.iter() {
                out.set(*idx, noised(idx, *v)).expect("domain index");
            }
        }
    }
    out
}

/// Drops entries with value < τ. With τ = 0 nothing is dropped unless
/// `strict`, in which case negative entries go. Returns the suppressed count.
pub fn apply_threshold(h: &IndexedHistogram, tau: f64, strict: bool) -> (IndexedHistogram, usize) {
    let mut out = h.clone();
    if tau == 0.0 && !strict {
        return (out, 0);
    }
    let before = out.len();
    out.retain(|_, v| !(*v < tau));
    let suppressed = before - out.len();
    (out, suppressed)
}

/// Server half of every mechanism: noise the summed, bounded contributions,
/// undo the per-slice scaling and threshold.
pub fn release(
    config: &MechanismConfig,
    aggregate: &IndexedHistogram,
    window_id: &str,
    seed: u64,
) -> Result<NoisedRelease, DpError> {
    let schema = *aggregate.schema();
    config.validate(&schema)?;
    let noised = laplace_mechanism(aggregate, config.noise_domain, seed, window_id, |idx| {
        config.noise_scale(&schema, idx)
    });
    let descaled = match (config.variant, &config.scales) {
        (Variant::ActivityMetricScaling, Some(s)) => noised.scale_by_table(s, true)?,
        _ => noised,
    };
    let (histogram, suppressed) = apply_threshold(&descaled, config.tau, config.strict_threshold);
    Ok(NoisedRelease { window_id: window_id.to_string(), histogram, metadata: config.metadata(), suppressed })
}

/// Bounds every device's contribution and sums exactly.
pub fn pre_noise_aggregate(
    config: &MechanismConfig,
    schema: Schema,
    devices: &[IndexedHistogram],
) -> Result<HistogramAccumulator, DpError> {
    config.validate(&schema)?;
    let mut acc = HistogramAccumulator::new(schema);
    for h in devices {
        acc.add(&config.bound_contribution(h)?)?;
    }
    Ok(acc)
}

/// Runs any variant end to end on per-device raw histograms.
pub fn run_mechanism(
    config: &MechanismConfig,
    schema: Schema,
    devices: &[IndexedHistogram],
    window_id: &str,
    seed: u64,
) -> Result<NoisedRelease, DpError> {
    let acc = pre_noise_aggregate(config, schema, devices)?;
    release(config, &acc.to_histogram(), window_id, seed)
}

pub fn mech_joint_clipping(
    schema: Schema,
    devices: &[IndexedHistogram],
    clip: f64,
    epsilon: f64,
    tau: f64,
    window_id: &str,
    seed: u64,
) -> Result<NoisedRelease, DpError> {
    let cfg = MechanismConfig::joint_clipping(epsilon, clip).with_tau(tau);
    run_mechanism(&cfg, schema, devices, window_id, seed)
}

pub fn mech_budget_split(
    schema: Schema,
    devices: &[IndexedHistogram],
    clip_table: Vec<f64>,
    epsilon: f64,
    tau: f64,
    window_id: &str,
    seed: u64,
) -> Result<NoisedRelease, DpError> {
    let cfg = MechanismConfig::budget_split(epsilon, clip_table).with_tau(tau);
    run_mechanism(&cfg, schema, devices, window_id, seed)
}

/// Activity + metric scaling on per-device trip records: each device runs
/// [`client_work`], the server sums, noises and descales.
#[allow(clippy::too_many_arguments)]
pub fn mech_activity_metric_scaling(
    schema: Schema,
    devices: &[Vec<TripRecord>],
    scales: &ScaleTable,
    clip: f64,
    epsilon: f64,
    tau: f64,
    window_id: &str,
    seed: u64,
) -> Result<NoisedRelease, DpError> {
    let cfg = MechanismConfig::activity_metric_scaling(epsilon, clip, scales.clone()).with_tau(tau);
    cfg.validate(&schema)?;
    let mut acc = HistogramAccumulator::new(schema);
    for records in devices {
        acc.add(&client_work(schema, records, scales, clip)?)?;
    }
    release(&cfg, &acc.to_histogram(), window_id, seed)
}

/// Builds the device's scaled histogram record by record, adding
/// 1/S(a,trips), distance/S(a,distance) and duration/S(a,duration), then
/// clips it to L1 norm C.
pub fn client_work(
    schema: Schema,
    records: &[TripRecord],
    scales: &ScaleTable,
    clip: f64,
) -> Result<IndexedHistogram, DpError> {
    let mut v = IndexedHistogram::new(schema);
    for rec in records {
        for metric in Metric::ALL {
            if metric.index() >= schema.num_metrics {
                continue;
            }
            let s = scales.get(rec.activity, metric.index());
            v.add_at(rec.index(metric), rec.metric_value(metric) / s)?;
        }
    }
    Ok(v.clip(clip)?)
}

/// Raw per-device histogram h_i (no scaling, no clipping).
pub fn device_histogram(schema: Schema, records: &[TripRecord]) -> Result<IndexedHistogram, DpError> {
    let mut h = IndexedHistogram::new(schema);
    for rec in records {
        for metric in Metric::ALL {
            if metric.index() < schema.num_metrics {
                h.add_at(rec.index(metric), rec.metric_value(metric))?;
            }
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Calibration on proxy data

/// Nearest-rank quantile: the ceil(q·n)-th smallest value (1-based).
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Scale table result with the slices that had no data.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub table: ScaleTable,
    pub empty_slices: Vec<(u32, u32)>,
}

/// S(a,m) = q-quantile of the per-device slice L1 norms, over devices with a
/// nonzero norm in that slice. Empty slices get 1.
pub fn calibrate_scales(schema: Schema, proxy: &[IndexedHistogram], q: f64) -> Result<Calibration, DpError> {
    let mut values = Vec::with_capacity(schema.num_slices() as usize);
    let mut empty_slices = Vec::new();
    for a in 0..schema.num_activities {
        for m in 0..schema.num_metrics {
            let norms: Vec<f64> = proxy.iter().map(|h| h.slice_l1(a, m)).filter(|n| *n > 0.0).collect();
            match nearest_rank_quantile(&norms, q) {
                Some(s) => values.push(s),
                None => {
                    log::warn!("calibration: slice ({a},{m}) has no data, using scale 1");
                    empty_slices.push((a, m));
                    values.push(1.0);
                }
            }
        }
    }
    Ok(Calibration { table: ScaleTable::new(schema, values)?, empty_slices })
}

/// C = q-quantile of the L1 norms of the given (already scaled) histograms.
pub fn calibrate_clip(histograms: &[IndexedHistogram], q: f64) -> Option<f64> {
    let norms: Vec<f64> = histograms.iter().map(|h| h.l1_norm()).collect();
    nearest_rank_quantile(&norms, q)
}

/// Per-slice clip table for BudgetSplit from unscaled slice norms.
pub fn calibrate_clip_table(schema: Schema, proxy: &[IndexedHistogram], q: f64) -> Result<Vec<f64>, DpError> {
    Ok(calibrate_scales(schema, proxy, q)?.table.values().to_vec())
}
