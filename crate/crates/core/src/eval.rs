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

//! Synthetic trip corpus, exact ground truth and accuracy metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{self, DpError, MechanismConfig, Variant};
use crate::histogram::IndexedHistogram;
use crate::model::{Direction, HistIndex, Metric, ScaleTable, Schema, TripRecord};
use crate::rng::CounterRng;
use crate::time::{TimeWindow, Timestamp, WEEK};

/// Distances are multiples of 2^-10 km and durations whole seconds, so any
/// sum of them is exact in f64 and every summation order agrees.
pub const DISTANCE_QUANTUM_KM: f64 = 1.0 / 1024.0;

/// Relative error the deployment aims for.
pub const TARGET_WEIGHTED_ERROR: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityParams {
    pub name: String,
    /// Probability that a device uses this activity at all.
    pub adoption: f64,
    /// Mean trips per adopting device-week.
    pub trips_per_week: f64,
    pub distance_median_km: f64,
    pub distance_sigma: f64,
    pub speed_kmh: f64,
    pub speed_sigma: f64,
    /// Spread of the per-device rate multiplier for this activity (log scale).
    pub rate_sigma: f64,
}

impl ActivityParams {
    #[allow(clippy::too_many_arguments)]
    fn new(name: &str, adoption: f64, trips: f64, dist: f64, dist_sigma: f64, speed: f64, speed_sigma: f64, rate_sigma: f64) -> Self {
        ActivityParams {
            name: name.into(),
            adoption,
            trips_per_week: trips,
            distance_median_km: dist,
            distance_sigma: dist_sigma,
            speed_kmh: speed,
            speed_sigma,
            rate_sigma,
        }
    }
}

/// Nine activities from walking to flying. Distances span four orders of
/// magnitude; short frequent walks dominate trip counts while a minority of
/// long-haul flyers dominates the largest device totals.
pub fn default_activities() -> Vec<ActivityParams> {
    vec![
        ActivityParams::new("walking", 0.90, 20.0, 0.25, 0.6, 4.5, 0.15, 0.3),
        ActivityParams::new("running", 0.10, 3.0, 5.0, 0.4, 10.0, 0.15, 0.3),
        ActivityParams::new("cycling", 0.15, 5.0, 3.0, 0.6, 16.0, 0.2, 0.3),
        ActivityParams::new("driving", 0.50, 10.0, 6.0, 0.5, 40.0, 0.3, 0.3),
        ActivityParams::new("bus", 0.20, 6.0, 5.0, 0.5, 22.0, 0.25, 0.3),
        ActivityParams::new("train", 0.10, 4.0, 20.0, 0.6, 60.0, 0.3, 0.3),
        ActivityParams::new("motorcycle", 0.03, 6.0, 8.0, 0.6, 40.0, 0.3, 0.3),
        ActivityParams::new("ferry", 0.02, 2.0, 15.0, 0.6, 25.0, 0.2, 0.3),
        ActivityParams::new("flying", 0.12, 2.0, 5000.0, 0.8, 750.0, 0.15, 0.5),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub num_devices: usize,
    pub num_regions: u32,
    pub activities: Vec<ActivityParams>,
    pub region_zipf_exponent: f64,
    /// Share of trips in the device's home region.
    pub home_region_share: f64,
    /// Probabilities of within / outbound / inbound.
    pub direction_mix: [f64; 3],
    pub start: Timestamp,
    pub num_weeks: u32,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            num_devices: 10_000,
            num_regions: 50,
            activities: default_activities(),
            region_zipf_exponent: 1.0,
            home_region_share: 0.85,
            direction_mix: [0.7, 0.15, 0.15],
            // Monday 2024-05-13
            start: Timestamp(1_715_558_400),
            num_weeks: 1,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn schema(&self) -> Schema {
        Schema {
            num_activities: self.activities.len() as u32,
            num_metrics: Metric::ALL.len() as u32,
            num_regions: self.num_regions,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.schema().validate().map_err(|e| e.to_string())?;
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and positive, got {v}"))
            }
        };
        for a in &self.activities {
            if !(0.0..=1.0).contains(&a.adoption) {
                return Err(format!("{}: adoption must lie in [0,1]", a.name));
            }
            if !(a.trips_per_week.is_finite() && a.trips_per_week >= 0.0) {
                return Err(format!("{}: trips_per_week must be finite and non-negative", a.name));
            }
            pos(&format!("{}.distance_median_km", a.name), a.distance_median_km)?;
            pos(&format!("{}.distance_sigma", a.name), a.distance_sigma)?;
            pos(&format!("{}.speed_kmh", a.name), a.speed_kmh)?;
            pos(&format!("{}.speed_sigma", a.name), a.speed_sigma)?;
            pos(&format!("{}.rate_sigma", a.name), a.rate_sigma)?;
        }
        pos("region_zipf_exponent", self.region_zipf_exponent)?;
        if !(0.0..=1.0).contains(&self.home_region_share) {
            return Err("home_region_share must lie in [0,1]".into());
        }
        let total: f64 = self.direction_mix.iter().sum();
        if self.direction_mix.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err("direction_mix must be non-negative and sum to 1".into());
        }
        Ok(())
    }

    pub fn windows(&self) -> Vec<TimeWindow> {
        crate::time::consecutive_windows(self.start, crate::time::WindowAlignment::CivilWeek, self.num_weeks as usize)
    }
}

pub fn quantize_distance(km: f64) -> f64 {
    (km / DISTANCE_QUANTUM_KM).round() * DISTANCE_QUANTUM_KM
}

pub fn quantize_duration(s: f64) -> f64 {
    s.round()
}

/// One record list per device, sorted by time. Each device draws from its
/// own stream, so the corpus does not depend on generation order.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Vec<Vec<TripRecord>>, String> {
    cfg.validate()?;
    let root = CounterRng::new(cfg.seed, "corpus");
    let zipf = Zipf::new(cfg.num_regions as f64, cfg.region_zipf_exponent).map_err(|e| e.to_string())?;
    let dists: Vec<(LogNormal<f64>, LogNormal<f64>, LogNormal<f64>)> = cfg
        .activities
        .iter()
        .map(|a| {
            (
                LogNormal::new(a.distance_median_km.ln(), a.distance_sigma).expect("validated"),
                LogNormal::new(a.speed_kmh.ln(), a.speed_sigma).expect("validated"),
                // mean-one multiplier
                LogNormal::new(-a.rate_sigma * a.rate_sigma / 2.0, a.rate_sigma).expect("validated"),
            )
        })
        .collect();
    let (p_within, p_out) = (cfg.direction_mix[0], cfg.direction_mix[1]);

    let corpus = (0..cfg.num_devices as u64)
        .into_par_iter()
        .map(|device| {
            let mut rng = root.stream(device);
            let home = zipf.sample(&mut rng) as u32 - 1;
            let multipliers: Vec<Option<f64>> = cfg
                .activities
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let adopted = rng.random::<f64>() < a.adoption;
                    let m = dists[i].2.sample(&mut rng);
                    adopted.then_some(m)
                })
                .collect();
            let mut records = Vec::new();
            for week in 0..cfg.num_weeks as i64 {
                let week_start = cfg.start.plus(week * WEEK);
                for (a, params) in cfg.activities.iter().enumerate() {
                    let Some(mult) = multipliers[a] else { continue };
                    let mean = params.trips_per_week * mult;
                    if mean <= 0.0 {
                        continue;
                    }
                    let n = Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64;
                    for _ in 0..n {
                        let region = if rng.random::<f64>() < cfg.home_region_share {
                            home
                        } else {
                            zipf.sample(&mut rng) as u32 - 1
                        };
                        let u: f64 = rng.random();
                        let direction = if u < p_within {
                            Direction::Within
                        } else if u < p_within + p_out {
                            Direction::Outbound
                        } else {
                            Direction::Inbound
                        };
                        let distance = quantize_distance(dists[a].0.sample(&mut rng));
                        let speed = dists[a].1.sample(&mut rng);
                        let duration = quantize_duration(distance / speed * 3600.0);
                        let offset = rng.random_range(0..WEEK);
                        records.push(TripRecord {
                            event_time: week_start.plus(offset),
                            activity: a as u32,
                            region,
                            direction,
                            distance_km: distance,
                            duration_s: duration,
                        });
                    }
                }
            }
            records.sort_by_key(|r| r.event_time);
            records
        })
        .collect();
    Ok(corpus)
}

/// Per-device raw histograms for one window; devices without trips in the
/// window are skipped.
pub fn window_histograms(schema: Schema, corpus: &[Vec<TripRecord>], window: &TimeWindow) -> Vec<IndexedHistogram> {
    corpus
        .iter()
        .filter_map(|recs| {
            let in_window: Vec<TripRecord> = recs.iter().filter(|r| window.contains(r.event_time)).cloned().collect();
            (!in_window.is_empty()).then(|| dp::device_histogram(schema, &in_window).expect("generated records fit"))
        })
        .collect()
}

/// Exact aggregate of one window plus the number of distinct devices that
/// contributed to each (activity, region, direction) partition.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTruth {
    pub histogram: IndexedHistogram,
    pub device_counts: BTreeMap<(u32, u32, u32), u64>,
}

/// Ground truth by plain group-by-sum, with no bounding and no noise.
pub fn exact_workload(schema: Schema, corpus: &[Vec<TripRecord>], window: &TimeWindow) -> WindowTruth {
    let mut histogram = IndexedHistogram::new(schema);
    let mut device_counts: BTreeMap<(u32, u32, u32), u64> = BTreeMap::new();
    for recs in corpus {
        let mut seen = BTreeSet::new();
        for r in recs.iter().filter(|r| window.contains(r.event_time)) {
            for m in Metric::ALL {
                histogram.add_at(r.index(m), r.metric_value(m)).expect("record fits schema");
            }
            seen.insert((r.activity, r.region, r.direction.index()));
        }
        for k in seen {
            *device_counts.entry(k).or_default() += 1;
        }
    }
    WindowTruth { histogram, device_counts }
}

/// Desk-scale device floor: max(20, 0.002 · devices).
pub fn evaluation_floor(num_devices: usize) -> u64 {
    20u64.max((0.002 * num_devices as f64).ceil() as u64)
}

/// Weighted relative error per metric. Partitions need at least `floor`
/// contributing devices and nonzero truth. Weights are n_{r,d,a}/n_r with
/// n the true trip counts, and the average is renormalized by the weight
/// total. `None` when nothing is eligible.
pub fn weighted_relative_error(
    truth: &IndexedHistogram,
    estimate: &IndexedHistogram,
    device_counts: &BTreeMap<(u32, u32, u32), u64>,
    floor: u64,
) -> Vec<Option<f64>> {
    let schema = *truth.schema();
    let mut region_trips = vec![0.0; schema.num_regions as usize];
    for (idx, v) in truth.iter() {
        if idx.metric == Metric::NumTrips.index() {
            region_trips[idx.region as usize] += v;
        }
    }
    (0..schema.num_metrics)
        .map(|m| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (&(a, r, d), &count) in device_counts {
                if count < floor {
                    continue;
                }
                let t = truth.get(&HistIndex::new(a, m, r, d));
                if t == 0.0 {
                    continue;
                }
                let n_r = region_trips[r as usize];
                if n_r <= 0.0 {
                    continue;
                }
                let w = truth.get(&HistIndex::new(a, Metric::NumTrips.index(), r, d)) / n_r;
                let e = estimate.get(&HistIndex::new(a, m, r, d));
                num += w * (t - e).abs() / t.abs();
                den += w;
            }
            (den > 0.0).then(|| num / den)
        })
        .collect()
}

/// Mean over partitions of (relative error / contributing devices).
/// Partitions with zero truth or zero devices are skipped.
pub fn per_user_mean_error(
    server: &IndexedHistogram,
    reference: &IndexedHistogram,
    device_counts: &BTreeMap<(u32, u32, u32), u64>,
) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (idx, &t) in reference.iter() {
        let count = device_counts.get(&(idx.activity, idx.region, idx.direction)).copied().unwrap_or(0);
        if t == 0.0 || count == 0 {
            continue;
        }
        total += (server.get(idx) - t).abs() / t.abs() / count as f64;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceReachReport {
    pub features_active: u64,
    pub downloaded: u64,
    pub uploaded: u64,
    pub h: f64,
}

/// H = |U| / |F|, with U ⊆ D ⊆ F enforced by intersection.
pub fn device_reach(active: &BTreeSet<u64>, downloaded: &BTreeSet<u64>, uploaded: &BTreeSet<u64>) -> DeviceReachReport {
    let d: BTreeSet<u64> = downloaded.intersection(active).copied().collect();
    let u = uploaded.intersection(&d).count() as u64;
    let f = active.len() as u64;
    DeviceReachReport {
        features_active: f,
        downloaded: d.len() as u64,
        uploaded: u,
        h: if f == 0 { 0.0 } else { u as f64 / f as f64 },
    }
}

// ---------------------------------------------------------------------------
// Calibration and the epsilon sweep

/// Clip bounds and scales computed once on proxy data.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibrations {
    pub quantile: f64,
    pub joint_clip: f64,
    pub slice_clips: Vec<f64>,
    pub scales: ScaleTable,
    pub scaled_clip: f64,
}

pub fn calibrate(schema: Schema, proxy: &[IndexedHistogram], q: f64) -> Result<Calibrations, DpError> {
    if proxy.is_empty() {
        return Err(DpError::Config("proxy corpus is empty".into()));
    }
    let joint_clip = dp::calibrate_clip(proxy, q).expect("non-empty");
    let scales = dp::calibrate_scales(schema, proxy, q)?.table;
    let scaled: Vec<IndexedHistogram> =
        proxy.iter().map(|h| h.scale_by_table(&scales, false)).collect::<Result<_, _>>()?;
    let scaled_clip = dp::calibrate_clip(&scaled, q).expect("non-empty");
    let slice_clips = scales.values().to_vec();
    Ok(Calibrations { quantile: q, joint_clip, slice_clips, scales, scaled_clip })
}

impl Calibrations {
    pub fn mechanism(&self, variant: Variant, epsilon: f64) -> MechanismConfig {
        let mut cfg = match variant {
            Variant::JointClipping => MechanismConfig::joint_clipping(epsilon, self.joint_clip),
            Variant::BudgetSplit => MechanismConfig::budget_split(epsilon, self.slice_clips.clone()),
            Variant::ActivityMetricScaling => {
                MechanismConfig::activity_metric_scaling(epsilon, self.scaled_clip, self.scales.clone())
            }
        };
        cfg.quantile = self.quantile;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub epsilon: f64,
    pub metric: Metric,
    pub seed: u64,
    pub weighted_relative_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: Variant,
    pub epsilon: f64,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Inputs shared by every cell of a sweep.
pub struct SweepInput<'a> {
    pub schema: Schema,
    pub devices: &'a [IndexedHistogram],
    pub truth: &'a WindowTruth,
    pub calibrations: &'a Calibrations,
    pub window_id: &'a str,
    pub floor: u64,
    pub tau: f64,
}

/// Every (variant, ε, seed) cell. The bounded aggregate depends only on the
/// variant, so it is computed once per variant and only noise is redrawn.
pub fn run_epsilon_sweep(
    input: &SweepInput<'_>,
    variants: &[Variant],
    epsilons: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, DpError> {
    let mut rows = Vec::new();
    for &variant in variants {
        let base = input.calibrations.mechanism(variant, 1.0);
        let aggregate = dp::pre_noise_aggregate(&base, input.schema, input.devices)?.to_histogram();
        let cells: Vec<(f64, u64)> = epsilons.iter().flat_map(|&e| seeds.iter().map(move |&s| (e, s))).collect();
        let results: Vec<Vec<SweepRow>> = cells
            .par_iter()
            .map(|&(epsilon, seed)| {
                let mut cfg = base.clone();
                cfg.epsilon = epsilon;
                cfg.tau = input.tau;
                let release = dp::release(&cfg, &aggregate, input.window_id, seed)?;
                let errors = weighted_relative_error(
                    &input.truth.histogram,
                    &release.histogram,
                    &input.truth.device_counts,
                    input.floor,
                );
                Ok(Metric::ALL
                    .iter()
                    .zip(errors)
                    .map(|(&metric, e)| SweepRow { variant, epsilon, metric, seed, weighted_relative_error: e })
                    .collect())
            })
            .collect::<Result<_, DpError>>()?;
        rows.extend(results.into_iter().flatten());
    }
    Ok(rows)
}

/// Mean and sample standard deviation over seeds for each cell.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Variant, u64, u32), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.variant, r.epsilon.to_bits(), r.metric.index());
        let slot = groups.entry(key).or_default();
        if let Some(e) = r.weighted_relative_error {
            slot.push(e);
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((variant, eps_bits, m), errs)| {
            let n = errs.len();
            let mean = if n == 0 { f64::NAN } else { errs.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            SummaryRow { variant, epsilon: f64::from_bits(eps_bits), metric: Metric::ALL[m as usize], mean, std, seeds: n }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.variant, a.metric.index()).cmp(&(b.variant, b.metric.index())).then(a.epsilon.total_cmp(&b.epsilon))
    });
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

pub fn write_results_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "epsilon", "metric", "seed", "weighted_relative_error"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.epsilon.to_string(),
            r.metric.name().to_string(),
            r.seed.to_string(),
            fmt_opt(r.weighted_relative_error),
        ])?;
    }
    w.flush()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# target_weighted_relative_error={TARGET_WEIGHTED_ERROR}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["variant", "epsilon", "metric", "mean", "std"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.epsilon.to_string(),
            r.metric.name().to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush()
}
