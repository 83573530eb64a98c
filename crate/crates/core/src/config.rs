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

//! Experiment configuration, read from a TOML document.
//!
//! Relative paths inside the document resolve against the directory that
//! holds it. `epsilon = inf` and `clip = inf` are valid TOML floats.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{AvailabilityProfile, ConstraintPolicy, Tier};
use crate::dp::{MechanismConfig, NoiseDomain, Variant};
use crate::eval::{default_activities, ActivityParams, SyntheticCorpusConfig};
use crate::model::{ScaleTable, Schema};
use crate::server::{EligibilityConfig, ServerConfig};
use crate::time::{Timestamp, WindowAlignment, DAY, HOUR};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("missing file {path}: referenced by {field}")]
    MissingFile { field: &'static str, path: PathBuf },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream. Required: there is no implicit entropy.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub fleet: FleetSection,
    pub task: TaskSection,
    #[serde(default)]
    pub mechanism: MechanismSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    /// Directory relative paths resolve against. Not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub num_devices: usize,
    pub num_regions: u32,
    /// RFC 3339 start of the first generated week.
    pub start: String,
    pub num_weeks: u32,
    pub region_zipf_exponent: f64,
    pub home_region_share: f64,
    pub direction_mix: [f64; 3],
    /// Calibration data is a second corpus drawn with seed + this offset.
    pub proxy_seed_offset: u64,
    pub activities: Vec<ActivityParams>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = SyntheticCorpusConfig::default();
        CorpusSection {
            num_devices: d.num_devices,
            num_regions: d.num_regions,
            start: d.start.to_string(),
            num_weeks: d.num_weeks,
            region_zipf_exponent: d.region_zipf_exponent,
            home_region_share: d.home_region_share,
            direction_mix: d.direction_mix,
            proxy_seed_offset: 1000,
            activities: default_activities(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub check_in_rate: f64,
    pub p_idle: f64,
    pub p_wifi: f64,
    pub p_charging: f64,
    pub p_upload_failure: f64,
    pub p_ack_loss: f64,
}

impl ProfileSection {
    fn high_end() -> Self {
        ProfileSection {
            check_in_rate: 0.5,
            p_idle: 0.6,
            p_wifi: 0.6,
            p_charging: 0.35,
            p_upload_failure: 0.02,
            p_ack_loss: 0.01,
        }
    }

    fn low_end() -> Self {
        ProfileSection {
            check_in_rate: 0.3,
            p_idle: 0.5,
            p_wifi: 0.4,
            p_charging: 0.25,
            p_upload_failure: 0.08,
            p_ack_loss: 0.03,
        }
    }

    pub fn profile(&self, tier: Tier) -> AvailabilityProfile {
        AvailabilityProfile {
            tier,
            check_in_rate: self.check_in_rate,
            p_idle: self.p_idle,
            p_wifi: self.p_wifi,
            p_charging: self.p_charging,
            p_upload_failure: self.p_upload_failure,
            p_ack_loss: self.p_ack_loss,
        }
    }
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self::high_end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSection {
    pub high_end_share: f64,
    pub high_end: ProfileSection,
    pub low_end: ProfileSection,
    /// Constraint policies to simulate. The first one produces the releases;
    /// every one contributes reach rows.
    pub policies: Vec<String>,
    pub device_ttl_days: u32,
    pub check_in_spacing_hours: u32,
    pub tick_hours: u32,
    pub num_nodes: usize,
    pub batch_size: u64,
    pub level0_ttl_days: u32,
    pub level1_ttl_days: u32,
    pub level0_min_contributions: u64,
    pub rollup_every_hours: u32,
    pub crash_every_hours: Option<u32>,
}

impl Default for FleetSection {
    fn default() -> Self {
        FleetSection {
            high_end_share: 0.5,
            high_end: ProfileSection::high_end(),
            low_end: ProfileSection::low_end(),
            policies: vec!["idle".into(), "idle+wifi+charging".into()],
            device_ttl_days: 28,
            check_in_spacing_hours: 24,
            tick_hours: 1,
            num_nodes: 4,
            batch_size: 1000,
            level0_ttl_days: 3,
            level1_ttl_days: 21,
            level0_min_contributions: 1,
            rollup_every_hours: 24,
            crash_every_hours: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "default_query_id")]
    pub query_id: String,
    pub query_path: PathBuf,
    #[serde(default = "default_alignment")]
    pub alignment: WindowAlignment,
    /// Start of the first window; defaults to the corpus start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<String>,
    /// Defaults to as many windows as the corpus covers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_windows: Option<usize>,
    /// Registration time; defaults to the corpus start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registered_at: Option<String>,
    #[serde(default = "default_grace_hours")]
    pub grace_hours: u32,
    #[serde(default = "default_min_contributions")]
    pub min_contributions: u64,
    #[serde(default)]
    pub min_days_between_participation: u32,
    #[serde(default = "default_true")]
    pub require_new_data: bool,
    #[serde(default = "default_population")]
    pub population: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approver: Option<String>,
}

fn default_query_id() -> String {
    "workload".into()
}
fn default_alignment() -> WindowAlignment {
    WindowAlignment::CivilWeek
}
fn default_grace_hours() -> u32 {
    48
}
fn default_min_contributions() -> u64 {
    1000
}
fn default_true() -> bool {
    true
}
fn default_population() -> String {
    "synthetic".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismSection {
    pub variant: String,
    pub epsilon: f64,
    /// Joint clip bound; calibrated on the proxy corpus when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    /// Row-major C(a,m) for budget split; calibrated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_table: Option<Vec<f64>>,
    /// CSV of S(a,m) for activity-metric scaling; calibrated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_table: Option<PathBuf>,
    pub tau: f64,
    pub strict_threshold: bool,
    pub quantile: f64,
    pub noise_domain: NoiseDomain,
}

impl Default for MechanismSection {
    fn default() -> Self {
        MechanismSection {
            variant: Variant::ActivityMetricScaling.name().into(),
            epsilon: 2.0,
            clip: None,
            clip_table: None,
            scale_table: None,
            tau: 0.0,
            strict_threshold: true,
            quantile: 0.95,
            noise_domain: NoiseDomain::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    /// Noise seeds 0..seeds.
    pub seeds: u64,
    pub variants: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            epsilons: vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            seeds: 10,
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
        }
    }
}

/// Parsed variant list, rejecting unknown names.
pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>, ConfigError> {
    names
        .iter()
        .map(|n| {
            Variant::parse(n.trim()).ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                ConfigError::Invalid(format!("unknown variant {n:?}; expected one of {}", known.join(", ")))
            })
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks everything that can be checked without running anything,
    /// including that referenced files exist.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.corpus_config(self.seed)?.validate().map_err(ConfigError::Invalid)?;
        let f = &self.fleet;
        if !(0.0..=1.0).contains(&f.high_end_share) {
            return invalid("fleet.high_end_share must lie in [0,1]");
        }
        for tier in [Tier::HighEnd, Tier::LowEnd] {
            self.profile(tier).validate().map_err(|e| ConfigError::Invalid(format!("fleet.{}: {e}", tier.name())))?;
        }
        self.policies()?;
        if f.tick_hours == 0 || f.rollup_every_hours == 0 || f.crash_every_hours == Some(0) {
            return invalid("fleet tick and timer intervals must be positive");
        }
        if f.num_nodes == 0 || f.batch_size == 0 || f.level0_min_contributions == 0 || f.device_ttl_days == 0 {
            return invalid("fleet.num_nodes, batch_size, level0_min_contributions and device_ttl_days must be positive");
        }
        if self.task.min_contributions == 0 {
            return invalid("task.min_contributions must be at least 1");
        }
        if self.task.num_windows == Some(0) {
            return invalid("task.num_windows must be at least 1");
        }
        self.window_start()?;
        self.registered_at()?;
        let query = self.resolve(&self.task.query_path);
        if !query.is_file() {
            return Err(ConfigError::MissingFile { field: "task.query_path", path: query });
        }
        if let Some(p) = &self.mechanism.scale_table {
            let p = self.resolve(p);
            if !p.is_file() {
                return Err(ConfigError::MissingFile { field: "mechanism.scale_table", path: p });
            }
        }
        parse_variants(std::slice::from_ref(&self.mechanism.variant))?;
        let m = &self.mechanism;
        if m.epsilon.is_nan() || m.epsilon <= 0.0 {
            return invalid("mechanism.epsilon must be positive (inf disables noise)");
        }
        if let Some(s) = &self.sweep {
            parse_variants(&s.variants)?;
            if s.epsilons.is_empty() || s.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                return invalid("sweep.epsilons must be a non-empty list of finite positive values");
            }
            if s.seeds == 0 {
                return invalid("sweep.seeds must be at least 1");
            }
        }
        Ok(())
    }

    pub fn corpus_config(&self, seed: u64) -> Result<SyntheticCorpusConfig, ConfigError> {
        let c = &self.corpus;
        Ok(SyntheticCorpusConfig {
            num_devices: c.num_devices,
            num_regions: c.num_regions,
            activities: c.activities.clone(),
            region_zipf_exponent: c.region_zipf_exponent,
            home_region_share: c.home_region_share,
            direction_mix: c.direction_mix,
            start: Timestamp::parse(&c.start).map_err(|e| ConfigError::Invalid(format!("corpus.start: {e}")))?,
            num_weeks: c.num_weeks,
            seed,
        })
    }

    pub fn schema(&self) -> Schema {
        Schema { num_activities: self.corpus.activities.len() as u32, num_metrics: 3, num_regions: self.corpus.num_regions }
    }

    pub fn window_start(&self) -> Result<Timestamp, ConfigError> {
        match &self.task.start {
            Some(s) => Timestamp::parse(s).map_err(|e| ConfigError::Invalid(format!("task.start: {e}"))),
            None => Timestamp::parse(&self.corpus.start).map_err(|e| ConfigError::Invalid(format!("corpus.start: {e}"))),
        }
    }

    pub fn registered_at(&self) -> Result<Timestamp, ConfigError> {
        match &self.task.registered_at {
            Some(s) => Timestamp::parse(s).map_err(|e| ConfigError::Invalid(format!("task.registered_at: {e}"))),
            None => Timestamp::parse(&self.corpus.start).map_err(|e| ConfigError::Invalid(format!("corpus.start: {e}"))),
        }
    }

    pub fn profile(&self, tier: Tier) -> AvailabilityProfile {
        match tier {
            Tier::HighEnd => self.fleet.high_end.profile(tier),
            Tier::LowEnd => self.fleet.low_end.profile(tier),
        }
    }

    pub fn policies(&self) -> Result<Vec<ConstraintPolicy>, ConfigError> {
        if self.fleet.policies.is_empty() {
            return invalid("fleet.policies must name at least one policy");
        }
        self.fleet
            .policies
            .iter()
            .map(|p| ConstraintPolicy::parse(p).ok_or_else(|| ConfigError::Invalid(format!("unknown policy {p:?}"))))
            .collect()
    }

    pub fn server_config(&self) -> ServerConfig {
        let f = &self.fleet;
        ServerConfig {
            num_nodes: f.num_nodes,
            batch_size: f.batch_size,
            level0_ttl_s: f.level0_ttl_days as i64 * DAY,
            level1_ttl_s: f.level1_ttl_days as i64 * DAY,
            level0_min_contributions: f.level0_min_contributions,
            min_check_in_spacing_s: f.check_in_spacing_hours as i64 * HOUR,
        }
    }

    pub fn eligibility(&self) -> EligibilityConfig {
        EligibilityConfig {
            min_days_between_participation: self.task.min_days_between_participation,
            require_new_data: self.task.require_new_data,
        }
    }

    pub fn variant(&self) -> Variant {
        Variant::parse(&self.mechanism.variant).expect("validated")
    }

    /// Reads the configured scale table, naming the path on failure.
    pub fn scale_table(&self, schema: Schema) -> Result<Option<ScaleTable>, ConfigError> {
        let Some(p) = &self.mechanism.scale_table else {
            return Ok(None);
        };
        let path = self.resolve(p);
        if !path.is_file() {
            return Err(ConfigError::MissingFile { field: "mechanism.scale_table", path });
        }
        ScaleTable::read_csv(&path, schema)
            .map(Some)
            .map_err(|e| ConfigError::Invalid(format!("scale table {}: {e}", path.display())))
    }

    /// Applies the threshold, quantile and noise-domain settings to `base`.
    pub fn finish_mechanism(&self, mut base: MechanismConfig) -> MechanismConfig {
        let m = &self.mechanism;
        base.tau = m.tau;
        base.strict_threshold = m.strict_threshold;
        base.quantile = m.quantile;
        base.noise_domain = m.noise_domain;
        base
    }
}
