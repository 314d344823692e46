//! Flat `key = value` experiment configuration.
//!
//! Layering is defaults, then a config file, then command-line overrides.
//! Every key has a canonical rendering; the config hash is taken over those
//! renderings with `policies` left out, so runs of different policies on the
//! same setup share a hash.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mobility::GeoBBox;
use crate::orchestrator::{Policy, Targeting};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error("{flag}: {message}")]
    Flag { flag: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Synthetic,
    Trace(PathBuf),
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataset::Synthetic => f.write_str("synthetic"),
            Dataset::Trace(p) => write!(f, "trace:{}", p.display()),
        }
    }
}

impl std::str::FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "synthetic" {
            return Ok(Dataset::Synthetic);
        }
        match s.strip_prefix("trace:") {
            Some(p) if !p.trim().is_empty() => Ok(Dataset::Trace(PathBuf::from(p.trim()))),
            _ => Err(format!("expected 'synthetic' or 'trace:<path>', got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub policies: Vec<Policy>,
    pub horizon: usize,
    pub seed: u64,
    pub attack_every: u64,
    pub targeting: Targeting,
    pub recovery_delay: u64,
    /// `None` keeps an attacked node out until just before the next onset.
    pub quarantine: Option<u64>,

    pub grid_rows: usize,
    pub grid_cols: usize,
    pub grid_cell_km: f64,
    pub node_capacity: f64,

    pub instance_capacity: f64,
    pub service_costs: Vec<f64>,
    pub service_thresholds_ms: Vec<f64>,

    pub instances_per_service: usize,
    pub br_enabled: bool,
    pub placement_delay_weight: f64,
    pub placement_resource_weight: f64,

    pub delay_alpha_ms_per_km: f64,
    pub delay_base_ms: f64,
    pub queue_ms_per_unit: f64,

    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub epsilon: f64,
    pub kkt_tol: f64,
    pub max_iters: usize,

    pub quality_threshold: f64,
    pub quality_period: u64,

    pub trace_time_unit_s: f64,
    pub trace_max_gap_units: u64,
    pub trace_request_prob: f64,
    /// `None` centres a grid-sized box on the trace centroid.
    pub trace_bbox: Option<GeoBBox>,

    pub synthetic_vehicles: usize,
    pub synthetic_request_prob: f64,
    pub synthetic_v_min_kmh: f64,
    pub synthetic_v_max_kmh: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Synthetic,
            policies: Policy::ALL.to_vec(),
            horizon: 600,
            seed: 7,
            attack_every: 100,
            targeting: Targeting::MostLoaded,
            recovery_delay: 1,
            quarantine: None,
            grid_rows: 3,
            grid_cols: 3,
            grid_cell_km: 5.0,
            node_capacity: 100.0,
            instance_capacity: 30.0,
            service_costs: (0..8).map(|s| 10.0 + 2.0 * s as f64).collect(),
            service_thresholds_ms: (0..8).map(|s| 50.0 + 10.0 * s as f64).collect(),
            instances_per_service: 3,
            br_enabled: true,
            placement_delay_weight: 1.0,
            placement_resource_weight: 0.0,
            delay_alpha_ms_per_km: 2.0,
            delay_base_ms: 1.0,
            queue_ms_per_unit: 1000.0,
            k1: None,
            k2: None,
            epsilon: 1e-3,
            kkt_tol: 1e-8,
            max_iters: 400,
            quality_threshold: 0.5,
            quality_period: 5,
            trace_time_unit_s: 60.0,
            trace_max_gap_units: 5,
            trace_request_prob: 1.0,
            trace_bbox: None,
            synthetic_vehicles: 500,
            synthetic_request_prob: 0.7,
            synthetic_v_min_kmh: 20.0,
            synthetic_v_max_kmh: 60.0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "policies",
    "horizon",
    "seed",
    "attack_every",
    "attack.targeting",
    "recovery_delay",
    "quarantine",
    "grid.rows",
    "grid.cols",
    "grid.cell_km",
    "node.capacity",
    "service.instance_capacity",
    "service.costs",
    "service.delay_thresholds_ms",
    "placement.instances_per_service",
    "placement.strategy",
    "placement.delay_weight",
    "placement.resource_weight",
    "br.enabled",
    "delay.alpha_ms_per_km",
    "delay.base_ms",
    "queue.ms_per_unit",
    "lbpsvm.k1",
    "lbpsvm.k2",
    "lbpsvm.epsilon",
    "lbpsvm.kkt_tol",
    "solver.max_iters",
    "quality.threshold",
    "quality.period",
    "trace.time_unit_s",
    "trace.max_gap_units",
    "trace.request_prob",
    "trace.bbox",
    "synthetic.vehicles",
    "synthetic.request_prob",
    "synthetic.v_min_kmh",
    "synthetic.v_max_kmh",
];

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("'{v}': {e}"))
}

fn list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|x| num::<f64>(x.trim())).collect()
}

fn auto_or<T: std::str::FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: fmt::Display,
{
    if v == "auto" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn render_opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one setting. Errors carry no location; callers add it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = v.parse()?,
            "policies" => {
                let mut ps = Vec::new();
                for p in v.split(',').filter(|p| !p.trim().is_empty()) {
                    let p: Policy = p.parse()?;
                    if !ps.contains(&p) {
                        ps.push(p);
                    }
                }
                self.policies = ps;
            }
            "horizon" => self.horizon = num(v)?,
            "seed" => self.seed = num(v)?,
            "attack_every" => self.attack_every = num(v)?,
            "attack.targeting" => {
                self.targeting = match v {
                    "most-loaded" => Targeting::MostLoaded,
                    "random" => Targeting::Random,
                    _ => return Err(format!("'{v}': expected most-loaded or random")),
                }
            }
            "recovery_delay" => self.recovery_delay = num(v)?,
            "quarantine" => self.quarantine = auto_or(v)?,
            "grid.rows" => self.grid_rows = num(v)?,
            "grid.cols" => self.grid_cols = num(v)?,
            "grid.cell_km" => self.grid_cell_km = num(v)?,
            "node.capacity" => self.node_capacity = num(v)?,
            "service.instance_capacity" => self.instance_capacity = num(v)?,
            "service.costs" => self.service_costs = list(v)?,
            "service.delay_thresholds_ms" => self.service_thresholds_ms = list(v)?,
            "placement.instances_per_service" => self.instances_per_service = num(v)?,
            "placement.strategy" => {
                if v != "greedy" {
                    return Err(format!("'{v}': only 'greedy' is supported"));
                }
            }
            "placement.delay_weight" => self.placement_delay_weight = num(v)?,
            "placement.resource_weight" => self.placement_resource_weight = num(v)?,
            "br.enabled" => self.br_enabled = num(v)?,
            "delay.alpha_ms_per_km" => self.delay_alpha_ms_per_km = num(v)?,
            "delay.base_ms" => self.delay_base_ms = num(v)?,
            "queue.ms_per_unit" => self.queue_ms_per_unit = num(v)?,
            "lbpsvm.k1" => self.k1 = auto_or(v)?,
            "lbpsvm.k2" => self.k2 = auto_or(v)?,
            "lbpsvm.epsilon" => self.epsilon = num(v)?,
            "lbpsvm.kkt_tol" => self.kkt_tol = num(v)?,
            "solver.max_iters" => self.max_iters = num(v)?,
            "quality.threshold" => self.quality_threshold = num(v)?,
            "quality.period" => self.quality_period = num(v)?,
            "trace.time_unit_s" => self.trace_time_unit_s = num(v)?,
            "trace.max_gap_units" => self.trace_max_gap_units = num(v)?,
            "trace.request_prob" => self.trace_request_prob = num(v)?,
            "trace.bbox" => {
                self.trace_bbox = if v == "auto" {
                    None
                } else {
                    let b = list(v)?;
                    if b.len() != 4 {
                        return Err(format!("'{v}': expected min_lat,min_lon,max_lat,max_lon"));
                    }
                    Some(GeoBBox::new(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())?)
                }
            }
            "synthetic.vehicles" => self.synthetic_vehicles = num(v)?,
            "synthetic.request_prob" => self.synthetic_request_prob = num(v)?,
            "synthetic.v_min_kmh" => self.synthetic_v_min_kmh = num(v)?,
            "synthetic.v_max_kmh" => self.synthetic_v_max_kmh = num(v)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Applies a config file's text. `origin` names it in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError::Line { path: origin.to_string(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            self.set(k, v).map_err(err)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.policies.is_empty() {
            return bad("at least one policy is required".into());
        }
        if !self.br_enabled && self.policies.contains(&Policy::Br) {
            return bad("policy br requested with br.enabled = false".into());
        }
        if self.attack_every == 0 {
            return bad("attack_every must be positive".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || !(self.grid_cell_km > 0.0) {
            return bad(format!("grid {}x{} @ {} km", self.grid_rows, self.grid_cols, self.grid_cell_km));
        }
        if self.service_costs.is_empty() || self.service_costs.len() != self.service_thresholds_ms.len() {
            return bad(format!(
                "{} service costs vs {} delay thresholds",
                self.service_costs.len(),
                self.service_thresholds_ms.len()
            ));
        }
        if self.instances_per_service < 2 {
            return bad("placement.instances_per_service must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.synthetic_request_prob) || !(0.0..=1.0).contains(&self.trace_request_prob) {
            return bad("request probabilities must lie in [0, 1]".into());
        }
        if self.synthetic_vehicles == 0 && self.dataset == Dataset::Synthetic {
            return bad("synthetic.vehicles must be positive".into());
        }
        if let Dataset::Trace(p) = &self.dataset {
            if !p.is_file() {
                return bad(format!("trace file {} does not exist", p.display()));
            }
        }
        // The remaining numeric ranges are checked by the model constructors
        // when the simulation is assembled.
        Ok(())
    }

    /// Canonical `(key, value)` pairs in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let policies = self.policies.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(",");
        let targeting = match self.targeting {
            Targeting::MostLoaded => "most-loaded",
            Targeting::Random => "random",
        };
        let bbox = self
            .trace_bbox
            .map_or_else(|| "auto".to_string(), |b| join(&[b.min_lat, b.min_lon, b.max_lat, b.max_lon]));
        let values = [
            self.dataset.to_string(),
            policies,
            self.horizon.to_string(),
            self.seed.to_string(),
            self.attack_every.to_string(),
            targeting.to_string(),
            self.recovery_delay.to_string(),
            render_opt(&self.quarantine),
            self.grid_rows.to_string(),
            self.grid_cols.to_string(),
            self.grid_cell_km.to_string(),
            self.node_capacity.to_string(),
            self.instance_capacity.to_string(),
            join(&self.service_costs),
            join(&self.service_thresholds_ms),
            self.instances_per_service.to_string(),
            "greedy".to_string(),
            self.placement_delay_weight.to_string(),
            self.placement_resource_weight.to_string(),
            self.br_enabled.to_string(),
            self.delay_alpha_ms_per_km.to_string(),
            self.delay_base_ms.to_string(),
            self.queue_ms_per_unit.to_string(),
            render_opt(&self.k1),
            render_opt(&self.k2),
            self.epsilon.to_string(),
            self.kkt_tol.to_string(),
            self.max_iters.to_string(),
            self.quality_threshold.to_string(),
            self.quality_period.to_string(),
            self.trace_time_unit_s.to_string(),
            self.trace_max_gap_units.to_string(),
            self.trace_request_prob.to_string(),
            bbox,
            self.synthetic_vehicles.to_string(),
            self.synthetic_request_prob.to_string(),
            self.synthetic_v_min_kmh.to_string(),
            self.synthetic_v_max_kmh.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Everything except `policies`, as a map.
    pub fn hashed_entries(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().filter(|(k, _)| *k != "policies").map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Hex SHA-256 over the sorted `key=value` lines of [`Self::hashed_entries`].
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.hashed_entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Renders the config as a file that [`Self::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
