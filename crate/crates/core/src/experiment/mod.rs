//! Batch experiments: build the request stream once, run every requested
//! policy over it in parallel, then summarize and write artifacts.

mod config;
mod report;

pub use config::{ConfigError, Dataset, ExperimentConfig, KEYS};
pub use report::{
    compare, load_summaries, metrics_header, write_artifacts, Comparison, LoadedSummary, Manifest, ManifestRun, SummaryRow,
};

use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{MetricsRecord, NetworkState};
use crate::mobility::{
    generate_synthetic, ingest_trace, read_trace, trace_centroid, GeoBBox, GridMap, IngestOptions, MobilityError,
    PropagationModel, RequestStream, WaypointModel,
};
use crate::model::ServiceType;
use crate::orchestrator::{AttackSchedule, Policy, QualityConfig, SimConfig, SimError, Simulation};
use crate::placement::PlacementObjectiveWeights;
use crate::queueing::QueueModel;
use crate::solvers::{LbPsvmParams, SolveOptions};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] MobilityError),
    #[error("{policy} run failed at {source}")]
    Run { policy: Policy, source: SimError },
    #[error("summaries disagree on their setup:\n{diff}")]
    Mismatch { diff: String },
    #[error("{context}: {message}")]
    Io { context: String, message: String },
}

impl ExperimentError {
    /// 2 for anything wrong with the input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Mismatch { .. } => 2,
            ExperimentError::Run { source: SimError::InvalidConfig(_) | SimError::UnknownNode(_), .. } => 2,
            _ => 3,
        }
    }
}

/// Where the requests came from, plus a stable id for manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub id: String,
    /// Units with data; shorter than the horizon means trailing empty units.
    pub units: usize,
    pub vehicles: usize,
    pub bbox: Option<GeoBBox>,
}

/// Simulation config for one policy.
pub fn sim_config(cfg: &ExperimentConfig, policy: Policy) -> Result<SimConfig<f64>, ExperimentError> {
    let invalid = |m: String| ExperimentError::Config(ConfigError::Invalid(m));
    let grid = GridMap::new(cfg.grid_rows, cfg.grid_cols, cfg.grid_cell_km)?;
    let nodes = grid.edge_nodes(cfg.node_capacity).map_err(|e| invalid(e.to_string()))?;
    let services = cfg
        .service_costs
        .iter()
        .zip(&cfg.service_thresholds_ms)
        .enumerate()
        .map(|(s, (&cost, &threshold))| ServiceType::new(s, threshold, cost, cfg.instance_capacity, 0.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| invalid(e.to_string()))?;
    let n = services.len();
    Ok(SimConfig {
        services,
        nodes,
        grid,
        instances_per_service: vec![cfg.instances_per_service; n],
        policy,
        lbpsvm: LbPsvmParams { k1: cfg.k1, k2: cfg.k2, epsilon: cfg.epsilon },
        solve: SolveOptions { kkt_tol: cfg.kkt_tol, max_iters: cfg.max_iters, warm_start: None },
        queue: QueueModel::new(cfg.queue_ms_per_unit),
        propagation: PropagationModel::new(cfg.delay_alpha_ms_per_km, cfg.delay_base_ms)?,
        placement_weights: PlacementObjectiveWeights::new(cfg.placement_delay_weight, cfg.placement_resource_weight)
            .map_err(|e| invalid(e.to_string()))?,
        quality: QualityConfig { threshold: cfg.quality_threshold, period: cfg.quality_period },
        recovery_delay: cfg.recovery_delay,
        quarantine: cfg.quarantine,
        schedule: AttackSchedule::Periodic { every: cfg.attack_every, targeting: cfg.targeting },
        seed: cfg.seed,
    })
}

fn file_digest(path: &std::path::Path) -> Result<String, ExperimentError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ExperimentError::Io { context: format!("reading {}", path.display()), message: e.to_string() })?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..6]))
}

/// Builds the request stream shared by every policy run.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<(RequestStream<f64>, DatasetInfo), ExperimentError> {
    let grid = GridMap::new(cfg.grid_rows, cfg.grid_cols, cfg.grid_cell_km)?;
    let services = cfg.service_costs.len();
    match &cfg.dataset {
        Dataset::Synthetic => {
            let model = WaypointModel {
                v_min_kmh: cfg.synthetic_v_min_kmh,
                v_max_kmh: cfg.synthetic_v_max_kmh,
                time_unit_s: cfg.trace_time_unit_s,
                request_prob: cfg.synthetic_request_prob,
                services,
            };
            let stream = generate_synthetic(cfg.seed, cfg.synthetic_vehicles, &grid, cfg.horizon, &model)?;
            let id = format!("synthetic:v{}:p{}", cfg.synthetic_vehicles, cfg.synthetic_request_prob);
            let info = DatasetInfo { id, units: stream.horizon(), vehicles: cfg.synthetic_vehicles, bbox: None };
            Ok((stream, info))
        }
        Dataset::Trace(path) => {
            let bbox = match cfg.trace_bbox {
                Some(b) => b,
                None => {
                    let (points, _) = read_trace(path)?;
                    let (lat, lon) = trace_centroid(&points).ok_or(MobilityError::NoUsableRows { malformed: 0, dropped: 0 })?;
                    let (w, h) = (grid.width_km(), grid.height_km());
                    // centre a grid-sized box on the centroid
                    let corner = GeoBBox::from_corner(lat, lon, w, h)?;
                    let (dlat, dlon) = ((corner.max_lat - lat) / 2.0, (corner.max_lon - lon) / 2.0);
                    GeoBBox::new(lat - dlat, lon - dlon, lat + dlat, lon + dlon)?
                }
            };
            let opts = IngestOptions {
                time_unit_s: cfg.trace_time_unit_s,
                max_gap_units: cfg.trace_max_gap_units,
                services,
                request_prob: cfg.trace_request_prob,
                seed: cfg.seed,
            };
            let (mut stream, report) = ingest_trace(path, &bbox, &grid, &opts)?;
            info!(
                "trace {}: {} rows, {} malformed, {} outside the box, {} vehicles over {} units",
                path.display(),
                report.rows,
                report.malformed,
                report.dropped,
                report.vehicles,
                report.horizon
            );
            if stream.horizon() < cfg.horizon {
                warn!(
                    "trace covers {} units but the horizon is {}; the remaining units have no vehicles",
                    stream.horizon(),
                    cfg.horizon
                );
            }
            stream.truncate(cfg.horizon);
            let id = format!("trace:{}#{}", path.display(), file_digest(path)?);
            let units = stream.horizon();
            Ok((stream, DatasetInfo { id, units, vehicles: report.vehicles, bbox: Some(bbox) }))
        }
    }
}

/// Outcome of one policy over the shared stream.
#[derive(Debug, Clone)]
pub struct PolicyRun {
    pub policy: Policy,
    pub history: Vec<MetricsRecord<f64>>,
    pub attack_onsets: Vec<u64>,
    pub recoveries: usize,
    pub reoptimizations: usize,
    pub skipped_attacks: usize,
}

impl PolicyRun {
    pub fn summary(&self, config_hash: &str, seed: u64, dataset: &str) -> SummaryRow {
        summarize(self, config_hash, seed, dataset)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize(run: &PolicyRun, config_hash: &str, seed: u64, dataset: &str) -> SummaryRow {
    let h = &run.history;
    let attack = || h.iter().filter(|r| r.state == NetworkState::Attack);
    let demand: f64 = h.iter().flat_map(|r| r.demand.iter()).sum();
    let served: f64 = h.iter().map(|r| r.served).sum();
    SummaryRow {
        policy: run.policy.as_str().to_string(),
        rows: h.len(),
        avg_delay_ms: mean(h.iter().map(|r| r.avg_delay)),
        avg_elf_attack_pct: mean(attack().map(|r| r.avg_elf)),
        mean_fairness: mean(attack().map(|r| r.fairness)),
        mean_q: mean(h.iter().map(|r| r.q_value)),
        attack_units: attack().count(),
        degraded_units: h.iter().filter(|r| !r.degraded.is_empty()).count(),
        saturated_units: h.iter().filter(|r| r.saturated).count(),
        served_ratio: if demand > 0.0 { served / demand } else { 1.0 },
        config_hash: config_hash.to_string(),
        seed,
        dataset: dataset.to_string(),
    }
}

/// One simulation of `policy` over `stream`.
pub fn run_policy(
    cfg: &ExperimentConfig,
    policy: Policy,
    stream: &RequestStream<f64>,
) -> Result<PolicyRun, ExperimentError> {
    let sc = sim_config(cfg, policy)?;
    let fail = |source| ExperimentError::Run { policy, source };
    let mut sim = Simulation::new(sc, stream.at(0)).map_err(fail)?;
    sim.run(cfg.horizon, |i| stream.at(i)).map_err(fail)?;
    let history = sim.history().to_vec();
    let attack_onsets = history
        .windows(2)
        .filter(|w| w[0].state != NetworkState::Attack && w[1].state == NetworkState::Attack)
        .map(|w| w[1].time)
        .chain(history.first().filter(|r| r.state == NetworkState::Attack).map(|r| r.time))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(PolicyRun {
        policy,
        attack_onsets,
        recoveries: sim.recoveries().len(),
        reoptimizations: sim.reoptimizations().len(),
        skipped_attacks: sim.skipped_attacks().len(),
        history,
    })
}

/// Every policy of one configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset: DatasetInfo,
    pub runs: Vec<PolicyRun>,
}

impl Experiment {
    pub fn summaries(&self) -> Vec<SummaryRow> {
        self.runs.iter().map(|r| r.summary(&self.config_hash, self.config.seed, &self.dataset.id)).collect()
    }
}

/// Validates `cfg` and runs its policies on up to `jobs` threads (0 lets
/// rayon decide). Runs come back in the configured policy order.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Experiment, ExperimentError> {
    cfg.validate()?;
    let (stream, dataset) = build_stream(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ExperimentError::Io { context: "starting worker pool".into(), message: e.to_string() })?;
    let runs = pool.install(|| {
        cfg.policies.par_iter().map(|&p| run_policy(cfg, p, &stream)).collect::<Result<Vec<_>, _>>()
    })?;
    Ok(Experiment { config: cfg.clone(), config_hash: cfg.hash(), dataset, runs })
}

/// Output directory: explicit choice, then `EDGEFAIL_OUT_DIR`, then `./out`.
pub fn resolve_out_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("EDGEFAIL_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig { horizon: 120, synthetic_vehicles: 150, ..Default::default() }
    }

    #[test]
    fn row_counts_and_onsets() {
        let mut cfg = small();
        cfg.policies = vec![Policy::LbPsvm, Policy::Psvm];
        let exp = run_experiment(&cfg, 2).unwrap();
        assert_eq!(exp.runs.len(), 2);
        for r in &exp.runs {
            assert_eq!(r.history.len(), 120);
            assert_eq!(r.attack_onsets, vec![100]);
        }
        assert_eq!(exp.runs[0].policy, Policy::LbPsvm);
    }

    #[test]
    fn policies_see_the_same_demand() {
        let exp = run_experiment(&small(), 1).unwrap();
        let d0: Vec<_> = exp.runs[0].history.iter().map(|r| r.demand.clone()).collect();
        for r in &exp.runs[1..] {
            let d: Vec<_> = r.history.iter().map(|r| r.demand.clone()).collect();
            assert_eq!(d, d0);
        }
    }

    #[test]
    fn jobs_do_not_change_results() {
        let a = run_experiment(&small(), 1).unwrap().summaries();
        let b = run_experiment(&small(), 3).unwrap().summaries();
        assert_eq!(a, b);
    }

    #[test]
    fn exit_codes() {
        let mut cfg = small();
        cfg.horizon = 0;
        assert_eq!(run_experiment(&cfg, 1).unwrap_err().exit_code(), 2);
        let mut cfg = small();
        cfg.node_capacity = 10.0;
        let err = run_experiment(&cfg, 1).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn out_dir_precedence() {
        assert_eq!(resolve_out_dir(Some("x".into())), PathBuf::from("x"));
    }
}
