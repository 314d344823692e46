//! Discrete-time failover simulation: primary mapping every unit, proactive
//! secondary mappings for every possible single-node failure, attack onset,
//! recovery placement and a quality monitor that triggers re-placement.
//!
//! Time units are numbered from 1. Unit `t` consumes the requests of stream
//! index `t - 1`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::{edge_load_factor, jain_fairness, load_factor, mean_added_load_factor, weighted_delay, AddedLoad, MetricsRecord, NetworkState};
use crate::mobility::{derive_delay_matrix, derive_demand, GridMap, PropagationModel};
use crate::model::{AttackEvent, DelayModel, EdgeNode, ModelError, NodeStatus, Placement, PrimaryMapping, SecondaryMapping, ServiceRequest, ServiceType};
use crate::num::{compensated_sum, Scalar};
use crate::placement::{place_services, recover_placement, reserve_backup, PlacementError, PlacementObjectiveWeights};
use crate::queueing::QueueModel;
use crate::solvers::{backup_redirect, build_lb_psvm, solve_lb_psvm, solve_psvm, LbPsvmParams, SolveOptions, SolverError};

/// Failover policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    LbPsvm,
    Psvm,
    Br,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::LbPsvm, Policy::Psvm, Policy::Br];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::LbPsvm => "lb-psvm",
            Policy::Psvm => "psvm",
            Policy::Br => "br",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lb-psvm" | "lbpsvm" => Ok(Policy::LbPsvm),
            "psvm" => Ok(Policy::Psvm),
            "br" => Ok(Policy::Br),
            other => Err(format!("unknown policy '{other}' (expected lb-psvm, psvm or br)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("t={time}: {source}")]
    Solver { time: u64, source: SolverError },
    #[error("t={time}: {source}")]
    Placement { time: u64, source: PlacementError },
    #[error("t={time}: attack on node {target} rejected, node {active} is already under attack")]
    AttackInProgress { time: u64, target: usize, active: usize },
    #[error("no node {0}")]
    UnknownNode(usize),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targeting {
    /// Node carrying the most primary load in the previous unit.
    MostLoaded,
    /// Uniform over healthy nodes hosting anything, from the run seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackSchedule {
    None,
    /// Onset at every multiple of `every`.
    Periodic { every: u64, targeting: Targeting },
    /// `(time, node)` pairs.
    Explicit(Vec<(u64, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityConfig<T> {
    /// Re-placement is triggered below this value.
    pub threshold: T,
    /// Evaluation cadence, units.
    pub period: u64,
}

impl<T: Scalar> Default for QualityConfig<T> {
    fn default() -> Self {
        Self { threshold: T::lit(0.5), period: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub services: Vec<ServiceType<T>>,
    pub nodes: Vec<EdgeNode<T>>,
    /// Used for the delay fallback when a unit has no requests.
    pub grid: GridMap<T>,
    pub instances_per_service: Vec<usize>,
    pub policy: Policy,
    pub lbpsvm: LbPsvmParams<T>,
    pub solve: SolveOptions<T>,
    pub queue: QueueModel<T>,
    pub propagation: PropagationModel<T>,
    pub placement_weights: PlacementObjectiveWeights<T>,
    pub quality: QualityConfig<T>,
    pub recovery_delay: u64,
    /// Units a recovered node stays out of service. `None` keeps it out until
    /// one unit before the next periodic onset.
    pub quarantine: Option<u64>,
    pub schedule: AttackSchedule,
    pub seed: u64,
}

impl<T: Scalar> SimConfig<T> {
    /// Default edge system: 3x3 grid of 100-unit nodes, 8 services with
    /// costs 10..24 and thresholds 50..120 ms, 3 instances each.
    pub fn standard(policy: Policy) -> Self {
        let grid = GridMap::default();
        let services = (0..8)
            .map(|s| {
                let s_f = T::from_usize_lossy(s);
                ServiceType::new(s, T::lit(50.0) + T::lit(10.0) * s_f, T::lit(10.0) + T::lit(2.0) * s_f, T::lit(30.0), T::zero())
                    .expect("standard services are valid")
            })
            .collect();
        Self {
            nodes: grid.edge_nodes(T::lit(100.0)).expect("standard nodes are valid"),
            services,
            grid,
            instances_per_service: vec![3; 8],
            policy,
            lbpsvm: LbPsvmParams::default(),
            solve: SolveOptions::default(),
            queue: QueueModel::default(),
            propagation: PropagationModel::default(),
            placement_weights: PlacementObjectiveWeights::default(),
            quality: QualityConfig::default(),
            recovery_delay: 1,
            quarantine: None,
            schedule: AttackSchedule::Periodic { every: 100, targeting: Targeting::MostLoaded },
            seed: 0,
        }
    }

    fn capacity(&self) -> T {
        self.services[0].instance_capacity
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.services.is_empty() || self.nodes.is_empty() {
            return bad("need at least one service and one node".into());
        }
        let c = self.capacity();
        if self.services.iter().any(|s| s.instance_capacity != c) {
            return bad("all services must share one instance capacity".into());
        }
        if self.instances_per_service.len() != self.services.len() {
            return bad(format!("{} instance counts for {} services", self.instances_per_service.len(), self.services.len()));
        }
        if self.recovery_delay == 0 {
            return bad("recovery delay must be at least 1 unit".into());
        }
        if self.quality.period == 0 || !(self.quality.threshold > T::zero() && self.quality.threshold < T::one()) {
            return bad(format!("quality period {} / threshold {}", self.quality.period, self.quality.threshold));
        }
        if let AttackSchedule::Periodic { every: 0, .. } = self.schedule {
            return bad("attack period must be positive".into());
        }
        if let AttackSchedule::Explicit(list) = &self.schedule {
            if let Some(&(_, e)) = list.iter().find(|&&(_, e)| e >= self.nodes.len()) {
                return Err(SimError::UnknownNode(e));
            }
        }
        Ok(())
    }

    fn quarantine_units(&self) -> u64 {
        match (self.quarantine, &self.schedule) {
            (Some(q), _) => q,
            (None, AttackSchedule::Periodic { every, .. }) => every.saturating_sub(self.recovery_delay + 1),
            (None, _) => 0,
        }
    }
}

/// Rolling window of per-service delays behind the quality value.
#[derive(Debug, Clone)]
pub struct QualityMonitor<T> {
    pub config: QualityConfig<T>,
    window: VecDeque<(Vec<T>, Vec<T>)>,
    q_value: T,
}

impl<T: Scalar> QualityMonitor<T> {
    pub fn new(config: QualityConfig<T>) -> Self {
        Self { config, window: VecDeque::new(), q_value: T::one() }
    }

    pub fn push(&mut self, per_service_delay: &[T], demand: &[T]) {
        if self.window.len() == self.config.period as usize {
            self.window.pop_front();
        }
        self.window.push_back((per_service_delay.to_vec(), demand.to_vec()));
    }

    pub fn q_value(&self) -> T {
        self.q_value
    }

    /// Mean over services of `clamp(1 - delay_s / D_s, 0, 1)`, with each
    /// service's delay averaged over the window units in which it had demand.
    pub fn evaluate(&mut self, services: &[ServiceType<T>]) -> T {
        if self.window.is_empty() {
            return self.q_value;
        }
        let scores = services.iter().map(|svc| {
            let samples: Vec<T> =
                self.window.iter().filter(|(_, dem)| dem[svc.id] > T::zero()).map(|(d, _)| d[svc.id]).collect();
            let realized = if samples.is_empty() {
                T::zero()
            } else {
                compensated_sum(samples.iter().copied()) / T::from_usize_lossy(samples.len())
            };
            quality_score(realized, svc.delay_threshold)
        });
        self.q_value = compensated_sum(scores) / T::from_usize_lossy(services.len());
        self.q_value
    }

    pub fn triggers(&self) -> bool {
        self.q_value < self.config.threshold
    }
}

/// `clamp(1 - delay / threshold, 0, 1)`.
pub fn quality_score<T: Scalar>(delay: T, threshold: T) -> T {
    (T::one() - delay / threshold).max(T::zero()).min(T::one())
}

/// Secondary mapping prepared ahead of an attack, with the per-target shares
/// used to scale it to the vehicles affected when it fires.
#[derive(Debug, Clone, PartialEq)]
pub struct ProactiveEntry<T> {
    pub mapping: SecondaryMapping<T>,
    pub shares: Vec<T>,
    pub computed_at: u64,
    multiplier: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveAttack<T> {
    pub event: AttackEvent,
    /// Secondary mappings in force during the current unit.
    pub secondaries: Vec<SecondaryMapping<T>>,
    plans: BTreeMap<usize, ProactiveEntry<T>>,
}

/// Outcome of one recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub time: u64,
    pub node: usize,
    pub recovered: Vec<(usize, usize)>,
    pub unrecovered: Vec<usize>,
}

pub struct Simulation<T> {
    config: SimConfig<T>,
    nodes: Vec<EdgeNode<T>>,
    placement: Placement,
    clock: u64,
    state: NetworkState,
    primary: PrimaryMapping<T>,
    delay: DelayModel<T>,
    /// Delays the primary mapping was last optimized on. Between triggers the
    /// same fill order is applied to each unit's demand.
    mapping_delay: DelayModel<T>,
    proactive: BTreeMap<(usize, usize), ProactiveEntry<T>>,
    active: Option<ActiveAttack<T>>,
    quarantine_until: Option<(usize, u64)>,
    degraded: BTreeSet<usize>,
    monitor: QualityMonitor<T>,
    rng: ChaCha8Rng,
    history: Vec<MetricsRecord<T>>,
    recoveries: Vec<RecoveryReport>,
    reoptimizations: Vec<u64>,
    skipped_attacks: Vec<(u64, usize)>,
}

/// Failover mapping, per-target shares and the solver multiplier.
type Plan<T> = (SecondaryMapping<T>, Vec<T>, Option<T>);

struct Served<T> {
    loads: Vec<Vec<T>>,
    added: Vec<AddedLoad<T>>,
    fairness: Vec<T>,
    dropped: Vec<usize>,
    saturated: bool,
}

impl<T: Scalar> Simulation<T> {
    /// Places services from the delay seen by `initial` requests (and reserves
    /// backups under BR).
    pub fn new(config: SimConfig<T>, initial: &[ServiceRequest<T>]) -> Result<Self, SimError> {
        config.validate()?;
        let delay = derive_delay_matrix(initial, &config.nodes, config.services.len(), &config.propagation, config.grid.centre())
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let mut placement = place_services(
            &config.services,
            &config.nodes,
            &delay,
            &config.instances_per_service,
            &config.placement_weights,
        )
        .map_err(|source| SimError::Placement { time: 0, source })?;
        if config.policy == Policy::Br {
            placement = reserve_backup(&placement, &config.services, &config.nodes, Some(&delay))
                .map_err(|source| SimError::Placement { time: 0, source })?;
        }
        Self::with_placement(config, placement, delay)
    }

    /// Starts from a given placement and delay matrix.
    pub fn with_placement(config: SimConfig<T>, placement: Placement, delay: DelayModel<T>) -> Result<Self, SimError> {
        config.validate()?;
        let (e, s) = (config.nodes.len(), config.services.len());
        if placement.num_nodes() != e || placement.num_services() != s {
            return Err(SimError::InvalidConfig(format!(
                "placement is {}x{}, system is {e}x{s}",
                placement.num_nodes(),
                placement.num_services()
            )));
        }
        Ok(Self {
            nodes: config.nodes.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x0a77_ac6e),
            monitor: QualityMonitor::new(config.quality),
            config,
            placement,
            clock: 0,
            state: NetworkState::PreAttack,
            primary: PrimaryMapping::zeros(e, s),
            mapping_delay: delay.clone(),
            delay,
            proactive: BTreeMap::new(),
            active: None,
            quarantine_until: None,
            degraded: BTreeSet::new(),
            history: Vec::new(),
            recoveries: Vec::new(),
            reoptimizations: Vec::new(),
            skipped_attacks: Vec::new(),
        })
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn state(&self) -> NetworkState {
        self.state
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn nodes(&self) -> &[EdgeNode<T>] {
        &self.nodes
    }

    pub fn primary(&self) -> &PrimaryMapping<T> {
        &self.primary
    }

    pub fn history(&self) -> &[MetricsRecord<T>] {
        &self.history
    }

    pub fn into_history(self) -> Vec<MetricsRecord<T>> {
        self.history
    }

    pub fn active_attack(&self) -> Option<&ActiveAttack<T>> {
        self.active.as_ref()
    }

    pub fn proactive(&self, node: usize, service: usize) -> Option<&ProactiveEntry<T>> {
        self.proactive.get(&(node, service))
    }

    pub fn recoveries(&self) -> &[RecoveryReport] {
        &self.recoveries
    }

    pub fn reoptimizations(&self) -> &[u64] {
        &self.reoptimizations
    }

    pub fn skipped_attacks(&self) -> &[(u64, usize)] {
        &self.skipped_attacks
    }

    pub fn config(&self) -> &SimConfig<T> {
        &self.config
    }

    fn capacity(&self) -> T {
        self.config.capacity()
    }

    /// Marks `target` attacked from the next unit on. Its hosted services fail
    /// over through the proactive mappings in that same unit.
    pub fn inject_attack(&mut self, target: usize) -> Result<(), SimError> {
        let time = self.clock + 1;
        if target >= self.nodes.len() {
            return Err(SimError::UnknownNode(target));
        }
        if let Some(a) = &self.active {
            return Err(SimError::AttackInProgress { time, target, active: a.event.target });
        }
        if self.state != NetworkState::PreAttack {
            // a recovered node is still quarantined; single-attack model
            let active = self.quarantine_until.map_or(target, |q| q.0);
            return Err(SimError::AttackInProgress { time, target, active });
        }
        if self.placement.services_on(target).next().is_none() {
            warn!("t={time}: node {target} hosts no instance; attack changes nothing");
        }
        let plans = self
            .placement
            .services_on(target)
            .filter_map(|s| self.proactive.get(&(target, s)).map(|p| (s, p.clone())))
            .collect();
        self.nodes[target].status = NodeStatus::Attacked;
        self.state = NetworkState::Attack;
        self.active = Some(ActiveAttack {
            event: AttackEvent { time, target, duration: self.config.recovery_delay },
            secondaries: Vec::new(),
            plans,
        });
        Ok(())
    }

    /// Re-instantiates the attacked node's instances using the last delay
    /// matrix and moves to the recovered state.
    pub fn recover(&mut self) -> Result<RecoveryReport, SimError> {
        let delay = self.delay.clone();
        self.recover_with(&delay, self.clock)
    }

    fn recover_with(&mut self, delay: &DelayModel<T>, time: u64) -> Result<RecoveryReport, SimError> {
        let attack = self
            .active
            .take()
            .ok_or_else(|| SimError::InvalidConfig(format!("t={time}: recovery requested without an active attack")))?;
        let target = attack.event.target;
        let lost: Vec<usize> = self.placement.services_on(target).collect();
        let out = recover_placement(&self.placement, target, &lost, &self.nodes, &self.config.services, delay);
        self.placement = out.placement;
        if self.config.policy == Policy::Br {
            match reserve_backup(&self.placement, &self.config.services, &self.nodes, Some(delay)) {
                Ok(p) => self.placement = p,
                Err(e) => warn!("t={time}: backup re-reservation incomplete: {e}"),
            }
        }
        for &s in &out.unrecovered {
            warn!("t={time}: service {s} lost on node {target} could not be re-instantiated");
        }
        self.degraded.extend(out.unrecovered.iter().copied());
        self.proactive.clear();
        self.mapping_delay = delay.clone();
        self.state = NetworkState::Recovered;
        self.quarantine_until = Some((target, time + self.config.quarantine_units()));
        let report = RecoveryReport { time, node: target, recovered: out.recovered, unrecovered: out.unrecovered };
        self.recoveries.push(report.clone());
        Ok(report)
    }

    /// Re-evaluates the quality value from the monitor window.
    pub fn evaluate_quality(&mut self) -> T {
        self.monitor.evaluate(&self.config.services)
    }

    fn scheduled_target(&mut self, t: u64) -> Option<usize> {
        match &self.config.schedule {
            AttackSchedule::None => None,
            AttackSchedule::Explicit(list) => list.iter().find(|&&(at, _)| at == t).map(|&(_, e)| e),
            AttackSchedule::Periodic { every, targeting } => {
                if !t.is_multiple_of(*every) {
                    return None;
                }
                let candidates: Vec<usize> = (0..self.nodes.len())
                    .filter(|&e| self.nodes[e].is_healthy() && self.placement.services_on(e).next().is_some())
                    .collect();
                match targeting {
                    Targeting::MostLoaded => candidates.into_iter().min_by(|&a, &b| {
                        let (la, lb) = (self.primary.node_load(a), self.primary.node_load(b));
                        lb.partial_cmp(&la).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
                    }),
                    Targeting::Random if candidates.is_empty() => None,
                    Targeting::Random => Some(candidates[self.rng.gen_range(0..candidates.len())]),
                }
            }
        }
    }

    /// Advances one time unit.
    pub fn step(&mut self, requests: &[ServiceRequest<T>]) -> Result<&MetricsRecord<T>, SimError> {
        let t = self.clock + 1;
        let ns = self.config.services.len();
        let demand = derive_demand(requests, ns);
        let delay = derive_delay_matrix(requests, &self.nodes, ns, &self.config.propagation, self.config.grid.centre())
            .map_err(|e| SimError::InvalidConfig(format!("t={t}: {e}")))?;

        if let Some(a) = &self.active {
            if t >= a.event.time + self.config.recovery_delay {
                self.recover_with(&delay, t)?;
            }
        } else if let Some((node, until)) = self.quarantine_until {
            if t >= until {
                self.nodes[node].status = NodeStatus::Healthy;
                self.quarantine_until = None;
                self.state = NetworkState::PreAttack;
            }
        }
        if let Some(target) = self.scheduled_target(t) {
            match self.inject_attack(target) {
                Ok(()) => {}
                Err(SimError::AttackInProgress { .. }) => {
                    warn!("t={t}: scheduled attack on node {target} skipped, previous attack not cleared");
                    self.skipped_attacks.push((t, target));
                }
                Err(e) => return Err(e),
            }
        }

        let capacity = self.capacity();
        let (primary, mut dropped) = primary_with_overflow(&self.placement, &demand, &self.mapping_delay, capacity);
        let served = match self.active.take() {
            Some(mut attack) => {
                let out = self.serve_attack(&mut attack, &primary, &delay, t);
                self.active = Some(attack);
                out?
            }
            None => Served {
                loads: primary.matrix().to_vec(),
                added: Vec::new(),
                fairness: Vec::new(),
                dropped: Vec::new(),
                saturated: false,
            },
        };
        dropped.extend(served.dropped.iter().copied());

        let record = self.record(t, &demand, &delay, served, dropped);
        self.monitor.push(&record.per_service_delay, &demand);
        self.primary = primary;
        self.delay = delay;
        self.clock = t;

        let mut record = record;
        if t.is_multiple_of(self.config.quality.period) {
            self.evaluate_quality();
            if self.monitor.triggers() && self.active.is_none() {
                self.reoptimize(t);
            }
        }
        record.q_value = self.monitor.q_value();
        if self.active.is_none() {
            self.refresh_proactive(t)?;
        }
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Quality trigger: re-optimizes the primary mapping on current delays and
    /// re-places services.
    fn reoptimize(&mut self, t: u64) {
        self.mapping_delay = self.delay.clone();
        let cfg = &self.config;
        let placed = place_services(&cfg.services, &self.nodes, &self.delay, &cfg.instances_per_service, &cfg.placement_weights)
            .and_then(|p| {
                if cfg.policy == Policy::Br {
                    reserve_backup(&p, &cfg.services, &self.nodes, Some(&self.delay))
                } else {
                    Ok(p)
                }
            });
        match placed {
            Ok(p) => {
                debug!("t={t}: quality {} below threshold, services re-placed", self.monitor.q_value());
                self.placement = p;
                self.degraded.clear();
                self.proactive.clear();
                let capacity = self.capacity();
                self.primary = primary_with_overflow(&self.placement, &self.primary_demand(), &self.delay, capacity).0;
            }
            Err(e) => warn!("t={t}: re-placement failed, keeping current placement: {e}"),
        }
        self.reoptimizations.push(t);
    }

    fn primary_demand(&self) -> Vec<T> {
        (0..self.config.services.len()).map(|s| self.primary.served(s)).collect()
    }

    /// Secondary mappings for every (hosting node, service) pair from the
    /// current primary mapping, for use from the next unit on.
    fn refresh_proactive(&mut self, t: u64) -> Result<(), SimError> {
        let mut fresh = BTreeMap::new();
        for e in 0..self.nodes.len() {
            if !self.nodes[e].is_healthy() {
                continue;
            }
            for s in self.placement.services_on(e) {
                let warm = self.proactive.get(&(e, s)).and_then(|p| p.multiplier);
                match plan(&self.config, &self.primary, &self.placement, &self.delay, e, s, warm) {
                    Ok(Some((mapping, shares, multiplier))) => {
                        fresh.insert((e, s), ProactiveEntry { mapping, shares, computed_at: t, multiplier });
                    }
                    Ok(None) => {}
                    Err(source) => return Err(SimError::Solver { time: t, source }),
                }
            }
        }
        self.proactive = fresh;
        Ok(())
    }

    fn serve_attack(&self, attack: &mut ActiveAttack<T>, primary: &PrimaryMapping<T>, delay: &DelayModel<T>, t: u64) -> Result<Served<T>, SimError> {
        let target = attack.event.target;
        let capacity = self.capacity();
        let eps = self.config.lbpsvm.epsilon;
        let mut loads = primary.matrix().to_vec();
        let mut added = Vec::new();
        let mut fairness = Vec::new();
        let mut dropped = Vec::new();
        let mut secondaries = Vec::new();
        for s in self.placement.services_on(target) {
            let affected = primary.get(target, s);
            loads[target][s] = T::zero();
            if !attack.plans.contains_key(&s) {
                // no plan from t-1 (first unit or fresh instance): plan now
                match plan(&self.config, primary, &self.placement, delay, target, s, None).map_err(|source| SimError::Solver { time: t, source })? {
                    Some((mapping, shares, multiplier)) => {
                        debug!("t={t}: no proactive mapping for service {s} on node {target}; planned on demand");
                        attack.plans.insert(s, ProactiveEntry { mapping, shares, computed_at: t, multiplier });
                    }
                    None => {
                        if affected > T::zero() {
                            warn!("t={t}: service {s} has no instance outside node {target}; {affected} vehicles unserved");
                            dropped.push(s);
                        }
                        continue;
                    }
                }
            }
            let plan = &attack.plans[&s];
            let beta = scale_shares(&plan.shares, affected);
            let m = SecondaryMapping { service: s, source_node: target, targets: plan.mapping.targets.clone(), beta };
            m.check(affected, T::lit(1e-9) * (T::one() + affected))?;
            let mut lf_at = BTreeMap::new();
            for (&e, &b) in m.targets.iter().zip(&m.beta) {
                let available = capacity - primary.get(e, s);
                loads[e][s] += b;
                added.push(AddedLoad { node: e, service: s, added: b, available });
                lf_at.insert(e, load_factor(b, available, eps));
            }
            if affected > T::zero() {
                // every instance that could have absorbed load, reserved ones included
                let lfs: Vec<T> = (0..self.nodes.len())
                    .filter(|&e| e != target && self.nodes[e].is_healthy() && self.placement.occupied(e, s))
                    .map(|e| lf_at.get(&e).copied().unwrap_or(T::zero()))
                    .collect();
                fairness.push(jain_fairness(&lfs));
            }
            secondaries.push(m);
        }
        attack.secondaries = secondaries;
        Ok(Served { loads, added, fairness, dropped, saturated: false })
    }

    fn record(&self, t: u64, demand: &[T], delay: &DelayModel<T>, served: Served<T>, dropped: Vec<usize>) -> MetricsRecord<T> {
        let capacity = self.capacity();
        let ns = self.config.services.len();
        let mut saturated = served.saturated;
        let mut per_service_delay = Vec::with_capacity(ns);
        let mut total_served = T::zero();
        for s in 0..ns {
            let mut mass = Vec::new();
            let mut vehicles = Vec::new();
            for (e, row) in served.loads.iter().enumerate() {
                let l = row[s];
                if l <= T::zero() {
                    continue;
                }
                let (q, sat) = self.config.queue.delay_ms_clamped(l, capacity);
                saturated |= sat;
                mass.push(l * (delay.get(e, s) + q));
                vehicles.push(l);
            }
            let v = compensated_sum(vehicles);
            total_served += v;
            per_service_delay.push(if v > T::zero() { compensated_sum(mass) / v } else { T::zero() });
        }
        let hosted: Vec<usize> = (0..self.nodes.len()).map(|e| self.placement.services_on(e).count()).collect();
        let eps = self.config.lbpsvm.epsilon;
        let fairness = if served.fairness.is_empty() {
            T::one()
        } else {
            compensated_sum(served.fairness.iter().copied()) / T::from_usize_lossy(served.fairness.len())
        };
        let mut degraded: BTreeSet<usize> = self.degraded.clone();
        degraded.extend(dropped);
        MetricsRecord {
            time: t,
            state: self.state,
            avg_delay: weighted_delay(&per_service_delay, demand),
            per_service_delay,
            elf_per_node: edge_load_factor(&served.added, &hosted, eps),
            avg_elf: mean_added_load_factor(&served.added, eps),
            fairness,
            q_value: self.monitor.q_value(),
            demand: demand.to_vec(),
            served: total_served,
            degraded: degraded.into_iter().collect(),
            saturated,
        }
    }

    /// Runs `horizon` units over `requests(t - 1)`.
    pub fn run<'a, F>(&mut self, horizon: usize, mut requests: F) -> Result<(), SimError>
    where
        F: FnMut(usize) -> &'a [ServiceRequest<T>],
        T: 'a,
    {
        for i in 0..horizon {
            self.step(requests(i))?;
        }
        Ok(())
    }
}

/// Policy-specific failover plan for `service` if `node` fails, from the
/// stored primary mapping and delays. `None` when no other instance exists.
fn plan<T: Scalar>(
    config: &SimConfig<T>,
    gamma: &PrimaryMapping<T>,
    placement: &Placement,
    delay: &DelayModel<T>,
    node: usize,
    service: usize,
    warm: Option<T>,
) -> Result<Option<Plan<T>>, SolverError> {
    let psvm = || -> Result<Option<Plan<T>>, SolverError> {
        match solve_psvm(gamma, placement, node, service, delay) {
            Ok(m) => {
                let shares = indicator_shares(&m, delay, service);
                Ok(Some((m, shares, None)))
            }
            Err(SolverError::NoCandidate { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    match config.policy {
        Policy::Psvm => psvm(),
        Policy::Br => match backup_redirect(gamma, placement, node, service) {
            Ok(m) => Ok(Some((m, vec![T::one()], None))),
            Err(SolverError::NoCandidate { .. }) => {
                debug!("no backup for service {service} off node {node}; using nearest instance");
                psvm()
            }
            Err(e) => Err(e),
        },
        Policy::LbPsvm => {
            let svc = &config.services[service];
            let problem = match build_lb_psvm(
                gamma,
                placement,
                node,
                service,
                delay,
                config.capacity(),
                svc.delay_threshold,
                &config.lbpsvm,
            ) {
                Ok(p) => p,
                Err(SolverError::NoCandidate { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let budget = problem.affected;
            if budget == T::zero() {
                // limit of the optimum as the budget shrinks to 0
                let total = compensated_sum(problem.weights.iter().copied());
                let shares = problem.weights.iter().map(|&w| w / total).collect();
                let beta = vec![T::zero(); problem.n()];
                let m = SecondaryMapping { service, source_node: node, targets: problem.candidates, beta };
                return Ok(Some((m, shares, warm)));
            }
            let options = SolveOptions { warm_start: warm, ..config.solve };
            match solve_lb_psvm(&problem, &options) {
                Ok(sol) => {
                    let shares = sol.beta.iter().map(|&b| b / budget).collect();
                    let m = SecondaryMapping { service, source_node: node, targets: problem.candidates, beta: sol.beta };
                    Ok(Some((m, shares, Some(sol.multiplier))))
                }
                Err(SolverError::QueueInfeasible { .. }) => {
                    debug!("failover of service {service} off node {node} saturates every candidate");
                    psvm()
                }
                Err(e) => Err(e),
            }
        }
    }
}

/// PSVM shares: all weight on the lowest-delay target (lowest index on ties).
fn indicator_shares<T: Scalar>(m: &SecondaryMapping<T>, delay: &DelayModel<T>, service: usize) -> Vec<T> {
    let best = m
        .targets
        .iter()
        .enumerate()
        .min_by(|(_, &a), (_, &b)| {
            delay.get(a, service).partial_cmp(&delay.get(b, service)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    (0..m.targets.len()).map(|i| if i == best { T::one() } else { T::zero() }).collect()
}

/// `budget * shares` with the rounding residual put on the largest share, so
/// the result sums to `budget`.
fn scale_shares<T: Scalar>(shares: &[T], budget: T) -> Vec<T> {
    let mut beta: Vec<T> = shares.iter().map(|&w| (w * budget).max(T::zero())).collect();
    if let Some(big) = (0..beta.len()).max_by(|&a, &b| beta[a].partial_cmp(&beta[b]).unwrap_or(std::cmp::Ordering::Equal)) {
        let rest = compensated_sum(beta.iter().enumerate().filter(|&(i, _)| i != big).map(|(_, &b)| b));
        beta[big] = (budget - rest).max(T::zero());
    }
    beta
}

/// Primary mapping that never drops vehicles of a hosted service: demand beyond
/// `capacity * instances` is spread evenly over the instances as queue load.
/// Returns the services that could not be served at all.
pub fn primary_with_overflow<T: Scalar>(
    placement: &Placement,
    demand: &[T],
    delay: &DelayModel<T>,
    capacity: T,
) -> (PrimaryMapping<T>, Vec<usize>) {
    let hosts: Vec<usize> = (0..demand.len()).map(|s| placement.instances(s)).collect();
    let clipped: Vec<T> =
        demand.iter().zip(&hosts).map(|(&l, &h)| l.min(capacity * T::from_usize_lossy(h))).collect();
    let mut gamma = crate::solvers::solve_primary_mapping(placement, &clipped, delay, capacity)
        .expect("clipped demand fits hosted capacity")
        .mapping;
    let mut unserved = Vec::new();
    for s in 0..demand.len() {
        let excess = demand[s] - clipped[s];
        if excess <= T::zero() {
            continue;
        }
        if hosts[s] == 0 {
            unserved.push(s);
            continue;
        }
        let each = excess / T::from_usize_lossy(hosts[s]);
        for e in placement.hosting_nodes(s).collect::<Vec<_>>() {
            let v = gamma.get(e, s);
            gamma.set(e, s, v + each);
        }
        unserved.push(s);
    }
    (gamma, unserved)
}
