//! Domain types shared by every other module: services, edge nodes, placements,
//! requests, mappings and the propagation-delay matrix.
//!
//! Matrices are stored node-major: `m[e][s]` is the entry for edge node `e` and
//! service `s`.

use std::fmt;

use thiserror::Error;

use crate::num::{compensated_sum, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid {what}: {detail}")]
    InvalidParameter { what: &'static str, detail: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },
    #[error("placement rejected: {0}")]
    InvalidPlacement(ValidationReport),
    #[error("mapping violates {constraint} for service {service}: {detail}")]
    MappingViolation { constraint: &'static str, service: usize, detail: String },
}

fn invalid(what: &'static str, detail: impl Into<String>) -> ModelError {
    ModelError::InvalidParameter { what, detail: detail.into() }
}

/// 2-D position in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point<T>) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceType<T> {
    pub id: usize,
    /// Delay threshold in milliseconds.
    pub delay_threshold: T,
    /// Resource units consumed by one instance.
    pub resource_cost: T,
    /// Simultaneous vehicle connections one instance can serve.
    pub instance_capacity: T,
    /// Expected vehicles per time unit requesting this service.
    pub demand_rate: T,
}

impl<T: Scalar> ServiceType<T> {
    pub fn new(
        id: usize,
        delay_threshold: T,
        resource_cost: T,
        instance_capacity: T,
        demand_rate: T,
    ) -> Result<Self, ModelError> {
        if !(delay_threshold > T::zero() && delay_threshold.is_finite()) {
            return Err(invalid("delay threshold", format!("service {id}: {delay_threshold}")));
        }
        if !(resource_cost > T::zero() && resource_cost.is_finite()) {
            return Err(invalid("resource cost", format!("service {id}: {resource_cost}")));
        }
        if !(instance_capacity > T::zero() && instance_capacity.is_finite()) {
            return Err(invalid("instance capacity", format!("service {id}: {instance_capacity}")));
        }
        if !(demand_rate >= T::zero() && demand_rate.is_finite()) {
            return Err(invalid("demand rate", format!("service {id}: {demand_rate}")));
        }
        Ok(Self { id, delay_threshold, resource_cost, instance_capacity, demand_rate })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeStatus {
    Healthy,
    Attacked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNode<T> {
    pub id: usize,
    pub location: Point<T>,
    /// Resource budget in abstract units.
    pub capacity: T,
    pub status: NodeStatus,
}

impl<T: Scalar> EdgeNode<T> {
    pub fn new(id: usize, location: Point<T>, capacity: T) -> Result<Self, ModelError> {
        if !(capacity > T::zero() && capacity.is_finite()) {
            return Err(invalid("node capacity", format!("node {id}: {capacity}")));
        }
        if !location.is_finite() {
            return Err(invalid("node location", format!("node {id}")));
        }
        Ok(Self { id, location, capacity, status: NodeStatus::Healthy })
    }

    pub fn is_healthy(&self) -> bool {
        self.status == NodeStatus::Healthy
    }
}

/// Outcome of [`validate_placement`]. Empty vectors mean the check passed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    /// Nodes whose summed instance cost exceeds their budget: `(node, used, capacity)`.
    pub overloaded_nodes: Vec<(usize, f64, f64)>,
    /// Services whose instances span fewer than two distinct nodes.
    pub redundancy_failures: Vec<usize>,
    /// `(node, service)` pairs holding more than one instance of the same service.
    pub duplicate_instances: Vec<(usize, usize)>,
}

impl ValidationReport {
    pub fn resource_ok(&self) -> bool {
        self.overloaded_nodes.is_empty()
    }

    pub fn redundancy_ok(&self) -> bool {
        self.redundancy_failures.is_empty()
    }

    pub fn passes(&self) -> bool {
        self.resource_ok() && self.redundancy_ok() && self.duplicate_instances.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passes() {
            return write!(f, "placement valid");
        }
        let mut parts = Vec::new();
        for (e, used, cap) in &self.overloaded_nodes {
            parts.push(format!("node {e} uses {used} of {cap}"));
        }
        for s in &self.redundancy_failures {
            parts.push(format!("service {s} hosted on fewer than 2 nodes"));
        }
        for (e, s) in &self.duplicate_instances {
            parts.push(format!("node {e} holds several instances of service {s}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks a raw instance-count matrix against resource budgets, the two-node
/// redundancy rule and the one-instance-per-node rule.
pub fn validate_placement<T: Scalar>(
    counts: &[Vec<u32>],
    nodes: &[EdgeNode<T>],
    services: &[ServiceType<T>],
) -> Result<ValidationReport, ModelError> {
    check_dims(counts, nodes.len(), services.len())?;
    let mut report = ValidationReport::default();
    for (e, row) in counts.iter().enumerate() {
        let used = compensated_sum(
            row.iter().zip(services).map(|(&c, svc)| svc.resource_cost * T::from_u32(c).unwrap()),
        );
        if used > nodes[e].capacity {
            report.overloaded_nodes.push((e, used.as_f64(), nodes[e].capacity.as_f64()));
        }
        for (s, &c) in row.iter().enumerate() {
            if c > 1 {
                report.duplicate_instances.push((e, s));
            }
        }
    }
    for s in 0..services.len() {
        let spread = counts.iter().filter(|row| row[s] > 0).count();
        if spread < 2 {
            report.redundancy_failures.push(s);
        }
    }
    Ok(report)
}

fn check_dims<X>(m: &[Vec<X>], rows: usize, cols: usize) -> Result<(), ModelError> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        let found = format!("{}x{}", m.len(), m.first().map_or(0, |r| r.len()));
        return Err(ModelError::Dimension { expected: format!("{rows}x{cols}"), found });
    }
    Ok(())
}

/// State of one (node, service) slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Slot {
    #[default]
    Empty,
    /// Instance serving primary traffic.
    Active,
    /// Backup instance holding resources but idle until a failure.
    Reserved,
}

/// Instance placement `x[e][s]`, at most one instance per (node, service).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    slots: Vec<Vec<Slot>>,
}

impl Placement {
    /// Builds a placement from a 0/1 indicator matrix, rejecting anything that
    /// fails [`validate_placement`].
    pub fn from_indicator<T: Scalar>(
        x: &[Vec<bool>],
        nodes: &[EdgeNode<T>],
        services: &[ServiceType<T>],
    ) -> Result<Self, ModelError> {
        let counts: Vec<Vec<u32>> =
            x.iter().map(|r| r.iter().map(|&b| u32::from(b)).collect()).collect();
        let report = validate_placement(&counts, nodes, services)?;
        if !report.passes() {
            return Err(ModelError::InvalidPlacement(report));
        }
        let slots = x
            .iter()
            .map(|r| r.iter().map(|&b| if b { Slot::Active } else { Slot::Empty }).collect())
            .collect();
        Ok(Self { slots })
    }

    /// Builds a placement from raw slots without checking the redundancy rule,
    /// e.g. for hand-made scenarios or partial recovery results.
    pub fn from_slots(slots: Vec<Vec<Slot>>) -> Self {
        Self { slots }
    }

    pub fn empty(nodes: usize, services: usize) -> Self {
        Self { slots: vec![vec![Slot::Empty; services]; nodes] }
    }

    pub fn num_nodes(&self) -> usize {
        self.slots.len()
    }

    pub fn num_services(&self) -> usize {
        self.slots.first().map_or(0, Vec::len)
    }

    pub fn slot(&self, node: usize, service: usize) -> Slot {
        self.slots[node][service]
    }

    pub(crate) fn set_slot(&mut self, node: usize, service: usize, slot: Slot) {
        self.slots[node][service] = slot;
    }

    pub(crate) fn clear_node(&mut self, node: usize) {
        self.slots[node].iter_mut().for_each(|s| *s = Slot::Empty);
    }

    /// `x_e^s` for active instances.
    pub fn hosts(&self, node: usize, service: usize) -> bool {
        self.slots[node][service] == Slot::Active
    }

    pub fn is_reserved(&self, node: usize, service: usize) -> bool {
        self.slots[node][service] == Slot::Reserved
    }

    pub fn occupied(&self, node: usize, service: usize) -> bool {
        self.slots[node][service] != Slot::Empty
    }

    /// Nodes with an active instance of `service`, ascending.
    pub fn hosting_nodes(&self, service: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.slots.len()).filter(move |&e| self.hosts(e, service))
    }

    pub fn reserved_node(&self, service: usize) -> Option<usize> {
        (0..self.slots.len()).find(|&e| self.is_reserved(e, service))
    }

    /// Services with an active instance on `node`, ascending.
    pub fn services_on(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_services()).filter(move |&s| self.hosts(node, s))
    }

    /// `I_s`: number of active instances.
    pub fn instances(&self, service: usize) -> usize {
        self.hosting_nodes(service).count()
    }

    /// Resource units used on `node`, counting reserved instances.
    pub fn used_resources<T: Scalar>(&self, node: usize, services: &[ServiceType<T>]) -> T {
        compensated_sum(
            self.slots[node]
                .iter()
                .zip(services)
                .filter(|(slot, _)| **slot != Slot::Empty)
                .map(|(_, svc)| svc.resource_cost),
        )
    }

    pub fn residual<T: Scalar>(&self, node: usize, nodes: &[EdgeNode<T>], services: &[ServiceType<T>]) -> T {
        nodes[node].capacity - self.used_resources(node, services)
    }

    /// Instance counts including reserved instances, for [`validate_placement`].
    pub fn counts(&self) -> Vec<Vec<u32>> {
        self.slots
            .iter()
            .map(|r| r.iter().map(|&s| u32::from(s != Slot::Empty)).collect())
            .collect()
    }

    /// Counts of active instances only.
    pub fn active_counts(&self) -> Vec<Vec<u32>> {
        self.slots.iter().map(|r| r.iter().map(|&s| u32::from(s == Slot::Active)).collect()).collect()
    }
}

/// A vehicle's request `<v, l, t, s>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceRequest<T> {
    pub vehicle: u32,
    pub location: Point<T>,
    pub time: u64,
    pub service: usize,
}

/// Primary assignment `gamma[e][s]`: vehicles of service `s` served at node `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryMapping<T> {
    gamma: Vec<Vec<T>>,
}

impl<T: Scalar> PrimaryMapping<T> {
    pub fn zeros(nodes: usize, services: usize) -> Self {
        Self { gamma: vec![vec![T::zero(); services]; nodes] }
    }

    pub fn from_matrix(gamma: Vec<Vec<T>>) -> Result<Self, ModelError> {
        let cols = gamma.first().map_or(0, Vec::len);
        check_dims(&gamma, gamma.len(), cols)?;
        if gamma.iter().flatten().any(|g| !g.is_finite()) {
            return Err(invalid("primary mapping", "non-finite entry"));
        }
        Ok(Self { gamma })
    }

    pub fn get(&self, node: usize, service: usize) -> T {
        self.gamma[node][service]
    }

    pub(crate) fn set(&mut self, node: usize, service: usize, value: T) {
        self.gamma[node][service] = value;
    }

    pub fn num_nodes(&self) -> usize {
        self.gamma.len()
    }

    pub fn num_services(&self) -> usize {
        self.gamma.first().map_or(0, Vec::len)
    }

    pub fn matrix(&self) -> &[Vec<T>] {
        &self.gamma
    }

    /// Vehicles of `service` served across all nodes.
    pub fn served(&self, service: usize) -> T {
        compensated_sum(self.gamma.iter().map(|r| r[service]))
    }

    /// Total vehicles primarily served by `node`, all services.
    pub fn node_load(&self, node: usize) -> T {
        compensated_sum(self.gamma[node].iter().copied())
    }

    /// Checks demand conservation, capacity and non-negativity within `tol`.
    pub fn check(
        &self,
        placement: &Placement,
        demand: &[T],
        capacity: T,
        tol: T,
    ) -> Result<(), ModelError> {
        check_dims(&self.gamma, placement.num_nodes(), placement.num_services())?;
        for (s, &lambda) in demand.iter().enumerate() {
            let served = self.served(s);
            if (served - lambda).abs() > tol {
                return Err(ModelError::MappingViolation {
                    constraint: "demand conservation",
                    service: s,
                    detail: format!("served {served}, demand {lambda}"),
                });
            }
            for e in 0..self.gamma.len() {
                let g = self.gamma[e][s];
                if g < T::zero() {
                    return Err(ModelError::MappingViolation {
                        constraint: "non-negativity",
                        service: s,
                        detail: format!("node {e}: {g}"),
                    });
                }
                let cap = if placement.hosts(e, s) { capacity } else { T::zero() };
                if g > cap + tol {
                    return Err(ModelError::MappingViolation {
                        constraint: "instance capacity",
                        service: s,
                        detail: format!("node {e}: {g} > {cap}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Failover assignment of one attacked (node, service) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryMapping<T> {
    pub service: usize,
    pub source_node: usize,
    /// Candidate nodes, parallel to `beta`.
    pub targets: Vec<usize>,
    /// Vehicles re-homed to each target.
    pub beta: Vec<T>,
}

impl<T: Scalar> SecondaryMapping<T> {
    pub fn affected(&self) -> T {
        compensated_sum(self.beta.iter().copied())
    }

    pub fn beta_for(&self, node: usize) -> T {
        self.targets.iter().position(|&e| e == node).map_or(T::zero(), |i| self.beta[i])
    }

    /// Checks `sum(beta) = affected` within `tol` and `beta >= 0` exactly.
    pub fn check(&self, affected: T, tol: T) -> Result<(), ModelError> {
        if self.targets.len() != self.beta.len() {
            return Err(ModelError::Dimension {
                expected: format!("{} betas", self.targets.len()),
                found: self.beta.len().to_string(),
            });
        }
        if let Some(b) = self.beta.iter().find(|b| **b < T::zero() || !b.is_finite()) {
            return Err(ModelError::MappingViolation {
                constraint: "non-negativity",
                service: self.service,
                detail: format!("beta {b}"),
            });
        }
        let total = self.affected();
        if (total - affected).abs() > tol {
            return Err(ModelError::MappingViolation {
                constraint: "affected-vehicle conservation",
                service: self.service,
                detail: format!("sum {total}, affected {affected}"),
            });
        }
        Ok(())
    }
}

/// Propagation delay `d[e][s]` in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayModel<T> {
    d: Vec<Vec<T>>,
}

impl<T: Scalar> DelayModel<T> {
    pub fn new(d: Vec<Vec<T>>) -> Result<Self, ModelError> {
        let cols = d.first().map_or(0, Vec::len);
        check_dims(&d, d.len(), cols)?;
        if let Some(v) = d.iter().flatten().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(invalid("delay entry", v.to_string()));
        }
        Ok(Self { d })
    }

    /// Same delay for every (node, service) pair.
    pub fn uniform(nodes: usize, services: usize, value: T) -> Result<Self, ModelError> {
        Self::new(vec![vec![value; services]; nodes])
    }

    pub fn get(&self, node: usize, service: usize) -> T {
        self.d[node][service]
    }

    pub fn num_nodes(&self) -> usize {
        self.d.len()
    }

    pub fn num_services(&self) -> usize {
        self.d.first().map_or(0, Vec::len)
    }

    pub fn matrix(&self) -> &[Vec<T>] {
        &self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackEvent {
    pub time: u64,
    pub target: usize,
    /// Units until recovery completes.
    pub duration: u64,
}

/// Rounds non-negative reals to integers with the largest-remainder method so
/// the integer total equals the rounded real total.
pub fn largest_remainder_round<T: Scalar>(values: &[T]) -> Vec<u64> {
    let total = compensated_sum(values.iter().copied()).round().to_u64().unwrap_or(0);
    let mut floors: Vec<u64> = values.iter().map(|v| v.floor().to_u64().unwrap_or(0)).collect();
    let assigned: u64 = floors.iter().sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Larger fractional part first, lower index on ties.
    order.sort_by(|&a, &b| {
        let fa = values[a] - values[a].floor();
        let fb = values[b] - values[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = total.saturating_sub(assigned);
    for i in order {
        if remaining == 0 {
            break;
        }
        floors[i] += 1;
        remaining -= 1;
    }
    floors
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes(n: usize, cap: f64) -> Vec<EdgeNode<f64>> {
        (0..n).map(|e| EdgeNode::new(e, Point::new(e as f64, 0.0), cap).unwrap()).collect()
    }

    fn service(id: usize, cost: f64) -> ServiceType<f64> {
        ServiceType::new(id, 50.0, cost, 30.0, 0.0).unwrap()
    }

    #[test]
    fn two_nodes_one_service_passes() {
        let report = validate_placement(&[vec![1], vec![1]], &nodes(2, 100.0), &[service(0, 10.0)]).unwrap();
        assert!(report.passes());
    }

    #[test]
    fn stacked_instances_fail_redundancy() {
        let report = validate_placement(&[vec![2], vec![0]], &nodes(2, 100.0), &[service(0, 10.0)]).unwrap();
        assert!(!report.redundancy_ok());
        assert!(report.resource_ok());
        assert!(!report.passes());
    }

    #[test]
    fn defaults_all_services_everywhere_overloads() {
        // Hosting all eight services on one node costs 136 > 100.
        let svcs: Vec<_> = (0..8).map(|s| service(s, 10.0 + 2.0 * s as f64)).collect();
        let counts = vec![vec![1; 8]; 9];
        let report = validate_placement(&counts, &nodes(9, 100.0), &svcs).unwrap();
        assert_eq!(report.overloaded_nodes.len(), 9);
        assert!(report.redundancy_ok());
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let err = validate_placement(&[vec![1, 1]], &nodes(2, 100.0), &[service(0, 10.0)]).unwrap_err();
        assert!(matches!(err, ModelError::Dimension { .. }));
    }

    #[test]
    fn invalid_placement_cannot_be_built() {
        let err = Placement::from_indicator(&[vec![true], vec![false]], &nodes(2, 100.0), &[service(0, 10.0)])
            .unwrap_err();
        assert!(matches!(err, ModelError::InvalidPlacement(_)));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ServiceType::new(0, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(ServiceType::new(0, 1.0, -1.0, 1.0, 0.0).is_err());
        assert!(ServiceType::new(0, 1.0, 1.0, 0.0, 0.0).is_err());
        assert!(ServiceType::new(0, 1.0, 1.0, 1.0, -0.5).is_err());
        assert!(EdgeNode::new(0, Point::new(0.0, 0.0), 0.0).is_err());
        assert!(DelayModel::new(vec![vec![-1.0]]).is_err());
        assert!(DelayModel::new(vec![vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn primary_check_catches_violations() {
        let placement =
            Placement::from_indicator(&[vec![true], vec![true]], &nodes(2, 100.0), &[service(0, 10.0)]).unwrap();
        let ok = PrimaryMapping::from_matrix(vec![vec![20.0], vec![5.0]]).unwrap();
        ok.check(&placement, &[25.0], 30.0, 1e-9).unwrap();
        let over = PrimaryMapping::from_matrix(vec![vec![31.0], vec![0.0]]).unwrap();
        assert!(over.check(&placement, &[31.0], 30.0, 1e-9).is_err());
        let short = PrimaryMapping::from_matrix(vec![vec![10.0], vec![5.0]]).unwrap();
        assert!(short.check(&placement, &[25.0], 30.0, 1e-9).is_err());
    }

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder_round(&[10.4, 14.6]), vec![10, 15]);
        assert_eq!(largest_remainder_round(&[1.0 / 3.0; 3]), vec![1, 0, 0]);
        let v = [2.5, 2.5, 5.0];
        assert_eq!(largest_remainder_round(&v).iter().sum::<u64>(), 10);
    }

    #[test]
    fn secondary_check() {
        let m = SecondaryMapping { service: 0, source_node: 0, targets: vec![1, 2], beta: vec![10.0, 15.0] };
        m.check(25.0, 1e-9).unwrap();
        assert_eq!(m.beta_for(2), 15.0);
        assert_eq!(m.beta_for(5), 0.0);
        let neg = SecondaryMapping { beta: vec![-1.0, 26.0], ..m };
        assert!(neg.check(25.0, 1e-9).is_err());
    }
}
