//! Service placement (SP-greedy), backup reservation (BR) and recovery
//! placement (SRP).

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{validate_placement, DelayModel, EdgeNode, ModelError, Placement, ServiceType, Slot};
use crate::num::{compensated_sum, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("aggregate budget exceeded: instances need {required} units, healthy nodes offer {available}")]
    AggregateBudget { required: f64, available: f64 },
    #[error("service {service} needs {wanted} instances but only {healthy} healthy nodes exist")]
    TooFewNodes { service: usize, wanted: usize, healthy: usize },
    #[error("service {service} needs at least 2 instances, got {instances}")]
    Redundancy { service: usize, instances: usize },
    #[error("no feasible placement found; binding budget at service {service} (cost {cost})")]
    NoFeasiblePlacement { service: usize, cost: f64 },
    #[error("no node has {cost} residual units for a backup of service {service}")]
    NoResidualCapacity { service: usize, cost: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weights of the greedy ranking key
/// `delay_weight * d + resource_weight * (cost / budget)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementObjectiveWeights<T> {
    pub delay_weight: T,
    pub resource_weight: T,
}

impl<T: Scalar> Default for PlacementObjectiveWeights<T> {
    fn default() -> Self {
        Self { delay_weight: T::one(), resource_weight: T::zero() }
    }
}

impl<T: Scalar> PlacementObjectiveWeights<T> {
    pub fn new(delay_weight: T, resource_weight: T) -> Result<Self, ModelError> {
        let ok = |w: T| w >= T::zero() && w.is_finite();
        if !ok(delay_weight) || !ok(resource_weight) || (delay_weight == T::zero() && resource_weight == T::zero()) {
            return Err(ModelError::InvalidParameter {
                what: "placement weights",
                detail: format!("delay {delay_weight}, resource {resource_weight}"),
            });
        }
        Ok(Self { delay_weight, resource_weight })
    }
}

/// Services ordered by descending resource cost, ties by id.
fn by_cost_desc<T: Scalar>(services: &[ServiceType<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..services.len()).collect();
    order.sort_by(|&a, &b| {
        services[b].resource_cost.partial_cmp(&services[a].resource_cost).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    order
}

fn cmp_t<T: Scalar>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Places `instances[s]` instances of every service on distinct healthy nodes.
///
/// Services are handled in descending cost order. For each, nodes are ranked
/// by the weighted key and the lexicographically first feasible set is taken,
/// backtracking into earlier services when a later one cannot fit.
pub fn place_services<T: Scalar>(
    services: &[ServiceType<T>],
    nodes: &[EdgeNode<T>],
    delay: &DelayModel<T>,
    instances: &[usize],
    weights: &PlacementObjectiveWeights<T>,
) -> Result<Placement, PlacementError> {
    if instances.len() != services.len() || delay.num_nodes() != nodes.len() || delay.num_services() != services.len() {
        return Err(ModelError::Dimension {
            expected: format!("{} services x {} nodes", services.len(), nodes.len()),
            found: format!("{} instance counts, {}x{} delays", instances.len(), delay.num_nodes(), delay.num_services()),
        }
        .into());
    }
    let healthy: Vec<usize> = nodes.iter().filter(|n| n.is_healthy()).map(|n| n.id).collect();
    for (s, &count) in instances.iter().enumerate() {
        if count < 2 {
            return Err(PlacementError::Redundancy { service: s, instances: count });
        }
        if count > healthy.len() {
            return Err(PlacementError::TooFewNodes { service: s, wanted: count, healthy: healthy.len() });
        }
    }
    let required =
        compensated_sum(services.iter().zip(instances).map(|(svc, &i)| svc.resource_cost * T::from_usize_lossy(i)));
    let available = compensated_sum(healthy.iter().map(|&e| nodes[e].capacity));
    if required > available {
        return Err(PlacementError::AggregateBudget { required: required.as_f64(), available: available.as_f64() });
    }

    let order = by_cost_desc(services);
    let ranked: Vec<Vec<usize>> = (0..services.len())
        .map(|s| {
            let key = |e: usize| {
                weights.delay_weight * delay.get(e, s)
                    + weights.resource_weight * services[s].resource_cost / nodes[e].capacity
            };
            let mut r = healthy.clone();
            r.sort_by(|&a, &b| cmp_t(key(a), key(b)).then(a.cmp(&b)));
            r
        })
        .collect();

    let mut residual: Vec<T> = nodes.iter().map(|n| n.capacity).collect();
    let mut x = vec![vec![false; services.len()]; nodes.len()];
    let mut budget = 1_000_000usize;
    let mut deepest = 0usize;
    if !place_rec(&order, 0, services, instances, &ranked, &mut residual, &mut x, &mut budget, &mut deepest) {
        let s = order[deepest.min(order.len() - 1)];
        return Err(PlacementError::NoFeasiblePlacement { service: s, cost: services[s].resource_cost.as_f64() });
    }
    Ok(Placement::from_indicator(&x, nodes, services)?)
}

#[allow(clippy::too_many_arguments)]
fn place_rec<T: Scalar>(
    order: &[usize],
    k: usize,
    services: &[ServiceType<T>],
    instances: &[usize],
    ranked: &[Vec<usize>],
    residual: &mut [T],
    x: &mut [Vec<bool>],
    budget: &mut usize,
    deepest: &mut usize,
) -> bool {
    if k == order.len() {
        return true;
    }
    *deepest = (*deepest).max(k);
    let s = order[k];
    let cost = services[s].resource_cost;
    let fits: Vec<usize> = ranked[s].iter().copied().filter(|&e| residual[e] >= cost).collect();
    let mut chosen = Vec::with_capacity(instances[s]);
    choose(&fits, 0, instances[s], &mut chosen, &mut |set: &[usize]| {
        if *budget == 0 {
            return true;
        }
        *budget -= 1;
        for &e in set {
            residual[e] -= cost;
            x[e][s] = true;
        }
        if place_rec(order, k + 1, services, instances, ranked, residual, x, budget, deepest) {
            return true;
        }
        for &e in set {
            residual[e] += cost;
            x[e][s] = false;
        }
        false
    }) && *budget > 0
}

/// Visits `want`-element subsets of `pool` in lexicographic order of position;
/// stops when `visit` returns true.
fn choose(pool: &[usize], start: usize, want: usize, chosen: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    if chosen.len() == want {
        return visit(chosen);
    }
    let need = want - chosen.len();
    for i in start..pool.len() {
        if pool.len() - i < need {
            break;
        }
        chosen.push(pool[i]);
        if choose(pool, i + 1, want, chosen, visit) {
            return true;
        }
        chosen.pop();
    }
    false
}

/// Adds one reserved, idle instance per service on a healthy node that does not
/// already hold that service. With a delay model the lowest-delay node is used,
/// otherwise the node with most residual budget; ties go to the lower index.
/// Services that already have a reservation are left alone.
pub fn reserve_backup<T: Scalar>(
    placement: &Placement,
    services: &[ServiceType<T>],
    nodes: &[EdgeNode<T>],
    delay: Option<&DelayModel<T>>,
) -> Result<Placement, PlacementError> {
    let mut out = placement.clone();
    for s in by_cost_desc(services) {
        if out.reserved_node(s).is_some() {
            continue;
        }
        let cost = services[s].resource_cost;
        let best = nodes
            .iter()
            .filter(|n| n.is_healthy() && !out.occupied(n.id, s) && out.residual(n.id, nodes, services) >= cost)
            .map(|n| n.id)
            .min_by(|&a, &b| {
                let primary = match delay {
                    Some(d) => cmp_t(d.get(a, s), d.get(b, s)),
                    None => cmp_t(out.residual(b, nodes, services), out.residual(a, nodes, services)),
                };
                primary.then(a.cmp(&b))
            })
            .ok_or(PlacementError::NoResidualCapacity { service: s, cost: cost.as_f64() })?;
        out.set_slot(best, s, Slot::Reserved);
    }
    debug_assert!(validate_placement(&out.counts(), nodes, services).map(|r| r.resource_ok()).unwrap_or(false));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub placement: Placement,
    /// `(service, node)` re-instantiations performed.
    pub recovered: Vec<(usize, usize)>,
    /// Lost services that found no room.
    pub unrecovered: Vec<usize>,
}

impl RecoveryOutcome {
    pub fn is_complete(&self) -> bool {
        self.unrecovered.is_empty()
    }
}

/// Re-instantiates the instances lost on `attacked` on healthy nodes that do not
/// already hold the service. The attacked node is emptied. Candidates are
/// ranked by propagation delay, then by the residual budget left after the
/// move (tightest fit first), then by index.
pub fn recover_placement<T: Scalar>(
    placement: &Placement,
    attacked: usize,
    services_lost: &[usize],
    nodes: &[EdgeNode<T>],
    services: &[ServiceType<T>],
    delay: &DelayModel<T>,
) -> RecoveryOutcome {
    let mut out = placement.clone();
    out.clear_node(attacked);
    let mut lost: Vec<usize> = services_lost.to_vec();
    lost.sort_by(|&a, &b| cmp_t(services[b].resource_cost, services[a].resource_cost).then(a.cmp(&b)));
    lost.dedup();

    let mut recovered = Vec::new();
    let mut unrecovered = Vec::new();
    for s in lost {
        let cost = services[s].resource_cost;
        let best = nodes
            .iter()
            .filter(|n| n.id != attacked && n.is_healthy() && !out.occupied(n.id, s))
            .map(|n| (n.id, out.residual(n.id, nodes, services) - cost))
            .filter(|&(_, left)| left >= T::zero())
            .min_by(|&(a, la), &(b, lb)| cmp_t(delay.get(a, s), delay.get(b, s)).then(cmp_t(la, lb)).then(a.cmp(&b)));
        match best {
            Some((e, _)) => {
                out.set_slot(e, s, Slot::Active);
                recovered.push((s, e));
            }
            None => unrecovered.push(s),
        }
    }
    unrecovered.sort_unstable();
    RecoveryOutcome { placement: out, recovered, unrecovered }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NodeStatus, Point};

    fn nodes(caps: &[f64]) -> Vec<EdgeNode<f64>> {
        caps.iter().enumerate().map(|(e, &c)| EdgeNode::new(e, Point::new(e as f64, 0.0), c).unwrap()).collect()
    }

    fn default_services() -> Vec<ServiceType<f64>> {
        (0..8)
            .map(|s| ServiceType::new(s, 50.0 + 10.0 * s as f64, 10.0 + 2.0 * s as f64, 30.0, 0.0).unwrap())
            .collect()
    }

    fn grid_delay(n: usize, s: usize) -> DelayModel<f64> {
        // 3x3 grid, distance from the centre cell
        DelayModel::new(
            (0..n)
                .map(|e| {
                    let (r, c) = ((e / 3) as f64, (e % 3) as f64);
                    vec![1.0 + 2.0 * 5.0 * ((r - 1.0).powi(2) + (c - 1.0).powi(2)).sqrt(); s]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_nodes_get_one_instance_each() {
        let svc = vec![ServiceType::new(0, 50.0, 10.0, 30.0, 0.0).unwrap()];
        let p = place_services(&svc, &nodes(&[100.0, 100.0]), &DelayModel::uniform(2, 1, 5.0).unwrap(), &[2], &Default::default())
            .unwrap();
        assert!(p.hosts(0, 0) && p.hosts(1, 0));
    }

    #[test]
    fn default_system_is_feasible() {
        let svcs = default_services();
        let ns = nodes(&[100.0; 9]);
        let p = place_services(&svcs, &ns, &grid_delay(9, 8), &[3; 8], &Default::default()).unwrap();
        let report = validate_placement(&p.counts(), &ns, &svcs).unwrap();
        assert!(report.passes(), "{report}");
        for e in 0..9 {
            assert!(p.used_resources(e, &svcs) <= 100.0);
        }
        for s in 0..8 {
            assert_eq!(p.instances(s), 3);
        }
        // the centre node is the cheapest and fills first
        assert!(p.services_on(4).count() >= 4);
    }

    #[test]
    fn undersized_node_hosts_nothing() {
        let svcs = default_services();
        let ns = nodes(&[100.0, 100.0, 5.0, 100.0]);
        let d = DelayModel::new(vec![vec![9.0; 8], vec![8.0; 8], vec![1.0; 8], vec![7.0; 8]]).unwrap();
        let p = place_services(&svcs, &ns, &d, &[2; 8], &Default::default()).unwrap();
        assert_eq!(p.services_on(2).count(), 0);
    }

    #[test]
    fn aggregate_infeasibility_reported() {
        let svcs = default_services();
        let err = place_services(&svcs, &nodes(&[100.0; 3]), &grid_delay(3, 8), &[3; 8], &Default::default()).unwrap_err();
        assert!(matches!(err, PlacementError::AggregateBudget { .. }));
    }

    #[test]
    fn redundancy_precondition() {
        let svc = vec![ServiceType::new(0, 50.0, 10.0, 30.0, 0.0).unwrap()];
        let err = place_services(&svc, &nodes(&[100.0; 3]), &DelayModel::uniform(3, 1, 1.0).unwrap(), &[1], &Default::default())
            .unwrap_err();
        assert!(matches!(err, PlacementError::Redundancy { .. }));
    }

    #[test]
    fn backup_goes_to_only_free_node() {
        let svc = vec![ServiceType::new(0, 50.0, 10.0, 30.0, 0.0).unwrap()];
        let ns = nodes(&[100.0; 3]);
        let p = Placement::from_indicator(&[vec![true], vec![true], vec![false]], &ns, &svc).unwrap();
        let br = reserve_backup(&p, &svc, &ns, None).unwrap();
        assert!(br.is_reserved(2, 0));
        assert!(br.hosts(0, 0) && br.hosts(1, 0));
    }

    #[test]
    fn backup_for_defaults_costs_136_units() {
        let svcs = default_services();
        let ns = nodes(&[100.0; 9]);
        let d = grid_delay(9, 8);
        let p = place_services(&svcs, &ns, &d, &[3; 8], &Default::default()).unwrap();
        let br = reserve_backup(&p, &svcs, &ns, Some(&d)).unwrap();
        let before: f64 = (0..9).map(|e| p.used_resources(e, &svcs)).sum();
        let after: f64 = (0..9).map(|e| br.used_resources(e, &svcs)).sum();
        assert_eq!(after - before, 136.0);
        for s in 0..8 {
            assert!(br.reserved_node(s).is_some());
            assert_eq!(br.instances(s), 3);
            // never moves existing instances
            for e in 0..9 {
                if p.hosts(e, s) {
                    assert!(br.hosts(e, s));
                }
            }
        }
        assert!(validate_placement(&br.counts(), &ns, &svcs).unwrap().resource_ok());
    }

    #[test]
    fn backup_without_room_fails() {
        let svc = vec![ServiceType::new(0, 50.0, 10.0, 30.0, 0.0).unwrap()];
        let ns = nodes(&[10.0, 10.0, 5.0]);
        let p = Placement::from_indicator(&[vec![true], vec![true], vec![false]], &ns, &svc).unwrap();
        assert!(matches!(reserve_backup(&p, &svc, &ns, None), Err(PlacementError::NoResidualCapacity { .. })));
    }

    fn three_hosts_setup() -> (Vec<EdgeNode<f64>>, Vec<ServiceType<f64>>, Placement) {
        // E1..E4 as nodes 0..3, S1..S4 as services 0..3; E1 hosts S1-S3.
        let svcs: Vec<_> = (0..4).map(|s| ServiceType::new(s, 60.0, 10.0, 30.0, 0.0).unwrap()).collect();
        let mut ns = nodes(&[100.0; 6]);
        let x = vec![
            vec![true, true, true, false],
            vec![true, false, true, true],
            vec![true, true, false, true],
            vec![false, true, true, false],
            vec![false, false, false, false],
            vec![false, false, false, false],
        ];
        let p = Placement::from_indicator(&x, &ns, &svcs).unwrap();
        ns[0].status = NodeStatus::Attacked;
        (ns, svcs, p)
    }

    #[test]
    fn recovery_of_attacked_node() {
        let (ns, svcs, p) = three_hosts_setup();
        let d = DelayModel::new((0..6).map(|e| vec![e as f64 + 1.0; 4]).collect()).unwrap();
        let out = recover_placement(&p, 0, &[0, 1, 2], &ns, &svcs, &d);
        assert!(out.is_complete());
        assert_eq!(out.recovered.len(), 3);
        assert_eq!(out.placement.services_on(0).count(), 0);
        for &(s, e) in &out.recovered {
            assert_ne!(e, 0);
            assert!(!p.hosts(e, s), "service {s} re-placed on node {e} that already had it");
        }
        for s in 0..3 {
            assert_eq!(out.placement.instances(s), p.instances(s) - 1 + 1);
        }
    }

    #[test]
    fn recovery_forced_onto_only_room() {
        let (mut ns, svcs, p) = three_hosts_setup();
        for n in ns.iter_mut().skip(1) {
            n.capacity = 30.0;
        }
        ns[3].capacity = 20.0;
        ns[4].capacity = 5.0;
        ns[5].capacity = 100.0;
        let d = DelayModel::uniform(6, 4, 1.0).unwrap();
        let out = recover_placement(&p, 0, &[0], &ns, &svcs, &d);
        // nodes 1 and 2 already host service 0, node 3 is full, node 4 is too small
        assert_eq!(out.recovered, vec![(0, 5)]);
    }

    #[test]
    fn recovery_without_capacity_lists_everything() {
        let (mut ns, svcs, p) = three_hosts_setup();
        for n in ns.iter_mut().skip(1) {
            n.capacity = 30.0;
        }
        ns[3].capacity = 20.0;
        ns[4].capacity = 1.0;
        ns[5].capacity = 1.0;
        let d = DelayModel::uniform(6, 4, 1.0).unwrap();
        let out = recover_placement(&p, 0, &[0, 1, 2], &ns, &svcs, &d);
        assert_eq!(out.unrecovered, vec![0, 1, 2]);
        assert_eq!(out.placement.services_on(0).count(), 0);
    }

    /// Independent feasibility check: tries every combination of node subsets.
    fn brute_feasible(costs: &[f64], caps: &[f64], want: usize) -> bool {
        let n = caps.len();
        let subsets: Vec<u32> = (0u32..(1 << n)).filter(|m| m.count_ones() as usize == want).collect();
        fn go(k: usize, costs: &[f64], left: &mut Vec<f64>, subsets: &[u32]) -> bool {
            if k == costs.len() {
                return true;
            }
            for &m in subsets {
                let nodes: Vec<usize> = (0..left.len()).filter(|e| m & (1 << e) != 0).collect();
                if nodes.iter().all(|&e| left[e] >= costs[k]) {
                    nodes.iter().for_each(|&e| left[e] -= costs[k]);
                    if go(k + 1, costs, left, subsets) {
                        return true;
                    }
                    nodes.iter().for_each(|&e| left[e] += costs[k]);
                }
            }
            false
        }
        go(0, costs, &mut caps.to_vec(), &subsets)
    }

    proptest::proptest! {
        #[test]
        fn finds_a_placement_whenever_one_exists(
            costs in proptest::collection::vec(1u8..40, 1..4),
            caps in proptest::collection::vec(10u8..80, 2..5),
            delays in proptest::collection::vec(0u8..50, 5),
        ) {
            let svcs: Vec<_> = costs.iter().enumerate()
                .map(|(s, &c)| ServiceType::new(s, 50.0, c as f64, 30.0, 0.0).unwrap()).collect();
            let ns = nodes(&caps.iter().map(|&c| c as f64).collect::<Vec<_>>());
            let d = DelayModel::new((0..ns.len()).map(|e| vec![delays[e] as f64; svcs.len()]).collect()).unwrap();
            let costs_f: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
            let expect = brute_feasible(&costs_f, &ns.iter().map(|n| n.capacity).collect::<Vec<_>>(), 2);
            match place_services(&svcs, &ns, &d, &vec![2; svcs.len()], &Default::default()) {
                Ok(p) => {
                    proptest::prop_assert!(expect);
                    proptest::prop_assert!(validate_placement(&p.counts(), &ns, &svcs).unwrap().passes());
                }
                Err(_) => proptest::prop_assert!(!expect),
            }
        }
    }
}
