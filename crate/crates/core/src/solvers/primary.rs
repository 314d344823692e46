use crate::model::{DelayModel, Placement, PrimaryMapping};
use crate::num::Scalar;

use super::SolverError;

/// Primary mapping plus the attained bottleneck delay per service (`None` for
/// services without demand).
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryOutcome<T> {
    pub mapping: PrimaryMapping<T>,
    pub bottleneck: Vec<Option<T>>,
}

/// Assigns each service's demand to its hosting instances so that the largest
/// delay of any used instance is minimal.
///
/// Per service, instances are ranked by `(delay, node index)`. The bottleneck is
/// the delay of the first instance at which the cumulative capacity covers the
/// demand; within that threshold instances are filled cheapest first, which
/// also minimises the total delay mass among bottleneck-optimal assignments.
pub fn solve_primary_mapping<T: Scalar>(
    placement: &Placement,
    demand: &[T],
    delay: &DelayModel<T>,
    capacity: T,
) -> Result<PrimaryOutcome<T>, SolverError> {
    let nodes = placement.num_nodes();
    let services = placement.num_services();
    if demand.len() != services || delay.num_nodes() != nodes || delay.num_services() != services {
        return Err(SolverError::InvalidProblem(format!(
            "demand has {} entries, delay is {}x{}, placement is {}x{}",
            demand.len(),
            delay.num_nodes(),
            delay.num_services(),
            nodes,
            services
        )));
    }
    if !(capacity > T::zero()) {
        return Err(SolverError::InvalidProblem(format!("instance capacity {capacity}")));
    }

    let mut mapping = PrimaryMapping::zeros(nodes, services);
    let mut bottleneck = vec![None; services];
    for (s, &lambda) in demand.iter().enumerate() {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(SolverError::InvalidProblem(format!("service {s}: demand {lambda}")));
        }
        if lambda == T::zero() {
            continue;
        }
        let mut ranked: Vec<usize> = placement.hosting_nodes(s).collect();
        ranked.sort_by(|&a, &b| {
            delay.get(a, s).partial_cmp(&delay.get(b, s)).expect("finite delays").then(a.cmp(&b))
        });
        let hosted = capacity * T::from_usize_lossy(ranked.len());
        if hosted < lambda {
            return Err(SolverError::CapacityInfeasible {
                service: s,
                demand: lambda.as_f64(),
                capacity: hosted.as_f64(),
            });
        }
        let mut remaining = lambda;
        for &e in &ranked {
            if remaining <= T::zero() {
                break;
            }
            let take = remaining.min(capacity);
            mapping.set(e, s, take);
            remaining -= take;
            bottleneck[s] = Some(delay.get(e, s));
        }
    }
    Ok(PrimaryOutcome { mapping, bottleneck })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EdgeNode, Point, ServiceType};
    use proptest::prelude::*;

    fn setup(n: usize) -> (Vec<EdgeNode<f64>>, Vec<ServiceType<f64>>, Placement) {
        let nodes: Vec<_> = (0..n).map(|e| EdgeNode::new(e, Point::new(0.0, 0.0), 100.0).unwrap()).collect();
        let services = vec![ServiceType::new(0, 50.0, 10.0, 30.0, 0.0).unwrap()];
        let x = vec![vec![true]; n];
        let p = Placement::from_indicator(&x, &nodes, &services).unwrap();
        (nodes, services, p)
    }

    fn delays(d: &[f64]) -> DelayModel<f64> {
        DelayModel::new(d.iter().map(|&v| vec![v]).collect()).unwrap()
    }

    #[test]
    fn single_instance_suffices() {
        let (_, _, p) = setup(2);
        let out = solve_primary_mapping(&p, &[20.0], &delays(&[5.0, 10.0]), 30.0).unwrap();
        assert_eq!(out.mapping.matrix(), &[vec![20.0], vec![0.0]]);
        assert_eq!(out.bottleneck[0], Some(5.0));
    }

    #[test]
    fn forced_overflow() {
        let (_, _, p) = setup(2);
        let out = solve_primary_mapping(&p, &[40.0], &delays(&[5.0, 10.0]), 30.0).unwrap();
        assert_eq!(out.mapping.matrix(), &[vec![30.0], vec![10.0]]);
        assert_eq!(out.bottleneck[0], Some(10.0));
    }

    #[test]
    fn zero_demand_maps_nothing() {
        let (_, _, p) = setup(2);
        let out = solve_primary_mapping(&p, &[0.0], &delays(&[5.0, 10.0]), 30.0).unwrap();
        assert_eq!(out.bottleneck[0], None);
        assert_eq!(out.mapping.served(0), 0.0);
    }

    #[test]
    fn infeasible_names_service() {
        let (_, _, p) = setup(2);
        let err = solve_primary_mapping(&p, &[61.0], &delays(&[5.0, 10.0]), 30.0).unwrap_err();
        assert!(matches!(err, SolverError::CapacityInfeasible { service: 0, .. }));
    }

    #[test]
    fn equal_delays_fill_lowest_index() {
        let (_, _, p) = setup(3);
        let out = solve_primary_mapping(&p, &[35.0], &delays(&[7.0, 7.0, 7.0]), 30.0).unwrap();
        assert_eq!(out.mapping.matrix(), &[vec![30.0], vec![5.0], vec![0.0]]);
    }

    /// Minimal bottleneck over every integer assignment, by enumeration.
    fn brute_force_bottleneck(d: &[f64], hosted: &[bool], lambda: u32, cap: u32) -> Option<f64> {
        fn rec(i: usize, left: u32, d: &[f64], hosted: &[bool], cap: u32, worst: f64, best: &mut Option<f64>) {
            if i == d.len() {
                if left == 0 {
                    *best = Some(best.map_or(worst, |b: f64| b.min(worst)));
                }
                return;
            }
            let max_here = if hosted[i] { cap.min(left) } else { 0 };
            for g in 0..=max_here {
                let w = if g > 0 { worst.max(d[i]) } else { worst };
                rec(i + 1, left - g, d, hosted, cap, w, best);
            }
        }
        let mut best = None;
        rec(0, lambda, d, hosted, cap, f64::NEG_INFINITY, &mut best);
        best
    }

    proptest! {
        #[test]
        fn bottleneck_matches_enumeration(
            d in prop::collection::vec(1u32..20, 2..=4),
            mask in prop::collection::vec(any::<bool>(), 4),
            lambda in 1u32..=60,
        ) {
            let n = d.len();
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            let hosted: Vec<bool> = mask[..n].to_vec();
            let x: Vec<Vec<bool>> = hosted.iter().map(|&h| vec![h]).collect();
            let p = Placement::from_slots(
                x.iter().map(|r| r.iter().map(|&h| if h { crate::model::Slot::Active } else { crate::model::Slot::Empty }).collect()).collect(),
            );
            let expected = brute_force_bottleneck(&d, &hosted, lambda, 30);
            let got = solve_primary_mapping(&p, &[f64::from(lambda)], &delays(&d), 30.0);
            match expected {
                None => prop_assert!(got.is_err()),
                Some(t) => {
                    let out = got.unwrap();
                    prop_assert_eq!(out.bottleneck[0], Some(t));
                    out.mapping.check(&p, &[f64::from(lambda)], 30.0, 1e-9).unwrap();
                }
            }
        }
    }
}
