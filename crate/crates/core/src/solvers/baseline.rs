use crate::model::{DelayModel, Placement, PrimaryMapping, SecondaryMapping};
use crate::num::Scalar;

use super::SolverError;

/// Other nodes with an active instance of `service`, ascending.
pub fn failover_candidates(placement: &Placement, attacked: usize, service: usize) -> Vec<usize> {
    placement.hosting_nodes(service).filter(|&e| e != attacked).collect()
}

/// Sends every affected vehicle to the single candidate with the lowest
/// propagation delay (lowest node index on ties). All candidates are listed in
/// the result; the unused ones carry zero.
pub fn solve_psvm<T: Scalar>(
    primary: &PrimaryMapping<T>,
    placement: &Placement,
    attacked: usize,
    service: usize,
    delay: &DelayModel<T>,
) -> Result<SecondaryMapping<T>, SolverError> {
    if !placement.hosts(attacked, service) {
        return Err(SolverError::NotHosted { service, node: attacked });
    }
    let targets = failover_candidates(placement, attacked, service);
    let best = targets
        .iter()
        .enumerate()
        .min_by(|(_, &a), (_, &b)| {
            delay.get(a, service).partial_cmp(&delay.get(b, service)).expect("finite delays").then(a.cmp(&b))
        })
        .map(|(i, _)| i)
        .ok_or(SolverError::NoCandidate { service, node: attacked })?;
    let mut beta = vec![T::zero(); targets.len()];
    beta[best] = primary.get(attacked, service);
    Ok(SecondaryMapping { service, source_node: attacked, targets, beta })
}

/// Backup-reservation failover: all affected vehicles go to the idle reserved
/// instance of the service.
pub fn backup_redirect<T: Scalar>(
    primary: &PrimaryMapping<T>,
    placement: &Placement,
    attacked: usize,
    service: usize,
) -> Result<SecondaryMapping<T>, SolverError> {
    if !placement.hosts(attacked, service) {
        return Err(SolverError::NotHosted { service, node: attacked });
    }
    let backup = placement
        .reserved_node(service)
        .filter(|&e| e != attacked)
        .ok_or(SolverError::NoCandidate { service, node: attacked })?;
    Ok(SecondaryMapping {
        service,
        source_node: attacked,
        targets: vec![backup],
        beta: vec![primary.get(attacked, service)],
    })
}
