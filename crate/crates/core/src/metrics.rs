//! Edge load factor, Jain's fairness index and the per-time-unit metrics record.

use std::fmt;
use std::str::FromStr;

use crate::num::{compensated_sum, Scalar};

/// Network state reported on every metrics row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetworkState {
    PreAttack,
    Attack,
    Recovered,
}

impl NetworkState {
    pub fn as_str(self) -> &'static str {
        match self {
            NetworkState::PreAttack => "pre-attack",
            NetworkState::Attack => "attack",
            NetworkState::Recovered => "recovered",
        }
    }

    /// Legal successor states (staying put is always legal).
    pub fn can_become(self, next: NetworkState) -> bool {
        use NetworkState::*;
        self == next
            || matches!((self, next), (PreAttack, Attack) | (Attack, Recovered) | (Recovered, PreAttack))
    }
}

impl fmt::Display for NetworkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetworkState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre-attack" => Ok(NetworkState::PreAttack),
            "attack" => Ok(NetworkState::Attack),
            "recovered" => Ok(NetworkState::Recovered),
            other => Err(format!("unknown network state '{other}'")),
        }
    }
}

/// Jain's index `(sum x)^2 / (n sum x^2)`. An empty or all-zero vector is
/// perfectly equal and scores 1.
pub fn jain_fairness<T: Scalar>(values: &[T]) -> T {
    let sum = compensated_sum(values.iter().copied());
    let sq = compensated_sum(values.iter().map(|&v| v * v));
    if values.is_empty() || sq <= T::zero() {
        return T::one();
    }
    let n = T::from_usize_lossy(values.len());
    // Rounding can push a perfectly equal vector a hair above 1.
    (sum * sum / (n * sq)).min(T::one())
}

/// Load factor of one instance in percent: added load over the capacity it
/// had left. A fully booked instance counts `epsilon` spare capacity.
pub fn load_factor<T: Scalar>(added: T, available: T, epsilon: T) -> T {
    let avail = if available > T::zero() { available } else { epsilon };
    T::lit(100.0) * added / avail
}

/// Added failover load landing on one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddedLoad<T> {
    pub node: usize,
    pub service: usize,
    /// Re-homed vehicles.
    pub added: T,
    /// Capacity left after primary load, `C - gamma`.
    pub available: T,
}

/// Per-node ELF: mean load factor over all instances hosted on the node, where
/// instances without added load contribute 0. Nodes without any affected
/// instance report 0.
pub fn edge_load_factor<T: Scalar>(loads: &[AddedLoad<T>], hosted_per_node: &[usize], epsilon: T) -> Vec<T> {
    let mut sums = vec![T::zero(); hosted_per_node.len()];
    let mut affected = vec![false; hosted_per_node.len()];
    for l in loads {
        sums[l.node] += load_factor(l.added, l.available, epsilon);
        affected[l.node] = true;
    }
    sums.iter()
        .zip(hosted_per_node)
        .zip(&affected)
        .map(|((&sum, &hosted), &hit)| {
            if !hit {
                T::zero()
            } else {
                sum / T::from_usize_lossy(hosted.max(1))
            }
        })
        .collect()
}

/// Mean load factor over the instances that actually received failover load.
pub fn mean_added_load_factor<T: Scalar>(loads: &[AddedLoad<T>], epsilon: T) -> T {
    let lfs: Vec<T> =
        loads.iter().filter(|l| l.added > T::zero()).map(|l| load_factor(l.added, l.available, epsilon)).collect();
    if lfs.is_empty() {
        return T::zero();
    }
    compensated_sum(lfs.iter().copied()) / T::from_usize_lossy(lfs.len())
}

/// Demand-weighted mean of per-service delays; 0 with no demand.
pub fn weighted_delay<T: Scalar>(per_service: &[T], demand: &[T]) -> T {
    let total = compensated_sum(demand.iter().copied());
    if total <= T::zero() {
        return T::zero();
    }
    compensated_sum(per_service.iter().zip(demand).map(|(&d, &w)| d * w)) / total
}

/// One row of simulation output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord<T> {
    pub time: u64,
    pub state: NetworkState,
    /// Mean per-vehicle delay of each service, ms.
    pub per_service_delay: Vec<T>,
    pub avg_delay: T,
    pub elf_per_node: Vec<T>,
    pub avg_elf: T,
    pub fairness: T,
    pub q_value: T,
    pub demand: Vec<T>,
    /// Vehicles assigned to some instance this unit.
    pub served: T,
    /// Services that could not be fully served this unit.
    pub degraded: Vec<usize>,
    /// Some instance hit the queue pole and its delay was clamped.
    pub saturated: bool,
}
