//! M/D/1 waiting time at an overloaded service instance and the per-vehicle
//! service delay built on it.
//!
//! An instance with deterministic capacity `C` has no queue while its arrival is
//! at most `C`. Above that the excess `a - C` waits
//! `(a - C) / (2C (C - (a - C)))` time units, which has a pole at `a = 2C`.

use thiserror::Error;

use crate::num::{compensated_sum, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("arrival {arrival} saturates an instance of capacity {capacity} (must stay below {limit})")]
    Saturated { arrival: f64, capacity: f64, limit: f64 },
    #[error("invalid queue input: {0}")]
    Invalid(String),
}

/// Raw waiting time, in time units.
pub fn queue_wait<T: Scalar>(arrival: T, capacity: T) -> Result<T, QueueError> {
    if !(capacity > T::zero()) || !arrival.is_finite() || arrival < T::zero() {
        return Err(QueueError::Invalid(format!("arrival {arrival}, capacity {capacity}")));
    }
    if arrival <= capacity {
        return Ok(T::zero());
    }
    let limit = capacity + capacity;
    if arrival >= limit {
        return Err(QueueError::Saturated {
            arrival: arrival.as_f64(),
            capacity: capacity.as_f64(),
            limit: limit.as_f64(),
        });
    }
    let excess = arrival - capacity;
    Ok(excess / ((capacity + capacity) * (capacity - excess)))
}

/// Right derivative of [`queue_wait`] with respect to the arrival:
/// 0 on `[0, C)`, `1 / (2 (C - x)^2)` with `x = a - C` on `[C, 2C)`.
pub fn queue_wait_slope<T: Scalar>(arrival: T, capacity: T) -> T {
    if arrival < capacity {
        return T::zero();
    }
    let room = capacity - (arrival - capacity);
    if room <= T::zero() {
        return T::infinity();
    }
    T::one() / ((T::one() + T::one()) * room * room)
}

/// Converts raw queue waits into milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueModel<T> {
    pub ms_per_unit: T,
}

impl<T: Scalar> Default for QueueModel<T> {
    fn default() -> Self {
        Self { ms_per_unit: T::lit(1000.0) }
    }
}

impl<T: Scalar> QueueModel<T> {
    pub fn new(ms_per_unit: T) -> Self {
        Self { ms_per_unit }
    }

    pub fn delay_ms(&self, arrival: T, capacity: T) -> Result<T, QueueError> {
        Ok(queue_wait(arrival, capacity)? * self.ms_per_unit)
    }

    /// Like [`Self::delay_ms`] but clamps arrivals at or past the pole to
    /// `2C (1 - 1e-6)`; returns the delay and whether clamping happened.
    pub fn delay_ms_clamped(&self, arrival: T, capacity: T) -> (T, bool) {
        let limit = (capacity + capacity) * (T::one() - T::lit(1e-6));
        if arrival >= limit {
            let d = queue_wait(limit, capacity).unwrap_or(T::zero()) * self.ms_per_unit;
            (d, true)
        } else {
            (self.delay_ms(arrival.max(T::zero()), capacity).unwrap_or(T::zero()), false)
        }
    }
}

/// Load and propagation delay of one instance serving a service.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceLoad<T> {
    /// Total arrival at the instance (primary plus re-homed vehicles).
    pub vehicles: T,
    /// Propagation delay to the hosting node, ms.
    pub propagation_ms: T,
}

/// Vehicle-weighted mean delay of a service: each instance contributes its
/// propagation plus queue delay, weighted by its share of the service's
/// vehicles. Zero vehicles yields 0.
pub fn service_delay<T: Scalar>(
    instances: &[InstanceLoad<T>],
    capacity: T,
    model: &QueueModel<T>,
) -> Result<T, QueueError> {
    let total = compensated_sum(instances.iter().map(|i| i.vehicles));
    if total <= T::zero() {
        return Ok(T::zero());
    }
    let mut mass = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.vehicles <= T::zero() {
            continue;
        }
        let q = model.delay_ms(inst.vehicles, capacity)?;
        mass.push((inst.propagation_ms + q) * inst.vehicles);
    }
    Ok(compensated_sum(mass) / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_queue_at_or_below_capacity() {
        assert_eq!(queue_wait(20.0, 30.0).unwrap(), 0.0);
        assert_eq!(queue_wait(30.0, 30.0).unwrap(), 0.0);
        assert_eq!(queue_wait(0.0, 30.0).unwrap(), 0.0);
    }

    #[test]
    fn overload_value() {
        // excess 10: 10 / (2*30*20)
        let w: f64 = queue_wait(40.0, 30.0).unwrap();
        assert!((w - 1.0 / 120.0).abs() < 1e-15);
        assert!((QueueModel::<f64>::default().delay_ms(40.0, 30.0).unwrap() - 1000.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn pole_is_an_error() {
        assert!(matches!(queue_wait(60.0, 30.0), Err(QueueError::Saturated { .. })));
        assert!(matches!(queue_wait(75.0, 30.0), Err(QueueError::Saturated { .. })));
        assert!(queue_wait(59.999_999, 30.0).unwrap() > 1e4);
    }

    #[test]
    fn clamped_delay_flags_saturation() {
        let m = QueueModel::<f64>::default();
        let (d, sat) = m.delay_ms_clamped(61.0, 30.0);
        assert!(sat && d.is_finite() && d > 0.0);
        let (d, sat) = m.delay_ms_clamped(40.0, 30.0);
        assert!(!sat && (d - 1000.0 / 120.0).abs() < 1e-12);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let h = 1e-6;
        for a in [31.0f64, 40.0, 50.0, 58.0] {
            let fd = (queue_wait(a + h, 30.0).unwrap() - queue_wait(a - h, 30.0).unwrap()) / (2.0 * h);
            let s: f64 = queue_wait_slope(a, 30.0);
            assert!((fd - s).abs() <= 1e-6 * s.max(1.0), "{a}: {fd} vs {s}");
        }
        assert_eq!(queue_wait_slope(29.0, 30.0), 0.0);
    }

    #[test]
    fn single_node_service_delay() {
        let m = QueueModel::<f64>::default();
        let d = service_delay(&[InstanceLoad { vehicles: 20.0, propagation_ms: 5.0 }], 30.0, &m).unwrap();
        assert_eq!(d, 5.0);
        assert_eq!(service_delay::<f64>(&[], 30.0, &m).unwrap(), 0.0);
    }

    #[test]
    fn balanced_failover_loads_add_queue_terms() {
        // loads 32 and 33 against capacity 30
        let m = QueueModel::<f64>::default();
        let loads = [
            InstanceLoad { vehicles: 32.0, propagation_ms: 10.0 },
            InstanceLoad { vehicles: 33.0, propagation_ms: 12.0 },
        ];
        let q2 = 2.0 / (2.0 * 30.0 * 28.0) * 1000.0;
        let q3 = 3.0 / (2.0 * 30.0 * 27.0) * 1000.0;
        let expected = (32.0 * (10.0 + q2) + 33.0 * (12.0 + q3)) / 65.0;
        let got = service_delay(&loads, 30.0, &m).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn doubling_propagation_doubles_that_component() {
        let m = QueueModel::<f64>::default();
        let a = [
            InstanceLoad { vehicles: 10.0, propagation_ms: 3.0 },
            InstanceLoad { vehicles: 25.0, propagation_ms: 7.0 },
        ];
        let b: Vec<_> = a.iter().map(|i| InstanceLoad { propagation_ms: 2.0 * i.propagation_ms, ..*i }).collect();
        assert_eq!(service_delay(&b, 30.0, &m).unwrap(), 2.0 * service_delay(&a, 30.0, &m).unwrap());
    }
}
