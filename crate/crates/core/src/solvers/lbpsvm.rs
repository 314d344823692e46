//! Load-balanced proactive secondary mapping.
//!
//! Minimises, over `beta > 0` with `sum(beta) = affected`,
//!
//! ```text
//! F(beta) = sum_i [ -w_i ln beta_i + k1 d_i beta_i + k2 q(gamma_i + beta_i) ]
//! ```
//!
//! where `q` is the M/D/1 wait from [`crate::queueing::queue_wait`]. `F` is
//! separable and strictly convex, so the optimum is characterised by a single
//! multiplier `mu` with `w_i / beta_i - k1 d_i - k2 q'(gamma_i + beta_i) = mu` for
//! every candidate. The solver bisects on `mu`; for a fixed `mu` each coordinate
//! is recovered in closed form below the queue kink `beta = C - gamma_i` and by
//! 1-D bisection above it.

use crate::model::{DelayModel, Placement, PrimaryMapping};
use crate::num::{compensated_sum, Scalar};
use crate::queueing::{queue_wait, queue_wait_slope};

use super::SolverError;

/// Scaling constants of the combined objective. `None` means `1 / D_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbPsvmParams<T> {
    pub k1: Option<T>,
    pub k2: Option<T>,
    /// Offset inside the capacity weights keeping them positive for full instances.
    pub epsilon: T,
}

impl<T: Scalar> Default for LbPsvmParams<T> {
    fn default() -> Self {
        Self { k1: None, k2: None, epsilon: T::lit(1e-3) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions<T> {
    /// Stationarity residual the solution is expected to meet.
    pub kkt_tol: T,
    /// Cap on outer bisection steps.
    pub max_iters: usize,
    /// Multiplier to start the bracket search from.
    pub warm_start: Option<T>,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        Self { kkt_tol: T::lit(1e-8), max_iters: 400, warm_start: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbPsvmProblem<T> {
    pub service: usize,
    pub source_node: usize,
    /// Candidate node ids, parallel to the per-candidate vectors.
    pub candidates: Vec<usize>,
    pub weights: Vec<T>,
    /// Primary load already on each candidate.
    pub prior_load: Vec<T>,
    /// Propagation delay of each candidate, ms.
    pub delay: Vec<T>,
    pub capacity: T,
    /// Vehicles to re-home.
    pub affected: T,
    /// Delay threshold of the service, ms.
    pub delay_cap: T,
    pub k1: T,
    pub k2: T,
    pub epsilon: T,
}

/// Capacity weight `1 - (gamma - eps) / C`. Overflow queued past `C` counts
/// as a full instance.
fn capacity_weight<T: Scalar>(prior: T, capacity: T, epsilon: T) -> T {
    T::one() - (prior.min(capacity) - epsilon) / capacity
}

impl<T: Scalar> LbPsvmProblem<T> {
    /// Problem over anonymous candidates `0..n` with weights derived from the
    /// primary loads.
    #[allow(clippy::too_many_arguments)]
    pub fn from_loads(
        prior_load: Vec<T>,
        delay: Vec<T>,
        capacity: T,
        affected: T,
        delay_cap: T,
        k1: T,
        k2: T,
        epsilon: T,
    ) -> Result<Self, SolverError> {
        let weights = prior_load.iter().map(|&g| capacity_weight(g, capacity, epsilon)).collect();
        let problem = Self {
            service: 0,
            source_node: usize::MAX,
            candidates: (0..prior_load.len()).collect(),
            weights,
            prior_load,
            delay,
            capacity,
            affected,
            delay_cap,
            k1,
            k2,
            epsilon,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        let n = self.candidates.len();
        if n == 0 {
            return Err(SolverError::NoCandidate { service: self.service, node: self.source_node });
        }
        if self.weights.len() != n || self.prior_load.len() != n || self.delay.len() != n {
            return bad(format!("candidate vectors disagree in length (n = {n})"));
        }
        if !(self.capacity > T::zero() && self.capacity.is_finite()) {
            return bad(format!("capacity {}", self.capacity));
        }
        if !(self.affected >= T::zero() && self.affected.is_finite()) {
            return bad(format!("affected {}", self.affected));
        }
        if !(self.epsilon > T::zero()) {
            return bad(format!("epsilon {}", self.epsilon));
        }
        if !(self.k1 >= T::zero() && self.k2 >= T::zero() && self.k1.is_finite() && self.k2.is_finite()) {
            return bad(format!("scaling constants k1 = {}, k2 = {}", self.k1, self.k2));
        }
        for i in 0..n {
            if !(self.weights[i] > T::zero() && self.weights[i].is_finite()) {
                return bad(format!("weight {} at candidate {i}", self.weights[i]));
            }
            let g = self.prior_load[i];
            if !(g >= T::zero() && g < self.capacity + self.capacity) {
                return bad(format!("prior load {g} at candidate {i} outside [0, {})", self.capacity + self.capacity));
            }
            if !(self.delay[i] >= T::zero() && self.delay[i].is_finite()) {
                return bad(format!("delay {} at candidate {i}", self.delay[i]));
            }
        }
        Ok(())
    }

    /// Distance kept from the queue pole `2C`.
    fn guard(&self) -> T {
        T::lit(1e-6).max(T::lit(8.0) * T::epsilon() * self.capacity)
    }

    fn coords(&self) -> Vec<Coord<T>> {
        let guard = self.guard();
        let two_c = self.capacity + self.capacity;
        (0..self.n())
            .map(|i| Coord {
                weight: self.weights[i],
                linear: self.k1 * self.delay[i],
                k2: self.k2,
                prior: self.prior_load[i],
                capacity: self.capacity,
                kink: (self.capacity - self.prior_load[i]).max(T::zero()),
                upper: two_c - self.prior_load[i] - guard,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbPsvmSolution<T> {
    pub beta: Vec<T>,
    /// Combined objective at `beta`.
    pub objective: T,
    /// Raw delay mass `sum d_i beta_i + sum q_i`, checked against the delay cap.
    pub delay_attained: T,
    pub feasible_delay: bool,
    /// Multiplier of the conservation constraint.
    pub multiplier: T,
    pub kkt_residual: T,
    /// Some coordinate was held at the queue-pole guard.
    pub saturated: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// One separable coordinate of the objective.
#[derive(Debug, Clone, Copy)]
struct Coord<T> {
    weight: T,
    linear: T,
    k2: T,
    prior: T,
    capacity: T,
    kink: T,
    upper: T,
}

impl<T: Scalar> Coord<T> {
    fn queue_slope(&self, beta: T) -> T {
        if self.k2 == T::zero() {
            return T::zero();
        }
        self.k2 * queue_wait_slope(self.prior + beta, self.capacity)
    }

    /// Negative gradient using the right derivative of the queue term.
    fn marginal(&self, beta: T) -> T {
        self.weight / beta - self.linear - self.queue_slope(beta)
    }

    /// Negative gradient using the left derivative; differs only at the kink.
    fn marginal_left(&self, beta: T) -> T {
        if beta <= self.kink {
            self.weight / beta - self.linear
        } else {
            self.marginal(beta)
        }
    }

    /// Largest `beta` in `(0, upper]` whose marginal is at least `mu`, plus
    /// whether it sits on the guard.
    fn respond(&self, mu: T) -> (T, bool) {
        let a = mu + self.linear;
        if a > T::zero() {
            let b = self.weight / a;
            if b <= self.kink {
                return (b, false);
            }
        }
        if self.kink > T::zero() && self.marginal(self.kink) <= mu {
            return (self.kink, false);
        }
        if self.marginal(self.upper) >= mu {
            return (self.upper, true);
        }
        let (mut lo, mut hi) = (self.kink, self.upper);
        loop {
            let mid = lo + (hi - lo) / (T::one() + T::one());
            if mid <= lo || mid >= hi {
                break;
            }
            if self.marginal(mid) > mu {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (if lo > T::zero() { lo } else { hi }, false)
    }
}

/// Combined objective; `+inf` outside the domain.
pub fn lb_psvm_objective<T: Scalar>(problem: &LbPsvmProblem<T>, beta: &[T]) -> T {
    let mut terms = Vec::with_capacity(beta.len());
    for (i, &b) in beta.iter().enumerate() {
        if !(b > T::zero()) {
            return T::infinity();
        }
        let q = match queue_wait(problem.prior_load[i] + b, problem.capacity) {
            Ok(q) => q,
            Err(_) => return T::infinity(),
        };
        terms.push(-problem.weights[i] * b.ln() + problem.k1 * problem.delay[i] * b + problem.k2 * q);
    }
    compensated_sum(terms)
}

fn delay_mass<T: Scalar>(problem: &LbPsvmProblem<T>, beta: &[T]) -> T {
    compensated_sum(beta.iter().enumerate().map(|(i, &b)| {
        let q = queue_wait(problem.prior_load[i] + b, problem.capacity).unwrap_or(T::infinity());
        problem.delay[i] * b + q
    }))
}

/// Spread of the stationarity condition across coordinates strictly inside the
/// domain. At the queue kink the marginal is an interval; the residual is the
/// gap between the largest lower end and the smallest upper end (0 when a
/// common multiplier exists).
pub fn stationarity_residual<T: Scalar>(problem: &LbPsvmProblem<T>, beta: &[T]) -> T {
    let coords = problem.coords();
    let mut lo = T::neg_infinity();
    let mut hi = T::infinity();
    let mut active = 0;
    for (c, &b) in coords.iter().zip(beta) {
        if !(b > T::zero()) || b >= c.upper {
            continue;
        }
        active += 1;
        lo = lo.max(c.marginal(b));
        hi = hi.min(c.marginal_left(b));
    }
    if active < 2 {
        return T::zero();
    }
    (lo - hi).max(T::zero())
}

/// Solves the failover program by bisection on the conservation multiplier.
pub fn solve_lb_psvm<T: Scalar>(
    problem: &LbPsvmProblem<T>,
    options: &SolveOptions<T>,
) -> Result<LbPsvmSolution<T>, SolverError> {
    problem.validate()?;
    let n = problem.n();
    let budget = problem.affected;
    let two_c = problem.capacity + problem.capacity;

    if budget == T::zero() {
        // Nothing to re-home; the log terms are dropped.
        return Ok(LbPsvmSolution {
            beta: vec![T::zero(); n],
            objective: T::zero(),
            delay_attained: T::zero(),
            feasible_delay: true,
            multiplier: T::zero(),
            kkt_residual: T::zero(),
            saturated: false,
            converged: true,
            iterations: 0,
        });
    }

    let headroom = compensated_sum(problem.prior_load.iter().map(|&g| two_c - g));
    if headroom <= budget {
        return Err(SolverError::QueueInfeasible {
            service: problem.service,
            affected: budget.as_f64(),
            headroom: headroom.as_f64(),
        });
    }
    let coords = problem.coords();
    let guarded = compensated_sum(coords.iter().map(|c| c.upper));
    if guarded < budget {
        return Err(SolverError::QueueInfeasible {
            service: problem.service,
            affected: budget.as_f64(),
            headroom: guarded.as_f64(),
        });
    }

    if n == 1 {
        let beta = vec![budget];
        return Ok(finish(problem, beta, coords[0].marginal(budget), 0, budget > coords[0].upper, options));
    }

    let respond_all = |mu: T| -> (Vec<T>, T) {
        let beta: Vec<T> = coords.iter().map(|c| c.respond(mu).0).collect();
        let total = compensated_sum(beta.iter().copied());
        (beta, total)
    };

    // Cold bracket: at `hi` every coordinate takes at most budget / n, at `lo`
    // every coordinate sits on its guard.
    let share = budget / T::from_usize_lossy(n);
    let mut hi = coords.iter().map(|c| c.marginal(share.min(c.upper))).fold(T::neg_infinity(), T::max);
    let mut lo = coords.iter().map(|c| c.marginal(c.upper)).fold(T::infinity(), T::min);
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }

    let mut iterations = 0;
    if let Some(mu0) = options.warm_start.filter(|m| m.is_finite() && *m > lo && *m < hi) {
        let (_, s0) = respond_all(mu0);
        let mut step = mu0.abs().max(T::lit(1e-3)) * T::lit(1e-2);
        if s0 >= budget {
            lo = mu0;
            while lo + step < hi {
                iterations += 1;
                let cand = lo + step;
                if respond_all(cand).1 <= budget {
                    hi = cand;
                    break;
                }
                lo = cand;
                step *= T::lit(4.0);
            }
        } else {
            hi = mu0;
            while hi - step > lo {
                iterations += 1;
                let cand = hi - step;
                if respond_all(cand).1 >= budget {
                    lo = cand;
                    break;
                }
                hi = cand;
                step *= T::lit(4.0);
            }
        }
    }

    let two = T::one() + T::one();
    while iterations < options.max_iters {
        let mid = lo + (hi - lo) / two;
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        let total = respond_all(mid).1;
        if total == budget {
            lo = mid;
            hi = mid;
            break;
        }
        if total > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // Blend the two bracket ends so the conservation constraint holds.
    let (beta_lo, s_lo) = respond_all(lo);
    let (beta_hi, s_hi) = respond_all(hi);
    let theta = if s_lo > s_hi { ((budget - s_hi) / (s_lo - s_hi)).max(T::zero()).min(T::one()) } else { T::zero() };
    let mut beta: Vec<T> = beta_hi.iter().zip(&beta_lo).map(|(&h, &l)| h + theta * (l - h)).collect();

    let residual = budget - compensated_sum(beta.iter().copied());
    if residual != T::zero() {
        let target = (0..n)
            .filter(|&i| beta[i] < coords[i].upper)
            .max_by(|&a, &b| beta[a].partial_cmp(&beta[b]).unwrap())
            .unwrap_or(0);
        beta[target] = (beta[target] + residual).max(T::zero());
    }

    let multiplier = hi + theta * (lo - hi);
    let saturated = beta.iter().zip(&coords).any(|(&b, c)| b >= c.upper);
    Ok(finish(problem, beta, multiplier, iterations, saturated, options))
}

fn finish<T: Scalar>(
    problem: &LbPsvmProblem<T>,
    beta: Vec<T>,
    multiplier: T,
    iterations: usize,
    saturated: bool,
    options: &SolveOptions<T>,
) -> LbPsvmSolution<T> {
    let objective = lb_psvm_objective(problem, &beta);
    let delay_attained = delay_mass(problem, &beta);
    let kkt_residual = stationarity_residual(problem, &beta);
    LbPsvmSolution {
        feasible_delay: delay_attained <= problem.delay_cap,
        converged: kkt_residual <= options.kkt_tol,
        beta,
        objective,
        delay_attained,
        multiplier,
        kkt_residual,
        saturated,
        iterations,
    }
}

/// Sets up the failover problem for `service` when `attacked` fails: the
/// candidates are the other nodes hosting an active instance, the budget is the
/// primary load on the attacked node.
#[allow(clippy::too_many_arguments)]
pub fn build_lb_psvm<T: Scalar>(
    primary: &PrimaryMapping<T>,
    placement: &Placement,
    attacked: usize,
    service: usize,
    delay: &DelayModel<T>,
    capacity: T,
    delay_cap: T,
    params: &LbPsvmParams<T>,
) -> Result<LbPsvmProblem<T>, SolverError> {
    if !placement.hosts(attacked, service) {
        return Err(SolverError::NotHosted { service, node: attacked });
    }
    let candidates: Vec<usize> = placement.hosting_nodes(service).filter(|&e| e != attacked).collect();
    if candidates.is_empty() {
        return Err(SolverError::NoCandidate { service, node: attacked });
    }
    let prior_load: Vec<T> = candidates.iter().map(|&e| primary.get(e, service)).collect();
    let weights = prior_load.iter().map(|&g| capacity_weight(g, capacity, params.epsilon)).collect();
    let inv_cap = T::one() / delay_cap;
    let problem = LbPsvmProblem {
        service,
        source_node: attacked,
        delay: candidates.iter().map(|&e| delay.get(e, service)).collect(),
        candidates,
        weights,
        prior_load,
        capacity,
        affected: primary.get(attacked, service),
        delay_cap,
        k1: params.k1.unwrap_or(inv_cap),
        k2: params.k2.unwrap_or(inv_cap),
        epsilon: params.epsilon,
    };
    problem.validate()?;
    Ok(problem)
}
