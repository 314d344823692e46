//! Exhaustive grid search over the failover simplex. Slow by construction and
//! written without any of the convex solver's machinery so the two can check
//! each other.

use crate::num::Scalar;

use super::{LbPsvmProblem, LbPsvmSolution, SolverError};

/// Per-coordinate objective term, evaluated directly from its definition.
fn term<T: Scalar>(p: &LbPsvmProblem<T>, i: usize, b: T) -> T {
    if !(b > T::zero()) {
        return T::infinity();
    }
    let c = p.capacity;
    let arrival = p.prior_load[i] + b;
    let queue = if arrival <= c {
        T::zero()
    } else {
        let excess = arrival - c;
        if excess >= c {
            return T::infinity();
        }
        excess / ((c + c) * (c - excess))
    };
    -p.weights[i] * b.ln() + p.k1 * p.delay[i] * b + p.k2 * queue
}

fn raw_delay<T: Scalar>(p: &LbPsvmProblem<T>, beta: &[T]) -> T {
    let c = p.capacity;
    beta.iter()
        .enumerate()
        .map(|(i, &b)| {
            let excess = p.prior_load[i] + b - c;
            let q = if excess > T::zero() { excess / ((c + c) * (c - excess)) } else { T::zero() };
            p.delay[i] * b + q
        })
        .fold(T::zero(), |a, x| a + x)
}

/// Minimises the failover objective over `{beta : sum = affected, beta_i = k * step}`
/// for the first `n - 1` coordinates, the last taking the remainder. Supports up
/// to four candidates.
pub fn oracle_lb_psvm<T: Scalar>(problem: &LbPsvmProblem<T>, step: T) -> Result<LbPsvmSolution<T>, SolverError> {
    problem.validate()?;
    let n = problem.n();
    if n > 4 {
        return Err(SolverError::OracleTooLarge(n));
    }
    if !(step > T::zero()) {
        return Err(SolverError::InvalidProblem(format!("grid step {step}")));
    }
    let budget = problem.affected;
    let steps = (budget / step + T::lit(1e-9)).floor().to_usize().unwrap_or(0);

    // tables[i][k] = term_i(k * step) for free coordinates, last[m] = term_n(budget - m * step)
    let grid = |k: usize| T::from_usize_lossy(k) * step;
    let tables: Vec<Vec<T>> =
        (0..n.saturating_sub(1)).map(|i| (0..=steps).map(|k| term(problem, i, grid(k))).collect()).collect();
    let last: Vec<T> = (0..=steps).map(|m| term(problem, n - 1, budget - grid(m))).collect();

    let mut best = T::infinity();
    let mut best_k = vec![0usize; n.saturating_sub(1)];
    let mut ks = vec![0usize; n.saturating_sub(1)];
    search(&tables, &last, 0, 0, T::zero(), steps, &mut ks, &mut best, &mut best_k);

    let mut beta: Vec<T> = best_k.iter().map(|&k| grid(k)).collect();
    let used: usize = best_k.iter().sum();
    beta.push(budget - grid(used));
    if n == 1 {
        beta = vec![budget];
        best = term(problem, 0, budget);
    }
    let delay_attained = raw_delay(problem, &beta);
    Ok(LbPsvmSolution {
        feasible_delay: delay_attained <= problem.delay_cap,
        delay_attained,
        objective: best,
        beta,
        multiplier: T::nan(),
        kkt_residual: T::nan(),
        saturated: false,
        converged: true,
        iterations: 0,
    })
}

#[allow(clippy::too_many_arguments)]
fn search<T: Scalar>(
    tables: &[Vec<T>],
    last: &[T],
    depth: usize,
    used: usize,
    partial: T,
    steps: usize,
    ks: &mut Vec<usize>,
    best: &mut T,
    best_k: &mut Vec<usize>,
) {
    if depth == tables.len() {
        let total = partial + last[used];
        if total < *best {
            *best = total;
            best_k.clone_from(ks);
        }
        return;
    }
    for k in 0..=(steps - used) {
        let v = tables[depth][k];
        if !v.is_finite() {
            continue;
        }
        ks[depth] = k;
        search(tables, last, depth + 1, used + k, partial + v, steps, ks, best, best_k);
    }
}
