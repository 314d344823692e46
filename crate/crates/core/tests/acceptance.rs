//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Expected values come from oracles written here, not from
//! the library.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use edgefail::experiment::{build_stream, run_experiment, run_policy, ExperimentConfig};
use edgefail::metrics::NetworkState;
use edgefail::model::{DelayModel, Placement, PrimaryMapping, Slot};
use edgefail::orchestrator::{Policy, SimConfig, Simulation};
use edgefail::mobility::{generate_synthetic, WaypointModel};
use edgefail::queueing::{queue_wait, QueueModel};
use edgefail::solvers::{
    build_lb_psvm, lb_psvm_objective, oracle_lb_psvm, solve_lb_psvm, solve_primary_mapping, solve_psvm,
    stationarity_residual, LbPsvmParams, LbPsvmProblem, SolveOptions,
};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: f64 = 30.0;
const EPS: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{} [{:.2?}]", o.detail, took);
    if let Some(limit) = limit {
        if took >= limit {
            o.pass = false;
            o.detail = format!("{} exceeds {:?}", o.detail, limit);
        }
    }
    o
}

fn weight(gamma: f64) -> f64 {
    1.0 - (gamma - EPS) / C
}

// ---- 1 -------------------------------------------------------------------

fn three_host_loads(d: [f64; 4]) -> Vec<f64> {
    let p = Placement::from_slots(vec![vec![Slot::Active], vec![Slot::Active], vec![Slot::Active], vec![Slot::Empty]]);
    let gamma = PrimaryMapping::from_matrix(vec![vec![25.0], vec![22.0], vec![18.0], vec![0.0]]).unwrap();
    let delay = DelayModel::new(d.iter().map(|&x| vec![x]).collect()).unwrap();
    let m = solve_psvm(&gamma, &p, 0, 0, &delay).unwrap();
    m.targets.iter().zip(&m.beta).map(|(&e, b)| gamma.get(e, 0) + b).collect()
}

fn criterion_1() -> Outcome {
    let a = three_host_loads([1.0, 4.0, 9.0, 2.0]);
    let b = three_host_loads([1.0, 9.0, 4.0, 2.0]);
    outcome(a == [47.0, 18.0] && b == [22.0, 43.0], format!("E2 nearest {a:?}, E3 nearest {b:?}"))
}

// ---- 2 -------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = SolveOptions::default();
    let (mut worst, mut solved) = (0.0f64, 0);
    while solved < 1000 {
        let n = rng.gen_range(1..=5);
        let gamma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=C)).collect();
        let delay: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..30.0)).collect();
        let budget = rng.gen_range(0.1..=40.0);
        let w: Vec<f64> = gamma.iter().map(|&g| weight(g)).collect();
        let total: f64 = w.iter().sum();
        let expected: Vec<f64> = w.iter().map(|wi| budget * wi / total).collect();
        // closed form only applies when it stays inside the queue domain
        if expected.iter().zip(&gamma).any(|(b, g)| g + b >= 2.0 * C) {
            continue;
        }
        let p = LbPsvmProblem::from_loads(gamma, delay, C, budget, 100.0, 0.0, 0.0, EPS).unwrap();
        let s = match solve_lb_psvm(&p, &opts) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("problem {solved}: {e}")),
        };
        for (b, e) in s.beta.iter().zip(&expected) {
            worst = worst.max((b - e).abs());
        }
        solved += 1;
    }
    outcome(worst <= 1e-6, format!("1000 problems, max |beta - B w/sum w| = {worst:.3e}"))
}

// ---- 3 and 9 -------------------------------------------------------------

fn suite_3() -> Vec<LbPsvmProblem<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out = Vec::new();
    while out.len() < 200 {
        let n = rng.gen_range(1..=3);
        let gamma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=C)).collect();
        let delay: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..30.0)).collect();
        let headroom: f64 = gamma.iter().map(|g| 2.0 * C - g).sum();
        let budget = rng.gen_range(0.5..=40.0);
        if budget >= headroom {
            continue;
        }
        let k1 = rng.gen_range(0.001..0.05);
        let k2 = rng.gen_range(0.001..0.05);
        out.push(LbPsvmProblem::from_loads(gamma, delay, C, budget, 120.0, k1, k2, EPS).unwrap());
    }
    out
}

fn criterion_3(problems: &[LbPsvmProblem<f64>]) -> Outcome {
    let opts = SolveOptions::default();
    let mut worst_gap = f64::NEG_INFINITY;
    for (i, p) in problems.iter().enumerate() {
        let s = match solve_lb_psvm(p, &opts) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("problem {i}: {e}")),
        };
        let grid = oracle_lb_psvm(p, 0.01).unwrap();
        // both objectives evaluated by the same independent formula
        let (fs, fg) = (lb_psvm_objective(p, &s.beta), lb_psvm_objective(p, &grid.beta));
        let gap = (fs - fg) / fg.abs().max(1e-12);
        worst_gap = worst_gap.max(gap);
        if fs > fg + 1e-4 * fg.abs() {
            return outcome(false, format!("problem {i}: solver {fs} vs grid {fg}"));
        }
    }
    outcome(true, format!("200 problems, worst (solver - grid)/|grid| = {worst_gap:.3e}"))
}

fn criterion_9(problems: &[LbPsvmProblem<f64>]) -> Outcome {
    let opts = SolveOptions::default();
    let mut worst = 0.0f64;
    for (i, p) in problems.iter().enumerate() {
        let s = match solve_lb_psvm(p, &opts) {
            Ok(s) => s,
            Err(e) => return outcome(false, format!("problem {i}: {e}")),
        };
        worst = worst.max(stationarity_residual(p, &s.beta));
    }
    outcome(worst <= 1e-6, format!("max stationarity residual {worst:.3e}"))
}

// ---- 4 -------------------------------------------------------------------

fn constraint_case(seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = rng.gen_range(3..=6);
    let services = rng.gen_range(1..=4);
    let mut slots = vec![vec![Slot::Empty; services]; nodes];
    let mut demand = Vec::with_capacity(services);
    for s in 0..services {
        let k = rng.gen_range(2..=nodes);
        let mut hosts: Vec<usize> = (0..nodes).collect();
        for i in 0..k {
            let j = rng.gen_range(i..nodes);
            hosts.swap(i, j);
        }
        for &e in &hosts[..k] {
            slots[e][s] = Slot::Active;
        }
        demand.push(rng.gen_range(0.0..=C * k as f64));
    }
    let placement = Placement::from_slots(slots);
    let delay =
        DelayModel::new((0..nodes).map(|_| (0..services).map(|_| rng.gen_range(1.0..40.0)).collect()).collect()).unwrap();
    let out = solve_primary_mapping(&placement, &demand, &delay, C).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let gamma = &out.mapping;
    for s in 0..services {
        let served: f64 = (0..nodes).map(|e| gamma.get(e, s)).sum();
        if (served - demand[s]).abs() > 1e-9 * (1.0 + demand[s]) {
            return Err(TestCaseError::fail(format!("service {s}: served {served} of {}", demand[s])));
        }
        for e in 0..nodes {
            let g = gamma.get(e, s);
            let cap = if placement.hosts(e, s) { C } else { 0.0 };
            if g < 0.0 || g > cap + 1e-9 {
                return Err(TestCaseError::fail(format!("gamma[{e}][{s}] = {g}, cap {cap}")));
            }
        }
    }
    let params = LbPsvmParams::default();
    for s in 0..services {
        for e in placement.hosting_nodes(s).collect::<Vec<_>>() {
            let affected = gamma.get(e, s);
            let mut mappings = vec![solve_psvm(gamma, &placement, e, s, &delay).map_err(|x| TestCaseError::fail(x.to_string()))?];
            let p = build_lb_psvm(gamma, &placement, e, s, &delay, C, 100.0, &params)
                .map_err(|x| TestCaseError::fail(x.to_string()))?;
            match solve_lb_psvm(&p, &SolveOptions::default()) {
                Ok(sol) => mappings.push(edgefail::model::SecondaryMapping {
                    service: s,
                    source_node: e,
                    targets: p.candidates.clone(),
                    beta: sol.beta,
                }),
                Err(edgefail::solvers::SolverError::QueueInfeasible { .. }) => {}
                Err(x) => return Err(TestCaseError::fail(x.to_string())),
            }
            for m in mappings {
                let total: f64 = m.beta.iter().sum();
                if (total - affected).abs() > 1e-9 {
                    return Err(TestCaseError::fail(format!("sum beta {total} vs affected {affected}")));
                }
                if m.beta.iter().any(|&b| b < 0.0) {
                    return Err(TestCaseError::fail(format!("negative beta {:?}", m.beta)));
                }
            }
        }
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    match runner.run(&proptest::num::u64::ANY, constraint_case) {
        Ok(()) => outcome(true, "1000 seeded instances: primary and secondary constraints hold"),
        Err(e) => outcome(false, e.to_string()),
    }
}

// ---- 5 -------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let below = queue_wait(20.0, C).unwrap();
    let over = queue_wait(40.0, C).unwrap();
    let ms = QueueModel::<f64>::default().delay_ms(40.0, C).unwrap();
    let mut monotone = true;
    let mut prev = f64::NEG_INFINITY;
    for i in 1..=100 {
        // strictly inside (C, 2C)
        let a = C + C * i as f64 / 101.0;
        let w = queue_wait(a, C).unwrap();
        let x = a - C;
        let reference = x / (2.0 * C * (C - x));
        monotone &= w > prev && (w - reference).abs() <= 1e-12 * reference.max(1.0);
        prev = w;
    }
    let pass = below == 0.0 && (over - 1.0 / 120.0).abs() <= 1e-12 && (ms - 1000.0 / 120.0).abs() <= 1e-9 && monotone;
    outcome(pass, format!("q(20,30) = {below}, q(40,30) = {over:.15} (1/120), 100-point sweep strictly increasing: {monotone}"))
}

// ---- 6 -------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let scenarios = 100u64;
    let mut fair_ok = true;
    let mut fair_strict = 0;
    let mut elf_fail = Vec::new();
    let mut delay_fail = Vec::new();
    let mut br_fail = Vec::new();
    let (mut fair_lb, mut fair_ps) = (0.0, 0.0);
    for seed in 0..scenarios {
        let cfg = ExperimentConfig { seed, horizon: 300, ..ExperimentConfig::default() };
        let (stream, _) = build_stream(&cfg).unwrap();
        let s: Vec<_> = [Policy::LbPsvm, Policy::Psvm, Policy::Br]
            .iter()
            .map(|&p| run_policy(&cfg, p, &stream).unwrap().summary("", seed, ""))
            .collect();
        let (lb, ps, br) = (&s[0], &s[1], &s[2]);
        fair_lb += lb.mean_fairness;
        fair_ps += ps.mean_fairness;
        fair_ok &= lb.mean_fairness >= ps.mean_fairness;
        if lb.mean_fairness > ps.mean_fairness {
            fair_strict += 1;
        }
        if lb.avg_elf_attack_pct > ps.avg_elf_attack_pct {
            elf_fail.push(format!("seed {seed}: {:.1} vs {:.1}", lb.avg_elf_attack_pct, ps.avg_elf_attack_pct));
        }
        if ps.avg_delay_ms < lb.avg_delay_ms {
            delay_fail.push(seed);
        }
        if (br.avg_delay_ms - lb.avg_delay_ms).abs() > 0.1 * lb.avg_delay_ms {
            br_fail.push(seed);
        }
    }
    let n = scenarios as f64;
    let a = fair_ok && fair_strict * 10 >= scenarios * 9;
    let pass = a && elf_fail.is_empty() && delay_fail.is_empty() && br_fail.is_empty();
    let mut detail = format!(
        "{scenarios} scenarios: (a) fairness {:.3} vs {:.3}, strictly better in {fair_strict}; (b) ELF LB <= PSVM in {}; (c) PSVM delay highest in {}, BR within 10% in {}",
        fair_lb / n,
        fair_ps / n,
        scenarios as usize - elf_fail.len(),
        scenarios as usize - delay_fail.len(),
        scenarios as usize - br_fail.len()
    );
    if !elf_fail.is_empty() {
        detail.push_str(&format!("; ELF violations: {}", elf_fail.join(", ")));
    }
    outcome(pass, detail)
}

// ---- 7 -------------------------------------------------------------------

fn criterion_7() -> Outcome {
    // solver level: a single candidate takes every affected vehicle
    let p = Placement::from_slots(vec![vec![Slot::Active], vec![Slot::Active], vec![Slot::Empty]]);
    let gamma = PrimaryMapping::from_matrix(vec![vec![25.0], vec![20.0], vec![0.0]]).unwrap();
    let delay = DelayModel::new(vec![vec![3.0], vec![7.0], vec![1.0]]).unwrap();
    let ps = solve_psvm(&gamma, &p, 0, 0, &delay).unwrap();
    let prob = build_lb_psvm(&gamma, &p, 0, 0, &delay, C, 100.0, &LbPsvmParams::default()).unwrap();
    let lb = solve_lb_psvm(&prob, &SolveOptions::default()).unwrap();
    let solver_same = ps.targets == prob.candidates && ps.beta == lb.beta;

    // system level: two instances per service, every failover has one candidate
    let horizon = 300;
    let model = WaypointModel { request_prob: 0.7, ..Default::default() };
    let cfg0 = SimConfig::<f64>::standard(Policy::LbPsvm);
    let stream = generate_synthetic(11, 500, &cfg0.grid, horizon, &model).unwrap();
    let mut histories = Vec::new();
    let mut secondaries = Vec::new();
    for policy in [Policy::LbPsvm, Policy::Psvm] {
        let mut cfg = SimConfig::standard(policy);
        cfg.instances_per_service = vec![2; cfg.services.len()];
        cfg.seed = 11;
        let mut sim = Simulation::new(cfg, stream.at(0)).unwrap();
        let mut maps = Vec::new();
        for i in 0..horizon {
            sim.step(stream.at(i)).unwrap();
            if let Some(a) = sim.active_attack() {
                maps.push(a.secondaries.clone());
            }
        }
        secondaries.push(maps);
        histories.push(sim.into_history());
    }
    let attack_units = histories[0].iter().filter(|r| r.state == NetworkState::Attack).count();
    let same_metrics = histories[0]
        .iter()
        .zip(&histories[1])
        .all(|(a, b)| a.avg_elf == b.avg_elf && a.fairness == b.fairness && a.elf_per_node == b.elf_per_node);
    let same_maps = secondaries[0] == secondaries[1];
    outcome(
        solver_same && same_metrics && same_maps && attack_units > 0,
        format!(
            "solver beta {:?} vs {:?}; {attack_units} attack units, identical mappings {same_maps}, identical ELF/fairness {same_metrics}",
            lb.beta, ps.beta
        ),
    )
}

// ---- 8 -------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let cfg = ExperimentConfig { horizon: 600, ..ExperimentConfig::default() };
    let exp = match run_experiment(&cfg, 0) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let onsets: Vec<u64> = (1..=6).map(|k| 100 * k).collect();
    let mut problems = Vec::new();
    for run in &exp.runs {
        if run.history.len() != 600 {
            problems.push(format!("{}: {} rows", run.policy, run.history.len()));
        }
        for w in run.history.windows(2) {
            let entered = w[0].state != NetworkState::Attack && w[1].state == NetworkState::Attack;
            if entered != onsets.contains(&w[1].time) {
                problems.push(format!("{}: state {} at t={}", run.policy, w[1].state, w[1].time));
            }
            if !w[0].state.can_become(w[1].state) {
                problems.push(format!("{}: illegal {} -> {} at t={}", run.policy, w[0].state, w[1].state, w[1].time));
            }
        }
    }
    let policies: Vec<&str> = exp.runs.iter().map(|r| r.policy.as_str()).collect();
    outcome(
        problems.is_empty() && exp.runs.len() == 3,
        if problems.is_empty() {
            format!("{policies:?} x 600 rows, attack onsets {onsets:?}")
        } else {
            problems.join("; ")
        },
    )
}

type Criterion<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn main() -> ExitCode {
    let problems = suite_3();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 single-target failover loads", Box::new(|| timed(Some(Duration::from_secs(1)), criterion_1))),
        ("2 closed-form fairness", Box::new(|| timed(Some(Duration::from_secs(5)), criterion_2))),
        ("3 grid-oracle equivalence", Box::new(|| timed(Some(Duration::from_secs(60)), || criterion_3(&problems)))),
        ("4 mapping constraints", Box::new(|| timed(None, criterion_4))),
        ("5 queue formula", Box::new(|| timed(None, criterion_5))),
        ("6 dominance", Box::new(|| timed(None, criterion_6))),
        ("7 single-candidate collapse", Box::new(|| timed(None, criterion_7))),
        ("8 end-to-end run", Box::new(|| timed(Some(Duration::from_secs(60)), criterion_8))),
        ("9 KKT certificate", Box::new(|| timed(None, || criterion_9(&suite_3())))),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
