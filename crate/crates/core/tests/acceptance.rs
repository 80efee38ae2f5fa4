//! Acceptance gate: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use nalgebra::dmatrix;
use rand::Rng;
use slq::matnum::{penrose_residual, pinv, psd_check, range_subset, sym_eigenvalues};
use slq::model::load_problem;
use slq::oracle::{exact_cost, exact_cost_strategy, exact_value, OracleVerdict, DEFAULT_CAP};
use slq::perturb::{
    boundedness_verdict, epsilon_sweep, extract_open_loop_limit, extract_weak_closed_loop, perturbed_feedback,
    perturbed_riccati, sandwich_check, Boundedness, EpsilonSchedule, DEFAULT_GROWTH_TOL,
};
use slq::riccati::{riccati_backward, value_function};
use slq::sim::{simulate_cost, Policy};
use slq::stationarity::closed_loop_residual;
use slq::tree::node_of_signs;
use slq::{AdaptedProcess, Matrix, NoiseKind, Strategy, Tolerances};

struct Verdict {
    ok: bool,
    detail: String,
}

impl Verdict {
    fn from_failures(failures: Vec<String>, summary: String) -> Self {
        if failures.is_empty() {
            Verdict {
                ok: true,
                detail: summary,
            }
        } else {
            let shown: Vec<&str> = failures.iter().take(6).map(String::as_str).collect();
            let more = failures.len().saturating_sub(shown.len());
            let tail = if more > 0 {
                format!("; {more} more")
            } else {
                String::new()
            };
            Verdict {
                ok: false,
                detail: format!("{}{}", shown.join("; "), tail),
            }
        }
    }
}

fn tol() -> Tolerances {
    Tolerances::default()
}

fn criterion_1() -> Verdict {
    let mut fails = Vec::new();
    let p = example1(1.0);
    let sol = riccati_backward(&p, &tol()).unwrap();
    let p_err = sol.p.iter().map(|m| (m[(0, 0)] - 1.0).abs()).fold(0.0, f64::max);
    if p_err > 1e-12 {
        fails.push(format!("|P_t - 1| = {p_err:e}"));
    }
    let range_fail = sol.verdict.cross_range_failures();
    if range_fail != vec![0, 1] || sol.regular() {
        fails.push(format!("range failures at {range_fail:?}, regular = {}", sol.regular()));
    }
    let j0 = exact_cost(&p, &AdaptedProcess::zeros(0, 2, 1)).unwrap();
    if (j0 - 1.0).abs() > 1e-12 {
        fails.push(format!("J(u = 0) = {j0}"));
    }
    let root = cubic_root();
    let j_root = exact_cost_strategy(&p, &Strategy::constant_gain(&p, dmatrix![root]).unwrap()).unwrap();
    if j_root.abs() > 1e-10 {
        fails.push(format!("J(K = {root}) = {j_root:e}"));
    }
    let j_printed = exact_cost_strategy(&p, &Strategy::constant_gain(&p, dmatrix![-0.3194]).unwrap()).unwrap();
    if j_printed.abs() > 1e-3 {
        fails.push(format!("J(K = -0.3194) = {j_printed:e}"));
    }
    Verdict::from_failures(
        fails,
        format!("P = 1 to {p_err:.1e}; root S = {root:.10}, J = {j_root:.1e}; J(-0.3194) = {j_printed:.2e}"),
    )
}

fn criterion_2() -> Verdict {
    let mut fails = Vec::new();
    let p = multiplicative(1.0);
    let x0 = 1.0;
    let eps_list = [1.0, 0.5, 0.1, 0.01];
    for &eps in &eps_list {
        match perturbed_riccati(&p, eps, &tol()) {
            Ok(sol) => {
                for t in 0..=2 {
                    let expect = (eps - 1.0) / (eps + 1.0 - t as f64);
                    let err = (sol.p[t][(0, 0)] - expect).abs();
                    if err > 1e-12 {
                        fails.push(format!("eps={eps}: P_{t} off by {err:e}"));
                    }
                }
            }
            Err(e) => fails.push(format!("eps={eps}: perturbed_riccati failed ({e})")),
        }
        match perturbed_feedback(&p, eps, &tol()) {
            Ok(fb) => {
                for t in 0..2 {
                    let expect = -1.0 / (eps + 1.0 - t as f64);
                    let err = (fb.gains[t][(0, 0)] - expect).abs();
                    if err > 1e-12 {
                        fails.push(format!("eps={eps}: K_{t} off by {err:e}"));
                    }
                }
            }
            Err(e) => fails.push(format!("eps={eps}: perturbed_feedback failed ({e})")),
        }
    }
    let run = epsilon_sweep(&p, &EpsilonSchedule::new(eps_list.to_vec()).unwrap(), &tol());
    for (eps, point) in run.epsilons.iter().zip(&run.points) {
        match point {
            Ok(pt) => {
                let expect = 2.0 * x0 * x0 / ((1.0 + eps) * (1.0 + eps));
                let err = (pt.control_norm - expect).abs();
                if err > 1e-12 {
                    fails.push(format!("eps={eps}: norm off by {err:e}"));
                }
            }
            Err(e) => fails.push(format!("eps={eps}: sweep point failed ({e})")),
        }
    }
    let full = epsilon_sweep(&p, &EpsilonSchedule::default(), &tol());
    match extract_open_loop_limit(&full, 1e-6) {
        Ok(lim) => {
            let u = &lim.control;
            let mut err = (u.at(0, 0)[0] + x0).abs();
            for w0 in [1.0, -1.0] {
                err = err.max((u.at(1, node_of_signs(&[w0]))[0] + x0 * w0).abs());
            }
            if err > 1e-6 {
                fails.push(format!("open-loop limit off by {err:e}"));
            }
        }
        Err(e) => fails.push(format!("open-loop extraction failed ({e})")),
    }
    match extract_weak_closed_loop(&full, 0, 1e-6) {
        Ok(w) => {
            let err = (w.gains[0][(0, 0)] + 1.0).abs();
            if err > 1e-6 {
                fails.push(format!("K*_0 off by {err:e}"));
            }
            if !w.divergent_steps.contains(&1) {
                fails.push(format!("t=1 not flagged divergent ({:?})", w.divergent_steps));
            }
        }
        Err(e) => fails.push(format!("weak closed-loop extraction failed ({e})")),
    }
    Verdict::from_failures(fails, "P, K, norms, u*, K*_0 and divergence at t=1 match".into())
}

fn criterion_3() -> Verdict {
    let mut fails = Vec::new();
    let (mut worst_v, mut worst_r) = (0.0f64, 0.0f64);
    for (i, p) in convex_suite().iter().enumerate() {
        let sol = riccati_backward(p, &tol()).unwrap();
        if !sol.regular() {
            fails.push(format!("instance {i}: not regular"));
            continue;
        }
        let v = value_function(&sol, p).unwrap();
        let o = exact_value(p, DEFAULT_CAP).unwrap();
        let gap = (v - o.value).abs();
        worst_v = worst_v.max(gap);
        if o.verdict != OracleVerdict::Minimizer || gap > 1e-8 {
            fails.push(format!("instance {i}: value gap {gap:e} ({:?})", o.verdict));
        }
        let res = closed_loop_residual(p, &sol.strategy()).unwrap().max_residual;
        worst_r = worst_r.max(res);
        if res > 1e-8 {
            fails.push(format!("instance {i}: residual {res:e}"));
        }
    }
    Verdict::from_failures(
        fails,
        format!("50 instances; max value gap {worst_v:.1e}, max residual {worst_r:.1e}"),
    )
}

fn criterion_4() -> Verdict {
    let mut fails = Vec::new();
    let mut worst = 0.0f64;
    let mut r = rng(4);
    for (i, p) in convex_suite().iter().enumerate() {
        let sol = riccati_backward(p, &tol()).unwrap();
        let base = exact_cost_strategy(p, &sol.strategy()).unwrap();
        for j in 0..10 {
            let u = random_control(&mut r, p, 1.5);
            let gap = exact_cost(p, &u).unwrap() - base;
            let dev = weighted_deviation(p, &u, &sol.gain, &sol.offset, &sol.rhat);
            let err = (gap - dev).abs();
            worst = worst.max(err);
            if err > 1e-8 {
                fails.push(format!("instance {i} control {j}: |gap - deviation| = {err:e}"));
            }
        }
    }
    Verdict::from_failures(fails, format!("500 controls; max mismatch {worst:.1e}"))
}

fn criterion_5() -> Verdict {
    let mut fails = Vec::new();
    let mut instances = vec![
        ("example 1".to_string(), example1(1.0)),
        ("multiplicative".to_string(), multiplicative(1.0)),
    ];
    instances.extend(
        convex_suite()
            .into_iter()
            .enumerate()
            .map(|(i, p)| (format!("convex {i}"), p)),
    );
    instances.push(("divergence".into(), divergence()));
    let schedule = EpsilonSchedule::default();
    let (mut finite, mut infinite, mut worst_gap) = (0usize, 0usize, 0.0f64);
    for (name, p) in &instances {
        let run = epsilon_sweep(p, &schedule, &tol());
        let o = exact_value(p, DEFAULT_CAP).unwrap();
        let s = sandwich_check(&run, &o, 1e-9);
        if !s.values_nonincreasing {
            fails.push(format!("{name}: V_eps not non-increasing"));
        }
        if !s.above_oracle {
            fails.push(format!("{name}: V_eps below the oracle value"));
        }
        match s.last_gap {
            Some(gap) => {
                finite += 1;
                worst_gap = worst_gap.max(gap);
                if gap > 1e-4 {
                    fails.push(format!("{name}: |V_eps_last - V| = {gap:e}"));
                }
            }
            None => infinite += 1,
        }
    }
    Verdict::from_failures(
        fails,
        format!(
            "{} instances monotone and above the oracle; limit gap <= {worst_gap:.1e} on {finite} with finite V ({infinite} with V = -inf)",
            instances.len()
        ),
    )
}

fn criterion_6() -> Verdict {
    let mut fails = Vec::new();
    let p = divergence();
    let run = epsilon_sweep(&p, &EpsilonSchedule::default(), &tol());
    let b = boundedness_verdict(&run, DEFAULT_GROWTH_TOL);
    if b.verdict != Boundedness::NotOpenLoopSolvable {
        fails.push(format!("verdict {:?}", b.verdict));
    }
    let exponent = b.norm_exponent.unwrap_or(f64::NAN);
    if exponent.is_nan() || (exponent - 2.0).abs() > 0.2 {
        fails.push(format!("norm exponent {exponent}"));
    }
    let o = exact_value(&p, DEFAULT_CAP).unwrap();
    if o.verdict != OracleVerdict::NoMinimizer {
        fails.push(format!("oracle verdict {:?}", o.verdict));
    }
    Verdict::from_failures(
        fails,
        format!("not-open-loop-solvable, exponent {exponent:.4}, oracle no-minimizer"),
    )
}

fn criterion_7() -> Verdict {
    let mut fails = Vec::new();
    let mut r = rng(7);
    let t = tol();
    let mut worst_penrose = 0.0f64;
    for i in 0..1000 {
        let (rows, cols) = (r.random_range(1..=6), r.random_range(1..=6));
        let k = r.random_range(1..=rows.min(cols));
        let m = uniform_matrix(&mut r, rows, k, 1.0) * uniform_matrix(&mut r, k, cols, 1.0);
        let res = penrose_residual(&m, &pinv(&m, &t).unwrap());
        worst_penrose = worst_penrose.max(res);
        if res > 1e-9 {
            fails.push(format!("penrose case {i}: {res:e}"));
        }
    }
    for i in 0..1000 {
        let n = r.random_range(1..=6);
        let k = r.random_range(1..=n);
        let g = uniform_matrix(&mut r, n, k, 1.0);
        let psd = gram(&g);
        let neg = -(&psd + Matrix::identity(n, n) * 0.1);
        if !psd_check(&psd, &t).unwrap() || psd_check(&neg, &t).unwrap() {
            fails.push(format!("psd case {i}"));
        }
    }
    for i in 0..1000 {
        let n = r.random_range(2..=6);
        let rank = r.random_range(1..n);
        let rhat = gram(&uniform_matrix(&mut r, n, rank, 1.0));
        let cols = r.random_range(1..=3);
        let inside = &rhat * uniform_matrix(&mut r, n, cols, 1.0);
        let proj = Matrix::identity(n, n) - &rhat * pinv(&rhat, &t).unwrap();
        let outside = &inside + &proj * uniform_matrix(&mut r, n, cols, 1.0);
        // second route: eigenvectors of the symmetric R̂ with non-negligible eigenvalues
        let eig = nalgebra::SymmetricEigen::new(rhat.clone());
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let basis: Vec<_> = (0..n)
            .filter(|&j| eig.eigenvalues[j].abs() > 1e-10 * top)
            .map(|j| eig.eigenvectors.column(j).into_owned())
            .collect();
        let eig_in_range = |m: &Matrix| {
            let u = Matrix::from_columns(&basis);
            let res = m - &u * (u.transpose() * m);
            res.amax() <= t.residual_tol * (1.0 + m.amax())
        };
        let a = range_subset(&inside, &rhat, &t).unwrap();
        let b = range_subset(&outside, &rhat, &t).unwrap();
        let outside_far = (&outside - &inside).amax() > 1e-6;
        if !a || (outside_far && b) || a != eig_in_range(&inside) || b != eig_in_range(&outside) {
            fails.push(format!("range case {i}"));
        }
        let _ = sym_eigenvalues(&rhat).unwrap();
    }
    for i in 0..1000 {
        let affine = [Affine::None, Affine::Deterministic, Affine::Tree][i % 3];
        let mut p = convex_instance(&mut r, affine);
        p.noise.kind = if i % 2 == 0 {
            NoiseKind::Gaussian
        } else {
            NoiseKind::Rademacher
        };
        p.noise.seed = r.random();
        let back = load_problem(&p.to_json_string()).unwrap();
        if back != p {
            fails.push(format!("serialization case {i}"));
        }
    }
    Verdict::from_failures(
        fails,
        format!("4 x 1000 cases; worst Penrose residual {worst_penrose:.1e}"),
    )
}

fn criterion_8() -> Verdict {
    let mut fails = Vec::new();
    let samples = 1_000_000;
    let mut lines = Vec::new();
    let e1 = example1(1.0);
    let sec5 = multiplicative(1.0);
    let eps_strategy = perturbed_riccati(&sec5, 0.1, &tol()).unwrap().strategy();
    let cases: Vec<(&str, &slq::LQProblem, Strategy)> = vec![
        ("example 1, u = 0", &e1, Strategy::zero(&e1)),
        (
            "example 1, K = -0.3194",
            &e1,
            Strategy::constant_gain(&e1, dmatrix![-0.3194]).unwrap(),
        ),
        ("multiplicative, eps = 0.1", &sec5, eps_strategy),
    ];
    for (i, (name, p, s)) in cases.iter().enumerate() {
        assert_eq!(p.noise.kind, NoiseKind::Gaussian);
        let exact = exact_cost_strategy(p, s).unwrap();
        let rep = simulate_cost(p, Policy::Feedback(s), samples, 1000 + i as u64).unwrap();
        let err = (rep.cost_mean - exact).abs();
        let bound = 4.0 * rep.cost_stderr + 1e-12 * (1.0 + exact.abs());
        lines.push(format!("{name}: {:.5} vs {exact:.5}", rep.cost_mean));
        if err > bound {
            fails.push(format!(
                "{name}: mean {} vs exact {exact} (stderr {})",
                rep.cost_mean, rep.cost_stderr
            ));
        }
    }
    Verdict::from_failures(fails, lines.join("; "))
}

/// Name, check, and runtime budget in seconds.
type Criterion = (&'static str, fn() -> Verdict, Option<u64>);

fn main() {
    let criteria: [Criterion; 8] = [
        ("example 1 reproduction", criterion_1, Some(1)),
        ("multiplicative-noise closed forms", criterion_2, Some(1)),
        ("oracle equivalence", criterion_3, Some(10)),
        ("completion of squares", criterion_4, None),
        ("value sandwich", criterion_5, None),
        ("negative verdicts", criterion_6, None),
        ("property suites", criterion_7, Some(30)),
        ("Monte-Carlo cross-check", criterion_8, Some(60)),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let v = f();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|s| elapsed <= Duration::from_secs(s));
        let ok = v.ok && in_time;
        if !ok {
            failed += 1;
        }
        let timing = match limit {
            Some(s) if !in_time => format!("{:.2}s, over the {s}s budget", elapsed.as_secs_f64()),
            _ => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!(
            "criterion {}: {} {name} ({timing}): {}",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
