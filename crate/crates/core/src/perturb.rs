//! ε-regularized problems, ε-sweeps, boundedness verdicts and limit
//! extraction.
//!
//! The regularized cost adds `ε E Σ|u_t|²`, i.e. replaces `R_t` by
//! `R_t + εI`. Each solve inverts `R̂^ε_t + εI` exactly, where
//! `R̂^ε_t = R_t + B'P^ε_{t+1}B + D'P^ε_{t+1}D`; the same shifted inverse is
//! used for the gain and for the offset.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matnum::{max_abs, pinv, psd_check, Matrix, Tolerances};
use crate::model::{matrix_to_json, LQProblem, Strategy};
use crate::oracle::{self, OracleVerdict};
use crate::riccati::{
    affine_recursion, backward_core, completion_value, RegularityVerdict, RiccatiSolution, StepVerdict,
};
use crate::stationarity::{control_residual, rollout_strategy, Trajectory};
use crate::tree::{AdaptedProcess, Level};

/// Number of trailing schedule points used by the log-log fits.
pub const FIT_POINTS: usize = 5;
/// Norm growth exponent above which `{u^ε}` is declared unbounded.
pub const NORM_EXPONENT_THRESHOLD: f64 = 0.5;
/// Gain growth exponent above which a step is declared divergent.
pub const GAIN_EXPONENT_THRESHOLD: f64 = 0.25;
/// Default relative change bound between the last two norms.
pub const DEFAULT_GROWTH_TOL: f64 = 1e-4;
/// Oracle size used for the diagnostic lower bound inside verdicts.
const VERDICT_ORACLE_CAP: usize = 1024;

/// Strictly decreasing positive ε values.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSchedule {
    values: Vec<f64>,
}

impl Default for EpsilonSchedule {
    /// `ε_k = 2^-k`, `k = 0..=20`.
    fn default() -> Self {
        EpsilonSchedule::geometric(1.0, 0.5, 21).expect("default schedule is valid")
    }
}

impl EpsilonSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("epsilon schedule is empty"));
        }
        if !values.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(Error::invalid("epsilon values must be positive and finite"));
        }
        if !values.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::invalid("epsilon schedule must be strictly decreasing"));
        }
        Ok(EpsilonSchedule { values })
    }

    /// `e0 · ratio^k` for `k = 0..count`.
    pub fn geometric(e0: f64, ratio: f64, count: usize) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid("geometric ratio must lie in (0, 1)"));
        }
        Self::new((0..count).map(|k| e0 * ratio.powi(k as i32)).collect())
    }

    /// Parses `geometric:<e0>:<ratio>:<count>` or a comma-separated list.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || {
            Error::parse(
                "schedule",
                format!("expected geometric:<e0>:<ratio>:<count> or a list like 1,0.5,0.1; got {text:?}"),
            )
        };
        let Some(rest) = text.strip_prefix("geometric:") else {
            let values = text
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            return Self::new(values);
        };
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let e0: f64 = parts[0].parse().map_err(|_| bad())?;
        let ratio: f64 = parts[1].parse().map_err(|_| bad())?;
        let count: usize = parts[2].parse().map_err(|_| bad())?;
        Self::geometric(e0, ratio, count)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Solves the ε-problem.
///
/// The verdict describes the ε-problem itself: `rhat_psd` at step `t` is the
/// convexity flag `R̂^ε_t + εI ⪰ εI`, and the range conditions hold because
/// the shifted matrix is inverted exactly.
pub fn perturbed_riccati(p: &LQProblem, eps: f64, tol: &Tolerances) -> Result<RiccatiSolution> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
    }
    let core = backward_core(p, tol, Some(eps))?;
    let (eta, affine, offset) = affine_recursion(p, &core.p, &core.gain, &core.rhat_inv);
    let steps = (0..p.horizon)
        .map(|t| {
            Ok(StepVerdict {
                t,
                rhat_psd: psd_check(&core.rhat[t], tol)?,
                gain_finite: core.gain[t].iter().all(|v| v.is_finite()),
                cross_in_range: true,
                affine_in_range: true,
                rhat_min_eigenvalue: crate::matnum::min_eigenvalue(&core.rhat[t])? + eps,
                cross_range_residual: 0.0,
                affine_range_residual: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let regular = steps.iter().all(StepVerdict::ok);
    Ok(RiccatiSolution {
        p: core.p,
        rhat: core.rhat,
        cross: core.cross,
        rhat_inv: core.rhat_inv,
        gain: core.gain,
        eta,
        affine,
        offset,
        epsilon: eps,
        verdict: RegularityVerdict { steps, regular },
    })
}

/// `(K^ε, v^ε, η^ε)`.
#[derive(Clone, Debug)]
pub struct PerturbedFeedback {
    pub gains: Vec<Matrix>,
    pub offsets: AdaptedProcess,
    pub eta: AdaptedProcess,
}

pub fn perturbed_feedback(p: &LQProblem, eps: f64, tol: &Tolerances) -> Result<PerturbedFeedback> {
    let sol = perturbed_riccati(p, eps, tol)?;
    Ok(PerturbedFeedback {
        gains: sol.gain,
        offsets: sol.offset,
        eta: sol.eta,
    })
}

/// Offset computed with `(R̂^ε)^+` in place of `(R̂^ε + εI)^{-1}`.
///
/// Kept only to compare the two readings of the offset formula; it is not
/// stationary for the ε-problem unless the affine term vanishes.
pub fn unshifted_offset(sol: &RiccatiSolution, tol: &Tolerances) -> Result<AdaptedProcess> {
    let invs = sol.rhat.iter().map(|r| pinv(r, tol)).collect::<Result<Vec<_>>>()?;
    let levels = (0..sol.horizon())
        .map(|t| match sol.affine.level(t) {
            Level::Constant(a) => Level::Constant(-(&invs[t] * a)),
            Level::Nodes(ns) => Level::Nodes(ns.iter().map(|a| -(&invs[t] * a)).collect()),
        })
        .collect();
    AdaptedProcess::new(0, sol.affine.dim(), levels)
}

/// The ε-problem as an ordinary problem with `R + εI`.
pub fn regularized_problem(p: &LQProblem, eps: f64) -> LQProblem {
    let m = p.control_dim;
    let mut q = p.clone();
    for r in &mut q.r {
        *r += Matrix::identity(m, m) * eps;
    }
    q
}

#[derive(Clone, Debug)]
pub struct EpsilonPoint {
    pub epsilon: f64,
    pub solution: RiccatiSolution,
    /// `x^ε`, `u^ε` under the closed loop `u = K^ε x + v^ε`.
    pub trajectory: Trajectory,
    /// `E Σ |u^ε_t|²`.
    pub control_norm: f64,
    /// `J_ε(x₀, u^ε) = J(x₀, u^ε) + ε E Σ|u^ε|²`.
    pub value: f64,
    /// `R̂^ε_t + εI ⪰ εI` at every step.
    pub convex: bool,
}

impl EpsilonPoint {
    pub fn control(&self) -> &AdaptedProcess {
        &self.trajectory.controls
    }
}

#[derive(Debug)]
pub struct PerturbationRun {
    pub problem: LQProblem,
    pub epsilons: Vec<f64>,
    pub points: Vec<Result<EpsilonPoint>>,
}

impl PerturbationRun {
    /// Successful points in schedule order.
    pub fn solved(&self) -> Vec<&EpsilonPoint> {
        self.points.iter().filter_map(|r| r.as_ref().ok()).collect()
    }

    pub fn failures(&self) -> Vec<(f64, String)> {
        self.epsilons
            .iter()
            .zip(&self.points)
            .filter_map(|(e, r)| r.as_ref().err().map(|err| (*e, err.to_string())))
            .collect()
    }
}

fn solve_point(p: &LQProblem, eps: f64, tol: &Tolerances) -> Result<EpsilonPoint> {
    let solution = perturbed_riccati(p, eps, tol)?;
    let trajectory = rollout_strategy(p, &solution.strategy(), None)?;
    let control_norm = trajectory.controls.mean_square_norm();
    let value = oracle::trajectory_cost(p, &trajectory) + eps * control_norm;
    if !(control_norm.is_finite() && value.is_finite()) {
        return Err(Error::invalid(format!("non-finite closed-loop cost at epsilon {eps}")));
    }
    let convex = solution.verdict.steps.iter().all(|s| s.rhat_psd);
    Ok(EpsilonPoint {
        epsilon: eps,
        solution,
        trajectory,
        control_norm,
        value,
        convex,
    })
}

/// Solves every ε of the schedule. Per-ε failures are recorded and the
/// sweep continues.
pub fn epsilon_sweep(p: &LQProblem, schedule: &EpsilonSchedule, tol: &Tolerances) -> PerturbationRun {
    epsilon_sweep_with(p, schedule, tol, Execution::default())
}

pub fn epsilon_sweep_with(
    p: &LQProblem,
    schedule: &EpsilonSchedule,
    tol: &Tolerances,
    exec: Execution,
) -> PerturbationRun {
    let points = exec.map_slice(schedule.values(), |&eps| solve_point(p, eps, tol));
    PerturbationRun {
        problem: p.clone(),
        epsilons: schedule.values().to_vec(),
        points,
    }
}

/// Least-squares slope of `ln y` against `ln x`; zero sequences give 0.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    if ys.iter().all(|y| *y == 0.0) {
        return 0.0;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.max(f64::MIN_POSITIVE).ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

fn tail_fit(points: &[&EpsilonPoint], f: impl Fn(&EpsilonPoint) -> f64) -> f64 {
    let tail = &points[points.len().saturating_sub(FIT_POINTS)..];
    let xs: Vec<f64> = tail.iter().map(|pt| 1.0 / pt.epsilon).collect();
    let ys: Vec<f64> = tail.iter().map(|pt| f(pt)).collect();
    loglog_slope(&xs, &ys)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundedness {
    OpenLoopSolvable,
    NotOpenLoopSolvable,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundednessReport {
    pub verdict: Boundedness,
    /// Fitted exponent of `E Σ|u^ε|²` in `1/ε`.
    pub norm_exponent: Option<f64>,
    pub last_relative_change: Option<f64>,
    /// Norms never shrink as ε does, which holds for any family of exact
    /// minimizers of `J + ε|u|²`.
    pub norms_nondecreasing: bool,
    pub values_nonincreasing: bool,
    /// `V(x₀) ≤ V_ε(x₀)` at every point, when the oracle fits its cap.
    pub oracle_lower_bound: Option<bool>,
    pub points_used: usize,
}

/// Classifies `{u^ε}` as bounded, unbounded or undecided.
///
/// Bounded: fitted norm exponent `≤ 0.5` and the last two norms differ by
/// less than `growth_tol` relatively. Unbounded: exponent `> 0.5`. Fewer than
/// four solved points is inconclusive.
pub fn boundedness_verdict(run: &PerturbationRun, growth_tol: f64) -> BoundednessReport {
    let pts = run.solved();
    let norms: Vec<f64> = pts.iter().map(|p| p.control_norm).collect();
    let values: Vec<f64> = pts.iter().map(|p| p.value).collect();
    let slack = |a: f64, b: f64| 1e-9 * (1.0 + a.abs().max(b.abs()));
    let norms_nondecreasing = norms.windows(2).all(|w| w[1] >= w[0] - slack(w[0], w[1]));
    let values_nonincreasing = values.windows(2).all(|w| w[1] <= w[0] + slack(w[0], w[1]));
    let oracle_lower_bound = oracle::exact_value(&run.problem, VERDICT_ORACLE_CAP)
        .ok()
        .map(|o| values.iter().all(|v| o.value <= v + slack(o.value, *v)));
    if pts.len() < 4 {
        return BoundednessReport {
            verdict: Boundedness::Inconclusive,
            norm_exponent: None,
            last_relative_change: None,
            norms_nondecreasing,
            values_nonincreasing,
            oracle_lower_bound,
            points_used: pts.len(),
        };
    }
    let exponent = tail_fit(&pts, |p| p.control_norm);
    let (a, b) = (norms[norms.len() - 2], norms[norms.len() - 1]);
    let rel = if a == b {
        0.0
    } else {
        (b - a).abs() / a.abs().max(b.abs())
    };
    let verdict = if exponent > NORM_EXPONENT_THRESHOLD {
        Boundedness::NotOpenLoopSolvable
    } else if rel < growth_tol {
        Boundedness::OpenLoopSolvable
    } else {
        Boundedness::Inconclusive
    };
    BoundednessReport {
        verdict,
        norm_exponent: Some(exponent),
        last_relative_change: Some(rel),
        norms_nondecreasing,
        values_nonincreasing,
        oracle_lower_bound,
        points_used: pts.len(),
    }
}

fn require_bounded(run: &PerturbationRun) -> Result<Vec<&EpsilonPoint>> {
    let report = boundedness_verdict(run, DEFAULT_GROWTH_TOL);
    match report.verdict {
        Boundedness::OpenLoopSolvable => Ok(run.solved()),
        Boundedness::NotOpenLoopSolvable => Err(Error::NotOpenLoopSolvable(format!(
            "control norms grow like (1/eps)^{:.3}",
            report.norm_exponent.unwrap_or(f64::NAN)
        ))),
        Boundedness::Inconclusive => Err(Error::ConvergenceFailure(format!(
            "boundedness of the perturbed controls is inconclusive ({} solved points, relative change {:?})",
            report.points_used, report.last_relative_change
        ))),
    }
}

/// Weights `(w_b, w_a)` with `w_b u_b + w_a u_a` cancelling the `O(ε)` term.
fn richardson_weights(eps_a: f64, eps_b: f64) -> (f64, f64) {
    let d = eps_a - eps_b;
    (eps_a / d, -eps_b / d)
}

fn richardson(
    a: &EpsilonPoint,
    b: &EpsilonPoint,
    f: impl Fn(&EpsilonPoint) -> AdaptedProcess,
) -> Result<AdaptedProcess> {
    let (wb, wa) = richardson_weights(a.epsilon, b.epsilon);
    f(b).combine(wb, &f(a), wa)
}

fn richardson_matrix(a: (f64, &Matrix), b: (f64, &Matrix)) -> Matrix {
    let (wb, wa) = richardson_weights(a.0, b.0);
    b.1 * wb + a.1 * wa
}

#[derive(Clone, Debug)]
pub struct OpenLoopLimit {
    pub control: AdaptedProcess,
    /// Tree-weighted L² distance between the last two extrapolants.
    pub extrapolation_gap: f64,
    pub stationarity_residual: f64,
}

/// Richardson extrapolation of `u^ε` over the last three solved points.
pub fn extract_open_loop_limit(run: &PerturbationRun, tol: f64) -> Result<OpenLoopLimit> {
    let pts = require_bounded(run)?;
    if pts.len() < 3 {
        return Err(Error::ConvergenceFailure("need three solved schedule points".into()));
    }
    let [a, b, c] = [pts[pts.len() - 3], pts[pts.len() - 2], pts[pts.len() - 1]];
    let first = richardson(a, b, |p| p.control().clone())?;
    let second = richardson(b, c, |p| p.control().clone())?;
    let gap = first.l2_distance(&second)?;
    if !(gap < tol) {
        return Err(Error::ConvergenceFailure(format!(
            "extrapolated controls differ by {gap:e} (tolerance {tol:e}) at eps = {}",
            c.epsilon
        )));
    }
    let residual = control_residual(&run.problem, &second)?.max_residual;
    if !(residual <= 10.0 * tol) {
        return Err(Error::ConvergenceFailure(format!(
            "extrapolated control has stationarity residual {residual:e}"
        )));
    }
    Ok(OpenLoopLimit {
        control: second,
        extrapolation_gap: gap,
        stationarity_residual: residual,
    })
}

#[derive(Clone, Debug)]
pub struct WeakClosedLoop {
    pub window_end: usize,
    /// `K*_t` for `t = 0..=window_end`.
    pub gains: Vec<Matrix>,
    /// `v*_t` for `t = 0..=window_end`.
    pub offsets: AdaptedProcess,
    pub divergent_steps: Vec<usize>,
    /// Fitted growth exponent of `|K^ε_t|` for every step.
    pub gain_exponents: Vec<f64>,
    pub open_loop: AdaptedProcess,
    /// Node-wise distance between the window rollout and `u*`.
    pub reproduction_error: f64,
}

impl WeakClosedLoop {
    pub fn strategy(&self) -> Strategy {
        Strategy {
            gains: self.gains.clone(),
            offsets: self.offsets.clone(),
        }
    }
}

/// Limits of `K^ε_t`, `v^ε_t` on `0..=window_end` and a rollout check.
pub fn extract_weak_closed_loop(run: &PerturbationRun, window_end: usize, tol: f64) -> Result<WeakClosedLoop> {
    let p = &run.problem;
    if p.horizon < 2 || window_end > p.horizon - 2 {
        return Err(Error::invalid(format!(
            "window end {window_end} exceeds N-2 for horizon {}",
            p.horizon
        )));
    }
    let pts = require_bounded(run)?;
    if pts.len() < 3 {
        return Err(Error::ConvergenceFailure("need three solved schedule points".into()));
    }
    let gain_exponents: Vec<f64> = (0..p.horizon)
        .map(|t| tail_fit(&pts, |pt| pt.solution.gain[t].norm()))
        .collect();
    let divergent_steps: Vec<usize> = (0..p.horizon)
        .filter(|&t| gain_exponents[t] > GAIN_EXPONENT_THRESHOLD)
        .collect();
    if let Some(&step) = divergent_steps.iter().find(|&&t| t <= window_end) {
        return Err(Error::WindowTooLong { step });
    }
    let limit = extract_open_loop_limit(run, tol)?;
    let [a, b, c] = [pts[pts.len() - 3], pts[pts.len() - 2], pts[pts.len() - 1]];
    let mut gains = Vec::with_capacity(window_end + 1);
    for t in 0..=window_end {
        let k1 = richardson_matrix((a.epsilon, &a.solution.gain[t]), (b.epsilon, &b.solution.gain[t]));
        let k2 = richardson_matrix((b.epsilon, &b.solution.gain[t]), (c.epsilon, &c.solution.gain[t]));
        let gap = max_abs(&(&k1 - &k2));
        if !(gap < tol) {
            return Err(Error::ConvergenceFailure(format!(
                "gain extrapolants at t={t} differ by {gap:e}"
            )));
        }
        gains.push(k2);
    }
    let window_offsets = |pt: &EpsilonPoint| {
        AdaptedProcess::new(
            0,
            p.control_dim,
            (0..=window_end).map(|t| pt.solution.offset.level(t).clone()).collect(),
        )
        .expect("offset levels keep their shape")
    };
    let v1 = richardson(a, b, window_offsets)?;
    let offsets = richardson(b, c, window_offsets)?;
    let v_gap = v1.max_abs_diff(&offsets)?;
    if !(v_gap < tol) {
        return Err(Error::ConvergenceFailure(format!(
            "offset extrapolants differ by {v_gap:e}"
        )));
    }
    let strategy = Strategy::new(gains.clone(), offsets.clone())?;
    let traj = rollout_strategy(p, &strategy, Some(&limit.control))?;
    let reproduction_error = traj.controls.max_abs_diff(&limit.control)?;
    if !(reproduction_error <= 10.0 * tol) {
        return Err(Error::ConvergenceFailure(format!(
            "weak closed-loop rollout misses the open-loop limit by {reproduction_error:e}"
        )));
    }
    Ok(WeakClosedLoop {
        window_end,
        gains,
        offsets,
        divergent_steps,
        gain_exponents,
        open_loop: limit.control,
        reproduction_error,
    })
}

/// Monotonicity and lower-bound checks on `V_ε` against the oracle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SandwichReport {
    pub values_nonincreasing: bool,
    pub above_oracle: bool,
    pub oracle_verdict: OracleVerdict,
    /// `|V_{ε_last} - V|`, only when the oracle value is finite.
    pub last_gap: Option<f64>,
}

pub fn sandwich_check(run: &PerturbationRun, oracle_value: &oracle::OracleSolution, slack: f64) -> SandwichReport {
    let values: Vec<f64> = run.solved().iter().map(|p| p.value).collect();
    let values_nonincreasing = values.windows(2).all(|w| w[1] <= w[0] + slack);
    let above_oracle = values.iter().all(|v| *v >= oracle_value.value - slack);
    let last_gap = match (oracle_value.verdict, values.last()) {
        (OracleVerdict::Minimizer, Some(v)) => Some((v - oracle_value.value).abs()),
        _ => None,
    };
    SandwichReport {
        values_nonincreasing,
        above_oracle,
        oracle_verdict: oracle_value.verdict,
        last_gap,
    }
}

/// `V_ε` from the completion-of-squares formula for the ε-problem.
pub fn completion_value_eps(point: &EpsilonPoint, p: &LQProblem) -> f64 {
    completion_value(&point.solution, p)
}

/// CSV rows `epsilon,control_norm,value` for every solved point.
pub fn write_csv<W: Write>(run: &PerturbationRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epsilon", "control_norm", "value"])?;
    for pt in run.solved() {
        w.write_record(&[
            format!("{:e}", pt.epsilon),
            format!("{:e}", pt.control_norm),
            format!("{:e}", pt.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sweep report: per-ε norms, values, gains, and the verdict.
pub fn sweep_report(run: &PerturbationRun, verdict: &BoundednessReport) -> Value {
    let points: Vec<Value> = run
        .epsilons
        .iter()
        .zip(&run.points)
        .map(|(eps, r)| match r {
            Ok(pt) => json!({
                "epsilon": eps,
                "status": "ok",
                "control_norm": pt.control_norm,
                "value": pt.value,
                "convex": pt.convex,
                "gains": pt.solution.gain.iter().map(matrix_to_json).collect::<Vec<_>>(),
                "P": pt.solution.p.iter().map(matrix_to_json).collect::<Vec<_>>(),
            }),
            Err(e) => json!({ "epsilon": eps, "status": "error", "error": e.to_string() }),
        })
        .collect();
    json!({
        "schema_version": crate::SCHEMA_VERSION,
        "kind": "perturb",
        "verdict": verdict,
        "points": points,
    })
}

pub fn weak_closed_loop_report(w: &WeakClosedLoop) -> Value {
    json!({
        "window_end": w.window_end,
        "gains": w.gains.iter().map(matrix_to_json).collect::<Vec<_>>(),
        "offsets": w.offsets.to_json(),
        "divergent_steps": w.divergent_steps,
        "gain_exponents": w.gain_exponents,
        "open_loop_control": w.open_loop.to_keyed_map(),
        "reproduction_error": w.reproduction_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Coefficients;
    use crate::stationarity::control_residual;
    use nalgebra::{dmatrix, dvector};

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn scalar(horizon: usize, abcd: [f64; 4], qsrh: [f64; 4], x0: f64) -> LQProblem {
        let k = Coefficients {
            a: dmatrix![abcd[0]],
            b: dmatrix![abcd[1]],
            c: dmatrix![abcd[2]],
            d: dmatrix![abcd[3]],
            q: dmatrix![qsrh[0]],
            s: dmatrix![qsrh[1]],
            r: dmatrix![qsrh[2]],
            h: dmatrix![qsrh[3]],
        };
        LQProblem::time_invariant(horizon, k, dvector![x0]).unwrap()
    }

    /// `x_{t+1} = (x_t + u_t) w_t`, `R = -1`, `H = 1`.
    fn multiplicative(x0: f64) -> LQProblem {
        scalar(2, [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, -1.0, 1.0], x0)
    }

    #[test]
    fn schedule_parsing() {
        let s = EpsilonSchedule::parse("geometric:1:0.5:4").unwrap();
        assert_eq!(s.values(), &[1.0, 0.5, 0.25, 0.125]);
        assert_eq!(EpsilonSchedule::default().values().len(), 21);
        assert_eq!(*EpsilonSchedule::default().values().last().unwrap(), 0.5f64.powi(20));
        assert!(EpsilonSchedule::parse("linear:1:0.5:4").is_err());
        assert_eq!(EpsilonSchedule::parse("1, 0.5,0.1").unwrap().values(), &[1.0, 0.5, 0.1]);
        assert!(EpsilonSchedule::parse("0.1,0.5").is_err());
        assert!(EpsilonSchedule::parse("geometric:1:2:4").is_err());
        assert!(EpsilonSchedule::new(vec![0.5, 0.5]).is_err());
        assert!(EpsilonSchedule::new(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn closed_forms_at_half() {
        let eps = 0.5;
        let sol = perturbed_riccati(&multiplicative(1.0), eps, &tol()).unwrap();
        for t in 0..=2 {
            let expect = (eps - 1.0) / (eps + 1.0 - t as f64);
            assert!((sol.p[t][(0, 0)] - expect).abs() <= 1e-12, "t={t}");
        }
        assert!((sol.gain[0][(0, 0)] + 2.0 / 3.0).abs() <= 1e-12);
        assert!((sol.gain[1][(0, 0)] + 2.0).abs() <= 1e-12);
        // R̂^ε_0 + ε = (ε² - 1)/ε < ε: the ε-problem is not convex here
        assert!(!sol.verdict.steps[0].rhat_psd);
        assert!(sol.verdict.steps[1].rhat_psd);
    }

    #[test]
    fn large_epsilon_suppresses_cross_term() {
        let p = scalar(2, [1.0, 1.0, 0.0, 1.0], [0.0, 0.0, -2.0, 1.0], 1.0);
        let sol = perturbed_riccati(&p, 1e6, &tol()).unwrap();
        // P_1 = 1 - 1/(1e6), P_0 = P_1 - P_1²/(-2 + 2P_1 + 1e6)
        let p1 = 1.0 - 1.0 / 1e6;
        let p0 = p1 - p1 * p1 / (-2.0 + 2.0 * p1 + 1e6);
        assert!((sol.p[1][(0, 0)] - p1).abs() < 1e-15);
        assert!((sol.p[0][(0, 0)] - p0).abs() < 1e-15);
    }

    #[test]
    fn zero_problem_sweep() {
        let p = scalar(2, [1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], 1.0);
        let run = epsilon_sweep(&p, &EpsilonSchedule::default(), &tol());
        assert!(run.solved().iter().all(|pt| pt.control_norm == 0.0 && pt.value == 0.0));
        assert!(run
            .solved()
            .iter()
            .all(|pt| pt.solution.p.iter().all(|m| m[(0, 0)] == 0.0)));
        let v = boundedness_verdict(&run, DEFAULT_GROWTH_TOL);
        assert_eq!(v.verdict, Boundedness::OpenLoopSolvable);
        assert!(extract_open_loop_limit(&run, 1e-6).unwrap().control.is_zero());
        let w = extract_weak_closed_loop(&run, 0, 1e-6).unwrap();
        assert_eq!(w.gains[0], dmatrix![0.0]);
        assert!(w.offsets.is_zero());
        assert!(w.divergent_steps.is_empty());
    }

    #[test]
    fn divergence_instance() {
        let mut p = scalar(1, [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], 1.0);
        p.rho = AdaptedProcess::deterministic(0, 1, vec![dvector![1.0]]).unwrap();
        let run = epsilon_sweep(&p, &EpsilonSchedule::default(), &tol());
        for pt in run.solved() {
            let e = pt.epsilon;
            assert!((pt.control_norm - 1.0 / (e * e)).abs() <= 1e-9 * pt.control_norm);
        }
        let v = boundedness_verdict(&run, DEFAULT_GROWTH_TOL);
        assert_eq!(v.verdict, Boundedness::NotOpenLoopSolvable);
        assert!((v.norm_exponent.unwrap() - 2.0).abs() < 1e-6);
        assert!(matches!(
            extract_open_loop_limit(&run, 1e-6),
            Err(Error::NotOpenLoopSolvable(_))
        ));
    }

    #[test]
    fn shifted_offset_is_stationary_for_the_eps_problem() {
        let mut p = scalar(2, [1.0, 1.0, 0.5, 0.3], [0.5, 0.1, -0.2, 1.0], 1.0);
        p.drift = AdaptedProcess::deterministic(0, 1, vec![dvector![1.0], dvector![-0.5]]).unwrap();
        let eps = 0.3;
        let sol = perturbed_riccati(&p, eps, &tol()).unwrap();
        let pe = regularized_problem(&p, eps);
        let traj = rollout_strategy(&pe, &sol.strategy(), None).unwrap();
        assert!(control_residual(&pe, &traj.controls).unwrap().max_residual < 1e-12);
        let other = Strategy::new(sol.gain.clone(), unshifted_offset(&sol, &tol()).unwrap()).unwrap();
        let traj2 = rollout_strategy(&pe, &other, None).unwrap();
        assert!(control_residual(&pe, &traj2.controls).unwrap().max_residual > 1e-3);
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&xs, &[0.0; 4]), 0.0);
    }

    #[test]
    fn csv_lists_solved_points() {
        let run = epsilon_sweep(
            &multiplicative(1.0),
            &EpsilonSchedule::parse("geometric:1:0.5:3").unwrap(),
            &tol(),
        );
        assert_eq!(run.failures().len(), 1);
        let mut buf = Vec::new();
        write_csv(&run, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epsilon,control_norm,value"));
    }
}
