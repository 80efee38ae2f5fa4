//! Exact rollouts on the ±1 tree, the co-state recursion and the
//! equilibrium-condition residuals.
//!
//! The co-state `λ_{t-1}` is stored at depth `t`, like every other
//! `F_{t-1}`-measurable quantity; `λ_{N-1} = Hx_N + g` sits at depth `N`.

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matnum::Vector;
use crate::model::{LQProblem, Strategy};
use crate::tree::{node_key, width, AdaptedProcess, Level, ScenarioTree};

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `x_0 ..= x_N` at depths `0..=N`.
    pub states: AdaptedProcess,
    /// `u_0 .. u_{N-1}` at depths `0..N`.
    pub controls: AdaptedProcess,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostateProcess {
    /// `λ_{d-1}` at depth `d = 0..=N`.
    pub lambda: AdaptedProcess,
}

impl CostateProcess {
    /// `λ_{-1}`, equal to half the gradient of the cost in `x_0` along the
    /// fixed control.
    pub fn initial(&self) -> &Vector {
        self.lambda.at(0, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepResidual {
    pub t: usize,
    pub max_residual: f64,
    /// Sign string of the worst node.
    pub argmax_node: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub steps: Vec<StepResidual>,
    pub max_residual: f64,
}

impl ResidualReport {
    pub fn to_json(&self) -> Value {
        json!({
            "schema_version": crate::SCHEMA_VERSION,
            "kind": "stationarity",
            "max_residual": self.max_residual,
            "steps": serde_json::to_value(&self.steps).expect("residual steps serialize"),
        })
    }
}

fn check_control(p: &LQProblem, u: &AdaptedProcess) -> Result<()> {
    if u.start() != 0 || u.len() != p.horizon || u.dim() != p.control_dim {
        return Err(Error::invalid(format!(
            "control must cover depths 0..{} with dimension {}",
            p.horizon, p.control_dim
        )));
    }
    ScenarioTree::new(p.horizon)?;
    Ok(())
}

/// Forward step from depth `t`, given the state level and a control rule
/// whose node dependence beyond `x` is flagged by `control_const`. A constant
/// state under a constant rule with zero diffusion stays constant.
fn step_states<F>(p: &LQProblem, t: usize, x: &Level, control_const: bool, control: F) -> (Level, Level)
where
    F: Fn(usize, &Vector) -> Vector,
{
    let (a, b, c, d) = (&p.a[t], &p.b[t], &p.c[t], &p.d[t]);
    let parts = |k: usize, xk: &Vector, uk: &Vector| {
        let mean = a * xk + b * uk + p.drift.at(t, k);
        let diff = c * xk + d * uk + p.sigma.at(t, k);
        (mean, diff)
    };
    let exogenous_const = control_const && p.drift.is_constant_at(t) && p.sigma.is_constant_at(t);
    if let Level::Constant(x0) = x {
        let u0 = control(0, x0);
        let (mean, diff) = parts(0, x0, &u0);
        if exogenous_const && diff.iter().all(|v| *v == 0.0) {
            return (Level::Constant(mean), Level::Constant(u0));
        }
        if exogenous_const {
            let (up, down) = (&mean + &diff, &mean - &diff);
            let next = (0..width(t)).flat_map(|_| [up.clone(), down.clone()]).collect();
            return (Level::Nodes(next), Level::Constant(u0));
        }
    }
    let mut next = Vec::with_capacity(width(t + 1));
    let mut us = Vec::with_capacity(width(t));
    for k in 0..width(t) {
        let xk = x.at(k);
        let uk = control(k, xk);
        let (mean, diff) = parts(k, xk, &uk);
        next.push(&mean + &diff);
        next.push(&mean - &diff);
        us.push(uk);
    }
    let u_level = if us.windows(2).all(|w| w[0] == w[1]) {
        Level::Constant(us.swap_remove(0))
    } else {
        Level::Nodes(us)
    };
    (Level::Nodes(next), u_level)
}

fn build(p: &LQProblem, x_levels: Vec<Level>, u_levels: Vec<Level>) -> Trajectory {
    Trajectory {
        states: AdaptedProcess::new(0, p.state_dim, x_levels).expect("state levels have tree shape"),
        controls: AdaptedProcess::new(0, p.control_dim, u_levels).expect("control levels have tree shape"),
    }
}

/// Exact forward recursion from `x_0` under an open-loop tree control.
pub fn rollout(p: &LQProblem, u: &AdaptedProcess) -> Result<Trajectory> {
    check_control(p, u)?;
    let mut xs = vec![Level::Constant(p.x0.clone())];
    let mut us = Vec::with_capacity(p.horizon);
    for t in 0..p.horizon {
        let (next, _) = step_states(p, t, &xs[t], u.is_constant_at(t), |k, _| u.at(t, k).clone());
        xs.push(next);
        us.push(u.level(t).clone());
    }
    Ok(build(p, xs, us))
}

/// Closed-loop rollout `u_t = K_t x_t + v_t` on the strategy window, then
/// `tail` on the remaining steps.
pub fn rollout_strategy(p: &LQProblem, s: &Strategy, tail: Option<&AdaptedProcess>) -> Result<Trajectory> {
    s.check_against(p)?;
    ScenarioTree::new(p.horizon)?;
    let window = s.window_len();
    if window < p.horizon {
        match tail {
            Some(u) => check_control(p, u)?,
            None => {
                return Err(Error::invalid(format!(
                    "strategy covers {window} of {} steps and no tail control was given",
                    p.horizon
                )))
            }
        }
    }
    let mut xs = vec![Level::Constant(p.x0.clone())];
    let mut us = Vec::with_capacity(p.horizon);
    for t in 0..p.horizon {
        let (next, u_level) = if t < window {
            step_states(p, t, &xs[t], s.offsets.is_constant_at(t), |k, xk| {
                &s.gains[t] * xk + s.offsets.at(t, k)
            })
        } else {
            let tail = tail.expect("checked above");
            step_states(p, t, &xs[t], tail.is_constant_at(t), |k, _| tail.at(t, k).clone())
        };
        xs.push(next);
        us.push(u_level);
    }
    Ok(build(p, xs, us))
}

/// `λ_{N-1} = Hx_N + g`, `λ_{t-1} = Qx_t + S'u_t + q_t + E[(A+wC)'λ_t | F_{t-1}]`.
pub fn costate_backward(p: &LQProblem, traj: &Trajectory) -> Result<CostateProcess> {
    let big_n = p.horizon;
    if traj.states.len() != big_n + 1 || traj.controls.len() != big_n {
        return Err(Error::invalid("trajectory does not match the problem horizon"));
    }
    let n = p.state_dim;
    let mut levels = vec![Level::Constant(Vector::zeros(n)); big_n + 1];
    levels[big_n] = match (traj.states.level(big_n), p.g.level(big_n)) {
        (Level::Constant(x), Level::Constant(g)) => Level::Constant(&p.h * x + g),
        (xs, gs) => Level::Nodes((0..width(big_n)).map(|k| &p.h * xs.at(k) + gs.at(k)).collect()),
    };
    for t in (0..big_n).rev() {
        let node = |k: usize, l_bar: &Vector, l_tilde: &Vector| {
            &p.q[t] * traj.states.at(t, k)
                + p.s[t].transpose() * traj.controls.at(t, k)
                + p.q_lin.at(t, k)
                + p.a[t].transpose() * l_bar
                + p.c[t].transpose() * l_tilde
        };
        let all_const = traj.states.is_constant_at(t) && traj.controls.is_constant_at(t) && p.q_lin.is_constant_at(t);
        levels[t] = match &levels[t + 1] {
            Level::Constant(l) if all_const => Level::Constant(node(0, l, &Vector::zeros(n))),
            child => Level::Nodes(
                (0..width(t))
                    .map(|k| {
                        let (l0, l1) = (child.at(2 * k), child.at(2 * k + 1));
                        node(k, &((l0 + l1) * 0.5), &((l0 - l1) * 0.5))
                    })
                    .collect(),
            ),
        };
    }
    Ok(CostateProcess {
        lambda: AdaptedProcess::new(0, n, levels)?,
    })
}

/// Max-norm of `E[R u + S x + ρ + (B + wD)'λ_t | F_{t-1}]` per step.
pub fn stationarity_residual(p: &LQProblem, traj: &Trajectory, costate: &CostateProcess) -> ResidualReport {
    let steps: Vec<StepResidual> = (0..p.horizon)
        .map(|t| {
            let node = |k: usize| {
                let (l0, l1) = (costate.lambda.at(t + 1, 2 * k), costate.lambda.at(t + 1, 2 * k + 1));
                let l_bar = (l0 + l1) * 0.5;
                let l_tilde = (l0 - l1) * 0.5;
                let r = &p.r[t] * traj.controls.at(t, k)
                    + &p.s[t] * traj.states.at(t, k)
                    + p.rho.at(t, k)
                    + p.b[t].transpose() * l_bar
                    + p.d[t].transpose() * l_tilde;
                r.amax()
            };
            let all_const = traj.states.is_constant_at(t)
                && traj.controls.is_constant_at(t)
                && p.rho.is_constant_at(t)
                && costate.lambda.is_constant_at(t + 1);
            let (argmax, max) = if all_const {
                (0, node(0))
            } else {
                (0..width(t))
                    .map(|k| (k, node(k)))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    )
            };
            StepResidual {
                t,
                max_residual: max,
                argmax_node: node_key(t, argmax),
            }
        })
        .collect();
    let max_residual = steps.iter().map(|s| s.max_residual).fold(0.0, f64::max);
    ResidualReport { steps, max_residual }
}

/// Rollout, co-state and residual for an open-loop control in one call.
pub fn control_residual(p: &LQProblem, u: &AdaptedProcess) -> Result<ResidualReport> {
    let traj = rollout(p, u)?;
    let lambda = costate_backward(p, &traj)?;
    Ok(stationarity_residual(p, &traj, &lambda))
}

/// Equilibrium residual of a full-horizon feedback strategy.
pub fn closed_loop_residual(p: &LQProblem, s: &Strategy) -> Result<ResidualReport> {
    if s.window_len() != p.horizon {
        return Err(Error::invalid(
            "closed-loop residual needs a strategy over the full horizon",
        ));
    }
    let traj = rollout_strategy(p, s, None)?;
    let lambda = costate_backward(p, &traj)?;
    Ok(stationarity_residual(p, &traj, &lambda))
}
