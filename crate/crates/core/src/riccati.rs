//! Generalized Riccati recursion, regularity verdicts, the affine η/v̂
//! recursion, the closed-loop family and the value function.
//!
//! With `P_N = H`, for `t = N-1..0`:
//!
//! ```text
//! R̂_t = R_t + B'P B + D'P D          M_t = B'P A + D'P C + S_t
//! P_t = Q_t + A'P A + C'P C - M_t' R̂_t^+ M_t      K̂_t = -R̂_t^+ M_t
//! ```
//!
//! where `P = P_{t+1}`. The regularized variant used by the perturbation
//! module replaces `R̂^+` by the true inverse of `R̂ + εI`; both share
//! [`backward_core`].

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matnum::{
    condition_number, max_abs, min_eigenvalue, pinv, psd_check, range_residual, symmetrize, Matrix, Tolerances, Vector,
};
use crate::model::{matrix_to_json, LQProblem, Strategy};
use crate::tree::{weight, width, AdaptedProcess, Level};

/// Condition number above which `R̂ + εI` counts as singular.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepVerdict {
    pub t: usize,
    /// `R̂_t ⪰ 0`.
    pub rhat_psd: bool,
    /// Gain square-summability; always true for a finite horizon.
    pub gain_finite: bool,
    /// `Range(M_t) ⊆ Range(R̂_t)`.
    pub cross_in_range: bool,
    /// Affine term `a_t` in `Range(R̂_t)` at every node.
    pub affine_in_range: bool,
    pub rhat_min_eigenvalue: f64,
    pub cross_range_residual: f64,
    pub affine_range_residual: f64,
}

impl StepVerdict {
    pub fn ok(&self) -> bool {
        self.rhat_psd && self.gain_finite && self.cross_in_range && self.affine_in_range
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityVerdict {
    pub steps: Vec<StepVerdict>,
    pub regular: bool,
}

impl RegularityVerdict {
    /// Steps where the cross term leaves the range of `R̂_t`.
    pub fn cross_range_failures(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| !s.cross_in_range).map(|s| s.t).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    /// `P_0 ..= P_N`.
    pub p: Vec<Matrix>,
    /// `R_t + B'P_{t+1}B + D'P_{t+1}D`, without any ε shift.
    pub rhat: Vec<Matrix>,
    /// `M_t`.
    pub cross: Vec<Matrix>,
    /// `R̂_t^+`, or `(R̂_t + εI)^{-1}` for a regularized solve.
    pub rhat_inv: Vec<Matrix>,
    /// `K̂_t = -rhat_inv_t M_t`.
    pub gain: Vec<Matrix>,
    /// `η_{d-1}` stored at tree depth `d = 0..=N`.
    pub eta: AdaptedProcess,
    /// `a_t = E[(B+wD)'η_t | F_{t-1}] + B'P b_t + D'P σ_t + ρ_t` at depth `t`.
    pub affine: AdaptedProcess,
    /// `v̂_t = -rhat_inv_t a_t` at depth `t`.
    pub offset: AdaptedProcess,
    /// Regularization level; zero for the generalized recursion.
    pub epsilon: f64,
    pub verdict: RegularityVerdict,
}

impl RiccatiSolution {
    pub fn horizon(&self) -> usize {
        self.gain.len()
    }

    pub fn regular(&self) -> bool {
        self.verdict.regular
    }

    /// `(K̂, v̂)` over the full horizon.
    pub fn strategy(&self) -> Strategy {
        Strategy {
            gains: self.gain.clone(),
            offsets: self.offset.clone(),
        }
    }

    /// `η_{-1}`.
    pub fn eta_initial(&self) -> &Vector {
        self.eta.at(0, 0)
    }
}

pub(crate) struct Core {
    pub p: Vec<Matrix>,
    pub rhat: Vec<Matrix>,
    pub cross: Vec<Matrix>,
    pub rhat_inv: Vec<Matrix>,
    pub gain: Vec<Matrix>,
}

/// Backward sweep for `P`. With `eps = None` uses `R̂^+`; with `Some(ε)`
/// inverts `R̂ + εI` and fails if it is numerically singular.
pub(crate) fn backward_core(p: &LQProblem, tol: &Tolerances, eps: Option<f64>) -> Result<Core> {
    p.validate()?;
    let big_n = p.horizon;
    let m = p.control_dim;
    let mut ps = vec![Matrix::zeros(0, 0); big_n + 1];
    ps[big_n] = p.h.clone();
    let mut rhat = Vec::with_capacity(big_n);
    let mut cross = Vec::with_capacity(big_n);
    let mut rhat_inv = Vec::with_capacity(big_n);
    let mut gain = Vec::with_capacity(big_n);
    for t in (0..big_n).rev() {
        let next = &ps[t + 1];
        let (a, b, c, d) = (&p.a[t], &p.b[t], &p.c[t], &p.d[t]);
        let pb = next * b;
        let pd = next * d;
        let r_t = symmetrize(&(&p.r[t] + b.transpose() * &pb + d.transpose() * &pd));
        let m_t = pb.transpose() * a + pd.transpose() * c + &p.s[t];
        let inv = match eps {
            None => pinv(&r_t, tol)?,
            Some(e) => {
                let shifted = &r_t + Matrix::identity(m, m) * e;
                let cond = condition_number(&shifted);
                if !(cond <= MAX_CONDITION) {
                    return Err(Error::IllConditioned { t, condition: cond });
                }
                shifted
                    .try_inverse()
                    .ok_or(Error::IllConditioned { t, condition: cond })?
            }
        };
        let k_t = -(&inv * &m_t);
        let p_t = &p.q[t] + a.transpose() * next * a + c.transpose() * next * c + m_t.transpose() * &k_t;
        ps[t] = symmetrize(&p_t);
        if !ps[t].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("Riccati recursion overflowed at t={t}")));
        }
        rhat.push(r_t);
        cross.push(m_t);
        rhat_inv.push(inv);
        gain.push(k_t);
    }
    rhat.reverse();
    cross.reverse();
    rhat_inv.reverse();
    gain.reverse();
    Ok(Core {
        p: ps,
        rhat,
        cross,
        rhat_inv,
        gain,
    })
}

/// Backward recursion for `η`, the affine term `a_t`, and the offset.
///
/// At a node of depth `t` with children values `e₊, e₋` of `η_t`, write
/// `ē = (e₊+e₋)/2` and `ẽ = (e₊-e₋)/2 = E[w η_t | F_{t-1}]`. Then
///
/// ```text
/// a_t     = B'ē + D'ẽ + B'P b + D'P σ + ρ
/// η_{t-1} = A'ē + C'ẽ + A'P b + C'P σ + q + K'a_t
/// ```
///
/// which is the conditional-expectation recursion with the `K'` terms
/// collected into `K'a_t`.
pub(crate) fn affine_recursion(
    p: &LQProblem,
    ps: &[Matrix],
    gain: &[Matrix],
    rhat_inv: &[Matrix],
) -> (AdaptedProcess, AdaptedProcess, AdaptedProcess) {
    let big_n = p.horizon;
    let (n, m) = (p.state_dim, p.control_dim);
    let mut eta_levels: Vec<Level> = vec![Level::Constant(Vector::zeros(n)); big_n + 1];
    let mut aff_levels: Vec<Level> = vec![Level::Constant(Vector::zeros(m)); big_n];
    eta_levels[big_n] = p.g.level(big_n).clone();
    for t in (0..big_n).rev() {
        let next = &ps[t + 1];
        let (a, b, c, d) = (&p.a[t], &p.b[t], &p.c[t], &p.d[t]);
        let node = |k: usize, e_bar: &Vector, e_tilde: &Vector| {
            let pb = next * p.drift.at(t, k);
            let ps_ = next * p.sigma.at(t, k);
            let aff = b.transpose() * (e_bar + &pb) + d.transpose() * (e_tilde + &ps_) + p.rho.at(t, k);
            let eta = a.transpose() * (e_bar + &pb)
                + c.transpose() * (e_tilde + &ps_)
                + p.q_lin.at(t, k)
                + gain[t].transpose() * &aff;
            (eta, aff)
        };
        let drivers_const = [&p.drift, &p.sigma, &p.q_lin, &p.rho]
            .iter()
            .all(|proc_| proc_.is_constant_at(t));
        let (eta_t, aff_t) = match &eta_levels[t + 1] {
            Level::Constant(e) if drivers_const => {
                let (eta, aff) = node(0, e, &Vector::zeros(n));
                (Level::Constant(eta), Level::Constant(aff))
            }
            child => {
                let (etas, affs): (Vec<_>, Vec<_>) = (0..width(t))
                    .map(|k| {
                        let (e0, e1) = (child.at(2 * k), child.at(2 * k + 1));
                        node(k, &((e0 + e1) * 0.5), &((e0 - e1) * 0.5))
                    })
                    .unzip();
                (Level::Nodes(etas), Level::Nodes(affs))
            }
        };
        eta_levels[t] = eta_t;
        aff_levels[t] = aff_t;
    }
    let off_levels = aff_levels
        .iter()
        .enumerate()
        .map(|(t, l)| match l {
            Level::Constant(a) => Level::Constant(-(&rhat_inv[t] * a)),
            Level::Nodes(ns) => Level::Nodes(ns.iter().map(|a| -(&rhat_inv[t] * a)).collect()),
        })
        .collect();
    let mk = |start, dim, levels| AdaptedProcess::new(start, dim, levels).expect("levels built with matching shapes");
    (mk(0, n, eta_levels), mk(0, m, aff_levels), mk(0, m, off_levels))
}

/// Runs the generalized recursion, the affine recursion and the regularity
/// checks.
pub fn riccati_backward(p: &LQProblem, tol: &Tolerances) -> Result<RiccatiSolution> {
    tol.validate()?;
    let core = backward_core(p, tol, None)?;
    let (eta, affine, offset) = affine_recursion(p, &core.p, &core.gain, &core.rhat_inv);
    let mut sol = RiccatiSolution {
        p: core.p,
        rhat: core.rhat,
        cross: core.cross,
        rhat_inv: core.rhat_inv,
        gain: core.gain,
        eta,
        affine,
        offset,
        epsilon: 0.0,
        verdict: RegularityVerdict {
            steps: Vec::new(),
            regular: false,
        },
    };
    sol.verdict = regularity_check(&sol, p, tol)?;
    Ok(sol)
}

/// Recomputes `(η, v̂)` from the stored `P` and gains.
pub fn solve_eta_vhat(sol: &RiccatiSolution, p: &LQProblem) -> (AdaptedProcess, AdaptedProcess) {
    let (eta, _, offset) = affine_recursion(p, &sol.p, &sol.gain, &sol.rhat_inv);
    (eta, offset)
}

fn level_columns(level: &Level) -> Matrix {
    match level {
        Level::Constant(v) => Matrix::from_columns(std::slice::from_ref(v)),
        Level::Nodes(vs) => Matrix::from_columns(vs),
    }
}

/// Per-step PSD, range and affine-range conditions.
pub fn regularity_check(sol: &RiccatiSolution, p: &LQProblem, tol: &Tolerances) -> Result<RegularityVerdict> {
    let mut steps = Vec::with_capacity(sol.horizon());
    for t in 0..sol.horizon() {
        let rhat = &sol.rhat[t];
        let rhat_psd = psd_check(rhat, tol)?;
        let cross_res = range_residual(&sol.cross[t], rhat, tol)?;
        let cross_in_range = cross_res <= tol.residual_tol * (1.0 + max_abs(&sol.cross[t]));
        let aff = level_columns(sol.affine.level(t));
        let aff_res = range_residual(&aff, rhat, tol)?;
        let affine_in_range = aff_res <= tol.residual_tol * (1.0 + max_abs(&aff));
        let gain_finite = sol.gain[t].iter().all(|v| v.is_finite());
        steps.push(StepVerdict {
            t,
            rhat_psd,
            gain_finite,
            cross_in_range,
            affine_in_range,
            rhat_min_eigenvalue: min_eigenvalue(rhat)?,
            cross_range_residual: cross_res,
            affine_range_residual: aff_res,
        });
    }
    debug_assert_eq!(steps.len(), p.horizon);
    let regular = steps.iter().all(StepVerdict::ok);
    Ok(RegularityVerdict { steps, regular })
}

/// `K* = K̂ + (I - R̂^+R̂) z`, `v* = v̂ + (I - R̂^+R̂) y` over `0..N`.
pub fn closed_loop(sol: &RiccatiSolution, z: &[Matrix], y: &AdaptedProcess) -> Result<Strategy> {
    if !sol.regular() {
        return Err(Error::NotClosedLoopSolvable(
            "the Riccati solution is not regular".into(),
        ));
    }
    let big_n = sol.horizon();
    if z.len() != big_n || y.start() != 0 || y.len() != big_n {
        return Err(Error::invalid("free parameters must cover the full horizon"));
    }
    let projectors: Vec<Matrix> = (0..big_n)
        .map(|t| {
            let m = sol.rhat[t].nrows();
            Matrix::identity(m, m) - &sol.rhat_inv[t] * &sol.rhat[t]
        })
        .collect();
    let gains = (0..big_n)
        .map(|t| {
            if z[t].shape() != sol.gain[t].shape() {
                return Err(Error::invalid(format!("free gain at t={t} has the wrong shape")));
            }
            Ok(&sol.gain[t] + &projectors[t] * &z[t])
        })
        .collect::<Result<Vec<_>>>()?;
    let shift = AdaptedProcess::new(
        0,
        y.dim(),
        (0..big_n)
            .map(|t| match y.level(t) {
                Level::Constant(v) => Level::Constant(&projectors[t] * v),
                Level::Nodes(vs) => Level::Nodes(vs.iter().map(|v| &projectors[t] * v).collect()),
            })
            .collect(),
    )?;
    let offsets = sol.offset.combine(1.0, &shift, 1.0)?;
    Strategy::new(gains, offsets)
}

/// Value of the quadratic completion, without a regularity check.
///
/// `x₀'P₀x₀ + 2x₀'η_{-1} + Σ_t E[b'Pb + σ'Pσ + 2(b + wσ)'η_t - a'(rhat_inv)a]`.
pub(crate) fn completion_value(sol: &RiccatiSolution, p: &LQProblem) -> f64 {
    let x0 = &p.x0;
    let mut v = x0.dot(&(&sol.p[0] * x0)) + 2.0 * x0.dot(sol.eta_initial());
    for t in 0..sol.horizon() {
        let next = &sol.p[t + 1];
        let stage = |k: usize| {
            let (b, s) = (p.drift.at(t, k), p.sigma.at(t, k));
            let (e0, e1) = (sol.eta.at(t + 1, 2 * k), sol.eta.at(t + 1, 2 * k + 1));
            let e_bar = (e0 + e1) * 0.5;
            let e_tilde = (e0 - e1) * 0.5;
            let a = sol.affine.at(t, k);
            b.dot(&(next * b)) + s.dot(&(next * s)) + 2.0 * (b.dot(&e_bar) + s.dot(&e_tilde))
                - a.dot(&(&sol.rhat_inv[t] * a))
        };
        let all_const = [&p.drift, &p.sigma].iter().all(|q| q.is_constant_at(t))
            && sol.eta.is_constant_at(t + 1)
            && sol.affine.is_constant_at(t);
        v += if all_const {
            stage(0)
        } else {
            weight(t) * (0..width(t)).map(stage).sum::<f64>()
        };
    }
    v
}

/// `V(x₀)` for a regular solution.
pub fn value_function(sol: &RiccatiSolution, p: &LQProblem) -> Result<f64> {
    if !sol.regular() {
        return Err(Error::NotClosedLoopSolvable(
            "value formula requires a regular Riccati solution".into(),
        ));
    }
    Ok(completion_value(sol, p))
}

/// JSON report with per-step matrices and verdict flags.
pub fn report(sol: &RiccatiSolution, p: &LQProblem) -> Value {
    let steps: Vec<Value> = (0..sol.horizon())
        .map(|t| {
            let v = &sol.verdict.steps[t];
            json!({
                "t": t,
                "P": matrix_to_json(&sol.p[t]),
                "Rhat": matrix_to_json(&sol.rhat[t]),
                "M": matrix_to_json(&sol.cross[t]),
                "Khat": matrix_to_json(&sol.gain[t]),
                "rhat_psd": v.rhat_psd,
                "gain_finite": v.gain_finite,
                "cross_in_range": v.cross_in_range,
                "affine_in_range": v.affine_in_range,
                "rhat_min_eigenvalue": v.rhat_min_eigenvalue,
                "cross_range_residual": v.cross_range_residual,
                "affine_range_residual": v.affine_range_residual,
            })
        })
        .collect();
    let value = if sol.regular() {
        json!(completion_value(sol, p))
    } else {
        Value::Null
    };
    json!({
        "schema_version": crate::SCHEMA_VERSION,
        "kind": "riccati",
        "regular": sol.regular(),
        "cross_range_failures": sol.verdict.cross_range_failures(),
        "P_terminal": matrix_to_json(&sol.p[sol.horizon()]),
        "steps": steps,
        "vhat": sol.offset.to_json(),
        "eta": sol.eta.to_json(),
        "value": value,
    })
}
