//! Exact expected costs and exact open-loop minimization on the ±1 tree.
//!
//! Every node control `u_{t,k}` becomes one block of a stacked vector of
//! length `m(2^N - 1)`. The state at a node is affine in the controls of its
//! ancestors, so the cost is an explicit quadratic `u'Gu + 2c'u + c₀`. The
//! minimization works from a symmetric eigendecomposition of `G` and does not
//! touch the pseudoinverse kernel used by the Riccati code.

use nalgebra::SymmetricEigen;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matnum::{Matrix, Vector};
use crate::model::{LQProblem, Strategy};
use crate::stationarity::{rollout, rollout_strategy, Trajectory};
use crate::tree::{child_sign, weight, width, AdaptedProcess, Level, MAX_TREE_DEPTH};

/// Default bound on the number of stacked control coordinates.
pub const DEFAULT_CAP: usize = 4096;

/// Relative eigenvalue slack for the Hessian decisions.
pub const HESSIAN_SLACK: f64 = 1e-9;

/// Expected cost of a fully rolled-out trajectory.
pub fn trajectory_cost(p: &LQProblem, traj: &Trajectory) -> f64 {
    let mut total = 0.0;
    for t in 0..p.horizon {
        let stage = |k: usize| {
            let x = traj.states.at(t, k);
            let u = traj.controls.at(t, k);
            x.dot(&(&p.q[t] * x))
                + 2.0 * u.dot(&(&p.s[t] * x))
                + u.dot(&(&p.r[t] * u))
                + 2.0 * x.dot(p.q_lin.at(t, k))
                + 2.0 * u.dot(p.rho.at(t, k))
        };
        let constant = traj.states.is_constant_at(t)
            && traj.controls.is_constant_at(t)
            && p.q_lin.is_constant_at(t)
            && p.rho.is_constant_at(t);
        total += if constant {
            stage(0)
        } else {
            weight(t) * (0..width(t)).map(stage).sum::<f64>()
        };
    }
    let big_n = p.horizon;
    let terminal = |k: usize| {
        let x = traj.states.at(big_n, k);
        x.dot(&(&p.h * x)) + 2.0 * x.dot(p.g.at(big_n, k))
    };
    total += if traj.states.is_constant_at(big_n) && p.g.is_constant_at(big_n) {
        terminal(0)
    } else {
        weight(big_n) * (0..width(big_n)).map(terminal).sum::<f64>()
    };
    total
}

/// `J(x₀, u)` for a tree-adapted control.
pub fn exact_cost(p: &LQProblem, u: &AdaptedProcess) -> Result<f64> {
    Ok(trajectory_cost(p, &rollout(p, u)?))
}

/// `J(x₀, Kx + v)` for a full-horizon feedback strategy.
pub fn exact_cost_strategy(p: &LQProblem, s: &Strategy) -> Result<f64> {
    if s.window_len() != p.horizon {
        return Err(Error::invalid("strategy must cover the full horizon"));
    }
    Ok(trajectory_cost(p, &rollout_strategy(p, s, None)?))
}

/// `u'Gu + 2c'u + constant` over stacked node controls.
#[derive(Clone, Debug)]
pub struct QuadraticForm {
    pub g: Matrix,
    pub c: Vector,
    pub constant: f64,
    pub control_dim: usize,
    pub horizon: usize,
}

/// Offset of node `(t, k)` in the stacked control vector.
#[inline]
pub fn stacked_index(m: usize, t: usize, k: usize) -> usize {
    m * ((1usize << t) - 1 + k)
}

pub fn stacked_dimension(m: usize, horizon: usize) -> Option<usize> {
    if horizon > MAX_TREE_DEPTH {
        return None;
    }
    ((1usize << horizon) - 1).checked_mul(m)
}

impl QuadraticForm {
    pub fn dimension(&self) -> usize {
        self.c.len()
    }

    pub fn evaluate(&self, u: &Vector) -> f64 {
        u.dot(&(&self.g * u)) + 2.0 * self.c.dot(u) + self.constant
    }

    pub fn stack(&self, u: &AdaptedProcess) -> Vector {
        let m = self.control_dim;
        let mut out = Vector::zeros(self.dimension());
        for t in 0..self.horizon {
            for k in 0..width(t) {
                let i = stacked_index(m, t, k);
                out.rows_mut(i, m).copy_from(u.at(t, k));
            }
        }
        out
    }

    pub fn unstack(&self, z: &Vector) -> AdaptedProcess {
        let m = self.control_dim;
        let levels = (0..self.horizon)
            .map(|t| {
                Level::Nodes(
                    (0..width(t))
                        .map(|k| z.rows(stacked_index(m, t, k), m).into_owned())
                        .collect(),
                )
            })
            .collect();
        AdaptedProcess::new(0, m, levels).expect("stacked vector has tree shape")
    }
}

/// Affine map from ancestor controls to the state at one node.
struct NodeMap {
    /// `blocks[t']` multiplies the ancestor control at depth `t'`.
    blocks: Vec<Matrix>,
    offset: Vector,
}

/// Local contribution over the node's ancestor chain plus its own control.
struct LocalBlock {
    t: usize,
    k: usize,
    g: Matrix,
    c: Vector,
    constant: f64,
}

fn local_block(z_len: usize, l: &Matrix, e: Option<usize>, m: usize, parts: Parts<'_>) -> (Matrix, Vector, f64) {
    let Parts {
        q,
        s,
        r,
        q_lin,
        rho,
        xbar,
        wgt,
    } = parts;
    // x = L z + x̄, u = z[e..e+m]
    let mut g = l.transpose() * q * l;
    let mut c = l.transpose() * (q * xbar + q_lin);
    let mut constant = xbar.dot(&(q * xbar)) + 2.0 * xbar.dot(q_lin);
    if let (Some(e), Some(s), Some(r), Some(rho)) = (e, s, r, rho) {
        // u'S x contributes E'S L + L'S'E, u'Ru the diagonal block
        let sl = s * l;
        for i in 0..m {
            for j in 0..z_len {
                g[(e + i, j)] += sl[(i, j)];
                g[(j, e + i)] += sl[(i, j)];
            }
        }
        let mut block = g.view_mut((e, e), (m, m));
        block += r;
        let extra = s * xbar + rho;
        let mut tail = c.rows_mut(e, m);
        tail += extra;
    }
    g *= wgt;
    c *= wgt;
    constant *= wgt;
    (g, c, constant)
}

struct Parts<'a> {
    q: &'a Matrix,
    s: Option<&'a Matrix>,
    r: Option<&'a Matrix>,
    q_lin: &'a Vector,
    rho: Option<&'a Vector>,
    xbar: &'a Vector,
    wgt: f64,
}

/// Assembles `G`, `c` and the constant exactly.
pub fn assemble(p: &LQProblem, cap: usize, exec: Execution) -> Result<QuadraticForm> {
    p.validate()?;
    let (n, m, big_n) = (p.state_dim, p.control_dim, p.horizon);
    let dim = stacked_dimension(m, big_n)
        .filter(|&d| d <= cap)
        .ok_or(Error::InstanceTooLarge {
            size: stacked_dimension(m, big_n).unwrap_or(usize::MAX),
            cap,
        })?;
    let mut g = Matrix::zeros(dim, dim);
    let mut c = Vector::zeros(dim);
    let mut constant = 0.0;

    let mut level: Vec<NodeMap> = vec![NodeMap {
        blocks: Vec::new(),
        offset: p.x0.clone(),
    }];
    for t in 0..=big_n {
        let stage = t < big_n;
        let locals: Vec<LocalBlock> = exec.map_range(width(t), |k| {
            let node = &level[k];
            let z_len = m * (t + usize::from(stage));
            let mut l = Matrix::zeros(n, z_len);
            for (tp, blk) in node.blocks.iter().enumerate() {
                l.view_mut((0, m * tp), (n, m)).copy_from(blk);
            }
            let (lg, lc, lconst) = if stage {
                local_block(
                    z_len,
                    &l,
                    Some(m * t),
                    m,
                    Parts {
                        q: &p.q[t],
                        s: Some(&p.s[t]),
                        r: Some(&p.r[t]),
                        q_lin: p.q_lin.at(t, k),
                        rho: Some(p.rho.at(t, k)),
                        xbar: &node.offset,
                        wgt: weight(t),
                    },
                )
            } else {
                local_block(
                    z_len,
                    &l,
                    None,
                    m,
                    Parts {
                        q: &p.h,
                        s: None,
                        r: None,
                        q_lin: p.g.at(big_n, k),
                        rho: None,
                        xbar: &node.offset,
                        wgt: weight(t),
                    },
                )
            };
            LocalBlock {
                t,
                k,
                g: lg,
                c: lc,
                constant: lconst,
            }
        });
        // sequential scatter keeps the summation order fixed
        for lb in &locals {
            let depth_count = lb.t + usize::from(lb.t < big_n);
            let global: Vec<usize> = (0..depth_count)
                .map(|tp| stacked_index(m, tp, lb.k >> (lb.t - tp)))
                .collect();
            for (bi, &gi) in global.iter().enumerate() {
                for (bj, &gj) in global.iter().enumerate() {
                    let mut dst = g.view_mut((gi, gj), (m, m));
                    dst += lb.g.view((m * bi, m * bj), (m, m));
                }
                let mut dst = c.rows_mut(gi, m);
                dst += lb.c.rows(m * bi, m);
            }
            constant += lb.constant;
        }
        if !stage {
            break;
        }
        // children: x' = (A + wC) x + (B + wD) u + b + wσ
        let (a, b, cm, d) = (&p.a[t], &p.b[t], &p.c[t], &p.d[t]);
        level = exec.map_range(width(t + 1), |child| {
            let parent = &level[child >> 1];
            let w = child_sign(child);
            let k = child >> 1;
            let f = a + cm * w;
            let mut blocks: Vec<Matrix> = parent.blocks.iter().map(|blk| &f * blk).collect();
            blocks.push(b + d * w);
            let offset = &f * &parent.offset + p.drift.at(t, k) + p.sigma.at(t, k) * w;
            NodeMap { blocks, offset }
        });
    }
    let g = (&g + g.transpose()) * 0.5;
    Ok(QuadraticForm {
        g,
        c,
        constant,
        control_dim: m,
        horizon: big_n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleVerdict {
    Minimizer,
    UnboundedBelow,
    NoMinimizer,
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    /// `V(x₀)`; `-∞` unless a minimizer exists.
    pub value: f64,
    pub verdict: OracleVerdict,
    pub hessian_psd: bool,
    pub flat_directions: usize,
    pub min_eigenvalue: f64,
    pub dimension: usize,
    /// Minimum-norm minimizer.
    pub control: Option<AdaptedProcess>,
}

impl OracleSolution {
    pub fn to_json(&self) -> Value {
        json!({
            "schema_version": crate::SCHEMA_VERSION,
            "kind": "oracle",
            "value": if self.value.is_finite() { json!(self.value) } else { Value::Null },
            "verdict": self.verdict,
            "hessian_psd": self.hessian_psd,
            "flat_directions": self.flat_directions,
            "min_eigenvalue": self.min_eigenvalue,
            "dimension": self.dimension,
            "control": self.control.as_ref().map(|u| json!(u.to_keyed_map())),
        })
    }
}

/// Exact infimum of `J(x₀, ·)` over tree-adapted controls.
pub fn exact_value(p: &LQProblem, cap: usize) -> Result<OracleSolution> {
    exact_value_with(p, cap, Execution::default())
}

pub fn exact_value_with(p: &LQProblem, cap: usize, exec: Execution) -> Result<OracleSolution> {
    let form = assemble(p, cap, exec)?;
    Ok(minimize(&form))
}

/// Eigen-decomposition based minimization of a quadratic form.
pub fn minimize(form: &QuadraticForm) -> OracleSolution {
    let dim = form.dimension();
    let eig = SymmetricEigen::new(form.g.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let slack = HESSIAN_SLACK * scale;
    let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_eigenvalue = if dim == 0 { 0.0 } else { min_eigenvalue };
    let hessian_psd = min_eigenvalue >= -slack;
    let flat_directions = eig.eigenvalues.iter().filter(|v| v.abs() <= slack).count();
    let coords = eig.eigenvectors.transpose() * &form.c;
    let c_tol = HESSIAN_SLACK * (1.0 + form.c.norm());

    let mut base = OracleSolution {
        value: f64::NEG_INFINITY,
        verdict: OracleVerdict::UnboundedBelow,
        hessian_psd,
        flat_directions,
        min_eigenvalue,
        dimension: dim,
        control: None,
    };
    if !hessian_psd {
        return base;
    }
    let mut z = Vector::zeros(dim);
    let mut value = form.constant;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        let ci = coords[i];
        if lam.abs() <= slack {
            if ci.abs() > c_tol {
                base.verdict = OracleVerdict::NoMinimizer;
                return base;
            }
            continue;
        }
        z -= eig.eigenvectors.column(i) * (ci / lam);
        value -= ci * ci / lam;
    }
    base.value = value;
    base.verdict = OracleVerdict::Minimizer;
    base.control = Some(form.unstack(&z));
    base
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Coefficients;
    use nalgebra::{dmatrix, dvector};

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

    fn example1() -> LQProblem {
        scalar(2, [1.0, 1.0, 0.0, 1.0], [0.0, 0.0, -2.0, 1.0], 1.0)
    }

    #[test]
    fn example1_costs() {
        let p = example1();
        assert!((exact_cost(&p, &AdaptedProcess::zeros(0, 2, 1)).unwrap() - 1.0).abs() <= 1e-12);
        let s = -0.3194;
        let j = exact_cost_strategy(&p, &Strategy::constant_gain(&p, dmatrix![s]).unwrap()).unwrap();
        let poly = 4.0 * s * s * s + 4.0 * s * s + 4.0 * s + 1.0;
        assert!((j - poly).abs() < 1e-12);
        assert!(j.abs() <= 1e-3);
    }

    #[test]
    fn quadratic_form_matches_rollout_cost() {
        let mut p = scalar(3, [0.9, 0.5, 0.3, -0.2], [1.0, 0.1, -0.4, 2.0], 1.5);
        p.sigma = AdaptedProcess::from_json(&serde_json::json!([[0.3], [-0.2], [0.1]]), 0, 3, 1, "s").unwrap();
        p.g = AdaptedProcess::from_json(&serde_json::json!([0.7]), 3, 1, 1, "g").unwrap();
        let form = assemble(&p, DEFAULT_CAP, Execution::Sequential).unwrap();
        assert_eq!(form.dimension(), 7);
        let z = Vector::from_fn(7, |i, _| (i as f64 * 0.37).sin());
        let u = form.unstack(&z);
        assert_eq!(form.stack(&u), z);
        let direct = exact_cost(&p, &u).unwrap();
        assert!((form.evaluate(&z) - direct).abs() < 1e-12);
        let par = assemble(&p, DEFAULT_CAP, Execution::Parallel).unwrap();
        assert_eq!(par.g, form.g);
        assert_eq!(par.c, form.c);
    }

    #[test]
    fn single_step_minimizer() {
        let p = scalar(1, [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], 1.0);
        let sol = exact_value(&p, DEFAULT_CAP).unwrap();
        assert_eq!(sol.verdict, OracleVerdict::Minimizer);
        assert!((sol.value - 0.5).abs() < 1e-14);
        assert!((sol.control.unwrap().at(0, 0)[0] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn linear_term_without_curvature_has_no_minimizer() {
        let mut p = scalar(1, [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], 1.0);
        p.rho = AdaptedProcess::deterministic(0, 1, vec![dvector![1.0]]).unwrap();
        let sol = exact_value(&p, DEFAULT_CAP).unwrap();
        assert_eq!(sol.verdict, OracleVerdict::NoMinimizer);
        assert!(sol.hessian_psd);
        assert_eq!(sol.flat_directions, 1);
        assert_eq!(sol.value, f64::NEG_INFINITY);
        assert_eq!(sol.to_json()["value"], Value::Null);
    }

    #[test]
    fn example1_is_unbounded_below() {
        // J = x0² + 2x0u0 + 2(x0+u0)α + 2u0β with u1 = α + βw0 has no lower bound
        let sol = exact_value(&example1(), DEFAULT_CAP).unwrap();
        assert_eq!(sol.verdict, OracleVerdict::UnboundedBelow);
        assert!(!sol.hessian_psd);
        let u = AdaptedProcess::from_json(
            &serde_json::json!({"tree": {"": [-1.0], "+": [1.0], "-": [-1.0]}}),
            0,
            2,
            1,
            "u",
        )
        .unwrap();
        // feedback u = -x gives -3x0²
        assert!((exact_cost(&example1(), &u).unwrap() + 3.0).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let p = scalar(5, [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], 1.0);
        assert!(matches!(
            exact_value(&p, 30),
            Err(Error::InstanceTooLarge { size: 31, cap: 30 })
        ));
        assert!(exact_value(&p, 31).is_ok());
    }

    #[test]
    fn zero_problem_value_is_zero() {
        let p = scalar(3, [1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0], 1.0);
        let sol = exact_value(&p, DEFAULT_CAP).unwrap();
        assert_eq!(sol.verdict, OracleVerdict::Minimizer);
        assert_eq!(sol.value, 0.0);
        assert_eq!(sol.flat_directions, 7);
        assert!(sol.control.unwrap().is_zero());
    }
}
