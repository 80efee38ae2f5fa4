#![allow(dead_code)]

use nalgebra::{dmatrix, dvector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use slq::model::Coefficients;
use slq::stationarity::rollout;
use slq::tree::{width, AdaptedProcess, Level};
use slq::{LQProblem, Matrix, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    Vector::from_fn(dim, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn gram(g: &Matrix) -> Matrix {
    g * g.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Affine {
    None,
    Deterministic,
    Tree,
}

pub fn random_process(rng: &mut ChaCha8Rng, start: usize, len: usize, dim: usize, affine: Affine) -> AdaptedProcess {
    match affine {
        Affine::None => AdaptedProcess::zeros(start, len, dim),
        Affine::Deterministic => {
            AdaptedProcess::deterministic(start, dim, (0..len).map(|_| uniform_vector(rng, dim, 0.5)).collect())
                .unwrap()
        }
        Affine::Tree => random_tree_process(rng, start, len, dim, 0.5),
    }
}

pub fn random_tree_process(rng: &mut ChaCha8Rng, start: usize, len: usize, dim: usize, scale: f64) -> AdaptedProcess {
    let levels = (start..start + len)
        .map(|d| Level::Nodes((0..width(d)).map(|_| uniform_vector(rng, dim, scale)).collect()))
        .collect();
    AdaptedProcess::new(start, dim, levels).unwrap()
}

/// Uniformly convex instance: `R = I + GG'`, `Q = FF'`, `H = EE'`, `S = 0`,
/// `n, m <= 2`, `N <= 4`.
pub fn convex_instance(rng: &mut ChaCha8Rng, affine: Affine) -> LQProblem {
    let n = rng.random_range(1..=2);
    let m = rng.random_range(1..=2);
    let big_n = rng.random_range(1..=4);
    let mut p = LQProblem::time_invariant(
        big_n,
        Coefficients {
            a: Matrix::identity(n, n),
            b: Matrix::zeros(n, m),
            c: Matrix::zeros(n, n),
            d: Matrix::zeros(n, m),
            q: Matrix::zeros(n, n),
            s: Matrix::zeros(m, n),
            r: Matrix::identity(m, m),
            h: Matrix::zeros(n, n),
        },
        uniform_vector(rng, n, 1.0),
    )
    .unwrap();
    for t in 0..big_n {
        p.a[t] = uniform_matrix(rng, n, n, 0.9);
        p.b[t] = uniform_matrix(rng, n, m, 0.9);
        p.c[t] = uniform_matrix(rng, n, n, 0.5);
        p.d[t] = uniform_matrix(rng, n, m, 0.5);
        p.q[t] = gram(&uniform_matrix(rng, n, n, 0.8));
        p.r[t] = Matrix::identity(m, m) + gram(&uniform_matrix(rng, m, m, 0.8));
    }
    p.h = gram(&uniform_matrix(rng, n, n, 0.8));
    p.drift = random_process(rng, 0, big_n, n, affine);
    p.sigma = random_process(rng, 0, big_n, n, affine);
    p.q_lin = random_process(rng, 0, big_n, n, affine);
    p.rho = random_process(rng, 0, big_n, m, affine);
    p.g = random_process(rng, big_n, 1, n, affine);
    p.validate().unwrap();
    p
}

/// The 50 convex instances shared by several suites, cycling through the
/// three kinds of affine terms.
pub fn convex_suite() -> Vec<LQProblem> {
    let mut r = rng(20_240_601);
    (0..50)
        .map(|i| {
            let affine = [Affine::None, Affine::Deterministic, Affine::Tree][i % 3];
            convex_instance(&mut r, affine)
        })
        .collect()
}

pub fn random_control(rng: &mut ChaCha8Rng, p: &LQProblem, scale: f64) -> AdaptedProcess {
    random_tree_process(rng, 0, p.horizon, p.control_dim, scale)
}

pub fn scalar(horizon: usize, abcd: [f64; 4], qsrh: [f64; 4], x0: f64) -> LQProblem {
    LQProblem::time_invariant(
        horizon,
        Coefficients {
            a: dmatrix![abcd[0]],
            b: dmatrix![abcd[1]],
            c: dmatrix![abcd[2]],
            d: dmatrix![abcd[3]],
            q: dmatrix![qsrh[0]],
            s: dmatrix![qsrh[1]],
            r: dmatrix![qsrh[2]],
            h: dmatrix![qsrh[3]],
        },
        dvector![x0],
    )
    .unwrap()
}

/// `x_{t+1} = x_t + u_t + w_t u_t`, `J = E(x_2² - 2Σu_t²)`.
pub fn example1(x0: f64) -> LQProblem {
    scalar(2, [1.0, 1.0, 0.0, 1.0], [0.0, 0.0, -2.0, 1.0], x0)
}

/// `x_{t+1} = (x_t + u_t) w_t`, `J = E(x_2² - Σu_t²)`.
pub fn multiplicative(x0: f64) -> LQProblem {
    scalar(2, [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, -1.0, 1.0], x0)
}

/// `N = 1`, `R = 0`, `B = D = 0`, `ρ₀ = 1`: the cost is `x₁² + 2u₀`.
pub fn divergence() -> LQProblem {
    let mut p = scalar(1, [1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], 1.0);
    p.rho = AdaptedProcess::from_json(&json!([1.0]), 0, 1, 1, "rho").unwrap();
    p
}

/// `E Σ (u - Kx - v)' R̂ (u - Kx - v)` along the state driven by `u`.
pub fn weighted_deviation(
    p: &LQProblem,
    u: &AdaptedProcess,
    gains: &[Matrix],
    offsets: &AdaptedProcess,
    rhat: &[Matrix],
) -> f64 {
    let traj = rollout(p, u).unwrap();
    (0..p.horizon)
        .map(|t| {
            let w = 0.5f64.powi(t as i32);
            (0..width(t))
                .map(|k| {
                    let dev = traj.controls.at(t, k) - &gains[t] * traj.states.at(t, k) - offsets.at(t, k);
                    w * dev.dot(&(&rhat[t] * &dev))
                })
                .sum::<f64>()
        })
        .sum()
}

/// Real root of `4S³ + 4S² + 4S + 1` by bisection (the cubic is increasing).
pub fn cubic_root() -> f64 {
    let f = |s: f64| 4.0 * s * s * s + 4.0 * s * s + 4.0 * s + 1.0;
    let (mut lo, mut hi) = (-1.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
