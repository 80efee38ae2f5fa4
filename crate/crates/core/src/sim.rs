//! Seeded Monte-Carlo estimation of the expected cost.
//!
//! Sample `i` draws its noise from `ChaCha8Rng::seed_from_u64(seed)` switched
//! to stream `i`, so every path is fixed by `(seed, i)` alone. Gaussian
//! variates come from `rand_distr::StandardNormal`; Rademacher signs from one
//! uniform `bool` per step. Samples are processed in fixed-size chunks whose
//! partial moments are merged in chunk order, which makes the report
//! bit-identical across thread counts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matnum::Matrix;
use crate::model::{LQProblem, NoiseKind, Strategy};
use crate::tree::{width, AdaptedProcess};

const CHUNK: usize = 4096;

/// Receives `(t, x_t, u_t)` along one path; `u_N` is `None`.
type PathRecorder<'a> = dyn FnMut(usize, &[f64], Option<&[f64]>) + 'a;

#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// `u_t = K_t x_t + v_t` over the full horizon.
    Feedback(&'a Strategy),
    /// Open-loop control looked up by the node of the drawn signs.
    Tree(&'a AdaptedProcess),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationReport {
    pub samples: usize,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// Largest `max_t |x_t|²` over all paths.
    pub max_state_sup: f64,
    pub seed: u64,
    pub noise: NoiseKind,
}

impl SimulationReport {
    pub fn to_json(&self) -> Value {
        json!({
            "schema_version": crate::SCHEMA_VERSION,
            "kind": "simulate",
            "samples": self.samples,
            "cost_mean": self.cost_mean,
            "cost_stderr": self.cost_stderr,
            "max_state_sup": self.max_state_sup,
            "seed": self.seed,
            "noise": self.noise,
        })
    }
}

fn row_major(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `y += M x` for a row-major `rows x x.len()` matrix.
#[inline]
fn mat_vec_add(m: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        let row = &m[i * cols..(i + 1) * cols];
        *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Flattened per-step data for the hot loop.
struct Step {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    gain: Option<Vec<f64>>,
}

struct Engine<'a> {
    p: &'a LQProblem,
    steps: Vec<Step>,
    h: Vec<f64>,
    policy: Policy<'a>,
    kind: NoiseKind,
}

/// Per-path outputs.
struct PathStats {
    cost: f64,
    sup: f64,
    /// `|x₀|² + Σ|u_t|² + Σ|b_t|² + Σ|σ_t|²`.
    energy: f64,
}

impl<'a> Engine<'a> {
    fn new(p: &'a LQProblem, policy: Policy<'a>) -> Result<Self> {
        p.validate()?;
        let kind = p.noise.kind;
        if kind == NoiseKind::Gaussian {
            if let Policy::Tree(_) = policy {
                return Err(Error::Unsupported(
                    "tree-indexed controls are only defined under rademacher noise".into(),
                ));
            }
            let tree_valued =
                !p.has_deterministic_affine() || matches!(policy, Policy::Feedback(s) if !s.offsets.is_deterministic());
            if tree_valued {
                return Err(Error::Unsupported(
                    "tree-adapted disturbances or offsets need rademacher noise".into(),
                ));
            }
        }
        match policy {
            Policy::Feedback(s) => {
                if s.window_len() != p.horizon {
                    return Err(Error::invalid("simulated strategy must cover the full horizon"));
                }
                s.check_against(p)?;
            }
            Policy::Tree(u) => {
                if u.start() != 0 || u.len() != p.horizon || u.dim() != p.control_dim {
                    return Err(Error::invalid("tree control does not match the problem"));
                }
            }
        }
        let steps = (0..p.horizon)
            .map(|t| Step {
                a: row_major(&p.a[t]),
                b: row_major(&p.b[t]),
                c: row_major(&p.c[t]),
                d: row_major(&p.d[t]),
                q: row_major(&p.q[t]),
                s: row_major(&p.s[t]),
                r: row_major(&p.r[t]),
                gain: match policy {
                    Policy::Feedback(s) => Some(row_major(&s.gains[t])),
                    Policy::Tree(_) => None,
                },
            })
            .collect();
        Ok(Engine {
            p,
            steps,
            h: row_major(&p.h),
            policy,
            kind,
        })
    }

    fn path(&self, seed: u64, index: u64, mut record: Option<&mut PathRecorder<'_>>) -> PathStats {
        let p = self.p;
        let (n, m) = (p.state_dim, p.control_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let mut x: Vec<f64> = p.x0.iter().cloned().collect();
        let mut next = vec![0.0; n];
        let mut diff = vec![0.0; n];
        let mut u = vec![0.0; m];
        let mut tmp_n = vec![0.0; n];
        let mut tmp_m = vec![0.0; m];
        let mut node = 0usize;
        let mut cost = 0.0;
        let mut sup = dot(&x, &x);
        let mut energy = sup;
        for (t, st) in self.steps.iter().enumerate() {
            // node index is only meaningful for rademacher paths
            let k = if self.kind == NoiseKind::Rademacher { node } else { 0 };
            u.iter_mut().for_each(|v| *v = 0.0);
            match self.policy {
                Policy::Feedback(s) => {
                    mat_vec_add(st.gain.as_ref().expect("feedback gain"), &x, &mut u);
                    for (ui, vi) in u.iter_mut().zip(s.offsets.at(t, k).iter()) {
                        *ui += vi;
                    }
                }
                Policy::Tree(ctrl) => u.copy_from_slice(ctrl.at(t, k).as_slice()),
            }
            if let Some(rec) = record.as_deref_mut() {
                rec(t, &x, Some(&u));
            }
            let (qv, rho) = (p.q_lin.at(t, k), p.rho.at(t, k));
            tmp_n.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_add(&st.q, &x, &mut tmp_n);
            tmp_m.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_add(&st.s, &x, &mut tmp_m);
            cost +=
                dot(&x, &tmp_n) + 2.0 * dot(&u, &tmp_m) + 2.0 * dot(&x, qv.as_slice()) + 2.0 * dot(&u, rho.as_slice());
            tmp_m.iter_mut().for_each(|v| *v = 0.0);
            mat_vec_add(&st.r, &u, &mut tmp_m);
            cost += dot(&u, &tmp_m);

            let w: f64 = match self.kind {
                NoiseKind::Gaussian => rng.sample(StandardNormal),
                NoiseKind::Rademacher => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            let (bv, sv) = (p.drift.at(t, k), p.sigma.at(t, k));
            next.copy_from_slice(bv.as_slice());
            mat_vec_add(&st.a, &x, &mut next);
            mat_vec_add(&st.b, &u, &mut next);
            diff.copy_from_slice(sv.as_slice());
            mat_vec_add(&st.c, &x, &mut diff);
            mat_vec_add(&st.d, &u, &mut diff);
            for i in 0..n {
                x[i] = next[i] + w * diff[i];
            }
            node = 2 * node + usize::from(w < 0.0);
            let xx = dot(&x, &x);
            sup = sup.max(xx);
            energy += dot(&u, &u) + dot(bv.as_slice(), bv.as_slice()) + dot(sv.as_slice(), sv.as_slice());
        }
        if let Some(rec) = record.as_mut() {
            rec(p.horizon, &x, None);
        }
        let big_n = p.horizon;
        let g = p.g.at(big_n, if self.kind == NoiseKind::Rademacher { node } else { 0 });
        tmp_n.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_add(&self.h, &x, &mut tmp_n);
        cost += dot(&x, &tmp_n) + 2.0 * dot(&x, g.as_slice());
        debug_assert!(self.kind != NoiseKind::Rademacher || node < width(big_n));
        PathStats { cost, sup, energy }
    }
}

/// Running moments of one chunk.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
    max_sup: f64,
    sup_sum: f64,
    energy_sum: f64,
}

impl Moments {
    fn push(&mut self, s: &PathStats) {
        self.count += 1.0;
        let delta = s.cost - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (s.cost - self.mean);
        self.max_sup = self.max_sup.max(s.sup);
        self.sup_sum += s.sup;
        self.energy_sum += s.energy;
    }

    /// Chan et al. pairwise merge.
    fn merge(self, o: Moments) -> Moments {
        if o.count == 0.0 {
            return self;
        }
        if self.count == 0.0 {
            return o;
        }
        let count = self.count + o.count;
        let delta = o.mean - self.mean;
        Moments {
            count,
            mean: self.mean + delta * o.count / count,
            m2: self.m2 + o.m2 + delta * delta * self.count * o.count / count,
            max_sup: self.max_sup.max(o.max_sup),
            sup_sum: self.sup_sum + o.sup_sum,
            energy_sum: self.energy_sum + o.energy_sum,
        }
    }
}

fn run_moments(engine: &Engine<'_>, samples: usize, seed: u64, exec: Execution) -> Moments {
    let chunks = samples.div_ceil(CHUNK);
    exec.map_range(chunks, |c| {
        let mut mo = Moments::default();
        for i in c * CHUNK..((c + 1) * CHUNK).min(samples) {
            mo.push(&engine.path(seed, i as u64, None));
        }
        mo
    })
    .into_iter()
    .fold(Moments::default(), Moments::merge)
}

/// Monte-Carlo estimate of `J(x₀, policy)` under the problem's noise law.
pub fn simulate_cost(p: &LQProblem, policy: Policy<'_>, samples: usize, seed: u64) -> Result<SimulationReport> {
    simulate_cost_with(p, policy, samples, seed, Execution::default())
}

pub fn simulate_cost_with(
    p: &LQProblem,
    policy: Policy<'_>,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<SimulationReport> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let engine = Engine::new(p, policy)?;
    let mo = run_moments(&engine, samples, seed, exec);
    let var = mo.m2 / (mo.count - 1.0);
    Ok(SimulationReport {
        samples,
        cost_mean: mo.mean,
        cost_stderr: (var.max(0.0) / mo.count).sqrt(),
        max_state_sup: mo.max_sup,
        seed,
        noise: p.noise.kind,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateBoundReport {
    /// `E sup|x_t|² / E(|x₀|² + Σ|u|² + Σ|b|² + Σ|σ|²)` at `samples`.
    pub fitted_l: f64,
    /// Same ratio at `2 * samples`.
    pub fitted_l_doubled: f64,
    pub stable: bool,
}

fn fitted_l(mo: &Moments) -> f64 {
    if mo.sup_sum == 0.0 {
        0.0
    } else if mo.energy_sum == 0.0 {
        f64::INFINITY
    } else {
        mo.sup_sum / mo.energy_sum
    }
}

/// Fits the constant of the a-priori state bound and checks it is stable
/// when the sample count doubles (ratio below 2).
pub fn state_bound_check(p: &LQProblem, policy: &Strategy, samples: usize, seed: u64) -> Result<StateBoundReport> {
    if samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let engine = Engine::new(p, Policy::Feedback(policy))?;
    let exec = Execution::default();
    let l1 = fitted_l(&run_moments(&engine, samples, seed, exec));
    let l2 = fitted_l(&run_moments(&engine, 2 * samples, seed, exec));
    let stable = if l1 == 0.0 && l2 == 0.0 {
        true
    } else if l1.is_finite() && l2.is_finite() && l1 > 0.0 && l2 > 0.0 {
        l1.max(l2) / l1.min(l2) < 2.0
    } else {
        false
    };
    Ok(StateBoundReport {
        fitted_l: l1,
        fitted_l_doubled: l2,
        stable,
    })
}

/// CSV dump `t,sample,x0..,u0..` of the first `samples` paths; the control
/// columns are empty at `t = N`.
pub fn write_paths<W: Write>(p: &LQProblem, policy: Policy<'_>, samples: usize, seed: u64, out: W) -> Result<()> {
    let engine = Engine::new(p, policy)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "sample".to_string()];
    header.extend((0..p.state_dim).map(|i| format!("x{i}")));
    header.extend((0..p.control_dim).map(|i| format!("u{i}")));
    w.write_record(&header)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for i in 0..samples {
        let mut rec = |t: usize, x: &[f64], u: Option<&[f64]>| {
            let mut row = vec![t.to_string(), i.to_string()];
            row.extend(x.iter().map(|v| format!("{v:e}")));
            match u {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:e}"))),
                None => row.extend((0..p.control_dim).map(|_| String::new())),
            }
            rows.push(row);
        };
        engine.path(seed, i as u64, Some(&mut rec));
        for row in rows.drain(..) {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
