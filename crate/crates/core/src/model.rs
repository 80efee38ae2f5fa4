//! Problem data, the JSON problem schema, and the homogeneous projection.
//!
//! Dynamics and cost, for `t = 0..N-1`:
//!
//! ```text
//! x_{t+1} = A_t x_t + B_t u_t + b_t + (C_t x_t + D_t u_t + σ_t) w_t
//! J = E[ Σ_t x'Qx + 2u'Sx + u'Ru + 2x'q + 2u'ρ  +  x_N'H x_N + 2x_N'g ]
//! ```
//!
//! `w_t` is scalar, mean zero, unit variance. The affine terms are
//! [`AdaptedProcess`]es: `b_t, σ_t, q_t, ρ_t` live at tree depth `t` and `g`
//! at depth `N`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::matnum::{max_abs, symmetrize, Matrix, Tolerances, Vector};
use crate::tree::{vector_from_json, vector_to_json, AdaptedProcess};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Rademacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            kind: NoiseKind::Gaussian,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LQProblem {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub c: Vec<Matrix>,
    pub d: Vec<Matrix>,
    pub q: Vec<Matrix>,
    pub s: Vec<Matrix>,
    pub r: Vec<Matrix>,
    pub h: Matrix,
    /// `b_t`, depths `0..N`.
    pub drift: AdaptedProcess,
    /// `σ_t`, depths `0..N`.
    pub sigma: AdaptedProcess,
    /// `q_t`, depths `0..N`.
    pub q_lin: AdaptedProcess,
    /// `ρ_t`, depths `0..N`.
    pub rho: AdaptedProcess,
    /// `g`, depth `N` only.
    pub g: AdaptedProcess,
    pub x0: Vector,
    pub noise: NoiseSpec,
}

/// Matrices shared by every step of a time-invariant problem.
#[derive(Clone, Debug)]
pub struct Coefficients {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub q: Matrix,
    pub s: Matrix,
    pub r: Matrix,
    pub h: Matrix,
}

impl LQProblem {
    /// Time-invariant homogeneous problem with Gaussian noise.
    pub fn time_invariant(horizon: usize, k: Coefficients, x0: Vector) -> Result<Self> {
        let n = k.a.nrows();
        let m = k.b.ncols();
        let p = LQProblem {
            horizon,
            state_dim: n,
            control_dim: m,
            a: vec![k.a; horizon],
            b: vec![k.b; horizon],
            c: vec![k.c; horizon],
            d: vec![k.d; horizon],
            q: vec![k.q; horizon],
            s: vec![k.s; horizon],
            r: vec![k.r; horizon],
            h: k.h,
            drift: AdaptedProcess::zeros(0, horizon, n),
            sigma: AdaptedProcess::zeros(0, horizon, n),
            q_lin: AdaptedProcess::zeros(0, horizon, n),
            rho: AdaptedProcess::zeros(0, horizon, m),
            g: AdaptedProcess::zeros(horizon, 1, n),
            x0,
            noise: NoiseSpec::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, big_n) = (self.state_dim, self.control_dim, self.horizon);
        if big_n == 0 || n == 0 || m == 0 {
            return Err(Error::invalid("horizon, state_dim and control_dim must be at least 1"));
        }
        let seqs: [(&str, &Vec<Matrix>, usize, usize); 7] = [
            ("A", &self.a, n, n),
            ("B", &self.b, n, m),
            ("C", &self.c, n, n),
            ("D", &self.d, n, m),
            ("Q", &self.q, n, n),
            ("S", &self.s, m, n),
            ("R", &self.r, m, m),
        ];
        for (name, seq, rows, cols) in seqs {
            if seq.len() != big_n {
                return Err(Error::parse(
                    name,
                    format!("expected {big_n} matrices, found {}", seq.len()),
                ));
            }
            for (t, mat) in seq.iter().enumerate() {
                check_matrix(mat, rows, cols, &format!("{name}[t={t}]"))?;
            }
        }
        check_matrix(&self.h, n, n, "H")?;
        let procs: [(&str, &AdaptedProcess, usize, usize, usize); 5] = [
            ("b", &self.drift, 0, big_n, n),
            ("sigma", &self.sigma, 0, big_n, n),
            ("q", &self.q_lin, 0, big_n, n),
            ("rho", &self.rho, 0, big_n, m),
            ("g", &self.g, big_n, 1, n),
        ];
        for (name, proc_, start, len, dim) in procs {
            if proc_.start() != start || proc_.len() != len || proc_.dim() != dim {
                return Err(Error::parse(
                    name,
                    "adapted process has the wrong depth range or dimension",
                ));
            }
        }
        if self.x0.len() != n || !self.x0.iter().all(|v| v.is_finite()) {
            return Err(Error::parse("x0", format!("expected {n} finite entries")));
        }
        Ok(())
    }

    /// Copy with `b = σ = q = ρ = g = 0`.
    pub fn homogeneous(&self) -> Self {
        let (n, m, big_n) = (self.state_dim, self.control_dim, self.horizon);
        LQProblem {
            drift: AdaptedProcess::zeros(0, big_n, n),
            sigma: AdaptedProcess::zeros(0, big_n, n),
            q_lin: AdaptedProcess::zeros(0, big_n, n),
            rho: AdaptedProcess::zeros(0, big_n, m),
            g: AdaptedProcess::zeros(big_n, 1, n),
            ..self.clone()
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        [&self.drift, &self.sigma, &self.q_lin, &self.rho, &self.g]
            .iter()
            .all(|p| p.is_zero())
    }

    /// True when every affine term is deterministic.
    pub fn has_deterministic_affine(&self) -> bool {
        [&self.drift, &self.sigma, &self.q_lin, &self.rho, &self.g]
            .iter()
            .all(|p| p.is_deterministic())
    }

    pub fn with_x0(&self, x0: Vector) -> Self {
        LQProblem { x0, ..self.clone() }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_json(&value)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let root = value
            .as_object()
            .ok_or_else(|| Error::parse("<root>", "expected a JSON object"))?;
        let big_n = read_count(root, "horizon")?;
        let n = read_count(root, "state_dim")?;
        let m = read_count(root, "control_dim")?;
        let dynamics = read_object(root, "dynamics")?;
        let cost = read_object(root, "cost")?;

        let seq = |obj: &Map<String, Value>, section: &str, name: &str, rows: usize, cols: usize| {
            let field = format!("{section}.{name}");
            let v = obj.get(name).ok_or_else(|| Error::parse(&field, "missing field"))?;
            matrix_seq_from_json(v, big_n, rows, cols, &field)
        };
        let proc_ = |obj: &Map<String, Value>, section: &str, name: &str, start: usize, len: usize, dim: usize| {
            let field = format!("{section}.{name}");
            match obj.get(name) {
                None | Some(Value::Null) => Ok(AdaptedProcess::zeros(start, len, dim)),
                Some(v) => AdaptedProcess::from_json(v, start, len, dim, &field),
            }
        };

        let a = seq(dynamics, "dynamics", "A", n, n)?;
        let b = seq(dynamics, "dynamics", "B", n, m)?;
        let c = seq(dynamics, "dynamics", "C", n, n)?;
        let d = seq(dynamics, "dynamics", "D", n, m)?;
        let drift = proc_(dynamics, "dynamics", "b", 0, big_n, n)?;
        let sigma = proc_(dynamics, "dynamics", "sigma", 0, big_n, n)?;

        let q = symmetric_seq(seq(cost, "cost", "Q", n, n)?, "cost.Q")?;
        let s = seq(cost, "cost", "S", m, n)?;
        let r = symmetric_seq(seq(cost, "cost", "R", m, m)?, "cost.R")?;
        let h_val = cost.get("H").ok_or_else(|| Error::parse("cost.H", "missing field"))?;
        let h = symmetric(matrix_from_json(h_val, n, n, "cost.H")?, "cost.H")?;
        let q_lin = proc_(cost, "cost", "q", 0, big_n, n)?;
        let rho = proc_(cost, "cost", "rho", 0, big_n, m)?;
        let g = proc_(cost, "cost", "g", big_n, 1, n)?;

        let x0 = vector_from_json(
            root.get("x0").ok_or_else(|| Error::parse("x0", "missing field"))?,
            n,
            "x0",
        )?;
        let noise = match root.get("noise") {
            None | Some(Value::Null) => NoiseSpec::default(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::parse("noise", e.to_string()))?,
        };
        let p = LQProblem {
            horizon: big_n,
            state_dim: n,
            control_dim: m,
            a,
            b,
            c,
            d,
            q,
            s,
            r,
            h,
            drift,
            sigma,
            q_lin,
            rho,
            g,
            x0,
            noise,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Value {
        let seq = |ms: &[Matrix]| Value::Array(ms.iter().map(matrix_to_json).collect());
        let g = if self.g.is_deterministic() {
            vector_to_json(self.g.at(self.horizon, 0))
        } else {
            self.g.to_json()
        };
        json!({
            "horizon": self.horizon,
            "state_dim": self.state_dim,
            "control_dim": self.control_dim,
            "dynamics": {
                "A": seq(&self.a),
                "B": seq(&self.b),
                "C": seq(&self.c),
                "D": seq(&self.d),
                "b": self.drift.to_json(),
                "sigma": self.sigma.to_json(),
            },
            "cost": {
                "Q": seq(&self.q),
                "S": seq(&self.s),
                "R": seq(&self.r),
                "H": matrix_to_json(&self.h),
                "q": self.q_lin.to_json(),
                "rho": self.rho.to_json(),
                "g": g,
            },
            "x0": vector_to_json(&self.x0),
            "noise": serde_json::to_value(self.noise).expect("noise spec serializes"),
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("problem serializes")
    }
}

pub fn load_problem(text: &str) -> Result<LQProblem> {
    LQProblem::from_json_str(text)
}

pub fn load_problem_file(path: impl AsRef<Path>) -> Result<LQProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    load_problem(&text)
}

pub fn homogeneous_of(p: &LQProblem) -> LQProblem {
    p.homogeneous()
}

/// Feedback pair `(K_t, v_t)` on the window `0..gains.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    pub gains: Vec<Matrix>,
    pub offsets: AdaptedProcess,
}

impl Strategy {
    pub fn new(gains: Vec<Matrix>, offsets: AdaptedProcess) -> Result<Self> {
        if offsets.start() != 0 || offsets.len() != gains.len() {
            return Err(Error::invalid(
                "strategy offsets must cover the same window as the gains",
            ));
        }
        if let Some(k) = gains.first() {
            if offsets.dim() != k.nrows() || gains.iter().any(|g| g.shape() != k.shape()) {
                return Err(Error::invalid("strategy gains and offsets have inconsistent shapes"));
            }
        }
        Ok(Strategy { gains, offsets })
    }

    /// Constant gain and zero offset over the full horizon.
    pub fn constant_gain(p: &LQProblem, k: Matrix) -> Result<Self> {
        Self::new(vec![k; p.horizon], AdaptedProcess::zeros(0, p.horizon, p.control_dim))
    }

    pub fn zero(p: &LQProblem) -> Self {
        Strategy {
            gains: vec![Matrix::zeros(p.control_dim, p.state_dim); p.horizon],
            offsets: AdaptedProcess::zeros(0, p.horizon, p.control_dim),
        }
    }

    /// Number of steps covered, i.e. `m_end + 1`.
    pub fn window_len(&self) -> usize {
        self.gains.len()
    }

    pub fn check_against(&self, p: &LQProblem) -> Result<()> {
        if self.window_len() > p.horizon {
            return Err(Error::invalid("strategy window exceeds the horizon"));
        }
        for (t, k) in self.gains.iter().enumerate() {
            if k.shape() != (p.control_dim, p.state_dim) {
                return Err(Error::invalid(format!("strategy gain at t={t} has the wrong shape")));
            }
        }
        if self.window_len() > 0 && self.offsets.dim() != p.control_dim {
            return Err(Error::invalid("strategy offsets have the wrong dimension"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "gains": Value::Array(self.gains.iter().map(matrix_to_json).collect()),
            "offsets": self.offsets.to_json(),
        })
    }

    /// Parses `{"gains": [...], "offsets": ...}`; missing offsets are zero.
    pub fn from_json(value: &Value, p: &LQProblem) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse("strategy", "expected an object"))?;
        let gains_v = obj
            .get("gains")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::parse("strategy.gains", "missing list of gain matrices"))?;
        let len = gains_v.len();
        let gains = gains_v
            .iter()
            .enumerate()
            .map(|(t, g)| matrix_from_json(g, p.control_dim, p.state_dim, &format!("strategy.gains[t={t}]")))
            .collect::<Result<Vec<_>>>()?;
        let offsets = match obj.get("offsets") {
            None | Some(Value::Null) => AdaptedProcess::zeros(0, len, p.control_dim),
            Some(v) => AdaptedProcess::from_json(v, 0, len, p.control_dim, "strategy.offsets")?,
        };
        let s = Strategy::new(gains, offsets)?;
        s.check_against(p)?;
        Ok(s)
    }
}

fn check_matrix(m: &Matrix, rows: usize, cols: usize, field: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::parse(
            field,
            format!("expected {rows}x{cols}, found {}x{}", m.nrows(), m.ncols()),
        ));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::parse(field, "non-finite entry"));
    }
    Ok(())
}

fn symmetric(m: Matrix, field: &str) -> Result<Matrix> {
    let asym = max_abs(&(&m - m.transpose()));
    let tol = Tolerances::default().residual_tol;
    if asym > tol * (1.0 + max_abs(&m)) {
        return Err(Error::parse(
            field,
            format!("matrix is not symmetric (asymmetry {asym:e})"),
        ));
    }
    Ok(symmetrize(&m))
}

fn symmetric_seq(ms: Vec<Matrix>, field: &str) -> Result<Vec<Matrix>> {
    ms.into_iter()
        .enumerate()
        .map(|(t, m)| symmetric(m, &format!("{field}[t={t}]")))
        .collect()
}

fn read_count(root: &Map<String, Value>, name: &str) -> Result<usize> {
    root.get(name)
        .and_then(Value::as_u64)
        .filter(|&v| v >= 1)
        .map(|v| v as usize)
        .ok_or_else(|| Error::parse(name, "expected a positive integer"))
}

fn read_object<'a>(root: &'a Map<String, Value>, name: &str) -> Result<&'a Map<String, Value>> {
    root.get(name)
        .and_then(Value::as_object)
        .ok_or_else(|| Error::parse(name, "missing object"))
}

pub(crate) fn matrix_to_json(m: &Matrix) -> Value {
    Value::Array(
        m.row_iter()
            .map(|row| Value::Array(row.iter().map(|x| json!(x)).collect()))
            .collect(),
    )
}

pub(crate) fn matrix_from_json(value: &Value, rows: usize, cols: usize, field: &str) -> Result<Matrix> {
    let rs = value
        .as_array()
        .ok_or_else(|| Error::parse(field, "expected a nested array"))?;
    if rs.len() != rows {
        return Err(Error::parse(field, format!("expected {rows} rows, found {}", rs.len())));
    }
    let mut out = Matrix::zeros(rows, cols);
    for (i, row) in rs.iter().enumerate() {
        let entries = row
            .as_array()
            .ok_or_else(|| Error::parse(field, format!("row {i} is not an array")))?;
        if entries.len() != cols {
            return Err(Error::parse(
                field,
                format!("expected {rows}x{cols}, row {i} has {} entries", entries.len()),
            ));
        }
        for (j, e) in entries.iter().enumerate() {
            let x = e
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(field, format!("entry ({i},{j}) is not a finite number")))?;
            out[(i, j)] = x;
        }
    }
    Ok(out)
}

/// A single matrix (repeated over time) or a list of `len` matrices.
fn matrix_seq_from_json(value: &Value, len: usize, rows: usize, cols: usize, field: &str) -> Result<Vec<Matrix>> {
    let items = value
        .as_array()
        .ok_or_else(|| Error::parse(field, "expected a nested array"))?;
    let depth3 = items
        .first()
        .and_then(Value::as_array)
        .and_then(|r| r.first())
        .is_some_and(Value::is_array);
    if !depth3 {
        let m = matrix_from_json(value, rows, cols, field)?;
        return Ok(vec![m; len]);
    }
    if items.len() != len {
        return Err(Error::parse(
            field,
            format!("expected {len} matrices, found {}", items.len()),
        ));
    }
    items
        .iter()
        .enumerate()
        .map(|(t, v)| matrix_from_json(v, rows, cols, &format!("{field}[t={t}]")))
        .collect()
}
