//! Binary ±1 scenario tree and processes adapted to it.
//!
//! A node at depth `t` is one realization of the signs `w_0, ..., w_{t-1}`.
//! Nodes are numbered `0..2^t` with the first sign as the most significant
//! bit; `+` is bit 0 and `-` is bit 1, so the children of node `k` are `2k`
//! (`w_t = +1`) and `2k + 1` (`w_t = -1`). Each depth carries probability
//! `2^-t` per node.
//!
//! An [`AdaptedProcess`] assigns a vector to every node of a contiguous band
//! of depths. A quantity that is `F_{t-1}`-measurable (a control `u_t`, a
//! disturbance `b_t`, a co-state `λ_{t-1}`) lives at depth `t`. Levels that do
//! not depend on the noise are stored once as [`Level::Constant`].

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::matnum::Vector;

/// Largest depth for which full node enumeration is allowed.
pub const MAX_TREE_DEPTH: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioTree {
    depth: usize,
}

impl ScenarioTree {
    pub fn new(depth: usize) -> Result<Self> {
        if depth > MAX_TREE_DEPTH {
            return Err(Error::InstanceTooLarge {
                size: depth,
                cap: MAX_TREE_DEPTH,
            });
        }
        Ok(ScenarioTree { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `2^(N+1) - 1`.
    pub fn node_count(&self) -> usize {
        (1usize << (self.depth + 1)) - 1
    }

    pub fn leaves(&self) -> usize {
        width(self.depth)
    }
}

/// Number of nodes at depth `t`.
#[inline]
pub fn width(t: usize) -> usize {
    1usize << t
}

/// Probability of a single node at depth `t`.
#[inline]
pub fn weight(t: usize) -> f64 {
    0.5f64.powi(t as i32)
}

#[inline]
pub fn children(node: usize) -> [usize; 2] {
    [2 * node, 2 * node + 1]
}

/// The sign `w` that leads into `child` from its parent.
#[inline]
pub fn child_sign(child: usize) -> f64 {
    if child & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn parent(node: usize) -> usize {
    node >> 1
}

/// Sign string of a node, e.g. `"+-"`.
pub fn node_key(depth: usize, node: usize) -> String {
    (0..depth)
        .map(|i| if (node >> (depth - 1 - i)) & 1 == 0 { '+' } else { '-' })
        .collect()
}

pub fn parse_node_key(key: &str) -> Option<(usize, usize)> {
    let mut node = 0usize;
    let mut depth = 0usize;
    for ch in key.chars() {
        let bit = match ch {
            '+' => 0,
            '-' => 1,
            _ => return None,
        };
        node = node * 2 + bit;
        depth += 1;
        if depth > MAX_TREE_DEPTH {
            return None;
        }
    }
    Some((depth, node))
}

/// Node reached by a sequence of drawn signs (`>= 0` counts as `+`).
pub fn node_of_signs(signs: &[f64]) -> usize {
    signs.iter().fold(0usize, |acc, &w| acc * 2 + usize::from(w < 0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Level {
    Constant(Vector),
    Nodes(Vec<Vector>),
}

impl Level {
    pub fn at(&self, node: usize) -> &Vector {
        match self {
            Level::Constant(v) => v,
            Level::Nodes(vs) => &vs[node],
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Level::Constant(_))
    }
}

/// Vector-valued process on depths `start .. start + len` of the ±1 tree.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedProcess {
    start: usize,
    dim: usize,
    levels: Vec<Level>,
}

impl AdaptedProcess {
    pub fn new(start: usize, dim: usize, levels: Vec<Level>) -> Result<Self> {
        for (i, level) in levels.iter().enumerate() {
            let depth = start + i;
            let ok = match level {
                Level::Constant(v) => v.len() == dim,
                Level::Nodes(vs) => {
                    depth <= MAX_TREE_DEPTH && vs.len() == width(depth) && vs.iter().all(|v| v.len() == dim)
                }
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "adapted process level at depth {depth} has the wrong shape"
                )));
            }
        }
        Ok(AdaptedProcess { start, dim, levels })
    }

    pub fn zeros(start: usize, len: usize, dim: usize) -> Self {
        AdaptedProcess {
            start,
            dim,
            levels: vec![Level::Constant(Vector::zeros(dim)); len],
        }
    }

    /// One deterministic vector per depth.
    pub fn deterministic(start: usize, dim: usize, values: Vec<Vector>) -> Result<Self> {
        Self::new(start, dim, values.into_iter().map(Level::Constant).collect())
    }

    /// Full node tables, one `Vec` of `2^depth` vectors per depth.
    pub fn from_nodes(start: usize, dim: usize, nodes: Vec<Vec<Vector>>) -> Result<Self> {
        Self::new(start, dim, nodes.into_iter().map(Level::Nodes).collect())
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// One past the last depth.
    pub fn end(&self) -> usize {
        self.start + self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self, depth: usize) -> &Level {
        &self.levels[depth - self.start]
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn at(&self, depth: usize, node: usize) -> &Vector {
        self.level(depth).at(node)
    }

    pub fn is_constant_at(&self, depth: usize) -> bool {
        self.level(depth).is_constant()
    }

    pub fn is_deterministic(&self) -> bool {
        self.levels.iter().all(Level::is_constant)
    }

    pub fn is_zero(&self) -> bool {
        self.levels.iter().all(|l| match l {
            Level::Constant(v) => v.iter().all(|x| *x == 0.0),
            Level::Nodes(vs) => vs.iter().all(|v| v.iter().all(|x| *x == 0.0)),
        })
    }

    /// Same process with every level expanded to per-node storage.
    pub fn expanded(&self) -> Self {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Level::Constant(v) => Level::Nodes(vec![v.clone(); width(self.start + i)]),
                nodes => nodes.clone(),
            })
            .collect();
        AdaptedProcess {
            start: self.start,
            dim: self.dim,
            levels,
        }
    }

    /// Node-wise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.same_shape(other)?;
        let levels = (self.start..self.end())
            .map(|d| {
                let (x, y) = (self.level(d), other.level(d));
                match (x, y) {
                    (Level::Constant(u), Level::Constant(v)) => Level::Constant(u * a + v * b),
                    _ => Level::Nodes((0..width(d)).map(|k| x.at(k) * a + y.at(k) * b).collect()),
                }
            })
            .collect();
        Ok(AdaptedProcess {
            start: self.start,
            dim: self.dim,
            levels,
        })
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.start != other.start || self.len() != other.len() || self.dim != other.dim {
            return Err(Error::invalid("adapted processes have different shapes"));
        }
        Ok(())
    }

    /// `E Σ_t |v_t|^2` with tree weights.
    pub fn mean_square_norm(&self) -> f64 {
        (self.start..self.end())
            .map(|d| match self.level(d) {
                Level::Constant(v) => v.norm_squared(),
                Level::Nodes(vs) => weight(d) * vs.iter().map(|v| v.norm_squared()).sum::<f64>(),
            })
            .sum()
    }

    /// Tree-weighted L² distance.
    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        Ok(self.combine(1.0, other, -1.0)?.mean_square_norm().sqrt())
    }

    /// Largest entrywise difference over all nodes.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        let mut worst = 0.0f64;
        for d in self.start..self.end() {
            for k in 0..width(d) {
                let diff = (self.at(d, k) - other.at(d, k)).amax();
                worst = worst.max(diff);
            }
        }
        Ok(worst)
    }

    /// Deterministic processes as a list of vectors, otherwise
    /// `{"tree": {"<signs>": [...]}}` covering every node.
    pub fn to_json(&self) -> Value {
        if self.is_deterministic() {
            Value::Array(self.levels.iter().map(|l| vector_to_json(l.at(0))).collect())
        } else {
            let mut map = Map::new();
            for d in self.start..self.end() {
                for k in 0..width(d) {
                    map.insert(node_key(d, k), vector_to_json(self.at(d, k)));
                }
            }
            json!({ "tree": Value::Object(map) })
        }
    }

    /// Parses a process covering depths `start .. start + len`.
    ///
    /// Accepts a single vector (repeated at every depth), a list of `len`
    /// vectors, or a complete `{"tree": {...}}` object.
    pub fn from_json(value: &Value, start: usize, len: usize, dim: usize, field: &str) -> Result<Self> {
        match value {
            Value::Object(obj) => {
                let tree = obj
                    .get("tree")
                    .and_then(Value::as_object)
                    .ok_or_else(|| Error::parse(field, "expected an array or a {\"tree\": {...}} object"))?;
                parse_tree(tree, start, len, dim, field)
            }
            Value::Array(items) => {
                if items.iter().all(Value::is_number) {
                    let v = vector_from_json(value, dim, field)?;
                    return Ok(AdaptedProcess {
                        start,
                        dim,
                        levels: vec![Level::Constant(v); len],
                    });
                }
                if items.len() != len {
                    return Err(Error::parse(
                        field,
                        format!("expected {len} vectors, found {}", items.len()),
                    ));
                }
                let levels = items
                    .iter()
                    .enumerate()
                    .map(|(i, item)| {
                        vector_from_json(item, dim, &format!("{field}[{}]", start + i)).map(Level::Constant)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AdaptedProcess { start, dim, levels })
            }
            _ => Err(Error::parse(field, "expected an array or a tree object")),
        }
    }

    /// Node-keyed map for reports.
    pub fn to_keyed_map(&self) -> BTreeMap<String, Vec<f64>> {
        let mut map = BTreeMap::new();
        for d in self.start..self.end() {
            for k in 0..width(d) {
                map.insert(node_key(d, k), self.at(d, k).iter().cloned().collect());
            }
        }
        map
    }
}

fn parse_tree(tree: &Map<String, Value>, start: usize, len: usize, dim: usize, field: &str) -> Result<AdaptedProcess> {
    let end = start + len;
    if end > MAX_TREE_DEPTH + 1 {
        return Err(Error::InstanceTooLarge {
            size: end - 1,
            cap: MAX_TREE_DEPTH,
        });
    }
    let mut nodes: Vec<Vec<Option<Vector>>> = (start..end).map(|d| vec![None; width(d)]).collect();
    for (key, v) in tree {
        let (depth, node) =
            parse_node_key(key).ok_or_else(|| Error::parse(field, format!("invalid sign string {key:?}")))?;
        if depth < start || depth >= end {
            return Err(Error::parse(
                field,
                format!("sign string {key:?} has length {depth}, expected {start}..{}", end - 1),
            ));
        }
        let vec = vector_from_json(v, dim, &format!("{field}[{key:?}]"))?;
        nodes[depth - start][node] = Some(vec);
    }
    let levels = nodes
        .into_iter()
        .enumerate()
        .map(|(i, lvl)| {
            let d = start + i;
            lvl.into_iter()
                .enumerate()
                .map(|(k, v)| {
                    v.ok_or_else(|| Error::parse(field, format!("missing node {:?} at t={d}", node_key(d, k))))
                })
                .collect::<Result<Vec<_>>>()
                .map(Level::Nodes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AdaptedProcess { start, dim, levels })
}

pub(crate) fn vector_to_json(v: &Vector) -> Value {
    Value::Array(v.iter().map(|x| json!(x)).collect())
}

pub(crate) fn vector_from_json(value: &Value, dim: usize, field: &str) -> Result<Vector> {
    let items = value
        .as_array()
        .ok_or_else(|| Error::parse(field, "expected an array of numbers"))?;
    if items.len() != dim {
        return Err(Error::parse(
            field,
            format!("expected length {dim}, found {}", items.len()),
        ));
    }
    let mut out = Vector::zeros(dim);
    for (i, item) in items.iter().enumerate() {
        let x = item
            .as_f64()
            .ok_or_else(|| Error::parse(field, format!("entry {i} is not a number")))?;
        if !x.is_finite() {
            return Err(Error::parse(field, format!("entry {i} is not finite")));
        }
        out[i] = x;
    }
    Ok(out)
}
