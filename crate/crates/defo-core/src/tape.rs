//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one computation as a tape of
//! nodes. Node indices only ever point backwards, so the tape is a DAG in
//! topological order and the backward pass is a single reverse sweep that
//! visits each node exactly once, accumulating gradients additively when a
//! node feeds several consumers.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Minimum l2 norm accepted by [`Graph::l2_normalize`].
pub const L2_NORM_MIN: f64 = 1e-12;

/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRows(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    L2Normalize(Var, T),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Vec<T>,
    },
    Gelu(Var),
    MeanRows(Var),
    Row(Var, usize),
    SliceRows(Var, usize, usize),
    Slice0(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Concat1(Vec<Var>),
    Reshape(Var),
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Sum(Var),
    MaskGrad(Var, Vec<bool>),
    GatherRows(Var, Vec<usize>),
    ImageToPatches(Var, usize),
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// The recording tape. Single-threaded per computation; distinct graphs
/// can live on distinct threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

#[cfg(debug_assertions)]
fn guard_finite<T: Scalar>(op: &'static str, values: &[T]) {
    assert!(
        values.iter().all(|v| v.is_finite()),
        "non-finite value produced by {op}"
    );
}

#[cfg(not(debug_assertions))]
fn guard_finite<T: Scalar>(_op: &'static str, _values: &[T]) {}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], r: usize, s: usize, t: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * t];
    for i in 0..r {
        for p in 0..s {
            let aip = a[i * s + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * t..(p + 1) * t];
            let orow = &mut out[i * t..(i + 1) * t];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn softmax_raw<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        let grad = vec![T::zero(); values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a tensor onto the tape; gradient tracking follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// A non-differentiable constant built in place.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidInput(format!(
                "constant: shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    pub fn values(&self, v: Var) -> &[T] {
        &self.node(v).values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> &[T] {
        &self.node(v).grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.node(v).shape.clone(), self.node(v).values.clone())
            .expect("node shape is consistent")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(Error::DimensionMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let values: Vec<T> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| x + y)
            .collect();
        guard_finite("add", &values);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), values, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let values: Vec<T> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| x - y)
            .collect();
        guard_finite("sub", &values);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), values, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let values: Vec<T> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| x * y)
            .collect();
        guard_finite("mul", &values);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), values, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let values: Vec<T> = self.node(a).values.iter().map(|&x| x * c).collect();
        guard_finite("scale", &values);
        let needs = self.needs(a);
        self.push(self.node(a).shape.clone(), values, needs, Op::Scale(a, c))
    }

    /// Broadcast-adds a `[d]` vector to every row of an `[r, d]` matrix.
    pub fn add_rows(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, d) = self.dims2(x, "add_rows")?;
        if self.node(b).shape != [d] {
            return Err(Error::DimensionMismatch {
                op: "add_rows",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let bvals = &self.node(b).values;
        let mut values = self.node(x).values.clone();
        for row in 0..r {
            for j in 0..d {
                values[row * d + j] += bvals[j];
            }
        }
        guard_finite("add_rows", &values);
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(vec![r, d], values, needs, Op::AddRows(x, b)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = self.dims2(a, "matmul")?;
        let (s2, t) = self.dims2(b, "matmul")?;
        if s != s2 {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let values = matmul_raw(&self.node(a).values, &self.node(b).values, r, s, t);
        guard_finite("matmul", &values);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![r, t], values, needs, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let av = &self.node(a).values;
        let mut values = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = av[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![c, r], values, needs, Op::Transpose(a)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        if self.node(a).shape.len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "dot",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let value: T = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(&x, &y)| x * y)
            .sum();
        guard_finite("dot", std::slice::from_ref(&value));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![], vec![value], needs, Op::Dot(a, b)))
    }

    // ---- nonlinear ----

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        if self.node(z).shape.len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "softmax",
                lhs: self.node(z).shape.clone(),
                rhs: vec![],
            });
        }
        let values = softmax_raw(&self.node(z).values);
        guard_finite("softmax", &values);
        let needs = self.needs(z);
        Ok(self.push(self.node(z).shape.clone(), values, needs, Op::Softmax(z)))
    }

    /// Scales a 1-D vector to unit l2 norm; errors on a near-zero input.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        if self.node(x).shape.len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "l2_normalize",
                lhs: self.node(x).shape.clone(),
                rhs: vec![],
            });
        }
        let sq: T = self.node(x).values.iter().map(|&v| v * v).sum();
        let norm = sq.sqrt();
        if norm.to_f64().unwrap_or(0.0) <= L2_NORM_MIN {
            return Err(Error::DegenerateVector {
                norm: norm.to_f64().unwrap_or(0.0),
                min: L2_NORM_MIN,
            });
        }
        let values: Vec<T> = self.node(x).values.iter().map(|&v| v / norm).collect();
        guard_finite("l2_normalize", &values);
        let needs = self.needs(x);
        Ok(self.push(
            self.node(x).shape.clone(),
            values,
            needs,
            Op::L2Normalize(x, norm),
        ))
    }

    /// Layer normalization across the last axis of a `[d]` vector or each
    /// row of an `[r, d]` matrix, followed by the gain/bias affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        let (rows, d) = match shape.as_slice() {
            [d] => (1, *d),
            [r, d] => (*r, *d),
            _ => {
                return Err(Error::DimensionMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        if d < 2 {
            return Err(Error::InvalidInput(
                "layer_norm needs at least 2 features".into(),
            ));
        }
        if self.node(gain).shape != [d] || self.node(bias).shape != [d] {
            return Err(Error::DimensionMismatch {
                op: "layer_norm",
                lhs: self.node(gain).shape.clone(),
                rhs: self.node(bias).shape.clone(),
            });
        }
        let eps = lit::<T>(LAYER_NORM_EPS);
        let dn = lit::<T>(d as f64);
        let xv = &self.node(x).values;
        let gv = self.node(gain).values.clone();
        let bv = self.node(bias).values.clone();
        let mut normalized = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut values = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean: T = row.iter().cloned().sum::<T>() / dn;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let n = (row[j] - mean) * istd;
                normalized[r * d + j] = n;
                values[r * d + j] = gv[j] * n + bv[j];
            }
        }
        guard_finite("layer_norm", &values);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            shape,
            values,
            needs,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Bidirectional scaled dot-product attention on `[m, d_h]` inputs
    /// (no causal mask).
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (m, dh) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let scale = T::one() / lit::<T>((dh as f64).sqrt());
        let qv = &self.node(q).values;
        let kv = &self.node(k).values;
        let vv = &self.node(v).values;
        let mut weights = vec![T::zero(); m * m];
        for i in 0..m {
            let mut scores = vec![T::zero(); m];
            for j in 0..m {
                let mut s = T::zero();
                for p in 0..dh {
                    s += qv[i * dh + p] * kv[j * dh + p];
                }
                scores[j] = s * scale;
            }
            let probs = softmax_raw(&scores);
            weights[i * m..(i + 1) * m].copy_from_slice(&probs);
        }
        let values = matmul_raw(&weights, vv, m, m, dh);
        guard_finite("attention", &values);
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            vec![m, dh],
            values,
            needs,
            Op::Attention { q, k, v, weights },
        ))
    }

    /// Tanh-approximated GELU, elementwise.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = lit::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
        let aa = lit::<T>(0.044715);
        let half = lit::<T>(0.5);
        let values: Vec<T> = self
            .node(a)
            .values
            .iter()
            .map(|&x| {
                let u = c * (x + aa * x * x * x);
                half * x * (T::one() + u.tanh())
            })
            .collect();
        guard_finite("gelu", &values);
        let needs = self.needs(a);
        self.push(self.node(a).shape.clone(), values, needs, Op::Gelu(a))
    }

    /// Cross-entropy of 1-D logits against a class index, computed in
    /// log-sum-exp form so extreme logits stay finite.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        if self.node(logits).shape.len() != 1 {
            return Err(Error::DimensionMismatch {
                op: "cross_entropy",
                lhs: self.node(logits).shape.clone(),
                rhs: vec![],
            });
        }
        let k = self.node(logits).values.len();
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = &self.node(logits).values;
        let max = z.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().cloned().sum();
        let loss = max + total.ln() - z[label];
        guard_finite("cross_entropy", std::slice::from_ref(&loss));
        let probs: Vec<T> = exps.into_iter().map(|e| e / total).collect();
        let needs = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            needs,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    // ---- reductions and shape ----

    pub fn sum(&mut self, a: Var) -> Var {
        let value: T = self.node(a).values.iter().cloned().sum();
        guard_finite("sum", std::slice::from_ref(&value));
        let needs = self.needs(a);
        self.push(vec![], vec![value], needs, Op::Sum(a))
    }

    /// Mean over the rows of an `[r, d]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.dims2(x, "mean_rows")?;
        let inv = T::one() / lit::<T>(r as f64);
        let xv = &self.node(x).values;
        let mut values = vec![T::zero(); d];
        for row in 0..r {
            for j in 0..d {
                values[j] += xv[row * d + j];
            }
        }
        for v in values.iter_mut() {
            *v = *v * inv;
        }
        guard_finite("mean_rows", &values);
        let needs = self.needs(x);
        Ok(self.push(vec![d], values, needs, Op::MeanRows(x)))
    }

    /// Extracts row `i` of an `[r, d]` matrix as a `[d]` vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "row")?;
        if i >= r {
            return Err(Error::InvalidInput(format!(
                "row index {i} out of range for {r} rows"
            )));
        }
        let values = self.node(x).values[i * d..(i + 1) * d].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![d], values, needs, Op::Row(x, i)))
    }

    /// Extracts rows `from..to` of an `[r, d]` matrix.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "slice_rows")?;
        if from >= to || to > r {
            return Err(Error::InvalidInput(format!(
                "slice_rows {from}..{to} out of range for {r} rows"
            )));
        }
        let values = self.node(x).values[from * d..to * d].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![to - from, d], values, needs, Op::SliceRows(x, from, to)))
    }

    /// Slices index `i` along the leading axis; shape `[n, ...]` becomes
    /// `[...]`.
    pub fn slice0(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = self.node(x).shape.clone();
        if shape.len() < 2 {
            return Err(Error::DimensionMismatch {
                op: "slice0",
                lhs: shape,
                rhs: vec![],
            });
        }
        let n = shape[0];
        if i >= n {
            return Err(Error::InvalidInput(format!(
                "slice0 index {i} out of range for leading dim {n}"
            )));
        }
        let block: usize = shape[1..].iter().product();
        let values = self.node(x).values[i * block..(i + 1) * block].to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape[1..].to_vec(), values, needs, Op::Slice0(x, i)))
    }

    /// Stacks parts as rows. Rank-1 parts contribute one row; rank-2 parts
    /// contribute their rows. All parts must share the row width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows of zero parts".into()));
        }
        let d = *self.node(parts[0]).shape.last().unwrap();
        let mut rows = 0;
        for &p in parts {
            let s = &self.node(p).shape;
            match s.as_slice() {
                [w] if *w == d => rows += 1,
                [r, w] if *w == d => rows += r,
                _ => {
                    return Err(Error::DimensionMismatch {
                        op: "concat_rows",
                        lhs: vec![d],
                        rhs: s.clone(),
                    })
                }
            }
        }
        let mut values = Vec::with_capacity(rows * d);
        for &p in parts {
            values.extend_from_slice(&self.node(p).values);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, d],
            values,
            needs,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Concatenates `[m, d_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of zero parts".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (mp, dp) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            total += dp;
        }
        let mut values = vec![T::zero(); m * total];
        let mut col = 0;
        for &p in parts {
            let dp = self.node(p).shape[1];
            for i in 0..m {
                let src = &self.node(p).values[i * dp..(i + 1) * dp];
                values[i * total + col..i * total + col + dp].copy_from_slice(src);
            }
            col += dp;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![m, total],
            values,
            needs,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Concatenates scalars and 1-D vectors into one vector.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat1 of zero parts".into()));
        }
        let mut values = Vec::new();
        for &p in parts {
            if self.node(p).shape.len() > 1 {
                return Err(Error::DimensionMismatch {
                    op: "concat1",
                    lhs: self.node(p).shape.clone(),
                    rhs: vec![],
                });
            }
            values.extend_from_slice(&self.node(p).values);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let len = values.len();
        Ok(self.push(vec![len], values, needs, Op::Concat1(parts.to_vec())))
    }

    /// Reinterprets the value buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).values.len() {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                lhs: self.node(a).shape.clone(),
                rhs: shape,
            });
        }
        let values = self.node(a).values.clone();
        let needs = self.needs(a);
        Ok(self.push(shape, values, needs, Op::Reshape(a)))
    }

    /// Identity forward; backward keeps gradient only where `keep` is true.
    /// Used to pin frozen head weights and fixed query positions.
    pub fn mask_grad(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.node(a).values.len() {
            return Err(Error::InvalidInput(format!(
                "mask_grad: mask length {} vs {} values",
                keep.len(),
                self.node(a).values.len()
            )));
        }
        let values = self.node(a).values.clone();
        let needs = self.needs(a);
        Ok(self.push(
            self.node(a).shape.clone(),
            values,
            needs,
            Op::MaskGrad(a, keep),
        ))
    }

    /// Table lookup: stacks `table` rows by index. Repeated indices
    /// accumulate their gradients into the same row.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::InvalidInput("gather_rows of zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::InvalidInput(format!(
                "gather_rows index {bad} out of range for {v} rows"
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            values.extend_from_slice(&self.node(table).values[r * d..(r + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![rows.len(), d],
            values,
            needs,
            Op::GatherRows(table, rows.to_vec()),
        ))
    }

    /// Splits an `[h, w, 3]` image into non-overlapping `patch`-sized
    /// squares; output row p holds patch p's pixels row-major, channels
    /// innermost.
    pub fn image_to_patches(&mut self, img: Var, patch: usize) -> Result<Var> {
        let shape = self.node(img).shape.clone();
        let (h, w) = match shape.as_slice() {
            [h, w, 3] => (*h, *w),
            _ => {
                return Err(Error::DimensionMismatch {
                    op: "image_to_patches",
                    lhs: shape,
                    rhs: vec![0, 0, 3],
                })
            }
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::InvalidInput(format!(
                "patch size {patch} does not divide image {h}x{w}"
            )));
        }
        let (ph, pw) = (h / patch, w / patch);
        let cols = patch * patch * 3;
        let iv = &self.node(img).values;
        let mut values = vec![T::zero(); ph * pw * cols];
        for py in 0..ph {
            for px in 0..pw {
                let p = py * pw + px;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..3 {
                            let src = ((py * patch + dy) * w + (px * patch + dx)) * 3 + c;
                            let dst = p * cols + (dy * patch + dx) * 3 + c;
                            values[dst] = iv[src];
                        }
                    }
                }
            }
        }
        let needs = self.needs(img);
        Ok(self.push(
            vec![ph * pw, cols],
            values,
            needs,
            Op::ImageToPatches(img, patch),
        ))
    }

    // ---- backward ----

    fn add_grad(&mut self, v: Var, delta: &[T]) {
        let g = &mut self.nodes[v.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    /// Reverse sweep from a scalar root. Every node is visited once, in
    /// reverse topological order; gradients accumulate additively across
    /// consumers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.node(root).values.len() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.node(root).shape.clone(),
            });
        }
        self.nodes[root.0].grad[0] = T::one();
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                    if self.needs(b) {
                        self.add_grad(b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                    if self.needs(b) {
                        let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                        self.add_grad(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da: Vec<T> = g
                            .iter()
                            .zip(&self.node(b).values)
                            .map(|(&gi, &bv)| gi * bv)
                            .collect();
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<T> = g
                            .iter()
                            .zip(&self.node(a).values)
                            .map(|(&gi, &av)| gi * av)
                            .collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    if self.needs(a) {
                        let da: Vec<T> = g.iter().map(|&gi| gi * c).collect();
                        self.add_grad(a, &da);
                    }
                }
                Op::AddRows(x, b) => {
                    let (x, b) = (*x, *b);
                    let d = self.node(b).values.len();
                    if self.needs(x) {
                        self.add_grad(x, &g);
                    }
                    if self.needs(b) {
                        let rows = g.len() / d;
                        let mut db = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] += g[r * d + j];
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let r = self.node(a).shape[0];
                    let s = self.node(a).shape[1];
                    let t = self.node(b).shape[1];
                    if self.needs(a) {
                        // dA = g . B^T
                        let bv = &self.node(b).values;
                        let mut da = vec![T::zero(); r * s];
                        for i in 0..r {
                            for p in 0..s {
                                let mut acc = T::zero();
                                for j in 0..t {
                                    acc += g[i * t + j] * bv[p * t + j];
                                }
                                da[i * s + p] = acc;
                            }
                        }
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        // dB = A^T . g
                        let av = self.node(a).values.clone();
                        let mut db = vec![T::zero(); s * t];
                        for p in 0..s {
                            for i in 0..r {
                                let aip = av[i * s + p];
                                if aip == T::zero() {
                                    continue;
                                }
                                for j in 0..t {
                                    db[p * t + j] += aip * g[i * t + j];
                                }
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let (r, c) = (self.node(a).shape[0], self.node(a).shape[1]);
                        let mut da = vec![T::zero(); r * c];
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] = g[j * r + i];
                            }
                        }
                        self.add_grad(a, &da);
                    }
                }
                Op::Softmax(z) => {
                    let z = *z;
                    if self.needs(z) {
                        let y = &self.nodes[i].values;
                        let inner: T = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                        let dz: Vec<T> = g
                            .iter()
                            .zip(y)
                            .map(|(&gi, &yi)| yi * (gi - inner))
                            .collect();
                        self.add_grad(z, &dz);
                    }
                }
                Op::L2Normalize(x, norm) => {
                    let (x, norm) = (*x, *norm);
                    if self.needs(x) {
                        let y = &self.nodes[i].values;
                        let inner: T = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                        let dx: Vec<T> = g
                            .iter()
                            .zip(y)
                            .map(|(&gi, &yi)| (gi - inner * yi) / norm)
                            .collect();
                        self.add_grad(x, &dx);
                    }
                }
                Op::LayerNormRows {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let normalized = normalized.clone();
                    let inv_std = inv_std.clone();
                    let d = self.node(gain).values.len();
                    let rows = normalized.len() / d;
                    let dn = lit::<T>(d as f64);
                    if self.needs(gain) {
                        let mut dg = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * normalized[r * d + j];
                            }
                        }
                        self.add_grad(gain, &dg);
                    }
                    if self.needs(bias) {
                        let mut db = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] += g[r * d + j];
                            }
                        }
                        self.add_grad(bias, &db);
                    }
                    if self.needs(x) {
                        let gv = self.node(gain).values.clone();
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            let mut mean_dn = T::zero();
                            let mut mean_dn_n = T::zero();
                            for j in 0..d {
                                let dnorm = g[r * d + j] * gv[j];
                                mean_dn += dnorm;
                                mean_dn_n += dnorm * normalized[r * d + j];
                            }
                            mean_dn = mean_dn / dn;
                            mean_dn_n = mean_dn_n / dn;
                            for j in 0..d {
                                let dnorm = g[r * d + j] * gv[j];
                                dx[r * d + j] = inv_std[r]
                                    * (dnorm - mean_dn - normalized[r * d + j] * mean_dn_n);
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::Attention { q, k, v, weights } => {
                    let (q, k, v) = (*q, *k, *v);
                    let weights = weights.clone();
                    let (m, dh) = (self.node(q).shape[0], self.node(q).shape[1]);
                    let scale = T::one() / lit::<T>((dh as f64).sqrt());
                    // dV = A^T . g
                    if self.needs(v) {
                        let mut dv = vec![T::zero(); m * dh];
                        for j in 0..m {
                            for r in 0..m {
                                let a = weights[r * m + j];
                                if a == T::zero() {
                                    continue;
                                }
                                for p in 0..dh {
                                    dv[j * dh + p] += a * g[r * dh + p];
                                }
                            }
                        }
                        self.add_grad(v, &dv);
                    }
                    if self.needs(q) || self.needs(k) {
                        // dA = g . V^T, then softmax backward per row.
                        let vv = self.node(v).values.clone();
                        let mut ds = vec![T::zero(); m * m];
                        for r in 0..m {
                            let mut da = vec![T::zero(); m];
                            for j in 0..m {
                                let mut acc = T::zero();
                                for p in 0..dh {
                                    acc += g[r * dh + p] * vv[j * dh + p];
                                }
                                da[j] = acc;
                            }
                            let arow = &weights[r * m..(r + 1) * m];
                            let inner: T =
                                da.iter().zip(arow).map(|(&x, &a)| x * a).sum();
                            for j in 0..m {
                                ds[r * m + j] = arow[j] * (da[j] - inner);
                            }
                        }
                        if self.needs(q) {
                            let kv = self.node(k).values.clone();
                            let mut dq = vec![T::zero(); m * dh];
                            for r in 0..m {
                                for j in 0..m {
                                    let s = ds[r * m + j] * scale;
                                    if s == T::zero() {
                                        continue;
                                    }
                                    for p in 0..dh {
                                        dq[r * dh + p] += s * kv[j * dh + p];
                                    }
                                }
                            }
                            self.add_grad(q, &dq);
                        }
                        if self.needs(k) {
                            let qv = self.node(q).values.clone();
                            let mut dk = vec![T::zero(); m * dh];
                            for r in 0..m {
                                for j in 0..m {
                                    let s = ds[r * m + j] * scale;
                                    if s == T::zero() {
                                        continue;
                                    }
                                    for p in 0..dh {
                                        dk[j * dh + p] += s * qv[r * dh + p];
                                    }
                                }
                            }
                            self.add_grad(k, &dk);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let c = lit::<T>(0.797_884_560_802_865_4);
                        let aa = lit::<T>(0.044715);
                        let half = lit::<T>(0.5);
                        let three = lit::<T>(3.0);
                        let da: Vec<T> = self
                            .node(a)
                            .values
                            .iter()
                            .zip(&g)
                            .map(|(&x, &gi)| {
                                let u = c * (x + aa * x * x * x);
                                let t = u.tanh();
                                let sech2 = T::one() - t * t;
                                let du = c * (T::one() + three * aa * x * x);
                                gi * (half * (T::one() + t) + half * x * sech2 * du)
                            })
                            .collect();
                        self.add_grad(a, &da);
                    }
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let d = g.len();
                        let rows = self.node(x).values.len() / d;
                        let inv = T::one() / lit::<T>(rows as f64);
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            for j in 0..d {
                                dx[r * d + j] = g[j] * inv;
                            }
                        }
                        self.add_grad(x, &dx);
                    }
                }
                Op::Row(x, idx) => {
                    let (x, idx) = (*x, *idx);
                    if self.needs(x) {
                        let d = g.len();
                        let mut dx = vec![T::zero(); self.node(x).values.len()];
                        dx[idx * d..(idx + 1) * d].copy_from_slice(&g);
                        self.add_grad(x, &dx);
                    }
                }
                Op::SliceRows(x, from, _to) => {
                    let (x, from) = (*x, *from);
                    if self.needs(x) {
                        let mut dx = vec![T::zero(); self.node(x).values.len()];
                        let d = self.node(x).shape[1];
                        dx[from * d..from * d + g.len()].copy_from_slice(&g);
                        self.add_grad(x, &dx);
                    }
                }
                Op::Slice0(x, idx) => {
                    let (x, idx) = (*x, *idx);
                    if self.needs(x) {
                        let block = g.len();
                        let mut dx = vec![T::zero(); self.node(x).values.len()];
                        dx[idx * block..(idx + 1) * block].copy_from_slice(&g);
                        self.add_grad(x, &dx);
                    }
                }
                Op::ConcatRows(parts) | Op::Concat1(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.node(p).values.len();
                        if self.needs(p) {
                            let dp = g[off..off + len].to_vec();
                            self.add_grad(p, &dp);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let total = self.nodes[i].shape[1];
                    let m = self.nodes[i].shape[0];
                    let mut col = 0;
                    for p in parts {
                        let dp_width = self.node(p).shape[1];
                        if self.needs(p) {
                            let mut dp = vec![T::zero(); m * dp_width];
                            for r in 0..m {
                                dp[r * dp_width..(r + 1) * dp_width].copy_from_slice(
                                    &g[r * total + col..r * total + col + dp_width],
                                );
                            }
                            self.add_grad(p, &dp);
                        }
                        col += dp_width;
                    }
                }
                Op::Reshape(a) => {
                    let a = *a;
                    if self.needs(a) {
                        self.add_grad(a, &g);
                    }
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let gs = g[0];
                    if self.needs(a) {
                        let da: Vec<T> = self.node(b).values.iter().map(|&bv| gs * bv).collect();
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<T> = self.node(a).values.iter().map(|&av| gs * av).collect();
                        self.add_grad(b, &db);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let (logits, label) = (*logits, *label);
                    let probs = probs.clone();
                    if self.needs(logits) {
                        let gs = g[0];
                        let dz: Vec<T> = probs
                            .iter()
                            .enumerate()
                            .map(|(j, &p)| {
                                let onehot = if j == label { T::one() } else { T::zero() };
                                gs * (p - onehot)
                            })
                            .collect();
                        self.add_grad(logits, &dz);
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    if self.needs(a) {
                        let da = vec![g[0]; self.node(a).values.len()];
                        self.add_grad(a, &da);
                    }
                }
                Op::MaskGrad(a, keep) => {
                    let a = *a;
                    let keep = keep.clone();
                    if self.needs(a) {
                        let da: Vec<T> = g
                            .iter()
                            .zip(&keep)
                            .map(|(&gi, &kp)| if kp { gi } else { T::zero() })
                            .collect();
                        self.add_grad(a, &da);
                    }
                }
                Op::GatherRows(table, rows) => {
                    let table = *table;
                    let rows = rows.clone();
                    if self.needs(table) {
                        let d = self.node(table).shape[1];
                        let mut dt = vec![T::zero(); self.node(table).values.len()];
                        for (out_r, &src_r) in rows.iter().enumerate() {
                            for j in 0..d {
                                dt[src_r * d + j] += g[out_r * d + j];
                            }
                        }
                        self.add_grad(table, &dt);
                    }
                }
                Op::ImageToPatches(img, patch) => {
                    let (img, patch) = (*img, *patch);
                    if self.needs(img) {
                        let shape = &self.node(img).shape;
                        let (h, w) = (shape[0], shape[1]);
                        let (ph, pw) = (h / patch, w / patch);
                        let cols = patch * patch * 3;
                        let mut di = vec![T::zero(); h * w * 3];
                        for py in 0..ph {
                            for px in 0..pw {
                                let p = py * pw + px;
                                for dy in 0..patch {
                                    for dx in 0..patch {
                                        for c in 0..3 {
                                            let dst = ((py * patch + dy) * w
                                                + (px * patch + dx))
                                                * 3
                                                + c;
                                            let src = p * cols + (dy * patch + dx) * 3 + c;
                                            di[dst] = g[src];
                                        }
                                    }
                                }
                            }
                        }
                        self.add_grad(img, &di);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, values: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let i3 = g.leaf(&Tensor::identity_scaled(3, 1.0));
        let b = g.leaf(&tensor(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i3, b).unwrap();
        assert_eq!(g.values(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let a = g.leaf(&tensor(vec![2, 3], vec![1.0; 6]));
        let z = g.leaf(&Tensor::zeros(vec![3, 2]));
        let c = g.matmul(a, z).unwrap();
        assert!(g.values(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::stream(42, "test");
        let a = Tensor::<f64>::normal(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::normal(vec![4, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let c = g.matmul(va, vb).unwrap();
        // Independent naive oracle.
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a.values()[i * 4 + p] * b.values()[p * 2 + j];
                }
                let got = g.values(c)[i * 2 + j];
                assert!((got - want).abs() < 1e-12, "({i},{j}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]));
        let b = g.leaf(&Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let v = g.leaf(&tensor(vec![2], vec![3.0, 4.0]));
        let n = g.l2_normalize(v).unwrap();
        assert!((g.values(n)[0] - 0.6).abs() < 1e-15);
        assert!((g.values(n)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_vector_is_fixed_point() {
        let mut g = Graph::new();
        let v = g.leaf(&tensor(vec![2], vec![0.6, 0.8]));
        let n = g.l2_normalize(v).unwrap();
        assert!((g.values(n)[0] - 0.6).abs() < 1e-15);
        assert!((g.values(n)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let mut g = Graph::new();
        let v = g.leaf(&tensor(vec![2], vec![1e-13, 0.0]));
        assert!(matches!(
            g.l2_normalize(v),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut g = Graph::new();
        let z = g.leaf(&tensor(vec![2], vec![0.0, 0.0]));
        let p = g.softmax(z).unwrap();
        assert_eq!(g.values(p), &[0.5, 0.5]);

        let z2 = g.leaf(&tensor(vec![2], vec![1.0, 0.0]));
        let p2 = g.softmax(z2).unwrap();
        let e = std::f64::consts::E;
        assert!((g.values(p2)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.values(p2)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let z = g.leaf(&tensor(vec![3], vec![0.3, -1.2, 2.4]));
        let zs = g.leaf(&tensor(vec![3], vec![0.3 + 7.5, -1.2 + 7.5, 2.4 + 7.5]));
        let p = g.softmax(z).unwrap();
        let ps = g.softmax(zs).unwrap();
        for (a, b) in g.values(p).iter().zip(g.values(ps)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_vector_collapses_to_bias() {
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![4], vec![3.0; 4]));
        let gain = g.leaf(&tensor(vec![4], vec![1.0; 4]));
        let bias = g.leaf(&Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 0.0));

        let gain0 = g.leaf(&Tensor::zeros(vec![4]));
        let bias2 = g.leaf(&tensor(vec![4], vec![0.5, -0.5, 1.0, 2.0]));
        let x2 = g.leaf(&tensor(vec![4], vec![0.1, 0.7, -0.3, 0.9]));
        let y2 = g.layer_norm(x2, gain0, bias2).unwrap();
        assert_eq!(g.values(y2), &[0.5, -0.5, 1.0, 2.0]);
    }

    #[test]
    fn layer_norm_pre_affine_moments() {
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![4], vec![1.0, -2.0, 0.5, 4.0]));
        let gain = g.leaf(&tensor(vec![4], vec![1.0; 4]));
        let bias = g.leaf(&Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let vals = g.values(y);
        let mean: f64 = vals.iter().sum::<f64>() / 4.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn attention_single_token_passes_value_through() {
        let mut g = Graph::new();
        let q = g.leaf(&tensor(vec![1, 3], vec![0.3, -0.2, 0.9]));
        let k = g.leaf(&tensor(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let v = g.leaf(&tensor(vec![1, 3], vec![-1.0, 4.0, 2.5]));
        let out = g.attention(q, k, v).unwrap();
        assert_eq!(g.values(out), &[-1.0, 4.0, 2.5]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.leaf(&tensor(vec![2, 2], vec![0.5, -0.1, 2.0, 1.0]));
        let k = g.leaf(&tensor(vec![2, 2], vec![0.7, 0.7, 0.7, 0.7]));
        let v = g.leaf(&tensor(vec![2, 2], vec![1.0, 3.0, 5.0, 7.0]));
        let out = g.attention(q, k, v).unwrap();
        for row in 0..2 {
            assert!((g.values(out)[row * 2] - 3.0).abs() < 1e-12);
            assert!((g.values(out)[row * 2 + 1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_way_is_ln2() {
        let mut g = Graph::new();
        let z = g.leaf(&tensor(vec![2], vec![0.0, 0.0]));
        let l = g.cross_entropy(z, 0).unwrap();
        assert!((g.values(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_toward_zero() {
        let mut g = Graph::new();
        let z = g.leaf(&tensor(vec![2], vec![20.0, 0.0]));
        let l = g.cross_entropy(z, 0).unwrap();
        assert!(g.values(l)[0] < 1e-8);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let z = g.leaf(&tensor(vec![2], vec![0.0, 0.0]));
        assert!(matches!(
            g.cross_entropy(z, 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g
            .leaf(&tensor(vec![3], vec![0.2, -1.0, 0.7]).with_requires_grad());
        let l = g.cross_entropy(z, 1).unwrap();
        g.backward(l).unwrap();
        let probs = softmax_raw(&[0.2, -1.0, 0.7]);
        let grad = g.grad(z);
        for j in 0..3 {
            let want = probs[j] - if j == 1 { 1.0 } else { 0.0 };
            assert!((grad[j] - want).abs() < 1e-10, "{j}: {} vs {want}", grad[j]);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![3], vec![4.0, 5.0, 6.0]).with_requires_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![2], vec![1.0, 2.0]).with_requires_grad());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn two_consumer_node_sums_both_paths() {
        // y = sum(x*x) + sum(x): dy/dx = 2x + 1 through two consumers.
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![2], vec![3.0, -1.5]).with_requires_grad());
        let xx = g.mul(x, x).unwrap();
        let s1 = g.sum(xx);
        let s2 = g.sum(x);
        let y = g.add(s1, s2).unwrap();
        g.backward(y).unwrap();
        assert!((g.grad(x)[0] - 7.0).abs() < 1e-12);
        assert!((g.grad(x)[1] - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let mut g = Graph::new();
        let table =
            g.leaf(&tensor(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad());
        let gathered = g.gather_rows(table, &[1, 1, 2]).unwrap();
        let s = g.sum(gathered);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_grad_blocks_masked_coordinates() {
        let mut g = Graph::new();
        let x = g.leaf(&tensor(vec![3], vec![1.0, 2.0, 3.0]).with_requires_grad());
        let m = g.mask_grad(x, vec![true, false, true]).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn image_to_patches_roundtrip_indexing() {
        // 4x4 image, patch 2: patch row 0 is pixels (0,0),(0,1),(1,0),(1,1).
        let mut vals = vec![0.0; 4 * 4 * 3];
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    vals[(y * 4 + x) * 3 + c] = (y * 100 + x * 10 + c) as f64;
                }
            }
        }
        let mut g = Graph::new();
        let img = g.leaf(&tensor(vec![4, 4, 3], vals));
        let p = g.image_to_patches(img, 2).unwrap();
        assert_eq!(g.shape(p), &[4, 12]);
        // Patch 1 (top-right), pixel (0, 2), channel 1 => 0*100+2*10+1 = 21.
        assert_eq!(g.values(p)[1 * 12 + 0 * 3 + 1], 21.0);
        // Patch 3 (bottom-right), local (1,1) = pixel (3,3), c=2 => 332.
        assert_eq!(g.values(p)[3 * 12 + (1 * 2 + 1) * 3 + 2], 332.0);
    }
}
