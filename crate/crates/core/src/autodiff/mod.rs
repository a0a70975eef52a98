//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Learnable tensors live in a [`ParamStore`]. A [`Graph`] borrows the store,
//! records operations as they are applied, and [`Graph::backward`] walks the
//! record in reverse to produce [`Gradients`] keyed by parameter. A graph is
//! single-threaded; independent graphs over the same store can run on
//! different threads.
//!
//! Tensors are rank 0, 1 or 2, row-major `f64`. The only broadcast supported
//! is adding a row-vector bias to every row of a matrix.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, TensorEntry};
pub use gradcheck::{grad_check, GradCheckReport};

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for shape {shape:?}")]
    Index {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "data length for shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Width of one row (the last dimension; 1 for scalars).
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        if let Some(&id) = self.by_name.get(name) {
            self.tensors[id.0] = tensor;
            return id;
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradient of a scalar with respect to parameters. Embedding lookups
/// produce row-sparse entries; everything else is dense.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub dense: BTreeMap<ParamId, Vec<f64>>,
    pub rows: BTreeMap<ParamId, BTreeMap<usize, Vec<f64>>>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.dense.is_empty() && self.rows.is_empty()
    }

    pub fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        add_into(self.dense.entry(id).or_insert_with(|| vec![0.0; g.len()]), g);
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        add_into(
            self.rows
                .entry(id)
                .or_default()
                .entry(row)
                .or_insert_with(|| vec![0.0; g.len()]),
            g,
        );
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (&id, g) in &other.dense {
            self.add_dense(id, g);
        }
        for (&id, rows) in &other.rows {
            for (&r, g) in rows {
                self.add_row(id, r, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.dense.values_mut() {
            g.iter_mut().for_each(|x| *x *= c);
        }
        for rows in self.rows.values_mut() {
            for g in rows.values_mut() {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }

    /// Dense view of one parameter's gradient (zeros where untouched).
    pub fn to_dense(&self, id: ParamId, shape: &[usize]) -> Vec<f64> {
        let n: usize = shape.iter().product();
        let mut out = self.dense.get(&id).cloned().unwrap_or_else(|| vec![0.0; n]);
        if let Some(rows) = self.rows.get(&id) {
            let w = shape.last().copied().unwrap_or(1);
            for (&r, g) in rows {
                add_into(&mut out[r * w..(r + 1) * w], g);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.dense.values().all(|g| g.iter().all(|x| x.is_finite()))
            && self
                .rows
                .values()
                .all(|rows| rows.values().all(|g| g.iter().all(|x| x.is_finite())))
    }

    pub fn max_abs(&self) -> f64 {
        let dense = self.dense.values().flatten();
        let sparse = self.rows.values().flat_map(|r| r.values().flatten());
        dense.chain(sparse).fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    MeanAxis(Var, usize),
    Dot(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Slice(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Operation record over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, Op::Constant)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(vec![], vec![x], Op::Constant)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = shape.iter().product();
        self.push(shape, vec![0.0; n], Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape.clone();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    /// Rows of a rank-2 parameter, as a `[rows.len(), width]` matrix.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var, ShapeError> {
        let table = self.params.get(id);
        if table.shape.len() != 2 {
            return Err(ShapeError::Mismatch {
                op: "gather",
                lhs: table.shape.clone(),
                rhs: vec![rows.len()],
            });
        }
        let w = table.shape[1];
        let mut value = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= table.shape[0] {
                return Err(ShapeError::Index {
                    op: "gather",
                    index: r,
                    shape: table.shape.clone(),
                });
            }
            value.extend_from_slice(table.row(r));
        }
        Ok(self.push(vec![rows.len(), w], value, Op::Gather(id, rows.to_vec())))
    }

    /// One row of a rank-2 parameter, as a vector.
    pub fn embed(&mut self, id: ParamId, row: usize) -> Result<Var, ShapeError> {
        let m = self.gather(id, &[row])?;
        let w = self.nodes[m.0].shape[1];
        self.nodes[m.0].shape = vec![w];
        Ok(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || ShapeError::Mismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => return Err(err()),
        };
        let value = gemm(self.value(a), self.value(b), m, k, n);
        Ok(self.push(out_shape, value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]` (or `[k]`) and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[1] => (sa[0], sa[1], vec![sa[0], sb[0]]),
            (1, 2) if sa[0] == sb[1] => (1, sa[0], vec![sb[0]]),
            _ => {
                return Err(ShapeError::Mismatch {
                    op: "matmul_nt",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let n = sb[0];
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                value[i * n + j] = dot(ar, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(out_shape, value, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::Mismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    /// Add vector `bias: [n]` to every row of `a: [m, n]` (or to `a: [n]`).
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sb.len() != 1 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(ShapeError::Mismatch {
                op: "add_row_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let w = sb[0];
        let bv = self.value(bias);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % w])
            .collect();
        Ok(self.push(sa, value, Op::AddRowBias(a, bias)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), value, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, ShapeError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 {
            return Err(ShapeError::Mismatch {
                op: "softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        if shape[0] == 0 {
            return Err(ShapeError::Empty { op: "softmax" });
        }
        let value = softmax(self.value(a));
        Ok(self.push(shape, value, Op::Softmax(a)))
    }

    /// Mean over `axis` of a matrix.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, ShapeError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || axis > 1 {
            return Err(ShapeError::Mismatch {
                op: "mean_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        if shape[axis] == 0 {
            return Err(ShapeError::Empty { op: "mean_axis" });
        }
        let av = self.value(a);
        let value = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                add_into(&mut out, &av[i * n..(i + 1) * n]);
            }
            out.iter_mut().for_each(|x| *x /= m as f64);
            out
        } else {
            (0..m)
                .map(|i| av[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                .collect()
        };
        let out_shape = vec![if axis == 0 { n } else { m }];
        Ok(self.push(out_shape, value, Op::MeanAxis(a, axis)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a).len() != 1 {
            return Err(ShapeError::Mismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        self.same_shape("dot", a, b)?;
        let value = dot(self.value(a), self.value(b));
        Ok(self.push(vec![], vec![value], Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().sum();
        self.push(vec![], vec![value], Op::Sum(a))
    }

    /// Sum of scalars, left to right.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var, ShapeError> {
        let mut acc = match xs.first() {
            Some(&x) => x,
            None => return Ok(self.scalar_const(0.0)),
        };
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Concatenate vectors (or scalars, as length-1 pieces) end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let mut value = Vec::new();
        for &p in parts {
            if self.shape(p).len() > 1 {
                return Err(ShapeError::Mismatch {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            value.extend_from_slice(self.value(p));
        }
        let n = value.len();
        Ok(self.push(vec![n], value, Op::Concat(parts.to_vec())))
    }

    /// Stack equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, ShapeError> {
        let first = *rows.first().ok_or(ShapeError::Empty { op: "stack_rows" })?;
        let w = self.shape(first).to_vec();
        let mut value = Vec::with_capacity(rows.len() * w.iter().product::<usize>());
        for &r in rows {
            if self.shape(r) != w.as_slice() || w.len() != 1 {
                return Err(ShapeError::Mismatch {
                    op: "stack_rows",
                    lhs: w,
                    rhs: self.shape(r).to_vec(),
                });
            }
            value.extend_from_slice(self.value(r));
        }
        Ok(self.push(vec![rows.len(), w[0]], value, Op::StackRows(rows.to_vec())))
    }

    /// Contiguous `len` elements of a vector starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 || start + len > shape[0] {
            return Err(ShapeError::Index {
                op: "slice",
                index: start + len,
                shape,
            });
        }
        let value = self.value(a)[start..start + len].to_vec();
        Ok(self.push(vec![len], value, Op::Slice(a, start)))
    }

    /// Row `i` of a matrix, as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, ShapeError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || i >= shape[0] {
            return Err(ShapeError::Index {
                op: "row",
                index: i,
                shape,
            });
        }
        let w = shape[1];
        let value = self.value(a)[i * w..(i + 1) * w].to_vec();
        // A row is a slice of the flattened matrix.
        Ok(self.push(vec![w], value, Op::Slice(a, i * w)))
    }

    /// Reverse pass from scalar `output`, seeding its gradient with 1.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_seeded(output, 1.0)
    }

    pub fn backward_seeded(&self, output: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        let n_out = self.nodes[output.0].value.len().max(1);
        grads[output.0] = Some(vec![seed; n_out]);
        let mut out = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add_dense(*id, &g),
                Op::Gather(id, rows) => {
                    let w = g.len() / rows.len().max(1);
                    for (k, &r) in rows.iter().enumerate() {
                        out.add_row(*id, r, &g[k * w..(k + 1) * w]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = match (sa.len(), sb.len()) {
                        (2, 2) => (sa[0], sa[1], sb[1]),
                        (2, 1) => (sa[0], sa[1], 1),
                        _ => (1, sa[0], sb[1]),
                    };
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = dot(gi, brow);
                            let aip = av[i * k + p];
                            if aip != 0.0 {
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MatMulNt(a, b) => {
                    let sb = self.shape(*b);
                    let (n, k) = (sb[0], sb[1]);
                    let m = g.len() / n.max(1);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let ar = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let br = &bv[j * k..(j + 1) * k];
                            for p in 0..k {
                                da[i * k + p] += gij * br[p];
                                db[j * k + p] += gij * ar[p];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::AddRowBias(a, bias) => {
                    accumulate(&mut grads, *a, &g);
                    let w = self.shape(*bias)[0];
                    let mut db = vec![0.0; w];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % w] += gv;
                    }
                    accumulate(&mut grads, *bias, &db);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Tanh(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Relu(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::Scale(a, c) => {
                    let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let d: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| yv * (gv - gy)).collect();
                    accumulate(&mut grads, *a, &d);
                }
                Op::MeanAxis(a, axis) => {
                    let s = self.shape(*a);
                    let (m, n) = (s[0], s[1]);
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = if *axis == 0 { g[j] / m as f64 } else { g[i] / n as f64 };
                        }
                    }
                    accumulate(&mut grads, *a, &d);
                }
                Op::Dot(a, b) => {
                    let gs = g[0];
                    let da: Vec<f64> = self.value(*b).iter().map(|x| x * gs).collect();
                    let db: Vec<f64> = self.value(*a).iter().map(|x| x * gs).collect();
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Concat(parts) | Op::StackRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut grads, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let mut d = vec![0.0; self.value(*a).len()];
                    d[*start..*start + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *a, &d);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, g),
        slot => *slot = Some(g.to_vec()),
    }
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
