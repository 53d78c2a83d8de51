//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Every value is a row-major `f64` matrix. Operations on tensors that require
//! gradients record their parents and a backward rule; [`Tensor::backward`]
//! walks the recorded graph once in reverse topological order.
//!
//! Gradients accumulate (`+=`) into leaf tensors only. Intermediate results
//! never retain a gradient, so calling `backward` twice on the same loss adds
//! the leaf gradients twice. Call [`Tensor::zero_grad`] between steps.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};

/// Default clamp used by [`Tensor::log_eps`].
pub const LOG_EPS: f64 = 1e-12;

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense matrix node in the computation graph.
///
/// Cloning a `Tensor` is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &*self.data())
            .finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self::leaf(rows, cols, data, false))
    }

    /// A trainable leaf.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self::new(rows, cols, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::leaf(rows, cols, vec![0.0; rows * cols], false)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::leaf(rows, cols, vec![value; rows * cols], false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(1, 1, vec![value], false)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::leaf(n, n, data, false)
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return dim_err(format!("row {i} has length {}, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    fn leaf(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Rc::new(Node {
            rows,
            cols,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn from_op(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            Tensor(Rc::new(Node {
                rows,
                cols,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(true),
                parents,
                backward: Some(backward),
            }))
        } else {
            Self::leaf(rows, cols, data, false)
        }
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    pub fn len(&self) -> usize {
        self.0.rows * self.0.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, used by optimizers on leaf parameters.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data()
            .chunks(self.cols().max(1))
            .map(<[f64]>::to_vec)
            .take(self.rows())
            .collect()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.data.borrow()[r * self.0.cols + c]
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Toggles gradient tracking. Only meaningful on leaves.
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A new leaf holding a copy of the values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.rows(), self.cols(), self.to_vec(), false)
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape();
        let (k2, n) = rhs.shape();
        if k != k2 {
            return dim_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let out = mm(&self.data(), &rhs.data(), m, k, n);
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, ps| {
                let ga = ps[0]
                    .requires_grad()
                    .then(|| mm_a_bt(g, &ps[1].data(), m, n, k));
                let gb = ps[1]
                    .requires_grad()
                    .then(|| mm_at_b(&ps[0].data(), g, m, k, n));
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = self.shape();
        let out = transpose_raw(&self.data(), m, n);
        Tensor::from_op(
            n,
            m,
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_raw(g, n, m))]),
        )
    }

    // ---------------------------------------------------------------------
    // Elementwise binary (rhs may be a 1×n row broadcast over rows)
    // ---------------------------------------------------------------------

    fn broadcast_check(&self, rhs: &Tensor, op: &str) -> Result<bool> {
        if self.shape() == rhs.shape() {
            Ok(false)
        } else if rhs.rows() == 1 && rhs.cols() == self.cols() {
            Ok(true)
        } else {
            dim_err(format!("{op}: {:?} with {:?}", self.shape(), rhs.shape()))
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let bcast = self.broadcast_check(rhs, "add")?;
        let (m, n) = self.shape();
        let out = zip_bcast(&self.data(), &rhs.data(), n, |a, b| a + b);
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, ps| {
                let ga = ps[0].requires_grad().then(|| g.to_vec());
                let gb = ps[1]
                    .requires_grad()
                    .then(|| reduce_bcast(g.to_vec(), n, bcast));
                vec![ga, gb]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let bcast = self.broadcast_check(rhs, "sub")?;
        let (m, n) = self.shape();
        let out = zip_bcast(&self.data(), &rhs.data(), n, |a, b| a - b);
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, ps| {
                let ga = ps[0].requires_grad().then(|| g.to_vec());
                let gb = ps[1]
                    .requires_grad()
                    .then(|| reduce_bcast(g.iter().map(|v| -v).collect(), n, bcast));
                vec![ga, gb]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let bcast = self.broadcast_check(rhs, "mul")?;
        let (m, n) = self.shape();
        let out = zip_bcast(&self.data(), &rhs.data(), n, |a, b| a * b);
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, ps| {
                let ga = ps[0]
                    .requires_grad()
                    .then(|| zip_bcast(g, &ps[1].data(), n, |gv, b| gv * b));
                let gb = ps[1].requires_grad().then(|| {
                    let full: Vec<f64> = g
                        .iter()
                        .zip(ps[0].data().iter())
                        .map(|(gv, a)| gv * a)
                        .collect();
                    reduce_bcast(full, n, bcast)
                });
                vec![ga, gb]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Elementwise unary
    // ---------------------------------------------------------------------

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let input = self.data().clone();
        let out: Vec<f64> = input.iter().map(|&v| f(v)).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(input.iter().zip(saved.iter()))
                        .map(|(gv, (&x, &y))| gv * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.unary(move |x| x * factor, move |_, _| factor)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `log σ(x)`, evaluated without forming σ(x).
    pub fn log_sigmoid(&self) -> Tensor {
        self.unary(log_sigmoid, |x, _| 1.0 - sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Numeric(format!("log of nonpositive value {v}")));
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// `log(x + eps)`; entries must satisfy `x + eps > 0`.
    pub fn log_eps(&self, eps: f64) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| !(**v + eps > 0.0)) {
            return Err(Error::Numeric(format!(
                "log of nonpositive value {v} (eps {eps})"
            )));
        }
        Ok(self.unary(move |x| (x + eps).ln(), move |x, _| 1.0 / (x + eps)))
    }

    // ---------------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------------

    fn nonempty(&self, op: &str) -> Result<()> {
        if self.is_empty() {
            dim_err(format!("{op} of empty tensor"))
        } else {
            Ok(())
        }
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.nonempty("sum")?;
        let total = self.data().iter().sum();
        let len = self.len();
        Ok(Tensor::from_op(
            1,
            1,
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; len])]),
        ))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.nonempty("mean")?;
        let len = self.len();
        Ok(self.sum()?.scale(1.0 / len as f64))
    }

    /// Mean of each row: m×n → m×1.
    pub fn row_mean(&self) -> Result<Tensor> {
        self.nonempty("row_mean")?;
        let (m, n) = self.shape();
        let out: Vec<f64> = self
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        Ok(Tensor::from_op(
            m,
            1,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let inv = 1.0 / n as f64;
                vec![Some(
                    g.iter()
                        .flat_map(|gv| std::iter::repeat_n(gv * inv, n))
                        .collect(),
                )]
            }),
        ))
    }

    /// Mean of each column: m×n → 1×n.
    pub fn col_mean(&self) -> Result<Tensor> {
        self.nonempty("col_mean")?;
        let (m, n) = self.shape();
        let mut out = vec![0.0; n];
        for row in self.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(Tensor::from_op(
            1,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let inv = 1.0 / m as f64;
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                vec![Some(row.repeat(m))]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Softmax
    // ---------------------------------------------------------------------

    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.softmax_rows_masked(None)
    }

    /// Row softmax restricted to entries where `mask` is true; masked-out
    /// entries get probability zero. Every row needs at least one admitted
    /// entry.
    pub fn softmax_rows_masked(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (m, n) = self.shape();
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return dim_err(format!("softmax mask length {} for {m}x{n}", mk.len()));
            }
        }
        let data = self.data();
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let admitted = |i: usize| mask.is_none_or(|mk| mk[i]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let base = r * n;
            let max = (0..n)
                .filter(|&c| admitted(base + c))
                .map(|c| data[base + c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "softmax row {r} has no admitted entries"
                )));
            }
            let mut total = 0.0;
            for c in 0..n {
                if admitted(base + c) {
                    let e = (data[base + c] - max).exp();
                    out[base + c] = e;
                    total += e;
                }
            }
            out[base..base + n].iter_mut().for_each(|v| *v /= total);
        }
        drop(data);
        let saved = out.clone();
        Ok(Tensor::from_op(
            m,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let y = &saved[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Structural
    // ---------------------------------------------------------------------

    /// Stacks tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat_rows of zero tensors");
        };
        let n = first.cols();
        if let Some(bad) = parts.iter().find(|p| p.cols() != n) {
            return dim_err(format!("concat_rows: {} columns vs {n}", bad.cols()));
        }
        let mut out = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            offsets.push(out.len());
            out.extend_from_slice(&p.data());
        }
        let rows = parts.iter().map(Tensor::rows).sum();
        let lens: Vec<usize> = parts.iter().map(Tensor::len).collect();
        Ok(Tensor::from_op(
            rows,
            n,
            out,
            parts.to_vec(),
            Box::new(move |g, ps| {
                ps.iter()
                    .enumerate()
                    .map(|(i, p)| {
                        p.requires_grad()
                            .then(|| g[offsets[i]..offsets[i] + lens[i]].to_vec())
                    })
                    .collect()
            }),
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.shape();
        if start > end || end > m {
            return dim_err(format!("slice_rows {start}..{end} of {m} rows"));
        }
        let out = self.data()[start * n..end * n].to_vec();
        Ok(Tensor::from_op(
            end - start,
            n,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(g);
                vec![Some(dx)]
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    /// Propagates d(self)/d(leaf) into every reachable leaf that requires
    /// gradients. `self` must be 1×1.
    pub fn backward(&self) -> Result<()> {
        if self.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.ptr(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.ptr()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    if node.requires_grad() {
                        let mut slot = node.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(rule) => {
                    let parent_grads = rule(&g, &node.0.parents);
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&p.ptr()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.ptr(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-carrying nodes; each node appears once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr()) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in node.0.parents.iter().filter(|p| p.requires_grad()) {
                if !visited.contains(&p.ptr()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn zip_bcast(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().enumerate().map(|(i, &x)| f(x, b[i % n])).collect()
    }
}

fn reduce_bcast(g: Vec<f64>, n: usize, bcast: bool) -> Vec<f64> {
    if !bcast {
        return g;
    }
    let mut out = vec![0.0; n];
    for row in g.chunks(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

/// g (m×n) · bᵀ where b is k×n.
fn mm_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ (k×m) · g (m×n) where a is m×k.
fn mm_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n]
                .iter_mut()
                .zip(grow)
                .for_each(|(o, gv)| *o += av * gv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
