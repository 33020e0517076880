//! Minimal reverse-mode differentiation over dense-matrix primitives.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with a closure that maps the output adjoint to the input adjoints. Only
//! the primitives the GP objective needs are provided: matrix products,
//! Cholesky, triangular solves, elementwise maps, reductions, and a fused
//! RBF kernel.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::rbf_cross_matrix;
use crate::linalg::{cholesky_with_jitter, gemm, packed_len, tri_solve_dense, DenseMatrix};
use crate::quadrature::{log_normal_cdf, GaussHermite};

type Backward = Box<dyn Fn(&DenseMatrix, &[bool]) -> Vec<Option<DenseMatrix>>>;

struct Node {
    value: Rc<DenseMatrix>,
    requires_grad: bool,
    param: Option<usize>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

/// Recording of one objective evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

/// Named trainable values, all in their unconstrained form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<DenseMatrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: DenseMatrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[DenseMatrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.id_of(name).map(|i| &self.values[i])
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }
}

/// Objective value and one gradient per registered parameter.
#[derive(Clone, Debug)]
pub struct GradientTape {
    objective: f64,
    names: Vec<String>,
    grads: Vec<DenseMatrix>,
}

impl GradientTape {
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&DenseMatrix> {
        self.grads.get(id)
    }

    pub fn by_name(&self, name: &str) -> Result<&DenseMatrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
            .ok_or_else(|| Error::UnregisteredParameter(name.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn grads(&self) -> &[DenseMatrix] {
        &self.grads
    }
}

/// Differentiates `objective` with respect to every entry of `params`.
///
/// The closure receives one [`Var`] per parameter, in registration order, and
/// must return a 1×1 result. Any sampling noise or minibatch selection must be
/// fixed before the call; the objective is evaluated exactly once.
pub fn gradient_of<F>(params: &ParamSet, objective: F) -> Result<GradientTape>
where
    F: for<'g> FnOnce(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = params
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| graph.param(i, v.clone()))
        .collect();
    let out = objective(&graph, &vars)?;
    let (objective, found) = graph.backward(out)?;
    let mut grads: Vec<DenseMatrix> = params
        .values
        .iter()
        .map(|v| DenseMatrix::zeros(v.rows(), v.cols()))
        .collect();
    for (id, g) in found {
        match grads.get_mut(id) {
            Some(slot) => slot.axpy(1.0, &g),
            None => return Err(Error::UnregisteredParameter(format!("#{id}"))),
        }
    }
    Ok(GradientTape {
        objective,
        names: params.names.clone(),
        grads,
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: DenseMatrix) -> Var<'_> {
        self.push_leaf(value, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(DenseMatrix::scalar(value))
    }

    /// Leaf whose adjoint is reported under parameter id `id`.
    pub fn param(&self, id: usize, value: DenseMatrix) -> Var<'_> {
        self.push_leaf(value, Some(id))
    }

    fn push_leaf(&self, value: DenseMatrix, param: Option<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad: param.is_some(),
            param,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Rc<DenseMatrix>, parents: &[usize], backward: Backward) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value,
            requires_grad,
            param: None,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<DenseMatrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Runs the reverse sweep from a 1×1 output. Returns the output value and
    /// the accumulated adjoint of every parameter leaf reached.
    pub fn backward(&self, out: Var<'_>) -> Result<(f64, Vec<(usize, DenseMatrix)>)> {
        let nodes = self.nodes.borrow();
        let value = &nodes[out.id].value;
        if value.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "1x1 objective",
                format!("{:?}", value.shape()),
            ));
        }
        let objective = value[(0, 0)];
        let mut adj: Vec<Option<DenseMatrix>> = (0..=out.id).map(|_| None).collect();
        adj[out.id] = Some(DenseMatrix::scalar(1.0));
        let mut found = Vec::new();
        for id in (0..=out.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if let Some(p) = node.param {
                found.push((p, g));
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut adj[p] {
                    Some(acc) => acc.axpy(1.0, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok((objective, found))
    }
}

fn shape_check(op: &'static str, ok: bool, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<DenseMatrix> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.shape()
    }

    /// Entry (0, 0); meant for 1×1 results.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value[(0, 0)]
    }

    fn unary(self, value: DenseMatrix, backward: Backward) -> Var<'g> {
        self.graph.push(Rc::new(value), &[self.id], backward)
    }

    fn binary(self, other: Var<'g>, value: DenseMatrix, backward: Backward) -> Var<'g> {
        self.graph
            .push(Rc::new(value), &[self.id, other.id], backward)
    }

    pub fn try_add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        shape_check("add", a.shape() == b.shape(), &a, &b)?;
        let v = a.zip_map(&b, |x, y| x + y);
        Ok(self.binary(other, v, Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn try_sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        shape_check("sub", a.shape() == b.shape(), &a, &b)?;
        let v = a.zip_map(&b, |x, y| x - y);
        Ok(self.binary(other, v, Box::new(|g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])))
    }

    /// Elementwise product.
    pub fn try_mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        shape_check("mul", a.shape() == b.shape(), &a, &b)?;
        let v = a.zip_map(&b, |x, y| x * y);
        Ok(self.binary(
            other,
            v,
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&b, |x, y| x * y)),
                    need[1].then(|| g.zip_map(&a, |x, y| x * y)),
                ]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let v = self.value().scale(c);
        self.unary(v, Box::new(move |g, _| vec![Some(g.scale(c))]))
    }

    pub fn add_const(self, c: f64) -> Var<'g> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn exp(self) -> Var<'g> {
        let out = Rc::new(self.value().map(f64::exp));
        let o = Rc::clone(&out);
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, _| vec![Some(g.zip_map(&o, |x, y| x * y))]),
        )
    }

    pub fn ln(self) -> Var<'g> {
        let a = self.value();
        let v = a.map(f64::ln);
        self.unary(v, Box::new(move |g, _| vec![Some(g.zip_map(&a, |x, y| x / y))]))
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = Rc::new(self.value().map(f64::sqrt));
        let o = Rc::clone(&out);
        self.graph.push(
            out,
            &[self.id],
            Box::new(move |g, _| vec![Some(g.zip_map(&o, |x, y| 0.5 * x / y))]),
        )
    }

    pub fn square(self) -> Var<'g> {
        let a = self.value();
        let v = a.map(|x| x * x);
        self.unary(
            v,
            Box::new(move |g, _| vec![Some(g.zip_map(&a, |x, y| 2.0 * x * y))]),
        )
    }

    /// `max(x, floor)` elementwise; the adjoint is dropped where the floor binds.
    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        let a = self.value();
        let v = a.map(|x| x.max(floor));
        self.unary(
            v,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&a, |x, y| if y >= floor { x } else { 0.0 }))]
            }),
        )
    }

    /// Sum of all entries, as a 1×1 value.
    pub fn sum(self) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.shape();
        let v = DenseMatrix::scalar(a.sum());
        self.unary(
            v,
            Box::new(move |g, _| vec![Some(DenseMatrix::filled(r, c, g[(0, 0)]))]),
        )
    }

    /// Column sums as a 1×C row.
    pub fn sum_rows(self) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.shape();
        let mut v = DenseMatrix::zeros(1, c);
        for i in 0..r {
            for (acc, x) in v.row_mut(0).iter_mut().zip(a.row(i)) {
                *acc += x;
            }
        }
        self.unary(
            v,
            Box::new(move |g, _| vec![Some(DenseMatrix::from_fn(r, c, |_, j| g[(0, j)]))]),
        )
    }

    /// Row sums as an R×1 column.
    pub fn sum_cols(self) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.shape();
        let v = DenseMatrix::from_fn(r, 1, |i, _| a.row(i).iter().sum());
        self.unary(
            v,
            Box::new(move |g, _| vec![Some(DenseMatrix::from_fn(r, c, |i, _| g[(i, 0)]))]),
        )
    }

    /// Repeats a 1×1 value into an R×C matrix.
    pub fn broadcast(self, rows: usize, cols: usize) -> Result<Var<'g>> {
        let a = self.value();
        if a.shape() != (1, 1) {
            return Err(Error::shape("broadcast", "1x1", format!("{:?}", a.shape())));
        }
        let v = DenseMatrix::filled(rows, cols, a[(0, 0)]);
        Ok(self.unary(v, Box::new(|g, _| vec![Some(DenseMatrix::scalar(g.sum()))])))
    }

    /// `self · s` for a 1×1 `s`.
    pub fn mul_scalar(self, s: Var<'g>) -> Result<Var<'g>> {
        let (a, sv) = (self.value(), s.value());
        shape_check("mul_scalar", sv.shape() == (1, 1), &a, &sv)?;
        let c = sv[(0, 0)];
        let v = a.scale(c);
        Ok(self.binary(
            s,
            v,
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.scale(c)),
                    need[1].then(|| {
                        let dot = g.data().iter().zip(a.data()).map(|(x, y)| x * y).sum();
                        DenseMatrix::scalar(dot)
                    }),
                ]
            }),
        ))
    }

    /// Multiplies column `j` by `r[0, j]`.
    pub fn mul_row(self, r: Var<'g>) -> Result<Var<'g>> {
        let (a, rv) = (self.value(), r.value());
        shape_check("mul_row", rv.shape() == (1, a.cols()), &a, &rv)?;
        let v = DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] * rv[(0, j)]);
        Ok(self.binary(
            r,
            v,
            Box::new(move |g, need| {
                let ga = need[0].then(|| {
                    DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * rv[(0, j)])
                });
                let gr = need[1].then(|| {
                    let mut out = DenseMatrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            out[(0, j)] += g[(i, j)] * a[(i, j)];
                        }
                    }
                    out
                });
                vec![ga, gr]
            }),
        ))
    }

    /// Adds a 1×1 `s` to every diagonal entry.
    pub fn add_diag(self, s: Var<'g>) -> Result<Var<'g>> {
        let (a, sv) = (self.value(), s.value());
        shape_check(
            "add_diag",
            sv.shape() == (1, 1) && a.rows() == a.cols(),
            &a,
            &sv,
        )?;
        let mut v = (*a).clone();
        v.add_diag(sv[(0, 0)]);
        Ok(self.binary(
            s,
            v,
            Box::new(|g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| DenseMatrix::scalar(g.diag().iter().sum())),
                ]
            }),
        ))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.product(other, false, false)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'g>) -> Result<Var<'g>> {
        self.product(other, true, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'g>) -> Result<Var<'g>> {
        self.product(other, false, true)
    }

    fn product(self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let k_a = if ta { a.rows() } else { a.cols() };
        let k_b = if tb { b.cols() } else { b.rows() };
        shape_check("matmul", k_a == k_b, &a, &b)?;
        let v = gemm(&a, ta, &b, tb);
        Ok(self.binary(
            other,
            v,
            Box::new(move |g, need| match (ta, tb) {
                (false, false) => vec![
                    need[0].then(|| gemm(g, false, &b, true)),
                    need[1].then(|| gemm(&a, true, g, false)),
                ],
                (true, false) => vec![
                    need[0].then(|| gemm(&b, false, g, true)),
                    need[1].then(|| gemm(&a, false, g, false)),
                ],
                (false, true) => vec![
                    need[0].then(|| gemm(g, false, &b, false)),
                    need[1].then(|| gemm(g, true, &a, false)),
                ],
                (true, true) => unreachable!("transposed-transposed product is not recorded"),
            }),
        ))
    }

    pub fn transpose(self) -> Var<'g> {
        let v = self.value().transpose();
        self.unary(v, Box::new(|g, _| vec![Some(g.transpose())]))
    }

    /// Diagonal of a square matrix as an N×1 column.
    pub fn diag(self) -> Var<'g> {
        let a = self.value();
        let n = a.rows().min(a.cols());
        let (r, c) = a.shape();
        let v = DenseMatrix::column_vector(&a.diag());
        self.unary(
            v,
            Box::new(move |g, _| {
                let mut out = DenseMatrix::zeros(r, c);
                for i in 0..n {
                    out[(i, i)] = g[(i, 0)];
                }
                vec![Some(out)]
            }),
        )
    }

    /// Column `j` as an R×1 matrix.
    pub fn column(self, j: usize) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.shape();
        let v = DenseMatrix::column_vector(&a.column(j));
        self.unary(
            v,
            Box::new(move |g, _| {
                let mut out = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    out[(i, j)] = g[(i, 0)];
                }
                vec![Some(out)]
            }),
        )
    }

    /// Horizontal concatenation of R×1 columns.
    pub fn hstack(columns: &[Var<'g>]) -> Result<Var<'g>> {
        let first = columns
            .first()
            .ok_or_else(|| Error::shape("hstack", "at least one column", 0))?;
        let graph = first.graph;
        let vals: Vec<Rc<DenseMatrix>> = columns.iter().map(|c| c.value()).collect();
        let r = vals[0].rows();
        for v in &vals {
            shape_check("hstack", v.shape() == (r, 1), &vals[0], v)?;
        }
        let c = columns.len();
        let out = DenseMatrix::from_fn(r, c, |i, j| vals[j][(i, 0)]);
        let ids: Vec<usize> = columns.iter().map(|v| v.id).collect();
        Ok(graph.push(
            Rc::new(out),
            &ids,
            Box::new(move |g, need| {
                (0..c)
                    .map(|j| need[j].then(|| DenseMatrix::column_vector(&g.column(j))))
                    .collect()
            }),
        ))
    }

    /// Cholesky factor of `self + jitter·I`, with the jitter escalated as in
    /// [`cholesky_with_jitter`]. The jitter is treated as a constant.
    pub fn cholesky(self, base_jitter: f64) -> Result<Var<'g>> {
        let a = self.value();
        let l = Rc::new(cholesky_with_jitter(&a, base_jitter)?.into_matrix());
        let lc = Rc::clone(&l);
        Ok(self.graph.push(
            l,
            &[self.id],
            Box::new(move |g, _| vec![Some(cholesky_adjoint(&lc, g))]),
        ))
    }

    /// Solves `L·X = B` (or `Lᵀ·X = B`) with `self` as the lower-triangular `L`.
    pub fn tri_solve(self, b: Var<'g>, transposed: bool) -> Result<Var<'g>> {
        let (l, bv) = (self.value(), b.value());
        shape_check("tri_solve", l.rows() == bv.rows() && l.rows() == l.cols(), &l, &bv)?;
        let x = Rc::new(tri_solve_dense(&l, &bv, transposed));
        let xc = Rc::clone(&x);
        Ok(self.graph.push(
            x,
            &[self.id, b.id],
            Box::new(move |g, need| {
                let gb = tri_solve_dense(&l, g, !transposed);
                let gl = need[0].then(|| {
                    let outer = if transposed {
                        gemm(&xc, false, &gb, true)
                    } else {
                        gemm(&gb, false, &xc, true)
                    };
                    let n = outer.rows();
                    DenseMatrix::from_fn(n, n, |i, j| if j <= i { -outer[(i, j)] } else { 0.0 })
                });
                vec![gl, need[1].then_some(gb)]
            }),
        ))
    }

    /// Expands a 1×K packed row (row-major lower triangle, diagonal stored as
    /// logs) into a `dim × dim` lower-triangular matrix.
    pub fn unpack_lower_log_diag(self, dim: usize) -> Result<Var<'g>> {
        let p = self.value();
        if p.shape() != (1, packed_len(dim)) {
            return Err(Error::shape(
                "unpack_lower_log_diag",
                format!("(1, {})", packed_len(dim)),
                format!("{:?}", p.shape()),
            ));
        }
        let mut l = DenseMatrix::zeros(dim, dim);
        let mut k = 0;
        for i in 0..dim {
            for j in 0..=i {
                l[(i, j)] = if i == j { p[(0, k)].exp() } else { p[(0, k)] };
                k += 1;
            }
        }
        let l = Rc::new(l);
        let lc = Rc::clone(&l);
        Ok(self.graph.push(
            l,
            &[self.id],
            Box::new(move |g, _| {
                let mut out = DenseMatrix::zeros(1, packed_len(dim));
                let mut k = 0;
                for i in 0..dim {
                    for j in 0..=i {
                        out[(0, k)] = if i == j {
                            g[(i, j)] * lc[(i, j)]
                        } else {
                            g[(i, j)]
                        };
                        k += 1;
                    }
                }
                vec![Some(out)]
            }),
        ))
    }

    /// RBF-ARD cross covariance between the rows of `self` (N×D) and `b`
    /// (M×D) with log-variance `log_var` (1×1) and log-lengthscales `log_ls`
    /// (1×D). When `self` and `b` are the same node the diagonal distance is
    /// exactly zero.
    pub fn rbf(self, b: Var<'g>, log_var: Var<'g>, log_ls: Var<'g>) -> Result<Var<'g>> {
        let (x, z, lv, ll) = (self.value(), b.value(), log_var.value(), log_ls.value());
        let d = x.cols();
        if z.cols() != d || ll.shape() != (1, d) || lv.shape() != (1, 1) {
            return Err(Error::shape(
                "rbf",
                format!("inputs with {d} columns and (1,{d}) lengthscales"),
                format!("{:?} / {:?} / {:?}", z.shape(), ll.shape(), lv.shape()),
            ));
        }
        let variance = lv[(0, 0)].exp();
        let ls: Vec<f64> = ll.row(0).iter().map(|v| v.exp()).collect();
        let same = self.id == b.id;
        let k = Rc::new(rbf_cross_matrix(&x, &z, variance, &ls, same));
        let kc = Rc::clone(&k);
        Ok(self.graph.push(
            k,
            &[self.id, b.id, log_var.id, log_ls.id],
            Box::new(move |g, need| rbf_adjoint(&x, &z, &ls, &kc, g, need)),
        ))
    }

    /// Expected log-likelihood of binary targets under a probit link, by
    /// Gauss–Hermite quadrature over `f ~ N(mean, var)`. `self` holds the
    /// means and `var` the variances, both N×1; `y` holds labels in {0, 1}.
    pub fn probit_expectation(
        self,
        var: Var<'g>,
        y: &[f64],
        quad: &GaussHermite,
    ) -> Result<Var<'g>> {
        let (mu, v) = (self.value(), var.value());
        shape_check(
            "probit_expectation",
            mu.shape() == v.shape() && mu.cols() == 1 && mu.rows() == y.len(),
            &mu,
            &v,
        )?;
        let n = mu.rows();
        let mut out = DenseMatrix::zeros(n, 1);
        let mut d_mu = DenseMatrix::zeros(n, 1);
        let mut d_var = DenseMatrix::zeros(n, 1);
        for i in 0..n {
            let sign = if y[i] > 0.5 { 1.0 } else { -1.0 };
            let sd = v[(i, 0)].max(0.0).sqrt();
            let (mut e, mut gm, mut gs) = (0.0, 0.0, 0.0);
            for (t, w) in quad.nodes().iter().zip(quad.weights()) {
                let z = sign * (mu[(i, 0)] + std::f64::consts::SQRT_2 * sd * t);
                let lc = log_normal_cdf(z);
                let ratio = (-0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - lc).exp();
                e += w * lc;
                gm += w * sign * ratio;
                gs += w * sign * ratio * std::f64::consts::SQRT_2 * t;
            }
            out[(i, 0)] = e;
            d_mu[(i, 0)] = gm;
            d_var[(i, 0)] = if sd > 0.0 { gs / (2.0 * sd) } else { 0.0 };
        }
        Ok(self.binary(
            var,
            out,
            Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.zip_map(&d_mu, |a, b| a * b)),
                    need[1].then(|| g.zip_map(&d_var, |a, b| a * b)),
                ]
            }),
        ))
    }
}

/// Adjoint of `A ↦ chol(A)` for a symmetric `A`:
/// `Ā = ½(S + Sᵀ)` with `S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹`, where `Φ` keeps the lower
/// triangle and halves the diagonal.
fn cholesky_adjoint(l: &DenseMatrix, l_bar: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let mut p = gemm(l, true, l_bar, false);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                p[(i, j)] = 0.0;
            } else if i == j {
                p[(i, j)] *= 0.5;
            }
        }
    }
    // L⁻ᵀ P L⁻¹ = L⁻ᵀ (L⁻ᵀ Pᵀ)ᵀ
    let y = tri_solve_dense(l, &p.transpose(), true);
    let s = tri_solve_dense(l, &y.transpose(), true);
    DenseMatrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]))
}

fn rbf_adjoint(
    x: &DenseMatrix,
    z: &DenseMatrix,
    ls: &[f64],
    k: &DenseMatrix,
    g: &DenseMatrix,
    need: &[bool],
) -> Vec<Option<DenseMatrix>> {
    let (n, m, d) = (x.rows(), z.rows(), x.cols());
    // P = Ḡ ⊙ K
    let p = g.zip_map(k, |a, b| a * b);
    let row_sum: Vec<f64> = (0..n).map(|i| p.row(i).iter().sum()).collect();
    let mut col_sum = vec![0.0; m];
    for i in 0..n {
        for (acc, v) in col_sum.iter_mut().zip(p.row(i)) {
            *acc += v;
        }
    }
    let pz = gemm(&p, false, z, false); // N×D
    let ptx = gemm(&p, true, x, false); // M×D
    let inv_l2: Vec<f64> = ls.iter().map(|l| 1.0 / (l * l)).collect();

    let gx = need[0].then(|| {
        DenseMatrix::from_fn(n, d, |i, c| -(row_sum[i] * x[(i, c)] - pz[(i, c)]) * inv_l2[c])
    });
    let gz = need[1].then(|| {
        DenseMatrix::from_fn(m, d, |j, c| (ptx[(j, c)] - col_sum[j] * z[(j, c)]) * inv_l2[c])
    });
    let gv = need[2].then(|| DenseMatrix::scalar(p.sum()));
    let gl = need[3].then(|| {
        let mut out = DenseMatrix::zeros(1, d);
        for c in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += row_sum[i] * x[(i, c)] * x[(i, c)] - 2.0 * x[(i, c)] * pz[(i, c)];
            }
            for j in 0..m {
                s += col_sum[j] * z[(j, c)] * z[(j, c)];
            }
            out[(0, c)] = s * inv_l2[c];
        }
        out
    });
    vec![gx, gz, gv, gl]
}

impl<'g> Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.try_add(rhs).expect("shape mismatch in Var + Var")
    }
}

impl<'g> Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.try_sub(rhs).expect("shape mismatch in Var - Var")
    }
}

impl<'g> Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.try_mul(rhs).expect("shape mismatch in Var * Var")
    }
}

impl<'g> Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

/// Central finite differences of `f` over every scalar of every parameter.
///
/// Used as the independent oracle for [`gradient_of`] in tests.
pub fn finite_difference<F>(params: &ParamSet, step: f64, mut f: F) -> Result<Vec<DenseMatrix>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (r, c) = params.values[p].shape();
        let mut g = DenseMatrix::zeros(r, c);
        for k in 0..r * c {
            let orig = work.values[p].data()[k];
            work.values[p].data_mut()[k] = orig + step;
            let up = f(&work)?;
            work.values[p].data_mut()[k] = orig - step;
            let down = f(&work)?;
            work.values[p].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|a − b| / max(1, |a|)` over all entries.
pub fn max_relative_error(analytic: &[DenseMatrix], numeric: &[DenseMatrix]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
