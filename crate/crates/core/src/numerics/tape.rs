//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs on the tape together with whatever the
//! backward pass needs. Leaves are either parameters (gradient tracked) or
//! constants; a constant never receives a gradient, which is how stop-gradient
//! is expressed (`Tape::detach`).

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{dot, Tensor};
use super::{log_softmax_unchecked, BN_EPS};
use crate::error::{CtaError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Statistics source for a batch-normalization node.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Normalize with the statistics of the batch itself (differentiated through).
    Batch,
    /// Normalize with externally supplied per-feature mean and variance.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulT(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sum(usize),
    LogSoftmax(usize),
    Softmax(usize),
    Gather(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recording of a computation for one backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(CtaError::ForeignVariable);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(CtaError::NonFinite("tape value"));
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul_t(&self.nodes[ib].value)?;
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.push(value, Op::MatMulT(ia, ib), tracked)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let bv = &self.nodes[ib].value;
        if bv.len() != xv.cols() {
            return Err(CtaError::Shape(format!(
                "row bias of {} for width {}",
                bv.len(),
                xv.cols()
            )));
        }
        let mut value = xv.clone();
        let w = xv.cols();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[k % w];
        }
        let tracked = self.tracked(ix) || self.tracked(ib);
        self.push(value, Op::AddRow(ix, ib), tracked)
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, f)?;
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.push(value, op(ia, ib), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v * s);
        let tracked = self.tracked(ia);
        self.push(value, Op::Scale(ia, s), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v.max(0.0));
        let tracked = self.tracked(ia);
        self.push(value, Op::Relu(ia), tracked)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let tracked = self.tracked(ia);
        self.push(value, Op::Sum(ia), tracked)
    }

    /// Row-wise log-softmax of a `[n, C]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let mut value = src.clone();
        for r in 0..src.rows() {
            let row = log_softmax_unchecked(src.row(r));
            value.row_mut(r).copy_from_slice(&row);
        }
        let tracked = self.tracked(ia);
        self.push(value, Op::LogSoftmax(ia), tracked)
    }

    /// Row-wise softmax of a `[n, C]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let mut value = src.clone();
        for r in 0..src.rows() {
            let row: Vec<f64> = log_softmax_unchecked(src.row(r))
                .into_iter()
                .map(f64::exp)
                .collect();
            value.row_mut(r).copy_from_slice(&row);
        }
        let tracked = self.tracked(ia);
        self.push(value, Op::Softmax(ia), tracked)
    }

    /// Picks column `cols[r]` from each row `r`, giving a vector.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        if cols.len() != src.rows() {
            return Err(CtaError::Shape(format!(
                "{} gather indices for {} rows",
                cols.len(),
                src.rows()
            )));
        }
        let w = src.cols();
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= w {
                return Err(CtaError::LabelOutOfRange { label: c, classes: w });
            }
            out.push(src.row(r)[c]);
        }
        let tracked = self.tracked(ia);
        self.push(Tensor::vector(out), Op::Gather(ia, cols.to_vec()), tracked)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.select_rows(rows)?;
        let tracked = self.tracked(ia);
        self.push(value, Op::SelectRows(ia, rows.to_vec()), tracked)
    }

    /// Per-feature normalization of `x: [n, m]` followed by `gamma ⊙ x̂ + beta`.
    ///
    /// With [`NormStats::Batch`] the biased batch mean/variance are returned
    /// alongside the output so callers can track running statistics.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xv = &self.nodes[ix].value;
        let (n, m) = (xv.rows(), xv.cols());
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        if g.len() != m || b.len() != m {
            return Err(CtaError::Shape(format!(
                "batch norm affine of {}/{} for width {m}",
                g.len(),
                b.len()
            )));
        }
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(CtaError::DegenerateBatch(n));
                }
                let mut mean = vec![0.0; m];
                for row in xv.iter_rows() {
                    for (acc, v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= n as f64);
                let mut var = vec![0.0; m];
                for row in xv.iter_rows() {
                    for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != m || var.len() != m {
                    return Err(CtaError::Shape("running stats width".into()));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for r in 0..n {
            let xr = xhat.row_mut(r);
            for j in 0..m {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let src = xhat.row(r).to_vec();
            let or = out.row_mut(r);
            for j in 0..m {
                or[j] = g[j] * src[j] + b[j];
            }
        }
        let tracked = self.tracked(ix) || self.tracked(ig) || self.tracked(ib);
        let v = self.push(
            out,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
                batch_stats,
            },
            tracked,
        )?;
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(CtaError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=il).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |j: usize, delta: Tensor| -> Result<()> {
            if !self.nodes[j].tracked {
                return Ok(());
            }
            match &mut grads[j] {
                Some(t) => t.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.tracked(a) {
                    acc(a, g.matmul(&self.nodes[b].value)?)?;
                }
                if self.tracked(b) {
                    acc(b, g.t_matmul(&self.nodes[a].value)?)?;
                }
            }
            &Op::AddRow(x, bias) => {
                acc(x, g.clone())?;
                if self.tracked(bias) {
                    let w = g.cols();
                    let mut db = vec![0.0; w];
                    for row in g.iter_rows() {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.nodes[bias].value.shape().to_vec();
                    acc(bias, Tensor::new(shape, db)?)?;
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone())?;
                acc(b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone())?;
                acc(b, g.map(|v| -v))?;
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                acc(a, g.zip_map(bv, |x, y| x * y)?)?;
                acc(b, g.zip_map(av, |x, y| x * y)?)?;
            }
            &Op::Scale(a, s) => acc(a, g.map(|v| v * s))?,
            &Op::Relu(a) => {
                let av = &self.nodes[a].value;
                acc(a, g.zip_map(av, |d, x| if x > 0.0 { d } else { 0.0 })?)?;
            }
            &Op::Sum(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                acc(a, Tensor::filled(&shape, g.item()))?;
            }
            &Op::LogSoftmax(a) => {
                // dx = g - softmax * Σg
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    let yr = y.row(r);
                    for (d, l) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d -= l.exp() * gs;
                    }
                }
                acc(a, dx)?;
            }
            &Op::Softmax(a) => {
                // dx = p ⊙ (g - <g, p>)
                let p = &node.value;
                let mut dx = g.clone();
                for r in 0..p.rows() {
                    let inner = dot(g.row(r), p.row(r));
                    let pr = p.row(r);
                    for (d, pv) in dx.row_mut(r).iter_mut().zip(pr) {
                        *d = pv * (*d - inner);
                    }
                }
                acc(a, dx)?;
            }
            Op::Gather(a, cols) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let mut dx = Tensor::zeros(&shape);
                for (r, &c) in cols.iter().enumerate() {
                    dx.row_mut(r)[c] += g.data()[r];
                }
                acc(*a, dx)?;
            }
            Op::SelectRows(a, rows) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let mut dx = Tensor::zeros(&shape);
                for (k, &r) in rows.iter().enumerate() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                acc(*a, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, m) = (xhat.rows(), xhat.cols());
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for r in 0..n {
                    for j in 0..m {
                        let d = g.row(r)[j];
                        dgamma[j] += d * xhat.row(r)[j];
                        dbeta[j] += d;
                    }
                }
                if self.tracked(*x) {
                    let gv = self.nodes[*gamma].value.data();
                    let mut dx = Tensor::zeros(&[n, m]);
                    for r in 0..n {
                        let dr = dx.row_mut(r);
                        for j in 0..m {
                            let d = g.row(r)[j];
                            dr[j] = if *batch_stats {
                                gv[j] * inv_std[j] / n as f64
                                    * (n as f64 * d - dbeta[j] - xhat.row(r)[j] * dgamma[j])
                            } else {
                                d * gv[j] * inv_std[j]
                            };
                        }
                    }
                    acc(*x, dx)?;
                }
                let gshape = self.nodes[*gamma].value.shape().to_vec();
                let bshape = self.nodes[*beta].value.shape().to_vec();
                acc(*gamma, Tensor::new(gshape, dgamma)?)?;
                acc(*beta, Tensor::new(bshape, dbeta)?)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` did not influence the
    /// loss through tracked operations.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor>> {
        if v.tape != self.tape {
            return Err(CtaError::ForeignVariable);
        }
        Ok(self.grads.get(v.idx).and_then(Option::as_ref))
    }

    /// Gradient with respect to `v`, zero-filled when absent.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        let shape = tape.value(v)?.shape().to_vec();
        Ok(self
            .get(v)?
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape)))
    }
}

/// Evaluates `loss` with every tensor in `params` registered as a tracked
/// leaf, returning the loss value and one gradient per parameter.
pub fn value_and_grad<F>(params: &[Tensor], loss: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = loss(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;
    let value = tape.value(out)?.item();
    let per_param = vars
        .iter()
        .map(|&v| grads.wrt(&tape, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, per_param))
}
