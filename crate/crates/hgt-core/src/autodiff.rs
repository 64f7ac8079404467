//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a per-sequence tape: forward values are computed eagerly as
//! ops are recorded, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Everything is `Array2<f64>`; row vectors are `1 x n`
//! matrices and scalars are `1 x 1`.
//!
//! The op set is deliberately small: dense affine algebra, a handful of
//! activations, row gather/scatter for incidence wiring, and fused
//! normalization / loss ops whose hand-derived backward passes keep the tape
//! short.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Back {
    Leaf,
    /// dA += G . B^T ; dB += A^T . G
    MatMul { a: Var, b: Var },
    /// y = A . B^T ; dA += G . B ; dB += G^T . A
    MatMulNt { a: Var, b: Var },
    /// y = C . X with constant C; dX += C^T . G
    MatMulConstLeft { c: Array2<f64>, x: Var },
    Add { a: Var, b: Var },
    /// y = x + row (broadcast over rows)
    AddRow { x: Var, row: Var },
    /// y = x * row (broadcast over rows)
    MulRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    /// y = k * x + c (scalar constants)
    AffineScalar { x: Var, k: f64 },
    /// y = x + C (constant matrix)
    AddConst { x: Var },
    /// y = x * C elementwise (constant matrix)
    MulConst { x: Var, c: Array2<f64> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    /// Row-wise softmax; saved output used in backward.
    SoftmaxRows { x: Var },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    Reshape { x: Var },
    /// Per-column scale by constants (batch-norm normalization step).
    ColScaleConst { x: Var, scale: Array1<f64> },
    /// Row-wise layer normalization with trainable gain/shift.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Array2<f64>,
        inv_std: Array1<f64>,
    },
    /// Fused masked binary cross-entropy on logits, optional focal term.
    BceLogits {
        z: Var,
        targets: Array2<f64>,
        mask: Array2<f64>,
        gamma: f64,
        denom: f64,
    },
    MeanAll { x: Var, count: f64 },
}

/// Per-sequence autodiff tape.
pub struct Graph {
    vals: Vec<Array2<f64>>,
    backs: Vec<Back>,
    needs_grad: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            vals: Vec::with_capacity(1024),
            backs: Vec::with_capacity(1024),
            needs_grad: Vec::with_capacity(1024),
        }
    }

    fn push(&mut self, val: Array2<f64>, back: Back, needs_grad: bool) -> Var {
        self.vals.push(val);
        self.backs.push(back);
        self.needs_grad.push(needs_grad);
        Var(self.vals.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn value_of(&self, v: Var) -> &Array2<f64> {
        &self.vals[v.0]
    }

    pub fn shape_of(&self, v: Var) -> (usize, usize) {
        let d = self.vals[v.0].dim();
        (d.0, d.1)
    }

    /// Constant leaf: participates in forward only.
    pub fn constant(&mut self, val: Array2<f64>) -> Var {
        self.push(val, Back::Leaf, false)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, val: Array2<f64>) -> Var {
        self.push(val, Back::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.vals[a.0].dot(&self.vals[b.0]);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Back::MatMul { a, b }, ng)
    }

    /// `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.vals[a.0].dot(&self.vals[b.0].t());
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Back::MatMulNt { a, b }, ng)
    }

    /// `C . x` with a constant left factor (incidence averaging etc).
    pub fn matmul_const_left(&mut self, c: Array2<f64>, x: Var) -> Var {
        let y = c.dot(&self.vals[x.0]);
        let ng = self.ng(x);
        self.push(y, Back::MatMulConstLeft { c, x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.vals[a.0] + &self.vals[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Back::Add { a, b }, ng)
    }

    /// Broadcast-add a `1 x n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.vals[row.0].row(0).to_owned();
        let y = &self.vals[x.0] + &r;
        let ng = self.ng(x) || self.ng(row);
        self.push(y, Back::AddRow { x, row }, ng)
    }

    /// Broadcast-multiply a `1 x n` row over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.vals[row.0].row(0).to_owned();
        let y = &self.vals[x.0] * &r;
        let ng = self.ng(x) || self.ng(row);
        self.push(y, Back::MulRow { x, row }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = &self.vals[a.0] * &self.vals[b.0];
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Back::Mul { a, b }, ng)
    }

    /// `k * x + c` with scalar constants.
    pub fn affine_scalar(&mut self, x: Var, k: f64, c: f64) -> Var {
        let y = self.vals[x.0].mapv(|v| k * v + c);
        let ng = self.ng(x);
        self.push(y, Back::AffineScalar { x, k }, ng)
    }

    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        let y = &self.vals[x.0] + c;
        let ng = self.ng(x);
        self.push(y, Back::AddConst { x }, ng)
    }

    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Var {
        let y = &self.vals[x.0] * &c;
        let ng = self.ng(x);
        self.push(y, Back::MulConst { x, c }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.vals[x.0].mapv(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(y, Back::Relu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.vals[x.0].mapv(sigmoid_scalar);
        let ng = self.ng(x);
        self.push(y, Back::Sigmoid { x }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.vals[x.0].mapv(f64::tanh);
        let ng = self.ng(x);
        self.push(y, Back::Tanh { x }, ng)
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut y = self.vals[x.0].clone();
        for mut row in y.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let ng = self.ng(x);
        self.push(y, Back::SoftmaxRows { x }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.vals[v.0].view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(
            y,
            Back::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.vals[v.0].view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(
            y,
            Back::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.vals[x.0]
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let ng = self.ng(x);
        self.push(y, Back::SliceRows { x, start }, ng)
    }

    /// Row gather; duplicate indices are allowed (backward scatter-adds).
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let src = &self.vals[x.0];
        let cols = src.ncols();
        let mut y = Array2::zeros((indices.len(), cols));
        for (r, &i) in indices.iter().enumerate() {
            y.row_mut(r).assign(&src.row(i));
        }
        let ng = self.ng(x);
        self.push(y, Back::Gather { x, indices }, ng)
    }

    /// Standard-layout reshape (row-major), element count preserved.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let y = self.vals[x.0]
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape element count mismatch");
        let ng = self.ng(x);
        self.push(y, Back::Reshape { x }, ng)
    }

    /// Per-column scaling by a constant vector (the data-independent part of
    /// a batch-norm layer running in frozen-statistics mode).
    pub fn col_scale_const(&mut self, x: Var, scale: Array1<f64>) -> Var {
        let y = &self.vals[x.0] * &scale;
        let ng = self.ng(x);
        self.push(y, Back::ColScaleConst { x, scale }, ng)
    }

    /// Row-wise layer norm: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    /// `gamma` and `beta` are `1 x n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let src = &self.vals[x.0];
        let n = src.ncols() as f64;
        let mut normed = src.clone();
        let mut inv_std = Array1::zeros(src.nrows());
        for (r, mut row) in normed.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std[r] = is;
        }
        let g = self.vals[gamma.0].row(0).to_owned();
        let b = self.vals[beta.0].row(0).to_owned();
        let y = &normed * &g + &b;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y,
            Back::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Masked mean binary cross-entropy on logits with optional focal
    /// modulation `(1 - p_t)^gamma` (`gamma = 0` recovers plain BCE).
    /// Output is `1 x 1`. The mean is taken over entries with `mask != 0`,
    /// weighted by the mask.
    pub fn bce_with_logits(
        &mut self,
        z: Var,
        targets: Array2<f64>,
        mask: Array2<f64>,
        gamma: f64,
    ) -> Var {
        let zv = &self.vals[z.0];
        assert_eq!(zv.dim(), targets.dim(), "bce target shape");
        assert_eq!(zv.dim(), mask.dim(), "bce mask shape");
        let denom = mask.sum().max(1.0);
        let mut total = 0.0;
        ndarray::Zip::from(zv)
            .and(&targets)
            .and(&mask)
            .for_each(|&zi, &yi, &mi| {
                if mi != 0.0 {
                    // softplus(z) - y*z, with the large-|z| stable form
                    let ell = softplus(zi) - yi * zi;
                    let term = if gamma == 0.0 {
                        ell
                    } else {
                        let p = sigmoid_scalar(zi);
                        let pt = yi * p + (1.0 - yi) * (1.0 - p);
                        (1.0 - pt).powf(gamma) * ell
                    };
                    total += mi * term;
                }
            });
        let y = Array2::from_elem((1, 1), total / denom);
        let ng = self.ng(z);
        self.push(
            y,
            Back::BceLogits {
                z,
                targets,
                mask,
                gamma,
                denom,
            },
            ng,
        )
    }

    /// Mean over all entries, as a `1 x 1` scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = &self.vals[x.0];
        let count = (v.len() as f64).max(1.0);
        let y = Array2::from_elem((1, 1), v.sum() / count);
        let ng = self.ng(x);
        self.push(y, Back::MeanAll { x, count }, ng)
    }

    /// Reverse pass from a `1 x 1` loss node. Returns per-node gradients;
    /// read them back with [`Graph::take_grad`] on the returned buffer.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.vals[loss.0];
        if lv.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward expects a 1x1 loss node, got {:?}",
                lv.dim()
            )));
        }
        if !lv[(0, 0)].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_one(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_one(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.backs[i] {
            Back::Leaf => {}
            Back::MatMul { a, b } => {
                if self.ng(*a) {
                    self.accum(grads, *a, g.dot(&self.vals[b.0].t()));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, self.vals[a.0].t().dot(g));
                }
            }
            Back::MatMulNt { a, b } => {
                if self.ng(*a) {
                    self.accum(grads, *a, g.dot(&self.vals[b.0]));
                }
                if self.ng(*b) {
                    self.accum(grads, *b, g.t().dot(&self.vals[a.0]));
                }
            }
            Back::MatMulConstLeft { c, x } => {
                self.accum(grads, *x, c.t().dot(g));
            }
            Back::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Back::AddRow { x, row } => {
                self.accum(grads, *x, g.clone());
                if self.ng(*row) {
                    let s = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *row, s);
                }
            }
            Back::MulRow { x, row } => {
                let r = self.vals[row.0].row(0).to_owned();
                if self.ng(*x) {
                    self.accum(grads, *x, g * &r);
                }
                if self.ng(*row) {
                    let s = (g * &self.vals[x.0]).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *row, s);
                }
            }
            Back::Mul { a, b } => {
                if self.ng(*a) {
                    self.accum(grads, *a, g * &self.vals[b.0]);
                }
                if self.ng(*b) {
                    self.accum(grads, *b, g * &self.vals[a.0]);
                }
            }
            Back::AffineScalar { x, k } => {
                self.accum(grads, *x, g.mapv(|v| v * k));
            }
            Back::AddConst { x } => {
                self.accum(grads, *x, g.clone());
            }
            Back::MulConst { x, c } => {
                self.accum(grads, *x, g * c);
            }
            Back::Relu { x } => {
                let mask = self.vals[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *x, g * &mask);
            }
            Back::Sigmoid { x } => {
                let y = &self.vals[i];
                self.accum(grads, *x, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Back::Tanh { x } => {
                let y = &self.vals[i];
                self.accum(grads, *x, g * &y.mapv(|v| 1.0 - v * v));
            }
            Back::SoftmaxRows { x } => {
                let y = &self.vals[i];
                let mut dx = g * y;
                for (mut drow, yrow) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let dot = drow.sum();
                    ndarray::Zip::from(&mut drow).and(&yrow).for_each(|d, &yv| {
                        *d -= dot * yv;
                    });
                }
                self.accum(grads, *x, dx);
            }
            Back::ConcatCols { parts } => {
                let mut off = 0;
                for p in parts {
                    let w = self.vals[p.0].ncols();
                    if self.ng(*p) {
                        let sub = g.slice(ndarray::s![.., off..off + w]).to_owned();
                        self.accum(grads, *p, sub);
                    }
                    off += w;
                }
            }
            Back::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let h = self.vals[p.0].nrows();
                    if self.ng(*p) {
                        let sub = g.slice(ndarray::s![off..off + h, ..]).to_owned();
                        self.accum(grads, *p, sub);
                    }
                    off += h;
                }
            }
            Back::SliceRows { x, start } => {
                let mut dx = Array2::zeros(self.vals[x.0].dim());
                dx.slice_mut(ndarray::s![*start..start + g.nrows(), ..])
                    .assign(g);
                self.accum(grads, *x, dx);
            }
            Back::Gather { x, indices } => {
                let mut dx = Array2::zeros(self.vals[x.0].dim());
                for (r, &idx) in indices.iter().enumerate() {
                    let mut row = dx.row_mut(idx);
                    row += &g.row(r);
                }
                self.accum(grads, *x, dx);
            }
            Back::Reshape { x } => {
                let dim = self.vals[x.0].dim();
                let dx = g
                    .clone()
                    .into_shape_with_order(dim)
                    .expect("reshape backward");
                self.accum(grads, *x, dx);
            }
            Back::ColScaleConst { x, scale } => {
                self.accum(grads, *x, g * scale);
            }
            Back::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    let dg = (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *gamma, dg);
                }
                if self.ng(*beta) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(grads, *beta, db);
                }
                if self.ng(*x) {
                    let gamma_row = self.vals[gamma.0].row(0).to_owned();
                    let n = normed.ncols() as f64;
                    let gh = g * &gamma_row; // dL/d(normed)
                    let mut dx = Array2::zeros(normed.dim());
                    for r in 0..normed.nrows() {
                        let ghr = gh.row(r);
                        let xr = normed.row(r);
                        let sum_gh = ghr.sum();
                        let sum_gh_x = ghr
                            .iter()
                            .zip(xr.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        let is = inv_std[r];
                        for c in 0..normed.ncols() {
                            dx[(r, c)] =
                                is * (ghr[c] - sum_gh / n - xr[c] * sum_gh_x / n);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Back::BceLogits {
                z,
                targets,
                mask,
                gamma,
                denom,
            } => {
                let scale = g[(0, 0)] / denom;
                let zv = &self.vals[z.0];
                let mut dz = Array2::zeros(zv.dim());
                ndarray::Zip::from(&mut dz)
                    .and(zv)
                    .and(targets)
                    .and(mask)
                    .for_each(|d, &zi, &yi, &mi| {
                        if mi != 0.0 {
                            let p = sigmoid_scalar(zi);
                            let base = if *gamma == 0.0 {
                                p - yi
                            } else {
                                let pt = yi * p + (1.0 - yi) * (1.0 - p);
                                let ell = softplus(zi) - yi * zi;
                                let dpt_dz = (2.0 * yi - 1.0) * p * (1.0 - p);
                                let om = (1.0 - pt).max(1e-12);
                                -dpt_dz * (gamma * om.powf(gamma - 1.0) * ell
                                    + om.powf(*gamma) / pt.max(1e-12))
                            };
                            *d = scale * mi * base;
                        }
                    });
                self.accum(grads, *z, dz);
            }
            Back::MeanAll { x, count } => {
                let v = g[(0, 0)] / count;
                let dx = Array2::from_elem(self.vals[x.0].dim(), v);
                self.accum(grads, *x, dx);
            }
        }
    }
}

/// Gradient buffer produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, zero-shaped if it never received one.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    // log(1 + e^z) without overflow
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        (1.0 + z.exp()).ln()
    }
}
