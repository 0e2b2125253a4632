//! Tape-based reverse-mode differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the records in reverse, accumulating gradients. Nodes are
//! addressed by [`Var`] handles (indices into the tape), so graphs are
//! plain data and borrows never tangle.
//!
//! Design points:
//! * Everything is `f64`: training and finite-difference verification run
//!   in one numeric type, which keeps gradient checks tight.
//! * `requires_grad` propagates from leaves; subgraphs that cannot reach a
//!   trainable leaf record no backward closure and are skipped by the
//!   reverse sweep. Detaching (e.g. generator outputs during a
//!   discriminator update) re-enters the value as a constant.
//! * Convolutions lower to im2col plus a single matrix product per call;
//!   the backward pass rebuilds the column matrix from the saved input
//!   instead of caching it, trading a little compute for a small tape.
//!
//! The op set is exactly what the networks and losses need; nothing is
//! speculative.

use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, Ix2, Ix4, IxDyn};

use crate::error::{Error, Result};

pub mod check;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Grads = [Option<ArrayD<f64>>];
type BackwardFn = Box<dyn Fn(&[ArrayD<f64>], &mut Grads)>;

struct Node {
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records a forward computation and replays it backwards.
#[derive(Default)]
pub struct Tape {
    values: Vec<ArrayD<f64>>,
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, delta: ArrayD<f64>) {
    match slot {
        Some(existing) => *existing += &delta,
        None => *slot = Some(delta),
    }
}

/// Splits the gradient slice at `idx`, yielding the parents' region and
/// this node's incoming gradient. Parents always precede their children on
/// the tape, so the split is safe by construction.
fn incoming(grads: &mut Grads, idx: usize) -> (&mut Grads, &ArrayD<f64>) {
    let (before, after) = grads.split_at_mut(idx);
    let g = after[0].as_ref().expect("backward invoked without gradient");
    (before, g)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enters a trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Enters a constant; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Constant 0-d scalar node.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Re-enters `v`'s value as a constant (gradient stop).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.values[v.0]
    }

    /// Value of a single-element node as a scalar.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().expect("non-empty")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn next_index(&self) -> usize {
        self.nodes.len()
    }

    fn push(
        &mut self,
        value: ArrayD<f64>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert!(
            value.iter().all(|x| x.is_finite()),
            "non-finite value entering tape"
        );
        self.values.push(value);
        self.nodes.push(Node {
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn op(&mut self, value: ArrayD<f64>, parents: &[Var], backward: BackwardFn) -> Var {
        let requires = self.any_grad(parents);
        self.push(value, requires, requires.then_some(backward))
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient slot per
    /// node (`None` where no gradient arrived).
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward must start from a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), 1.0));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if let Some(backward) = &self.nodes[idx].backward {
                backward(&self.values, &mut grads);
            }
        }
        grads
    }

    /// Gradient of the swept loss w.r.t. `v` (zeros if none arrived).
    pub fn grad_of(&self, grads: &Grads, v: Var) -> ArrayD<f64> {
        grads[v.0]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(self.values[v.0].raw_dim()))
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

impl Tape {
    /// `a + b`, same shape.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "add: shape mismatch"
        );
        let idx = self.next_index();
        let value = &self.values[a.0] + &self.values[b.0];
        self.op(
            value,
            &[a, b],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let g = g.clone();
                accumulate(&mut parents[a.0], g.clone());
                accumulate(&mut parents[b.0], g);
            }),
        )
    }

    /// `a - b`, same shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "sub: shape mismatch"
        );
        let idx = self.next_index();
        let value = &self.values[a.0] - &self.values[b.0];
        self.op(
            value,
            &[a, b],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                accumulate(&mut parents[a.0], g.clone());
                accumulate(&mut parents[b.0], g.mapv(|x| -x));
            }),
        )
    }

    /// Elementwise `a * b`, same shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "mul: shape mismatch"
        );
        let idx = self.next_index();
        let value = &self.values[a.0] * &self.values[b.0];
        self.op(
            value,
            &[a, b],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                accumulate(&mut parents[a.0], g * &values[b.0]);
                accumulate(&mut parents[b.0], g * &values[a.0]);
            }),
        )
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(|x| x * c);
        self.op(
            value,
            &[a],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                accumulate(&mut parents[a.0], g.mapv(|x| x * c));
            }),
        )
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(|x| x + c);
        self.op(
            value,
            &[a],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                accumulate(&mut parents[a.0], g.clone());
            }),
        )
    }

    /// `|a|` elementwise (subgradient 0 at 0).
    pub fn abs(&mut self, a: Var) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(f64::abs);
        self.op(
            value,
            &[a],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let mut delta = g.clone();
                delta.zip_mut_with(&values[a.0], |d, x| {
                    *d *= if *x > 0.0 {
                        1.0
                    } else if *x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                accumulate(&mut parents[a.0], delta);
            }),
        )
    }

    /// `max(a, 0)` elementwise (subgradient 0 at 0).
    pub fn relu(&mut self, a: Var) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(|x| x.max(0.0));
        self.op(
            value,
            &[a],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let mut delta = g.clone();
                delta.zip_mut_with(&values[a.0], |d, x| {
                    if *x <= 0.0 {
                        *d = 0.0
                    }
                });
                accumulate(&mut parents[a.0], delta);
            }),
        )
    }

    /// Leaky rectifier: `x` for `x > 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(|x| if x > 0.0 { x } else { slope * x });
        self.op(
            value,
            &[a],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let mut delta = g.clone();
                delta.zip_mut_with(&values[a.0], |d, x| {
                    if *x <= 0.0 {
                        *d *= slope
                    }
                });
                accumulate(&mut parents[a.0], delta);
            }),
        )
    }

    /// Logistic sigmoid.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.op(
            value,
            &[a],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                // values[idx] is this node's own saved output s = sigma(x).
                let mut delta = g.clone();
                delta.zip_mut_with(&values[idx], |d, s| *d *= s * (1.0 - s));
                accumulate(&mut parents[a.0], delta);
            }),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let idx = self.next_index();
        let value = self.values[a.0].mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.op(
            value,
            &[a],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let mut delta = g.clone();
                delta.zip_mut_with(&values[a.0], |d, x| *d *= 1.0 / (1.0 + (-x).exp()));
                accumulate(&mut parents[a.0], delta);
            }),
        )
    }

    /// Mean over all elements, producing a 0-d scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let idx = self.next_index();
        let n = self.values[a.0].len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].iter().sum::<f64>() / n);
        let shape = self.values[a.0].raw_dim();
        self.op(
            value,
            &[a],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let gs = *g.iter().next().expect("scalar");
                accumulate(&mut parents[a.0], ArrayD::from_elem(shape.clone(), gs / n));
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Structured ops: linear, conv, norms, pooling, resize, concat
// ---------------------------------------------------------------------------

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

fn as1(a: &ArrayD<f64>) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 tensor")
}

/// Output spatial size of a convolution along one axis.
fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Lowers `(N, C, H, W)` to the im2col matrix `(N*Ho*Wo, C*kh*kw)`.
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    k: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = k;
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let cols = c * kh * kw;
    let mut out = vec![0.0f64; n * ho * wo * cols];
    let xs = x.as_slice().expect("standard layout");
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((ni * ho + oy) * wo + ox) * cols;
                let base_y = oy * stride;
                let base_x = ox * stride;
                for ci in 0..c {
                    let x_plane = (ni * c + ci) * h * w;
                    let col_base = row + ci * kh * kw;
                    for ky in 0..kh {
                        let sy = base_y + ky;
                        if sy < pad || sy >= h + pad {
                            continue; // zero padding row
                        }
                        let src_row = x_plane + (sy - pad) * w;
                        let dst = col_base + ky * kw;
                        for kx in 0..kw {
                            let sx = base_x + kx;
                            if sx < pad || sx >= w + pad {
                                continue;
                            }
                            out[dst + kx] = xs[src_row + (sx - pad)];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * ho * wo, cols), out).expect("im2col shape")
}

/// Scatters column-matrix gradients back to input layout (reverse of
/// [`im2col`]).
fn col2im(
    dcols: &Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    k: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x_dim;
    let (kh, kw) = k;
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let cols = c * kh * kw;
    let mut dx = vec![0.0f64; n * c * h * w];
    let ds = dcols.as_slice().expect("standard layout");
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((ni * ho + oy) * wo + ox) * cols;
                let base_y = oy * stride;
                let base_x = ox * stride;
                for ci in 0..c {
                    let x_plane = (ni * c + ci) * h * w;
                    let col_base = row + ci * kh * kw;
                    for ky in 0..kh {
                        let sy = base_y + ky;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let dst_row = x_plane + (sy - pad) * w;
                        let src = col_base + ky * kw;
                        for kx in 0..kw {
                            let sx = base_x + kx;
                            if sx < pad || sx >= w + pad {
                                continue;
                            }
                            dx[dst_row + (sx - pad)] += ds[src + kx];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), dx).expect("col2im shape")
}

/// Repacks `(R, Cout)` GEMM output rows into `(N, Cout, Ho, Wo)`.
fn rows_to_nchw(mat: &Array2<f64>, n: usize, ho: usize, wo: usize) -> Array4<f64> {
    let cout = mat.dim().1;
    let ms = mat.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; n * cout * ho * wo];
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((ni * ho + oy) * wo + ox) * cout;
                for co in 0..cout {
                    out[((ni * cout + co) * ho + oy) * wo + ox] = ms[row + co];
                }
            }
        }
    }
    Array4::from_shape_vec((n, cout, ho, wo), out).expect("shape")
}

/// Repacks `(N, Cout, Ho, Wo)` gradients into GEMM row layout `(R, Cout)`.
fn nchw_to_rows(g: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, cout, ho, wo) = g.dim();
    let gs = g.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; n * ho * wo * cout];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(((ni * ho + oy) * wo + ox) * cout) + co] =
                        gs[((ni * cout + co) * ho + oy) * wo + ox];
                }
            }
        }
    }
    Array2::from_shape_vec((n * ho * wo, cout), out).expect("shape")
}

impl Tape {
    /// 2-D convolution, NCHW layout: `x (N,Cin,H,W)`, `w (Cout,Cin,kh,kw)`,
    /// `b (Cout)`, zero padding `pad`, square stride.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let wv = as4(&self.values[w.0]);
        let bv = as1(&self.values[b.0]);
        let (n, cin, h, win) = xv.dim();
        let (cout, wcin, kh, kw) = wv.dim();
        assert_eq!(cin, wcin, "conv2d: channel mismatch");
        assert_eq!(cout, bv.len(), "conv2d: bias length mismatch");
        let (ho, wo) = (
            conv_out(h, kh, stride, pad),
            conv_out(win, kw, stride, pad),
        );
        assert!(ho > 0 && wo > 0, "conv2d: empty output");

        let cols = im2col(&xv, (kh, kw), stride, pad);
        let w2 = wv
            .to_shape((cout, cin * kh * kw))
            .expect("weight reshape")
            .to_owned();
        let mut out_rows = cols.dot(&w2.t());
        for mut row in out_rows.rows_mut() {
            row += &bv;
        }
        let value = rows_to_nchw(&out_rows, n, ho, wo).into_dyn();

        let idx = self.next_index();
        self.op(
            value,
            &[x, w, b],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as4(g);
                let g2 = nchw_to_rows(&gv);
                let xv = as4(&values[x.0]);
                let wv = as4(&values[w.0]);
                let w2 = wv
                    .to_shape((cout, cin * kh * kw))
                    .expect("weight reshape")
                    .to_owned();
                // Bias: sum over rows.
                let db = g2.sum_axis(ndarray::Axis(0));
                accumulate(&mut parents[b.0], db.into_dyn());
                // Weights: dW2 = g2^T . cols (im2col recomputed).
                let cols = im2col(&xv, (kh, kw), stride, pad);
                let dw2 = g2.t().dot(&cols);
                let dw = dw2
                    .into_shape_with_order((cout, cin, kh, kw))
                    .expect("dw shape");
                accumulate(&mut parents[w.0], dw.into_dyn());
                // Input: dcols = g2 . w2, scattered back.
                let dcols = g2.dot(&w2);
                let dx = col2im(&dcols, (n, cin, h, win), (kh, kw), stride, pad);
                accumulate(&mut parents[x.0], dx.into_dyn());
            }),
        )
    }

    /// Fully connected layer: `x (N,Fin) . w^T (Fin,Fout) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        let bv = as1(&self.values[b.0]);
        let (_, fin) = xv.dim();
        let (fout, wfin) = wv.dim();
        assert_eq!(fin, wfin, "linear: input width mismatch");
        assert_eq!(fout, bv.len(), "linear: bias length mismatch");
        let mut value = xv.dot(&wv.t());
        for mut row in value.rows_mut() {
            row += &bv;
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x, w, b],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as2(g);
                let xv = as2(&values[x.0]);
                let wv = as2(&values[w.0]);
                accumulate(&mut parents[b.0], gv.sum_axis(ndarray::Axis(0)).into_dyn());
                accumulate(&mut parents[w.0], gv.t().dot(&xv).into_dyn());
                accumulate(&mut parents[x.0], gv.dot(&wv).into_dyn());
            }),
        )
    }

    /// Instance normalization without affine terms: per `(n, c)`, subtract
    /// the spatial mean and divide by `sqrt(var + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let m = (h * w) as f64;
        let mut value = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = value.slice_mut(ndarray::s![ni, ci, .., ..]);
                let mean = plane.iter().sum::<f64>() / m;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                plane.mapv_inplace(|v| (v - mean) * inv);
            }
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as4(g);
                // Recompute the normalized output and inverse std.
                let xv = as4(&values[x.0]);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
                        let gp = gv.slice(ndarray::s![ni, ci, .., ..]);
                        let mean = xp.iter().sum::<f64>() / m;
                        let var =
                            xp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean = gp.iter().sum::<f64>() / m;
                        let gx_hat_mean = gp
                            .iter()
                            .zip(xp.iter())
                            .map(|(g, v)| g * (v - mean) * inv)
                            .sum::<f64>()
                            / m;
                        let mut dp = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                        ndarray::Zip::from(&mut dp).and(&gp).and(&xp).for_each(
                            |d, &g, &v| {
                                let x_hat = (v - mean) * inv;
                                *d = inv * (g - g_mean - x_hat * gx_hat_mean);
                            },
                        );
                    }
                }
                accumulate(&mut parents[x.0], dx.into_dyn());
            }),
        )
    }

    /// Per-sample channel affine: `out[n,c,.,.] = x[n,c,.,.] * s[n,c] + b[n,c]`.
    ///
    /// With `x` already instance-normalized this is the second half of
    /// adaptive instance normalization.
    pub fn channel_affine_nc(&mut self, x: Var, s: Var, b: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let sv = as2(&self.values[s.0]);
        let bv = as2(&self.values[b.0]);
        let (n, c, h, w) = xv.dim();
        assert_eq!(sv.dim(), (n, c), "channel_affine_nc: scale shape");
        assert_eq!(bv.dim(), (n, c), "channel_affine_nc: bias shape");
        let mut value = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = value.slice_mut(ndarray::s![ni, ci, .., ..]);
                let (sc, bi) = (sv[[ni, ci]], bv[[ni, ci]]);
                plane.mapv_inplace(|v| v * sc + bi);
            }
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x, s, b],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as4(g);
                let xv = as4(&values[x.0]);
                let sv = as2(&values[s.0]);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut ds = Array2::<f64>::zeros((n, c));
                let mut db = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = gv.slice(ndarray::s![ni, ci, .., ..]);
                        let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
                        let sc = sv[[ni, ci]];
                        let mut dp = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                        ndarray::Zip::from(&mut dp).and(&gp).for_each(|d, &g| *d = g * sc);
                        ds[[ni, ci]] = gp.iter().zip(xp.iter()).map(|(g, v)| g * v).sum();
                        db[[ni, ci]] = gp.iter().sum();
                    }
                }
                accumulate(&mut parents[x.0], dx.into_dyn());
                accumulate(&mut parents[s.0], ds.into_dyn());
                accumulate(&mut parents[b.0], db.into_dyn());
            }),
        )
    }

    /// Shared channel affine: `out[n,c,.,.] = x[n,c,.,.] * s[c] + b[c]`
    /// (the learned affine of a normalization layer).
    pub fn channel_affine_c(&mut self, x: Var, s: Var, b: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let sv = as1(&self.values[s.0]);
        let bv = as1(&self.values[b.0]);
        let (n, c, h, w) = xv.dim();
        assert_eq!(sv.len(), c, "channel_affine_c: scale length");
        assert_eq!(bv.len(), c, "channel_affine_c: bias length");
        let mut value = xv.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let mut plane = value.slice_mut(ndarray::s![ni, ci, .., ..]);
                let (sc, bi) = (sv[ci], bv[ci]);
                plane.mapv_inplace(|v| v * sc + bi);
            }
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x, s, b],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as4(g);
                let xv = as4(&values[x.0]);
                let sv = as1(&values[s.0]);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut ds = Array1::<f64>::zeros(c);
                let mut db = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        let gp = gv.slice(ndarray::s![ni, ci, .., ..]);
                        let xp = xv.slice(ndarray::s![ni, ci, .., ..]);
                        let sc = sv[ci];
                        let mut dp = dx.slice_mut(ndarray::s![ni, ci, .., ..]);
                        ndarray::Zip::from(&mut dp).and(&gp).for_each(|d, &g| *d = g * sc);
                        ds[ci] += gp.iter().zip(xp.iter()).map(|(g, v)| g * v).sum::<f64>();
                        db[ci] += gp.iter().sum::<f64>();
                    }
                }
                accumulate(&mut parents[x.0], dx.into_dyn());
                accumulate(&mut parents[s.0], ds.into_dyn());
                accumulate(&mut parents[b.0], db.into_dyn());
            }),
        )
    }

    /// Global average pooling `(N,C,H,W) -> (N,C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let m = (h * w) as f64;
        let mut value = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                value[[ni, ci]] = xv.slice(ndarray::s![ni, ci, .., ..]).iter().sum::<f64>() / m;
            }
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as2(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = gv[[ni, ci]] / m;
                        dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(v);
                    }
                }
                accumulate(&mut parents[x.0], dx.into_dyn());
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (floor semantics on odd sizes).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2: input too small");
        let mut value = Array4::<f64>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let s = xv[[ni, ci, 2 * oy, 2 * ox]]
                            + xv[[ni, ci, 2 * oy, 2 * ox + 1]]
                            + xv[[ni, ci, 2 * oy + 1, 2 * ox]]
                            + xv[[ni, ci, 2 * oy + 1, 2 * ox + 1]];
                        value[[ni, ci, oy, ox]] = s / 4.0;
                    }
                }
            }
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as4(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = gv[[ni, ci, oy, ox]] / 4.0;
                                dx[[ni, ci, 2 * oy, 2 * ox]] += v;
                                dx[[ni, ci, 2 * oy, 2 * ox + 1]] += v;
                                dx[[ni, ci, 2 * oy + 1, 2 * ox]] += v;
                                dx[[ni, ci, 2 * oy + 1, 2 * ox + 1]] += v;
                            }
                        }
                    }
                }
                accumulate(&mut parents[x.0], dx.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor resize to `(h_out, w_out)`.
    pub fn upsample_nearest_to(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, c, h, w) = xv.dim();
        let src_y: Vec<usize> = (0..h_out).map(|y| (y * h / h_out).min(h - 1)).collect();
        let src_x: Vec<usize> = (0..w_out).map(|x| (x * w / w_out).min(w - 1)).collect();
        let mut value = Array4::<f64>::zeros((n, c, h_out, w_out));
        for ni in 0..n {
            for ci in 0..c {
                for (oy, &sy) in src_y.iter().enumerate() {
                    for (ox, &sx) in src_x.iter().enumerate() {
                        value[[ni, ci, oy, ox]] = xv[[ni, ci, sy, sx]];
                    }
                }
            }
        }
        let idx = self.next_index();
        self.op(
            value.into_dyn(),
            &[x],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as4(g);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for (oy, &sy) in src_y.iter().enumerate() {
                            for (ox, &sx) in src_x.iter().enumerate() {
                                dx[[ni, ci, sy, sx]] += gv[[ni, ci, oy, ox]];
                            }
                        }
                    }
                }
                accumulate(&mut parents[x.0], dx.into_dyn());
            }),
        )
    }

    /// Concatenates rank-2 `(N, D_i)` tensors along the feature axis.
    /// Slice `len` entries of axis 1 starting at `start`, for any rank ≥ 2.
    /// Covers both column ranges of `(N, F)` matrices and channel ranges of
    /// `(N, C, H, W)` maps.
    pub fn narrow1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.values[x.0];
        assert!(xv.ndim() >= 2, "narrow1: rank must be at least 2");
        let width = xv.shape()[1];
        assert!(
            start + len <= width,
            "narrow1: range {}..{} exceeds axis width {}",
            start,
            start + len,
            width
        );
        let value = xv
            .slice_axis(
                ndarray::Axis(1),
                ndarray::Slice::from(start..start + len),
            )
            .to_owned();
        let idx = self.next_index();
        let full_shape: Vec<usize> = xv.shape().to_vec();
        self.op(
            value,
            &[x],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(
                    ndarray::Axis(1),
                    ndarray::Slice::from(start..start + len),
                )
                .assign(g);
                accumulate(&mut parents[x.0], dx);
            }),
        )
    }

    /// Slice `len` entries of axis 0 starting at `start`: row ranges of
    /// matrices and sample ranges of batched maps.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.values[x.0];
        assert!(xv.ndim() >= 1, "narrow0: rank must be at least 1");
        let height = xv.shape()[0];
        assert!(
            start + len <= height,
            "narrow0: range {}..{} exceeds axis length {}",
            start,
            start + len,
            height
        );
        let value = xv
            .slice_axis(
                ndarray::Axis(0),
                ndarray::Slice::from(start..start + len),
            )
            .to_owned();
        let idx = self.next_index();
        let full_shape: Vec<usize> = xv.shape().to_vec();
        self.op(
            value,
            &[x],
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(
                    ndarray::Axis(0),
                    ndarray::Slice::from(start..start + len),
                )
                .assign(g);
                accumulate(&mut parents[x.0], dx);
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let n = as2(&self.values[parts[0].0]).dim().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = as2(&self.values[p.0]);
                assert_eq!(v.dim().0, n, "concat_cols: row count mismatch");
                v.dim().1
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::<f64>::zeros((n, total));
        let mut offset = 0;
        for (p, width) in parts.iter().zip(&widths) {
            value
                .slice_mut(ndarray::s![.., offset..offset + width])
                .assign(&as2(&self.values[p.0]));
            offset += width;
        }
        let idx = self.next_index();
        let parts_owned: Vec<Var> = parts.to_vec();
        let widths_owned = widths;
        self.op(
            value.into_dyn(),
            parts,
            Box::new(move |_, grads| {
                let (parents, g) = incoming(grads, idx);
                let gv = as2(g);
                let mut offset = 0;
                for (p, width) in parts_owned.iter().zip(&widths_owned) {
                    let slice = gv.slice(ndarray::s![.., offset..offset + *width]).to_owned();
                    accumulate(&mut parents[p.0], slice.into_dyn());
                    offset += width;
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Fused loss kernels
// ---------------------------------------------------------------------------

impl Tape {
    /// Mean cross-entropy of row logits against integer labels.
    ///
    /// Errors if any label is out of range.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = as2(&self.values[logits.0]);
        let (n, k) = lv.dim();
        if labels.len() != n {
            return Err(Error::shape("cross_entropy labels", n, labels.len()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::Parameter {
                name: "label",
                reason: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut total = 0.0;
        for (row, &label) in lv.rows().into_iter().zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / n as f64);
        let labels_owned: Vec<usize> = labels.to_vec();
        let idx = self.next_index();
        Ok(self.op(
            value,
            &[logits],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gs = *g.iter().next().expect("scalar");
                let lv = as2(&values[logits.0]);
                let mut dl = Array2::<f64>::zeros((n, k));
                for (i, (row, &label)) in lv.rows().into_iter().zip(&labels_owned).enumerate() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let softmax = (row[j] - max).exp() / denom;
                        let indicator = if j == label { 1.0 } else { 0.0 };
                        dl[[i, j]] = gs * (softmax - indicator) / n as f64;
                    }
                }
                accumulate(&mut parents[logits.0], dl.into_dyn());
            }),
        ))
    }

    /// Batch-hard triplet loss on `(N, D)` embeddings.
    ///
    /// For each anchor, the hardest positive is the farthest same-label
    /// row and the hardest negative the closest different-label row
    /// (Euclidean). Anchors without a positive are excluded; if no anchor
    /// is valid the batch is rejected.
    pub fn triplet_hard(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let ev = as2(&self.values[emb.0]);
        let (n, d) = ev.dim();
        if labels.len() != n {
            return Err(Error::shape("triplet labels", n, labels.len()));
        }
        let dist = move |a: usize, b: usize, ev: &ndarray::ArrayView2<'_, f64>| -> f64 {
            let mut s = 0.0;
            for j in 0..d {
                let diff = ev[[a, j]] - ev[[b, j]];
                s += diff * diff;
            }
            s.sqrt()
        };
        // Select hardest pairs per anchor (first index wins ties).
        let mut selections: Vec<(usize, usize, usize)> = Vec::new(); // (anchor, pos, neg)
        for a in 0..n {
            let mut best_pos: Option<(usize, f64)> = None;
            let mut best_neg: Option<(usize, f64)> = None;
            for b in 0..n {
                if b == a {
                    continue;
                }
                let dab = dist(a, b, &ev);
                if labels[b] == labels[a] {
                    if best_pos.map_or(true, |(_, cur)| dab > cur) {
                        best_pos = Some((b, dab));
                    }
                } else if best_neg.map_or(true, |(_, cur)| dab < cur) {
                    best_neg = Some((b, dab));
                }
            }
            if let (Some((p, _)), Some((ng, _))) = (best_pos, best_neg) {
                selections.push((a, p, ng));
            }
        }
        if selections.is_empty() {
            return Err(Error::Sampler(
                "triplet batch has no anchor with both a positive and a negative".into(),
            ));
        }
        let count = selections.len() as f64;
        let total: f64 = selections
            .iter()
            .map(|&(a, p, ng)| (dist(a, p, &ev) - dist(a, ng, &ev) + margin).max(0.0))
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total / count);
        let idx = self.next_index();
        Ok(self.op(
            value,
            &[emb],
            Box::new(move |values, grads| {
                let (parents, g) = incoming(grads, idx);
                let gs = *g.iter().next().expect("scalar");
                let ev = as2(&values[emb.0]);
                let mut de = Array2::<f64>::zeros((n, d));
                for &(a, p, ng) in &selections {
                    let dp = dist(a, p, &ev);
                    let dn = dist(a, ng, &ev);
                    if dp - dn + margin <= 0.0 {
                        continue; // hinge inactive
                    }
                    let coef = gs / count;
                    if dp > 0.0 {
                        for j in 0..d {
                            let diff = (ev[[a, j]] - ev[[p, j]]) / dp;
                            de[[a, j]] += coef * diff;
                            de[[p, j]] -= coef * diff;
                        }
                    }
                    if dn > 0.0 {
                        for j in 0..d {
                            let diff = (ev[[a, j]] - ev[[ng, j]]) / dn;
                            de[[a, j]] -= coef * diff;
                            de[[ng, j]] += coef * diff;
                        }
                    }
                }
                accumulate(&mut parents[emb.0], de.into_dyn());
            }),
        ))
    }
}

#[cfg(test)]
mod tests;
