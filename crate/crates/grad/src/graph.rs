//! The tape: a growing list of nodes, each holding its forward value and
//! enough saved state to push gradients to its parents.

use ndarray::{ArrayD, ArrayViewD, Axis, Dimension, Ix1, Ix2, Ix3, IxDyn, Slice};

/// Dynamic-rank `f64` array, the only tensor type the tape knows about.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].  Cheap to copy, only valid for the graph
/// that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// How [`Graph::mask_fill`] picks the replacement value for masked entries.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FillMode {
    /// Every masked entry is replaced with the maximum of the whole matrix.
    GlobalMax,
    /// Each masked entry is replaced with the maximum of its own row.
    RowMax,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Gelu(Var),
    Sqrt(Var),
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var),
    MeanAxis(Var, usize),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Rows {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        col: ndarray::Array2<f64>,
    },
    UpsampleNearest2(Var),
    Patchify {
        x: Var,
        patch: usize,
    },
    MaskFill {
        x: Var,
        mask: ArrayD<bool>,
        mode: FillMode,
        /// Flat index of the source of the fill value; one entry per row for
        /// [`FillMode::RowMax`], a single entry for [`FillMode::GlobalMax`].
        argmax: Vec<usize>,
    },
    SmoothL1Mean {
        pred: Var,
        target: Var,
        beta: f64,
    },
    BceWithLogitsMean {
        logits: Var,
        targets: Var,
    },
}

struct Node {
    value: Arr,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    inner: Vec<Option<Arr>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.inner.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Grads::get`] but substitutes zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Arr {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

/// A single-use computation tape.  Build it forward with the operator
/// methods, then call [`Graph::backward`] once on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Introduce an input (leaf) node.  Gradients flow into leaves but no
    /// further; use the returned handle to read them after `backward`.
    pub fn input(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Graph::input`] for values that are data rather than
    /// parameters; the tape treats both identically.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.input(value)
    }

    /// Scalar (zero-rank) constant.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(ndarray::arr0(value).into_dyn())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = bin_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = bin_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = bin_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = bin_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        self.push(value, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    /// 2-D matrix product `a . b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// 2-D matrix product `a . b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let value = if transpose_b {
            av.dot(&bv.t())
        } else {
            av.dot(&bv)
        };
        self.push(value.into_dyn(), Op::MatMul { a, b, transpose_b })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    /// GELU, tanh approximation.  Smooth everywhere, which keeps central
    /// finite differences honest.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::Softmax(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = ndarray::arr0(self.value(a).mean().expect("mean of empty array")).into_dyn();
        self.push(value, Op::MeanAll(a))
    }

    /// Sum over `axis`, keeping the axis with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(value, Op::SumAxis(a))
    }

    /// Mean over `axis`, keeping the axis with length 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(axis))
            .expect("mean over empty axis")
            .insert_axis(Axis(axis));
        self.push(value, Op::MeanAxis(a, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        self.push(value, Op::Slice { x, axis, start, end })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = into_shape_std(self.value(x).clone(), shape);
        self.push(value, Op::Reshape(x))
    }

    /// Gather rows of a 2-D `table` by index, in order.  Duplicate indices
    /// are allowed; their gradients accumulate.
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = as2(self.value(table));
        let d = t.ncols();
        let mut value = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        self.push(
            value.into_dyn(),
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// 2-D convolution.  `x` is `[C, H, W]`, `w` is `[O, C, KH, KW]`, `b` is
    /// `[O]`; output is `[O, OH, OW]` with `OH = (H + 2*pad - KH)/stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w);
        let ws = wv.shape();
        let (o, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, xv.shape()[0], "conv2d channel mismatch");
        let (h, wd) = (xv.shape()[1], xv.shape()[2]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let col = im2col(&xv, kh, kw, stride, pad, oh, ow);
        let w2 = wv
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let mut y = w2.dot(&col);
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let value = into_shape_std(y, &[o, oh, ow]);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
        )
    }

    /// Nearest-neighbor 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ci, y, xx]];
                    out[[ci, 2 * y, 2 * xx]] = v;
                    out[[ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        self.push(out.into_dyn(), Op::UpsampleNearest2(x))
    }

    /// Cut a `[C, H, W]` tensor into non-overlapping `patch x patch` tiles,
    /// flattened row-major to `[ (H/p)*(W/p), C*p*p ]`.  Tile order is
    /// row-major over the grid; within a tile the layout is `(c, py, px)`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(
            h % patch == 0 && w % patch == 0,
            "patch size must divide image dims"
        );
        let (gh, gw) = (h / patch, w / patch);
        let mut out = ndarray::Array2::<f64>::zeros((gh * gw, c * patch * patch));
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for ci in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            out[[row, ci * patch * patch + py * patch + px]] =
                                xv[[ci, gy * patch + py, gx * patch + px]];
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Patchify { x, patch })
    }

    /// Replace every entry where `mask` is true with the pre-fill maximum of
    /// the matrix ([`FillMode::GlobalMax`]) or of its row ([`FillMode::RowMax`]).
    ///
    /// The gradient of a filled entry flows to wherever the maximum came
    /// from, so the operator stays exactly differentiable.  An all-false mask
    /// is a no-op but still records a node; callers that want bitwise
    /// equivalence with "no fill" should skip the call instead.
    pub fn mask_fill(&mut self, x: Var, mask: &ArrayD<bool>, mode: FillMode) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape(), "mask_fill shape mismatch");
        let mut value = xv.clone();
        let argmax = match mode {
            FillMode::GlobalMax => {
                let flat = xv.iter().cloned().collect::<Vec<f64>>();
                let (am, m) = argmax_slice(&flat);
                for (v, &msk) in value.iter_mut().zip(mask.iter()) {
                    if msk {
                        *v = m;
                    }
                }
                vec![am]
            }
            FillMode::RowMax => {
                let x2 = as2(xv);
                let m2 = mask.view().into_dimensionality::<Ix2>().unwrap();
                let mut v2 = value.view_mut().into_dimensionality::<Ix2>().unwrap();
                let mut arg = Vec::with_capacity(x2.nrows());
                for r in 0..x2.nrows() {
                    let row: Vec<f64> = x2.row(r).iter().cloned().collect();
                    let (am, m) = argmax_slice(&row);
                    arg.push(am);
                    for cc in 0..x2.ncols() {
                        if m2[[r, cc]] {
                            v2[[r, cc]] = m;
                        }
                    }
                }
                arg
            }
        };
        self.push(
            value,
            Op::MaskFill {
                x,
                mask: mask.clone(),
                mode,
                argmax,
            },
        )
    }

    /// Mean smooth-L1 (Huber) distance between `pred` and `target`:
    /// `0.5 e^2 / beta` for `|e| < beta`, else `|e| - 0.5 beta`.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: Var, beta: f64) -> Var {
        assert!(beta > 0.0);
        let p = self.value(pred);
        let t = self.value(target);
        assert_eq!(p.shape(), t.shape(), "smooth_l1 shape mismatch");
        let n = p.len() as f64;
        let mut acc = 0.0;
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let e = pv - tv;
            acc += if e.abs() < beta {
                0.5 * e * e / beta
            } else {
                e.abs() - 0.5 * beta
            };
        }
        let value = ndarray::arr0(acc / n).into_dyn();
        self.push(value, Op::SmoothL1Mean { pred, target, beta })
    }

    /// Mean binary cross-entropy on logits: `mean(softplus(x) - x*t)` with
    /// targets in `[0, 1]`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Var) -> Var {
        let x = self.value(logits);
        let t = self.value(targets);
        assert_eq!(x.shape(), t.shape(), "bce shape mismatch");
        let n = x.len() as f64;
        let mut acc = 0.0;
        for (&xv, &tv) in x.iter().zip(t.iter()) {
            acc += softplus(xv) - xv * tv;
        }
        let value = ndarray::arr0(acc / n).into_dyn();
        self.push(value, Op::BceWithLogitsMean { logits, targets })
    }

    /// Backpropagate from `loss` (any shape; seeded with ones) to every
    /// reachable node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.push_to_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { inner: grads }
    }

    fn push_to_parents(&self, i: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, reduce_to(g, self.value(*a).shape()));
                accumulate(grads, *b, reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, reduce_to(g, self.value(*a).shape()));
                accumulate(grads, *b, reduce_to(&g.mapv(|v| -v), self.value(*b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = bin_broadcast(g, self.value(*b), |x, y| x * y);
                let gb = bin_broadcast(g, self.value(*a), |x, y| x * y);
                accumulate(grads, *a, reduce_to(&ga, self.value(*a).shape()));
                accumulate(grads, *b, reduce_to(&gb, self.value(*b).shape()));
            }
            Op::Div(a, b) => {
                let ga = bin_broadcast(g, self.value(*b), |x, y| x / y);
                let num = bin_broadcast(g, self.value(*a), |x, y| x * y);
                let gb = bin_broadcast(&num, self.value(*b), |x, y| -x / (y * y));
                accumulate(grads, *a, reduce_to(&ga, self.value(*a).shape()));
                accumulate(grads, *b, reduce_to(&gb, self.value(*b).shape()));
            }
            Op::Neg(a) => accumulate(grads, *a, g.mapv(|v| -v)),
            Op::Scale(a, c) => accumulate(grads, *a, g.mapv(|v| c * v)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul { a, b, transpose_b } => {
                let g2 = as2(g);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                if *transpose_b {
                    accumulate(grads, *a, g2.dot(&bv).into_dyn());
                    accumulate(grads, *b, g2.t().dot(&av).into_dyn());
                } else {
                    accumulate(grads, *a, g2.dot(&bv.t()).into_dyn());
                    accumulate(grads, *b, av.t().dot(&g2).into_dyn());
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |gv, &xv| *gv *= sigmoid(xv));
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |gv, &xv| *gv *= gelu_prime(xv));
                accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, &yv| *gv /= 2.0 * yv);
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Arr::zeros(y.raw_dim());
                let yr = y.rows();
                let gr = g.rows();
                for ((yrow, grow), mut drow) in
                    yr.into_iter().zip(gr).zip(d.rows_mut())
                {
                    let dot: f64 = yrow.iter().zip(grow.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let gs = g.first().copied().unwrap_or(0.0);
                let shape = self.value(*a).raw_dim();
                accumulate(grads, *a, Arr::from_elem(shape, gs));
            }
            Op::MeanAll(a) => {
                let shape = self.value(*a).raw_dim();
                let n = self.value(*a).len() as f64;
                let gs = g.first().copied().unwrap_or(0.0) / n;
                accumulate(grads, *a, Arr::from_elem(shape, gs));
            }
            Op::SumAxis(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis grad broadcast")
                    .to_owned();
                accumulate(grads, *a, d);
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.value(*a).shape().to_vec();
                let n = shape[*axis] as f64;
                let d = g
                    .broadcast(IxDyn(&shape))
                    .expect("mean_axis grad broadcast")
                    .mapv(|v| v / n);
                accumulate(grads, *a, d);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    accumulate(grads, p, piece);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let mut d = Arr::zeros(self.value(*x).raw_dim());
                d.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                    .assign(g);
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let d = Arr::from_shape_vec(IxDyn(&shape), g.iter().cloned().collect())
                    .expect("reshape grad");
                accumulate(grads, *x, d);
            }
            Op::Rows { table, ids } => {
                let mut d = ndarray::Array2::<f64>::zeros((
                    self.value(*table).shape()[0],
                    self.value(*table).shape()[1],
                ));
                let g2 = as2(g);
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g2.row(i);
                }
                accumulate(grads, *table, d.into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            } => {
                let ws = self.value(*w).shape().to_vec();
                let (o, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let gs = node.value.shape();
                let (oh, ow) = (gs[1], gs[2]);
                let g2 = ndarray::Array2::from_shape_vec(
                    (o, oh * ow),
                    g.iter().cloned().collect(),
                )
                .unwrap();
                let db = g2.sum_axis(Axis(1)).into_dyn();
                let dw = into_shape_std(g2.dot(&col.t()), &[o, c, kh, kw]);
                let w2 = self
                    .value(*w)
                    .view()
                    .into_shape_with_order((o, c * kh * kw))
                    .unwrap()
                    .to_owned();
                let dcol = w2.t().dot(&g2);
                let xs = self.value(*x).shape().to_vec();
                let dx = col2im(&dcol, &xs, kh, kw, *stride, *pad, oh, ow);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::UpsampleNearest2(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut d = ndarray::Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[[ci, y, xx]] = g3[[ci, 2 * y, 2 * xx]]
                                + g3[[ci, 2 * y, 2 * xx + 1]]
                                + g3[[ci, 2 * y + 1, 2 * xx]]
                                + g3[[ci, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                accumulate(grads, *x, d.into_dyn());
            }
            Op::Patchify { x, patch } => {
                let xs = self.value(*x).shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (gh, gw) = (h / patch, w / patch);
                let g2 = as2(g);
                let mut d = ndarray::Array3::<f64>::zeros((c, h, w));
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = gy * gw + gx;
                        for ci in 0..c {
                            for py in 0..*patch {
                                for px in 0..*patch {
                                    d[[ci, gy * patch + py, gx * patch + px]] =
                                        g2[[row, ci * patch * patch + py * patch + px]];
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, d.into_dyn());
            }
            Op::MaskFill {
                x,
                mask,
                mode,
                argmax,
            } => {
                let mut d = Arr::from_shape_vec(g.raw_dim(), g.iter().cloned().collect())
                    .expect("mask_fill grad layout");
                match mode {
                    FillMode::GlobalMax => {
                        let mut routed = 0.0;
                        for (dv, &msk) in d.iter_mut().zip(mask.iter()) {
                            if msk {
                                routed += *dv;
                                *dv = 0.0;
                            }
                        }
                        let flat = d.as_slice_mut().expect("contiguous mask_fill grad");
                        flat[argmax[0]] += routed;
                    }
                    FillMode::RowMax => {
                        let m2 = mask.view().into_dimensionality::<Ix2>().unwrap();
                        let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for r in 0..d2.nrows() {
                            let mut routed = 0.0;
                            for cc in 0..d2.ncols() {
                                if m2[[r, cc]] {
                                    routed += d2[[r, cc]];
                                    d2[[r, cc]] = 0.0;
                                }
                            }
                            d2[[r, argmax[r]]] += routed;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::SmoothL1Mean { pred, target, beta } => {
                let gs = g.first().copied().unwrap_or(0.0);
                let p = self.value(*pred);
                let t = self.value(*target);
                let n = p.len() as f64;
                let mut d = Arr::zeros(p.raw_dim());
                for ((dv, &pv), &tv) in d.iter_mut().zip(p.iter()).zip(t.iter()) {
                    let e = pv - tv;
                    let de = if e.abs() < *beta { e / beta } else { e.signum() };
                    *dv = gs * de / n;
                }
                accumulate(grads, *target, d.mapv(|v| -v));
                accumulate(grads, *pred, d);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let gs = g.first().copied().unwrap_or(0.0);
                let x = self.value(*logits);
                let t = self.value(*targets);
                let n = x.len() as f64;
                let mut dx = Arr::zeros(x.raw_dim());
                let mut dt = Arr::zeros(x.raw_dim());
                for (((dxv, dtv), &xv), &tv) in dx
                    .iter_mut()
                    .zip(dt.iter_mut())
                    .zip(x.iter())
                    .zip(t.iter())
                {
                    *dxv = gs * (sigmoid(xv) - tv) / n;
                    *dtv = gs * (-xv) / n;
                }
                accumulate(grads, *logits, dx);
                accumulate(grads, *targets, dt);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Arr>], v: Var, delta: Arr) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        // Matrix products can come back with reversed axes; store
        // gradients in standard layout so callers may take slices.
        slot @ None => {
            *slot = Some(if delta.is_standard_layout() {
                delta
            } else {
                delta.as_standard_layout().into_owned()
            })
        }
    }
}

/// Reshape that tolerates non-standard layouts (ndarray's `dot` may
/// return column-major results for skinny operands).
fn into_shape_std<D: Dimension>(a: ndarray::Array<f64, D>, shape: &[usize]) -> Arr {
    if a.is_standard_layout() {
        a.into_shape_with_order(IxDyn(shape)).expect("reshape element count")
    } else {
        let v: Vec<f64> = a.iter().cloned().collect();
        Arr::from_shape_vec(IxDyn(shape), v).expect("reshape element count")
    }
}

fn as2(x: &Arr) -> ndarray::ArrayView2<'_, f64> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D array")
}

/// NumPy-style co-broadcasting of two arrays through `f`.
fn bin_broadcast(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs broadcast");
    let mut out = Arr::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = ad.max(bd);
    }
    out
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(g: &Arr, shape: &[usize]) -> Arr {
    let mut d = g.clone();
    while d.ndim() > shape.len() {
        d = d.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if d.shape()[axis] != dim {
            debug_assert_eq!(dim, 1, "reduce_to target must be broadcastable");
            d = d.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    d
}

fn argmax_slice(xs: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut m = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > m {
            m = v;
            best = i;
        }
    }
    (best, m)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = ndarray::Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &ndarray::Array2<f64>,
    xshape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Arr {
    let (c, h, w) = (xshape[0], xshape[1], xshape[2]);
    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
    }

    /// Finite-difference check of `build` over every element of every input.
    /// `build` must construct a scalar loss from fresh input vars.
    fn fd_check(inputs: &[Arr], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let h = 1e-5;
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
        let loss = build(&mut g, &vars);
        assert_eq!(g.value(loss).len(), 1, "fd_check needs a scalar loss");
        let grads = g.backward(loss);

        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[ii], input.shape());
            for flat in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Arr> = inputs.to_vec();
                    perturbed[ii].as_slice_mut().unwrap()[flat] += delta;
                    let mut g2 = Graph::new();
                    let vars2: Vec<Var> =
                        perturbed.iter().map(|a| g2.input(a.clone())).collect();
                    let l2 = build(&mut g2, &vars2);
                    g2.value(l2).first().copied().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let err = crate::relative_error(an, fd);
                assert!(
                    err < tol,
                    "input {ii} elem {flat}: analytic {an} vs fd {fd} (rel err {err})"
                );
            }
        }
    }

    #[test]
    fn arithmetic_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&mut rng, &[3, 4]);
        let b = rand_arr(&mut rng, &[3, 4]);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[0]);
            let n = g.neg(m);
            let sc = g.scale(n, 0.7);
            let sh = g.add_scalar(sc, 0.3);
            g.mean_all(sh)
        }, 1e-5);
    }

    #[test]
    fn division_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_arr(&mut rng, &[2, 5]);
        let b = rand_arr(&mut rng, &[2, 5]).mapv(|v| v + 3.0);
        fd_check(&[a, b], |g, v| {
            let q = g.div(v[0], v[1]);
            g.sum_all(q)
        }, 1e-6);
    }

    #[test]
    fn broadcasting_reduces_gradients_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr(&mut rng, &[4, 3]);
        let row = rand_arr(&mut rng, &[3]);
        let scalar = rand_arr(&mut rng, &[]);
        fd_check(&[a, row, scalar], |g, v| {
            let x = g.mul(v[0], v[1]);
            let y = g.add(x, v[2]);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn matmul_both_orientations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_arr(&mut rng, &[3, 4]);
        let b = rand_arr(&mut rng, &[4, 2]);
        let c = rand_arr(&mut rng, &[5, 4]);
        fd_check(&[a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1]);
            g.sum_all(y)
        }, 1e-6);
        fd_check(&[a, c], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_arr(&mut rng, &[3, 3]);
        fd_check(std::slice::from_ref(&a), |g, v| {
            let s = g.sigmoid(v[0]);
            g.sum_all(s)
        }, 1e-6);
        fd_check(std::slice::from_ref(&a), |g, v| {
            let s = g.tanh(v[0]);
            g.sum_all(s)
        }, 1e-6);
        fd_check(std::slice::from_ref(&a), |g, v| {
            let s = g.softplus(v[0]);
            g.sum_all(s)
        }, 1e-6);
        fd_check(&[a], |g, v| {
            let s = g.gelu(v[0]);
            g.sum_all(s)
        }, 1e-5);
        let pos = rand_arr(&mut rng, &[4]).mapv(|v| v.abs() + 0.5);
        fd_check(&[pos], |g, v| {
            let s = g.sqrt(v[0]);
            g.sum_all(s)
        }, 1e-6);
    }

    #[test]
    fn softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_arr(&mut rng, &[4, 6]);
        let w = rand_arr(&mut rng, &[4, 6]);
        fd_check(&[a, w], |g, v| {
            let s = g.softmax(v[0]);
            let weighted = g.mul(s, v[1]);
            g.sum_all(weighted)
        }, 1e-6);
    }

    #[test]
    fn reductions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_arr(&mut rng, &[3, 4, 2]);
        fd_check(std::slice::from_ref(&a), |g, v| {
            let s = g.sum_axis(v[0], 1);
            g.mean_all(s)
        }, 1e-6);
        fd_check(&[a], |g, v| {
            let m = g.mean_axis(v[0], 2);
            let sq = g.mul(m, m);
            g.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn concat_slice_reshape_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_arr(&mut rng, &[2, 3]);
        let b = rand_arr(&mut rng, &[4, 3]);
        fd_check(&[a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], 0);
            let s = g.slice(c, 0, 1, 5);
            let r = g.reshape(s, &[2, 6]);
            let sq = g.mul(r, r);
            g.mean_all(sq)
        }, 1e-6);
    }

    #[test]
    fn row_gather_accumulates_duplicate_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = rand_arr(&mut rng, &[5, 3]);
        fd_check(&[table], |g, v| {
            let r = g.rows(v[0], &[0, 2, 2, 4]);
            let sq = g.mul(r, r);
            g.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = rand_arr(&mut rng, &[2, 5, 5]);
            let w = rand_arr(&mut rng, &[3, 2, 3, 3]);
            let b = rand_arr(&mut rng, &[3]);
            fd_check(&[x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad);
                let a = g.gelu(y);
                g.mean_all(a)
            }, 1e-5);
        }
    }

    #[test]
    fn upsample_and_patchify_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_arr(&mut rng, &[2, 3, 3]);
        fd_check(&[x], |g, v| {
            let u = g.upsample_nearest2(v[0]);
            let sq = g.mul(u, u);
            g.sum_all(sq)
        }, 1e-6);
        let img = rand_arr(&mut rng, &[3, 4, 4]);
        let w = rand_arr(&mut rng, &[12, 5]);
        fd_check(&[img, w], |g, v| {
            let p = g.patchify(v[0], 2);
            let y = g.matmul(p, v[1]);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn patchify_layout_is_row_major_channel_major() {
        let mut g = Graph::new();
        // 1 channel, 4x4 image with values 0..16 row-major.
        let x = Arr::from_shape_vec(IxDyn(&[1, 4, 4]), (0..16).map(f64::from).collect()).unwrap();
        let v = g.input(x);
        let p = g.patchify(v, 2);
        let out = g.value(p);
        assert_eq!(out.shape(), &[4, 4]);
        // Top-left tile.
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(out[[0, 1]], 1.0);
        assert_eq!(out[[0, 2]], 4.0);
        assert_eq!(out[[0, 3]], 5.0);
        // Top-right tile starts at column 2 of the image.
        assert_eq!(out[[1, 0]], 2.0);
        // Bottom-left tile starts at row 2.
        assert_eq!(out[[2, 0]], 8.0);
    }

    #[test]
    fn mask_fill_replaces_with_global_max_and_routes_gradient() {
        let mut g = Graph::new();
        let x = Arr::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0]).unwrap();
        let v = g.input(x);
        let mask = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![false, false, true, true, false, false],
        )
        .unwrap();
        let filled = g.mask_fill(v, &mask, FillMode::GlobalMax);
        let out = g.value(filled);
        assert_eq!(out[[0, 2]], 5.0);
        assert_eq!(out[[1, 0]], 5.0);
        assert_eq!(out[[0, 0]], 1.0);
        let loss = g.sum_all(filled);
        let grads = g.backward(loss);
        let dx = grads.get(v).unwrap();
        // Max lives at (0,1): its own pass-through plus two routed fills.
        assert_eq!(dx[[0, 1]], 3.0);
        assert_eq!(dx[[0, 2]], 0.0);
        assert_eq!(dx[[1, 0]], 0.0);
        assert_eq!(dx[[0, 0]], 1.0);
    }

    #[test]
    fn mask_fill_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_arr(&mut rng, &[4, 5]);
        let mask = ArrayD::from_shape_fn(IxDyn(&[4, 5]), |_| rng.gen_bool(0.3));
        for mode in [FillMode::GlobalMax, FillMode::RowMax] {
            let m = mask.clone();
            let w = rand_arr(&mut rng, &[4, 5]);
            fd_check(&[x.clone(), w], move |g, v| {
                let f = g.mask_fill(v[0], &m, mode);
                let weighted = g.mul(f, v[1]);
                g.sum_all(weighted)
            }, 1e-5);
        }
    }

    #[test]
    fn loss_heads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pred = rand_arr(&mut rng, &[6, 2]).mapv(|v| v * 1.5);
        let target = rand_arr(&mut rng, &[6, 2]);
        fd_check(&[pred, target], |g, v| g.smooth_l1_mean(v[0], v[1], 1.0), 1e-5);

        let logits = rand_arr(&mut rng, &[8]);
        let labels = ArrayD::from_shape_fn(IxDyn(&[8]), |_| f64::from(rng.gen_bool(0.5)));
        fd_check(&[logits, labels], |g, v| g.bce_with_logits_mean(v[0], v[1]), 1e-6);
    }

    #[test]
    fn smooth_l1_has_expected_closed_form_values() {
        let mut g = Graph::new();
        let pred = g.input(Arr::from_shape_vec(IxDyn(&[2]), vec![1.0, 3.0]).unwrap());
        let tgt = g.input(Arr::from_shape_vec(IxDyn(&[2]), vec![0.5, 1.0]).unwrap());
        let l = g.smooth_l1_mean(pred, tgt, 1.0);
        // Elements: |0.5| < 1 -> 0.125; |2| >= 1 -> 1.5; mean 0.8125.
        assert!((g.value(l).first().unwrap() - 0.8125).abs() < 1e-12);
    }

    #[test]
    fn bce_at_even_odds_is_ln2() {
        let mut g = Graph::new();
        let logits = g.input(Arr::zeros(IxDyn(&[4])));
        let targets = g.input(Arr::from_shape_vec(IxDyn(&[4]), vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let l = g.bce_with_logits_mean(logits, targets);
        assert!((g.value(l).first().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn backward_ignores_nodes_after_the_loss() {
        let mut g = Graph::new();
        let a = g.input(Arr::ones(IxDyn(&[2])));
        let loss = g.sum_all(a);
        let _later = g.scale(a, 10.0);
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap()[[0]], 1.0);
    }
}
