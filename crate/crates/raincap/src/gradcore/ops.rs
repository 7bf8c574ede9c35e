//! Forward op constructors and their backward kernels.
//!
//! Every constructor validates extents, computes the forward value eagerly,
//! and records an [`Op`] on the graph. `backward_node` dispatches the matching
//! adjoint rule during the reverse sweep.

use super::graph::{Graph, Node, Op, TensorId};
use super::shape::{broadcast_strides, Shape};
use super::{elem, Element, GradError, Result};

impl<T: Element> Graph<T> {
    fn broadcast_pair(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<[usize; 4]> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        broadcast_strides(sb, sa.padded4()).ok_or_else(|| GradError::ShapeMismatch {
            op,
            detail: format!("{sb} does not broadcast into {sa}"),
        })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        make: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        let bs = self.broadcast_pair(name, a, b)?;
        let out4 = self.shape(a).padded4();
        let data = zip_broadcast(self.data(a), out4, self.data(b), bs, f);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(self.shape(a).clone(), data, rg, make(a, b)))
    }

    /// Elementwise `a + b`; `b` broadcasts into `a`'s shape.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise `a - b`; `b` broadcasts into `a`'s shape.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise `a * b`; `b` broadcasts into `a`'s shape.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise `a / b`; `b` broadcasts into `a`'s shape. The caller is
    /// responsible for keeping `b` away from zero (see [`Graph::clamp_min`]).
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let c: T = elem(c);
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).clone(), data, rg, Op::Scale { a, c })
    }

    /// Addition of a constant to every element.
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let c: T = elem(c);
        let data = self.data(a).iter().map(|&x| x + c).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).clone(), data, rg, Op::AddScalar { a })
    }

    /// Elementwise `max(a, threshold)`; the subgradient at the threshold is 0.
    pub fn clamp_min(&mut self, a: TensorId, threshold: f64) -> TensorId {
        let t: T = elem(threshold);
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > t { x } else { t })
            .collect();
        let rg = self.requires_grad(a);
        self.push(
            self.shape(a).clone(),
            data,
            rg,
            Op::ClampMin { a, threshold: t },
        )
    }

    /// Matrix product of two rank-2 tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.dims()[1] != sb.dims()[0] {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa} x {sb}"),
            });
        }
        let (m, k, n) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Shape::new(&[m, n]), data, rg, Op::Matmul { a, b }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.rank() != 2 {
            return Err(GradError::InvalidArg {
                op: "transpose2",
                detail: format!("rank-2 required, got {sa}"),
            });
        }
        let (m, n) = (sa.dims()[0], sa.dims()[1]);
        let data = transpose(self.data(a), m, n);
        let rg = self.requires_grad(a);
        Ok(self.push(Shape::new(&[n, m]), data, rg, Op::Transpose { a }))
    }

    /// Reinterprets the extents without changing element order.
    pub fn reshape(&mut self, a: TensorId, dims: &[usize]) -> Result<TensorId> {
        let shape = Shape::new(dims);
        if shape.numel() != self.shape(a).numel() {
            return Err(GradError::ShapeMismatch {
                op: "reshape",
                detail: format!("{} -> {}", self.shape(a), shape),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(shape, data, rg, Op::Reshape { a }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(GradError::InvalidArg {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).clone();
        if axis >= first.rank() {
            return Err(GradError::InvalidArg {
                op: "concat",
                detail: format!("axis {axis} out of range for {first}"),
            });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.rank() == first.rank()
                && sp
                    .dims()
                    .iter()
                    .zip(first.dims())
                    .enumerate()
                    .all(|(i, (dp, df))| i == axis || dp == df);
            if !compatible {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{sp} incompatible with {first} along axis {axis}"),
                });
            }
            axis_total += sp.dims()[axis];
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = axis_total;
        let out_shape = Shape::new(&dims);
        let outer: usize = first.dims()[..axis].iter().product();
        let inner: usize = first.dims()[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.numel()];
        let mut axis_off = 0usize;
        for &p in parts {
            let pa = self.shape(p).dims()[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst = (o * axis_total + axis_off) * inner;
                let s = o * pa * inner;
                data[dst..dst + pa * inner].copy_from_slice(&src[s..s + pa * inner]);
            }
            axis_off += pa;
        }
        let rg = self.any_requires_grad(parts);
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).clone(), data, rg, Op::Relu { a })
    }

    /// Logistic sigmoid, computed in the numerically stable branch form.
    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).clone(), data, rg, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).clone(), data, rg, Op::Tanh { a })
    }

    /// Softmax along `axis`, with the max subtracted before exponentiation.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if axis >= sa.rank() {
            return Err(GradError::InvalidArg {
                op: "softmax",
                detail: format!("axis {axis} out of range for {sa}"),
            });
        }
        let (outer, k, inner) = axis_split(sa, axis);
        let x = self.data(a);
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * k + j) * inner + i;
                let mut mx = x[idx(0)];
                for j in 1..k {
                    mx = mx.max(x[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..k {
                    let e = (x[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..k {
                    data[idx(j)] = data[idx(j)] / sum;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(sa.clone(), data, rg, Op::Softmax { a, axis }))
    }

    /// 2-D cross-correlation over NCHW input with an OIHW kernel.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (sx, sk) = (self.shape(input), self.shape(kernel));
        if sx.rank() != 4 || sk.rank() != 4 {
            return Err(GradError::ShapeMismatch {
                op: "conv2d",
                detail: format!("need rank-4 input and kernel, got {sx} and {sk}"),
            });
        }
        let [n, cin, h, w] = sx.padded4();
        let [cout, kcin, kh, kw] = sk.padded4();
        if kcin != cin {
            return Err(GradError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel expects {kcin} input channels, input has {cin}"),
            });
        }
        if stride == 0 {
            return Err(GradError::InvalidArg {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(GradError::InvalidArg {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let data = conv2d_forward(
            self.data(input),
            n,
            cin,
            h,
            w,
            self.data(kernel),
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let rg = self.any_requires_grad(&[input, kernel]);
        Ok(self.push(
            Shape::new(&[n, cout, oh, ow]),
            data,
            rg,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Adaptive average pooling of an NCHW tensor to an `oh x ow` grid, using
    /// contiguous bins `[floor(i*H/oh), ceil((i+1)*H/oh))` that cover the
    /// input exactly.
    pub fn adaptive_avg_pool(&mut self, a: TensorId, oh: usize, ow: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.rank() != 4 || oh == 0 || ow == 0 {
            return Err(GradError::InvalidArg {
                op: "adaptive_avg_pool",
                detail: format!(
                    "rank-4 input and positive output extents required, got {sa} -> {oh}x{ow}"
                ),
            });
        }
        let [n, c, h, w] = sa.padded4();
        let x = self.data(a);
        let mut data = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let xb = plane * h * w;
            let ob = plane * oh * ow;
            for i in 0..oh {
                let (y0, y1) = pool_bin(h, oh, i);
                for j in 0..ow {
                    let (x0, x1) = pool_bin(w, ow, j);
                    let mut sum = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            sum = sum + x[xb + y * w + xx];
                        }
                    }
                    let count = elem::<T>(((y1 - y0) * (x1 - x0)) as f64);
                    data[ob + i * ow + j] = sum / count;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Shape::new(&[n, c, oh, ow]),
            data,
            rg,
            Op::AdaptiveAvgPool { a },
        ))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn nearest_upsample(&mut self, a: TensorId, factor: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.rank() != 4 || factor == 0 {
            return Err(GradError::InvalidArg {
                op: "nearest_upsample",
                detail: format!("rank-4 input and factor >= 1 required, got {sa} x{factor}"),
            });
        }
        let [n, c, h, w] = sa.padded4();
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data(a);
        let mut data = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let xb = plane * h * w;
            let ob = plane * oh * ow;
            for y in 0..oh {
                let src_row = xb + (y / factor) * w;
                let dst_row = ob + y * ow;
                for xx in 0..ow {
                    data[dst_row + xx] = x[src_row + xx / factor];
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Shape::new(&[n, c, oh, ow]),
            data,
            rg,
            Op::NearestUpsample { a, factor },
        ))
    }

    /// Batch normalisation of an NCHW tensor. In training mode the batch
    /// statistics normalise the input and are returned so the caller can fold
    /// them into its running estimates; in inference mode `running` supplies
    /// the (mean, variance) pair and nothing is returned.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: Option<(&[T], &[T])>,
        training: bool,
        eps: f64,
    ) -> Result<(TensorId, Option<(Vec<T>, Vec<T>)>)> {
        let sx = self.shape(x);
        if sx.rank() != 4 {
            return Err(GradError::InvalidArg {
                op: "batch_norm",
                detail: format!("rank-4 input required, got {sx}"),
            });
        }
        let [n, c, h, w] = sx.padded4();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p).dims() != [c] {
                return Err(GradError::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("{name} must have shape [{c}], got {}", self.shape(p)),
                });
            }
        }
        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let xd = self.data(x);
            let m = elem::<T>((n * h * w) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * h * w;
                    for &v in &xd[base..base + h * w] {
                        sum = sum + v;
                    }
                }
                mean[ch] = sum / m;
                let mut sq = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * h * w;
                    for &v in &xd[base..base + h * w] {
                        let d = v - mean[ch];
                        sq = sq + d * d;
                    }
                }
                var[ch] = sq / m;
            }
            (mean, var)
        } else {
            let (rm, rv) = running.ok_or_else(|| GradError::InvalidArg {
                op: "batch_norm",
                detail: "inference mode requires running statistics".into(),
            })?;
            if rm.len() != c || rv.len() != c {
                return Err(GradError::ShapeMismatch {
                    op: "batch_norm",
                    detail: format!("running statistics must have {c} channels"),
                });
            }
            (rm.to_vec(), rv.to_vec())
        };
        let epsv: T = elem(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut data = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for k in 0..h * w {
                    let xh = (xd[base + k] - mean[ch]) * inv_std[ch];
                    xhat[base + k] = xh;
                    data[base + k] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        let id = self.push(
            sx.clone(),
            data,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        );
        Ok((id, if training { Some((mean, var)) } else { None }))
    }

    /// Row lookup into an embedding table `[V,m]`, producing `[ids.len(), m]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table);
        if st.rank() != 2 {
            return Err(GradError::InvalidArg {
                op: "embedding",
                detail: format!("rank-2 table required, got {st}"),
            });
        }
        if ids.is_empty() {
            return Err(GradError::InvalidArg {
                op: "embedding",
                detail: "no ids".into(),
            });
        }
        let (v, m) = (st.dims()[0], st.dims()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(GradError::InvalidArg {
                op: "embedding",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let td = self.data(table);
        let mut data = vec![T::zero(); ids.len() * m];
        for (r, &id) in ids.iter().enumerate() {
            data[r * m..(r + 1) * m].copy_from_slice(&td[id * m..(id + 1) * m]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Shape::new(&[ids.len(), m]),
            data,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Shape::scalar(), vec![s], rg, Op::Sum { a })
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = elem::<T>(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Shape::scalar(), vec![s / n], rg, Op::Mean { a })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.pair_loss(
            "mse_loss",
            pred,
            target,
            |d| d * d,
            |p, t| Op::MseLoss { pred: p, target: t },
        )
    }

    /// Mean absolute error between two same-shape tensors.
    pub fn l1_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        self.pair_loss(
            "l1_loss",
            pred,
            target,
            |d| d.abs(),
            |p, t| Op::L1Loss { pred: p, target: t },
        )
    }

    fn pair_loss(
        &mut self,
        name: &'static str,
        pred: TensorId,
        target: TensorId,
        f: impl Fn(T) -> T,
        make: impl Fn(TensorId, TensorId) -> Op<T>,
    ) -> Result<TensorId> {
        if self.shape(pred) != self.shape(target) {
            return Err(GradError::ShapeMismatch {
                op: name,
                detail: format!("{} vs {}", self.shape(pred), self.shape(target)),
            });
        }
        let n = elem::<T>(self.data(pred).len() as f64);
        let s: T = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| f(p - t))
            .sum();
        let rg = self.any_requires_grad(&[pred, target]);
        Ok(self.push(Shape::scalar(), vec![s / n], rg, make(pred, target)))
    }

    /// Mean negative log softmax probability of the target class per row.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        self.cross_entropy_impl(logits, targets, true)
    }

    /// Like [`Graph::cross_entropy`] but summed over rows instead of averaged,
    /// so per-step losses can be pooled before a single normalisation.
    pub fn cross_entropy_sum(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        self.cross_entropy_impl(logits, targets, false)
    }

    fn cross_entropy_impl(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mean: bool,
    ) -> Result<TensorId> {
        let sl = self.shape(logits);
        if sl.rank() != 2 {
            return Err(GradError::InvalidArg {
                op: "cross_entropy",
                detail: format!("rank-2 logits required, got {sl}"),
            });
        }
        let (rows, v) = (sl.dims()[0], sl.dims()[1]);
        if targets.len() != rows {
            return Err(GradError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(GradError::InvalidArg {
                op: "cross_entropy",
                detail: format!("target {bad} out of range for {v} classes"),
            });
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &x[r * v..(r + 1) * v];
            let mut mx = row[0];
            for &xv in row {
                mx = mx.max(xv);
            }
            let mut sum = T::zero();
            for (j, &xv) in row.iter().enumerate() {
                let e = (xv - mx).exp();
                probs[r * v + j] = e;
                sum = sum + e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / sum;
            }
            let lse = mx + sum.ln();
            total = total + (lse - row[targets[r]]);
        }
        if mean {
            total = total / elem(rows as f64);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Shape::scalar(),
            vec![total],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                mean,
            },
        ))
    }
}

/// Numerically stable logistic sigmoid.
fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axis_split(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let dims = shape.dims();
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Inclusive output-coordinate range hit by kernel offset `k` given padding
/// and stride, or `None` if that offset never lands inside the input.
fn conv_range(
    pad: usize,
    k: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> Option<(usize, usize)> {
    let lo = if k >= pad {
        0
    } else {
        (pad - k + stride - 1) / stride
    };
    let top = in_extent as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return None;
    }
    let hi = ((top as usize) / stride).min(out_extent - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

fn pool_bin(in_extent: usize, out_extent: usize, i: usize) -> (usize, usize) {
    (
        i * in_extent / out_extent,
        ((i + 1) * in_extent + out_extent - 1) / out_extent,
    )
}

fn zip_broadcast<T: Element>(
    a: &[T],
    out4: [usize; 4],
    b: &[T],
    bs: [usize; 4],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    let mut ai = 0usize;
    for i0 in 0..out4[0] {
        for i1 in 0..out4[1] {
            for i2 in 0..out4[2] {
                let base = i0 * bs[0] + i1 * bs[1] + i2 * bs[2];
                if bs[3] == 1 {
                    for i3 in 0..out4[3] {
                        out.push(f(a[ai], b[base + i3]));
                        ai += 1;
                    }
                } else {
                    let bv = b[base];
                    for _ in 0..out4[3] {
                        out.push(f(a[ai], bv));
                        ai += 1;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the two adjoints of a broadcast binary op in one pass.
#[allow(clippy::too_many_arguments)]
fn binary_backward<T: Element>(
    gout: &[T],
    a: &[T],
    b: &[T],
    out4: [usize; 4],
    bs: [usize; 4],
    mut ga: Option<&mut [T]>,
    dfa: impl Fn(T, T) -> T,
    mut gb: Option<&mut [T]>,
    dfb: impl Fn(T, T) -> T,
) {
    let mut ai = 0usize;
    for i0 in 0..out4[0] {
        for i1 in 0..out4[1] {
            for i2 in 0..out4[2] {
                let base = i0 * bs[0] + i1 * bs[1] + i2 * bs[2];
                for i3 in 0..out4[3] {
                    let bi = base + i3 * bs[3];
                    let (av, bv, g) = (a[ai], b[bi], gout[ai]);
                    if let Some(ga) = ga.as_deref_mut() {
                        ga[ai] = ga[ai] + g * dfa(av, bv);
                    }
                    if let Some(gb) = gb.as_deref_mut() {
                        gb[bi] = gb[bi] + g * dfb(av, bv);
                    }
                    ai += 1;
                }
            }
        }
    }
}

fn matmul_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// `a [m,n] x b^T [k,n] -> [m,k]`, accumulated into `out`.
fn matmul_nt_acc<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut dot = T::zero();
            for j in 0..n {
                dot = dot + arow[j] * brow[j];
            }
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

/// `a^T [k,m] x b [m,n] -> [k,n]` where `a` is stored `[m,k]`, accumulated.
fn matmul_tn_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Element>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: &[T],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let kbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let Some((oy0, oy1)) = conv_range(pad, ky, stride, h, oh) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some((ox0, ox1)) = conv_range(pad, kx, stride, w, ow) else {
                            continue;
                        };
                        let wgt = k[kbase + ky * kw + kx];
                        for oy in oy0..=oy1 {
                            let iy = oy * stride + ky - pad;
                            let xrow = xbase + iy * w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let xs = &x[xrow + ix0..xrow + ix0 + (ox1 - ox0 + 1)];
                                let os = &mut out[orow + ox0..orow + ox1 + 1];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o = *o + wgt * xv;
                                }
                            } else {
                                let mut ix = ox0 * stride + kx - pad;
                                for ox in ox0..=ox1 {
                                    out[orow + ox] = out[orow + ox] + wgt * x[xrow + ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input<T: Element>(
    gout: &[T],
    k: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let kbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let Some((oy0, oy1)) = conv_range(pad, ky, stride, h, oh) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some((ox0, ox1)) = conv_range(pad, kx, stride, w, ow) else {
                            continue;
                        };
                        let wgt = k[kbase + ky * kw + kx];
                        for oy in oy0..=oy1 {
                            let iy = oy * stride + ky - pad;
                            let xrow = xbase + iy * w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let gs = &gout[orow + ox0..orow + ox1 + 1];
                                let xs = &mut gx[xrow + ix0..xrow + ix0 + (ox1 - ox0 + 1)];
                                for (xg, &g) in xs.iter_mut().zip(gs) {
                                    *xg = *xg + wgt * g;
                                }
                            } else {
                                let mut ix = ox0 * stride + kx - pad;
                                for ox in ox0..=ox1 {
                                    gx[xrow + ix] = gx[xrow + ix] + wgt * gout[orow + ox];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel<T: Element>(
    gout: &[T],
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gk: &mut [T],
) {
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let kbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let Some((oy0, oy1)) = conv_range(pad, ky, stride, h, oh) else {
                        continue;
                    };
                    for kx in 0..kw {
                        let Some((ox0, ox1)) = conv_range(pad, kx, stride, w, ow) else {
                            continue;
                        };
                        let mut acc = T::zero();
                        for oy in oy0..=oy1 {
                            let iy = oy * stride + ky - pad;
                            let xrow = xbase + iy * w;
                            let orow = obase + oy * ow;
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let gs = &gout[orow + ox0..orow + ox1 + 1];
                                let xs = &x[xrow + ix0..xrow + ix0 + (ox1 - ox0 + 1)];
                                for (&g, &xv) in gs.iter().zip(xs) {
                                    acc = acc + g * xv;
                                }
                            } else {
                                let mut ix = ox0 * stride + kx - pad;
                                for ox in ox0..=ox1 {
                                    acc = acc + gout[orow + ox] * x[xrow + ix];
                                    ix += stride;
                                }
                            }
                        }
                        gk[kbase + ky * kw + kx] = gk[kbase + ky * kw + kx] + acc;
                    }
                }
            }
        }
    }
}

/// Applies one node's adjoint rule, accumulating into parent gradient slots.
/// `before` covers graph slots `0..i`, so parent lookups cannot alias `gout`.
pub(crate) fn backward_node<T: Element>(
    nodes: &[Node<T>],
    i: usize,
    gout: &[T],
    before: &mut [Option<Vec<T>>],
) {
    let rg = |id: TensorId| nodes[id.0].requires_grad;
    let numel = |id: TensorId| nodes[id.0].shape.numel();
    macro_rules! slot {
        ($id:expr) => {
            before[$id.0].get_or_insert_with(|| vec![T::zero(); nodes[$id.0].shape.numel()])
        };
    }
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
            let out4 = nodes[a.0].shape.padded4();
            let bs = broadcast_strides(&nodes[b.0].shape, out4).expect("validated at construction");
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            // Split borrows: materialise each adjoint buffer lazily but keep
            // the pass single; simplest is two sequential accumulations.
            let one = |_x: T, _y: T| T::one();
            let neg_one = |_x: T, _y: T| -T::one();
            match &nodes[i].op {
                Op::Add { .. } => {
                    if rg(*a) {
                        binary_backward(gout, ad, bd, out4, bs, Some(slot!(a)), one, None, one);
                    }
                    if rg(*b) {
                        binary_backward(gout, ad, bd, out4, bs, None, one, Some(slot!(b)), one);
                    }
                }
                Op::Sub { .. } => {
                    if rg(*a) {
                        binary_backward(gout, ad, bd, out4, bs, Some(slot!(a)), one, None, one);
                    }
                    if rg(*b) {
                        binary_backward(gout, ad, bd, out4, bs, None, one, Some(slot!(b)), neg_one);
                    }
                }
                Op::Mul { .. } => {
                    if rg(*a) {
                        binary_backward(
                            gout,
                            ad,
                            bd,
                            out4,
                            bs,
                            Some(slot!(a)),
                            |_, y| y,
                            None,
                            one,
                        );
                    }
                    if rg(*b) {
                        binary_backward(
                            gout,
                            ad,
                            bd,
                            out4,
                            bs,
                            None,
                            one,
                            Some(slot!(b)),
                            |x, _| x,
                        );
                    }
                }
                Op::Div { .. } => {
                    if rg(*a) {
                        binary_backward(
                            gout,
                            ad,
                            bd,
                            out4,
                            bs,
                            Some(slot!(a)),
                            |_, y| T::one() / y,
                            None,
                            one,
                        );
                    }
                    if rg(*b) {
                        binary_backward(
                            gout,
                            ad,
                            bd,
                            out4,
                            bs,
                            None,
                            one,
                            Some(slot!(b)),
                            |x, y| -x / (y * y),
                        );
                    }
                }
                _ => unreachable!(),
            }
        }
        Op::Scale { a, c } => {
            if rg(*a) {
                let ga = slot!(a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g = *g + go * *c;
                }
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if rg(*a) {
                let ga = slot!(a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g = *g + go;
                }
            }
        }
        Op::ClampMin { a, threshold } => {
            if rg(*a) {
                let ad = &nodes[a.0].data;
                let ga = slot!(a);
                for ((g, &go), &x) in ga.iter_mut().zip(gout).zip(ad) {
                    if x > *threshold {
                        *g = *g + go;
                    }
                }
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].shape.dims()[0], nodes[a.0].shape.dims()[1]);
            let n = nodes[b.0].shape.dims()[1];
            if rg(*a) {
                matmul_nt_acc(gout, &nodes[b.0].data, m, n, k, slot!(a));
            }
            if rg(*b) {
                matmul_tn_acc(&nodes[a.0].data, gout, m, k, n, slot!(b));
            }
        }
        Op::Transpose { a } => {
            if rg(*a) {
                let (n, m) = (nodes[i].shape.dims()[0], nodes[i].shape.dims()[1]);
                let gt = transpose(gout, n, m);
                let ga = slot!(a);
                for (g, gv) in ga.iter_mut().zip(gt) {
                    *g = *g + gv;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let dims = nodes[i].shape.dims();
            let outer: usize = dims[..*axis].iter().product();
            let inner: usize = dims[*axis + 1..].iter().product();
            let axis_total = dims[*axis];
            let mut axis_off = 0usize;
            for &p in parts {
                let pa = nodes[p.0].shape.dims()[*axis];
                if rg(p) {
                    let gp = slot!(p);
                    for o in 0..outer {
                        let src = (o * axis_total + axis_off) * inner;
                        let dst = o * pa * inner;
                        for k in 0..pa * inner {
                            gp[dst + k] = gp[dst + k] + gout[src + k];
                        }
                    }
                }
                axis_off += pa;
            }
        }
        Op::Relu { a } => {
            if rg(*a) {
                let ad = &nodes[a.0].data;
                let ga = slot!(a);
                for ((g, &go), &x) in ga.iter_mut().zip(gout).zip(ad) {
                    if x > T::zero() {
                        *g = *g + go;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if rg(*a) {
                let y = &nodes[i].data;
                let ga = slot!(a);
                for ((g, &go), &yv) in ga.iter_mut().zip(gout).zip(y) {
                    *g = *g + go * yv * (T::one() - yv);
                }
            }
        }
        Op::Tanh { a } => {
            if rg(*a) {
                let y = &nodes[i].data;
                let ga = slot!(a);
                for ((g, &go), &yv) in ga.iter_mut().zip(gout).zip(y) {
                    *g = *g + go * (T::one() - yv * yv);
                }
            }
        }
        Op::Softmax { a, axis } => {
            if rg(*a) {
                let y = &nodes[i].data;
                let (outer, k, inner) = axis_split(&nodes[i].shape, *axis);
                let ga = slot!(a);
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * k + j) * inner + ii;
                        let mut dot = T::zero();
                        for j in 0..k {
                            dot = dot + gout[idx(j)] * y[idx(j)];
                        }
                        for j in 0..k {
                            let p = idx(j);
                            ga[p] = ga[p] + y[p] * (gout[p] - dot);
                        }
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            stride,
            pad,
        } => {
            let [n, cin, h, w] = nodes[input.0].shape.padded4();
            let [cout, _, kh, kw] = nodes[kernel.0].shape.padded4();
            let [_, _, oh, ow] = nodes[i].shape.padded4();
            if rg(*input) {
                conv2d_backward_input(
                    gout,
                    &nodes[kernel.0].data,
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    oh,
                    ow,
                    slot!(input),
                );
            }
            if rg(*kernel) {
                conv2d_backward_kernel(
                    gout,
                    &nodes[input.0].data,
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    oh,
                    ow,
                    slot!(kernel),
                );
            }
        }
        Op::AdaptiveAvgPool { a } => {
            if rg(*a) {
                let [n, c, h, w] = nodes[a.0].shape.padded4();
                let [_, _, oh, ow] = nodes[i].shape.padded4();
                let ga = slot!(a);
                for plane in 0..n * c {
                    let xb = plane * h * w;
                    let ob = plane * oh * ow;
                    for bi in 0..oh {
                        let (y0, y1) = pool_bin(h, oh, bi);
                        for bj in 0..ow {
                            let (x0, x1) = pool_bin(w, ow, bj);
                            let count = elem::<T>(((y1 - y0) * (x1 - x0)) as f64);
                            let g = gout[ob + bi * ow + bj] / count;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    ga[xb + y * w + xx] = ga[xb + y * w + xx] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::NearestUpsample { a, factor } => {
            if rg(*a) {
                let [n, c, h, w] = nodes[a.0].shape.padded4();
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                let ga = slot!(a);
                for plane in 0..n * c {
                    let xb = plane * h * w;
                    let ob = plane * oh * ow;
                    for y in 0..oh {
                        let src_row = xb + (y / f) * w;
                        let dst_row = ob + y * ow;
                        for xx in 0..ow {
                            ga[src_row + xx / f] = ga[src_row + xx / f] + gout[dst_row + xx];
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let [n, c, h, w] = nodes[x.0].shape.padded4();
            let m = elem::<T>((n * h * w) as f64);
            let gd = &nodes[gamma.0].data;
            // Per-channel reductions shared by all three adjoints.
            let mut sum_go = vec![T::zero(); c];
            let mut sum_go_xhat = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    for k in 0..h * w {
                        sum_go[ch] = sum_go[ch] + gout[base + k];
                        sum_go_xhat[ch] = sum_go_xhat[ch] + gout[base + k] * xhat[base + k];
                    }
                }
            }
            if rg(*x) {
                let gx = slot!(x);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        let scale = gd[ch] * inv_std[ch];
                        for k in 0..h * w {
                            let idx = base + k;
                            let d = if *training {
                                scale
                                    * (gout[idx] - sum_go[ch] / m - xhat[idx] * sum_go_xhat[ch] / m)
                            } else {
                                scale * gout[idx]
                            };
                            gx[idx] = gx[idx] + d;
                        }
                    }
                }
            }
            if rg(*gamma) {
                let gg = slot!(gamma);
                for ch in 0..c {
                    gg[ch] = gg[ch] + sum_go_xhat[ch];
                }
            }
            if rg(*beta) {
                let gb = slot!(beta);
                for ch in 0..c {
                    gb[ch] = gb[ch] + sum_go[ch];
                }
            }
        }
        Op::Embedding { table, ids } => {
            if rg(*table) {
                let m = nodes[table.0].shape.dims()[1];
                let gt = slot!(table);
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..m {
                        gt[id * m + k] = gt[id * m + k] + gout[r * m + k];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if rg(*a) {
                let g = gout[0];
                let ga = slot!(a);
                for gv in ga.iter_mut() {
                    *gv = *gv + g;
                }
            }
        }
        Op::Mean { a } => {
            if rg(*a) {
                let g = gout[0] / elem::<T>(numel(*a) as f64);
                let ga = slot!(a);
                for gv in ga.iter_mut() {
                    *gv = *gv + g;
                }
            }
        }
        Op::MseLoss { pred, target } | Op::L1Loss { pred, target } => {
            let n = elem::<T>(numel(*pred) as f64);
            let g = gout[0] / n;
            let l1 = matches!(nodes[i].op, Op::L1Loss { .. });
            let dd: Vec<T> = nodes[pred.0]
                .data
                .iter()
                .zip(&nodes[target.0].data)
                .map(|(&p, &t)| {
                    let d = p - t;
                    if l1 {
                        // sign with the subgradient at 0 taken as 0
                        if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    } else {
                        elem::<T>(2.0) * d
                    }
                })
                .collect();
            if rg(*pred) {
                let gp = slot!(pred);
                for (gv, &d) in gp.iter_mut().zip(&dd) {
                    *gv = *gv + g * d;
                }
            }
            if rg(*target) {
                let gt = slot!(target);
                for (gv, &d) in gt.iter_mut().zip(&dd) {
                    *gv = *gv - g * d;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            mean,
        } => {
            if rg(*logits) {
                let v = nodes[logits.0].shape.dims()[1];
                let denom = if *mean {
                    elem::<T>(targets.len() as f64)
                } else {
                    T::one()
                };
                let g = gout[0] / denom;
                let gl = slot!(logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let idx = r * v + j;
                        let delta = if j == t { T::one() } else { T::zero() };
                        gl[idx] = gl[idx] + g * (probs[idx] - delta);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{GradError, Graph, Shape, TensorId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(g: &mut Graph<f64>, dims: &[usize], data: Vec<f64>) -> TensorId {
        g.leaf(Shape::new(dims), data, true).unwrap()
    }

    #[test]
    fn elementwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.gen_range(0.5..2.0)).collect();
            let mut g: Graph<f64> = Graph::new();
            let ia = leaf(&mut g, &[3, 4], a.clone());
            let ib = leaf(&mut g, &[3, 4], b.clone());
            let checks = [
                (
                    g.add(ia, ib).unwrap(),
                    (0..12).map(|i| a[i] + b[i]).collect::<Vec<_>>(),
                ),
                (
                    g.sub(ia, ib).unwrap(),
                    (0..12).map(|i| a[i] - b[i]).collect(),
                ),
                (
                    g.mul(ia, ib).unwrap(),
                    (0..12).map(|i| a[i] * b[i]).collect(),
                ),
                (
                    g.div(ia, ib).unwrap(),
                    (0..12).map(|i| a[i] / b[i]).collect(),
                ),
            ];
            for (id, want) in checks {
                for (got, want) in g.data(id).iter().zip(want) {
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn broadcast_add_applies_per_channel() {
        let mut g: Graph<f64> = Graph::new();
        let x = leaf(&mut g, &[1, 2, 2, 2], vec![0.0; 8]);
        let bias = leaf(&mut g, &[1, 2, 1, 1], vec![1.0, -1.0]);
        let y = g.add(x, bias).unwrap();
        assert_eq!(g.data(y), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn relu_and_sigmoid_fixed_points() {
        let mut g: Graph<f64> = Graph::new();
        let x = leaf(&mut g, &[3], vec![-3.0, 0.0, 5.0]);
        let r = g.relu(x);
        assert_eq!(g.data(r), &[0.0, 0.0, 5.0]);
        let z = leaf(&mut g, &[1], vec![0.0]);
        let s = g.sigmoid(z);
        assert_eq!(g.data(s), &[0.5]);
        // gradient mask of relu, with the subgradient at 0 taken as 0
        let sum = g.sum(r);
        g.backward(sum).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let ia = leaf(&mut g, &[4, 5], a.clone());
        let ib = leaf(&mut g, &[5, 2], b.clone());
        let y = g.matmul(ia, ib).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut want = 0.0;
                for k in 0..5 {
                    want += a[i * 5 + k] * b[k * 2 + j];
                }
                assert!((g.data(y)[i * 2 + j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (cin, h, w, cout, kh, kw, pad) =
            (2usize, 5usize, 5usize, 3usize, 3usize, 3usize, 1usize);
        for stride in [1usize, 2] {
            let mut g: Graph<f64> = Graph::new();
            let ix = leaf(&mut g, &[1, cin, h, w], x.clone());
            let ik = leaf(&mut g, &[cout, cin, kh, kw], k.clone());
            let y = g.conv2d(ix, ik, stride, pad).unwrap();
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            assert_eq!(g.shape(y).dims(), &[1, cout, oh, ow]);
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut want = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ixx = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ixx >= 0 && ixx < w as isize {
                                        want += x[(ci * h + iy as usize) * w + ixx as usize]
                                            * k[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        let got = g.data(y)[(co * oh + oy) * ow + ox];
                        assert!(
                            (got - want).abs() < 1e-9,
                            "stride {stride} at ({co},{oy},{ox})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let ix = leaf(&mut g, &[3, 5], x.clone());
        let y = g.softmax(ix, 1).unwrap();
        for r in 0..3 {
            let s: f64 = g.data(y)[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.5).collect();
        let is = leaf(&mut g, &[3, 5], shifted);
        let ys = g.softmax(is, 1).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_pool_bins_cover_input() {
        // 5 -> 2 bins are [0,3) and [2,5): overlapping but covering.
        let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let mut g: Graph<f64> = Graph::new();
        let ix = leaf(&mut g, &[1, 1, 5, 5], x.clone());
        let y = g.adaptive_avg_pool(ix, 2, 2).unwrap();
        let bin = |ys: std::ops::Range<usize>, xs: std::ops::Range<usize>| {
            let mut s = 0.0;
            let mut n = 0;
            for yy in ys.clone() {
                for xx in xs.clone() {
                    s += x[yy * 5 + xx];
                    n += 1;
                }
            }
            s / n as f64
        };
        assert_eq!(g.data(y)[0], bin(0..3, 0..3));
        assert_eq!(g.data(y)[1], bin(0..3, 2..5));
        assert_eq!(g.data(y)[2], bin(2..5, 0..3));
        assert_eq!(g.data(y)[3], bin(2..5, 2..5));
        // global pooling degenerates to the mean
        let yg = g.adaptive_avg_pool(ix, 1, 1).unwrap();
        assert!((g.data(yg)[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_repeats_blocks() {
        let mut g: Graph<f64> = Graph::new();
        let ix = leaf(&mut g, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.nearest_upsample(ix, 2).unwrap();
        assert_eq!(
            g.data(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn cross_entropy_equals_manual_log_softmax() {
        let mut g: Graph<f64> = Graph::new();
        let logits = leaf(&mut g, &[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]);
        let loss = g.cross_entropy(logits, &[1, 2]).unwrap();
        let manual = |row: &[f64], t: usize| {
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let want = (manual(&[1.0, 2.0, 0.5], 1) + manual(&[-1.0, 0.0, 3.0], 2)) / 2.0;
        assert!((g.value(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut g: Graph<f64> = Graph::new();
        let x = leaf(&mut g, &[3], vec![1.0, -2.0, 0.5]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let first: Vec<f64> = g.grad(x).unwrap().to_vec();
        for (gv, xv) in first.iter().zip([1.0, -2.0, 0.5]) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
        g.backward(loss).unwrap();
        let second: Vec<f64> = g.grad(x).unwrap().to_vec();
        for (s, f) in second.iter().zip(&first) {
            assert!(
                (s - 2.0 * f).abs() < 1e-12,
                "double backward doubles the gradient"
            );
        }
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0]);
        let y = g.relu(x);
        assert!(matches!(
            g.backward(y),
            Err(GradError::NotScalar { numel: 2 })
        ));
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let mut g: Graph<f64> = Graph::new();
        let a = leaf(&mut g, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut g, &[2, 2], vec![0.0; 4]);
        assert!(matches!(
            g.add(a, b),
            Err(GradError::ShapeMismatch { op: "add", .. })
        ));
        assert!(matches!(
            g.matmul(a, a),
            Err(GradError::ShapeMismatch { op: "matmul", .. })
        ));
        let big = leaf(&mut g, &[1, 1, 9, 9], vec![0.0; 81]);
        let k = leaf(&mut g, &[1, 1, 12, 12], vec![0.0; 144]);
        assert!(g.conv2d(big, k, 1, 1).is_err());
        assert!(g.mse_loss(a, b).is_err());
    }

    #[test]
    fn forward_is_deterministic_for_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let ix = g.leaf(Shape::new(&[1, 3, 4, 4]), x.clone(), false).unwrap();
            let ik = g.leaf(Shape::new(&[2, 3, 2, 2]), k.clone(), false).unwrap();
            let c = g.conv2d(ix, ik, 2, 0).unwrap();
            let r = g.relu(c);
            let m = g.mean(r);
            g.value(m)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn batch_norm_normalises_per_channel() {
        let mut g: Graph<f64> = Graph::new();
        let x = leaf(&mut g, &[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let gamma = leaf(&mut g, &[1], vec![1.0]);
        let beta = leaf(&mut g, &[1], vec![0.0]);
        let (y, stats) = g.batch_norm(x, gamma, beta, None, true, 0.0).unwrap();
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, vec![4.0]);
        assert_eq!(var, vec![5.0]);
        let inv = 1.0 / 5.0f64.sqrt();
        for (got, xv) in g.data(y).iter().zip([1.0, 3.0, 5.0, 7.0]) {
            assert!((got - (xv - 4.0) * inv).abs() < 1e-12);
        }
        // inference mode applies the provided statistics instead
        let (ye, none) = g
            .batch_norm(x, gamma, beta, Some((&[0.0], &[1.0])), false, 0.0)
            .unwrap();
        assert!(none.is_none());
        assert_eq!(g.data(ye), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = leaf(&mut g, &[1, 2, 2, 2], vec![1.0; 8]);
        let b = leaf(&mut g, &[1, 1, 2, 2], vec![2.0; 4]);
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(y).dims(), &[1, 3, 2, 2]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 8]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
    }
}
