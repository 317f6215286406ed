//! Differentiable primitives recorded on a [`Tape`](super::Tape).

use super::kernels;
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

fn same_tape(a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.tape.same_tape(b.tape) {
        Ok(())
    } else {
        Err(Error::Usage("operands live on different tapes".into()))
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter_map(|(i, &d)| (i != axis).then_some(d))
        .collect()
}

impl<'t> Var<'t> {
    // ── elementwise, one input ────────────────────────────────────────

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |x| x.map(&f));
        self.tape.record(
            op,
            out,
            &[self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.out.data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`. Gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(Error::Domain {
                op: "clamp",
                msg: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(self, lo: f64) -> Result<Var<'t>> {
        self.clamp(lo, f64::INFINITY)
    }

    /// Round to nearest (ties to even) with a straight-through backward:
    /// the incoming gradient passes unchanged. Combined with [`Var::clamp`]
    /// this yields the clamped straight-through rule.
    pub fn round_ste(self) -> Result<Var<'t>> {
        self.unary("round_ste", f64::round_ties_even, |_, _| 1.0)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.tape.with_value(self.id, |t| t.data().iter().any(|&v| v <= 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: "argument must be positive".into(),
            });
        }
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if self.tape.with_value(self.id, |t| t.data().iter().any(|&v| v < 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: "argument must be non-negative".into(),
            });
        }
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    // ── elementwise, two inputs ───────────────────────────────────────

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        same_tape(&self, &other)?;
        let a = self.value();
        let b = other.value();
        let Some(out_shape) = kernels::broadcast_shape(a.shape(), b.shape()) else {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} do not broadcast",
                a.shape(),
                b.shape()
            ));
        };
        let numel: usize = out_shape.iter().product();
        let ia = (a.shape() != out_shape.as_slice())
            .then(|| kernels::broadcast_index(a.shape(), &out_shape));
        let ib = (b.shape() != out_shape.as_slice())
            .then(|| kernels::broadcast_index(b.shape(), &out_shape));
        let at = |idx: &Option<Vec<usize>>, k: usize| idx.as_ref().map_or(k, |m| m[k]);
        let data = (0..numel)
            .map(|k| f(a.data()[at(&ia, k)], b.data()[at(&ib, k)]))
            .collect();
        let out = Tensor::new(out_shape, data)?;
        self.tape.record(
            op,
            out,
            &[self, other],
            Box::new(move |ctx| {
                let at = |idx: &Option<Vec<usize>>, k: usize| idx.as_ref().map_or(k, |m| m[k]);
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
                let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
                for (k, &g) in ctx.grad.iter().enumerate() {
                    let (i, j) = (at(&ia, k), at(&ib, k));
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g * da(a[i], b[j]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g * db(a[i], b[j]);
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.tape.with_value(other.id, |t| t.data().contains(&0.0)) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum(self) -> Result<Var<'t>> {
        let (s, n) = self
            .tape
            .with_value(self.id, |t| (t.data().iter().sum::<f64>(), t.numel()));
        self.tape.record(
            "sum",
            Tensor::scalar(s),
            &[self],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let (s, n) = self
            .tape
            .with_value(self.id, |t| (t.data().iter().sum::<f64>(), t.numel()));
        if n == 0 {
            return shape_err("mean of an empty tensor");
        }
        let inv = 1.0 / n as f64;
        self.tape.record(
            "mean",
            Tensor::scalar(s * inv),
            &[self],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0] * inv; n])]),
        )
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis_linear("sum_axis", axis, 1.0)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.tape.with_value(self.id, |t| t.shape().get(axis).copied());
        match len {
            Some(0) | None => shape_err(format!("mean_axis over empty or missing axis {axis}")),
            Some(len) => self.reduce_axis_linear("mean_axis", axis, 1.0 / len as f64),
        }
    }

    fn reduce_axis_linear(self, op: &'static str, axis: usize, weight: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = axis_extents(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= weight);
        let out = Tensor::new(without_axis(x.shape(), axis), out)?;
        self.tape.record(
            op,
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            g[(o * len + l) * inner + i] = ctx.grad[o * inner + i] * weight;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Population variance along `axis`, removing it.
    pub fn variance_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = axis_extents(x.shape(), axis)?;
        if len == 0 {
            return shape_err("variance over an empty axis");
        }
        let n = len as f64;
        let mut means = vec![0.0; outer * inner];
        let mut vars = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| x.data()[(o * len + l) * inner + i];
                let m = (0..len).map(at).sum::<f64>() / n;
                let v = (0..len).map(|l| (at(l) - m).powi(2)).sum::<f64>() / n;
                means[o * inner + i] = m;
                vars[o * inner + i] = v;
            }
        }
        let out = Tensor::new(without_axis(x.shape(), axis), vars)?;
        self.tape.record(
            "variance_axis",
            out,
            &[self],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let mut g = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let m = means[o * inner + i];
                        let up = ctx.grad[o * inner + i];
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            g[k] = up * 2.0 * (x[k] - m) / n;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Maximum along the last axis; the gradient goes to the first maximiser.
    pub fn max_last(self) -> Result<Var<'t>> {
        self.extremum_last("max_last", |a, b| a > b)
    }

    /// Minimum along the last axis; the gradient goes to the first minimiser.
    pub fn min_last(self) -> Result<Var<'t>> {
        self.extremum_last("min_last", |a, b| a < b)
    }

    fn extremum_last(self, op: &'static str, better: fn(f64, f64) -> bool) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return shape_err(format!("{op} needs at least one axis"));
        }
        let (rows, cols) = x.rows_cols();
        if cols == 0 {
            return shape_err(format!("{op} over an empty axis"));
        }
        let mut arg = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if better(v, row[best]) {
                    best = j;
                }
            }
            arg.push(r * cols + best);
            out.push(row[best]);
        }
        let out = Tensor::new(x.shape()[..x.rank() - 1].to_vec(), out)?;
        let numel = x.numel();
        self.tape.record(
            op,
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; numel];
                for (&k, &up) in arg.iter().zip(ctx.grad) {
                    g[k] += up;
                }
                vec![Some(g)]
            }),
        )
    }

    // ── shape ─────────────────────────────────────────────────────────

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, |t| t.reshape(shape))?;
        self.tape.record(
            "reshape",
            out,
            &[self],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.tape.with_value(self.id, Tensor::transpose)?;
        let (r, c) = (out.shape()[1], out.shape()[0]);
        self.tape.record(
            "transpose",
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = ctx.grad[j * r + i];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 {
            return shape_err("gather_rows expects a 2-D table");
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Domain {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {v} rows"),
            });
        }
        let data = ids.iter().flat_map(|&i| table.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        self.tape.record(
            "gather_rows",
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        g[i * d + c] += ctx.grad[r * d + c];
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `self[N×K] · other[K×M]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other)?;
        let out = self
            .tape
            .with_value(self.id, |a| other.tape.with_value(other.id, |b| a.matmul(b)))?;
        let (n, m) = (out.shape()[0], out.shape()[1]);
        let k = self.tape.with_value(self.id, |a| a.shape()[1]);
        self.tape.record(
            "matmul",
            out,
            &[self, other],
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| kernels::matmul_bt(ctx.grad, b, n, k, m));
                let gb = ctx.needs[1].then(|| kernels::matmul_at(a, ctx.grad, n, k, m));
                vec![ga, gb]
            }),
        )
    }

    // ── sorting ───────────────────────────────────────────────────────

    /// Stable ascending sort of a 1-D tensor. Returns the sorted values and
    /// `perm`, where `perm[j]` is the original index of sorted position `j`.
    /// The backward pass scatters gradients back through `perm`.
    pub fn sort_with_permutation(self) -> Result<(Var<'t>, Vec<usize>)> {
        if self.tape.with_value(self.id, Tensor::rank) != 1 {
            return shape_err("sort_with_permutation expects a 1-D tensor");
        }
        let (sorted, mut perms) = self.sort_rows_impl("sort")?;
        Ok((sorted, perms.pop().unwrap_or_default()))
    }

    /// Sorts every row (last axis) independently.
    pub fn sort_last(self) -> Result<Var<'t>> {
        Ok(self.sort_rows_impl("sort_last")?.0)
    }

    fn sort_rows_impl(self, op: &'static str) -> Result<(Var<'t>, Vec<Vec<usize>>)> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let perms: Vec<Vec<usize>> = if x.numel() == 0 {
            vec![Vec::new()]
        } else {
            (0..rows).map(|r| kernels::stable_argsort(x.row(r))).collect()
        };
        let mut data = Vec::with_capacity(x.numel());
        for (r, perm) in perms.iter().enumerate().take(rows) {
            data.extend(perm.iter().map(|&p| x.row(r)[p]));
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let flat: Vec<usize> = perms
            .iter()
            .enumerate()
            .flat_map(|(r, p)| p.iter().map(move |&i| r * cols + i))
            .collect();
        let var = self.tape.record(
            op,
            out,
            &[self],
            Box::new(move |ctx| {
                let mut g = vec![0.0; flat.len()];
                for (k, &src) in flat.iter().enumerate() {
                    g[src] += ctx.grad[k];
                }
                vec![Some(g)]
            }),
        )?;
        Ok((var, perms))
    }

    // ── softmax family ────────────────────────────────────────────────

    /// Log-softmax over the last axis.
    pub fn log_softmax_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..rows {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.tape.record(
            "log_softmax",
            out,
            &[self],
            Box::new(move |ctx| {
                let y = ctx.out.data();
                let mut g = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = ctx.grad[span.clone()].iter().sum();
                    for k in span {
                        g[k] = ctx.grad[k] - y[k].exp() * gsum;
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Logistic function. The upper half is computed as `1 − σ(−x)` so that
/// every double in `[0.5, 1)` is attainable; `1/(1 + e^−x)` skips some.
pub fn sigmoid(x: f64) -> f64 {
    let lower = |x: f64| {
        let e = x.exp();
        e / (1.0 + e)
    };
    if x >= 0.0 {
        1.0 - lower(-x)
    } else {
        lower(x)
    }
}

/// Inverse of [`sigmoid`] on `(0, 1)`. The closed form is searched a few
/// dozen ulps either way for a value with `sigmoid(logit(p)) == p`; when
/// none exists the closed form is returned.
pub fn logit(p: f64) -> f64 {
    let r0 = (p / (1.0 - p)).ln();
    let (mut up, mut down) = (r0, r0);
    for _ in 0..64 {
        if sigmoid(up) == p {
            return up;
        }
        if sigmoid(down) == p {
            return down;
        }
        up = up.next_up();
        down = down.next_down();
    }
    r0
}
