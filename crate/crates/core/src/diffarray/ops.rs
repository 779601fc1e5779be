use rand::Rng;

use super::tape::{BackwardCtx, Tape, Var};
use super::{shape_err, Activation, Float, Mode, LEAKY_SLOPE};
use crate::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_values<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank.saturating_sub(1);
    loop {
        if rank == 0 {
            out.push(src[0]);
            break;
        }
        // Innermost run.
        let ext = out_shape[last];
        let st = step[last];
        for k in 0..ext {
            out.push(src[offset + k * st]);
        }
        // Carry into outer dimensions.
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn unary<T: Float>(
    tape: &mut Tape<T>,
    op: &'static str,
    x: Var,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var {
    let shape = tape.shape(x).to_vec();
    let value: Vec<T> = tape.value(x).iter().map(|&v| f(v)).collect();
    tape.record(
        op,
        &[x],
        shape,
        value,
        Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.inputs[0])
                .zip(ctx.output)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        }),
    )
}

fn std_normal_cdf<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Float>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}

impl<T: Float> Tape<T> {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.record(
            "add",
            &[a, b],
            shape,
            value,
            Box::new(|ctx| {
                let pass = |need: bool| need.then(|| ctx.grad.to_vec());
                vec![pass(ctx.needs[0]), pass(ctx.needs[1])]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.record(
            "sub",
            &[a, b],
            shape,
            value,
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.to_vec()),
                    ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.record(
            "mul",
            &[a, b],
            shape,
            value,
            Box::new(|ctx| {
                let prod = |other: &[T]| ctx.grad.iter().zip(other).map(|(&g, &o)| g * o).collect();
                vec![
                    ctx.needs[0].then(|| prod(ctx.inputs[1])),
                    ctx.needs[1].then(|| prod(ctx.inputs[0])),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        unary(self, "scale", x, move |v| v * c, move |_, _| c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        unary(self, "square", x, |v| v * v, |x, _| x + x)
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return shape_err(format!("add_bias: bias {:?} vs input {:?}", bs, xs));
        }
        let width = bs[0];
        let b = self.value(bias).to_vec();
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % width])
            .collect();
        Ok(self.record(
            "add_bias",
            &[x, bias],
            xs,
            value,
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); width];
                    for row in ctx.grad.chunks(width) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
            }),
        ))
    }

    /// Adds per-channel values to an `[n, c, ...]` array.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias);
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return shape_err(format!("add_channel_bias: bias {:?} vs input {:?}", bs, xs));
        }
        let (_, c, inner) = axis_split(&xs, 1);
        let b = self.value(bias).to_vec();
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % c])
            .collect();
        Ok(self.record(
            "add_channel_bias",
            &[x, bias],
            xs,
            value,
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![T::zero(); c];
                    for (i, &g) in ctx.grad.iter().enumerate() {
                        gb[(i / inner) % c] += g;
                    }
                    gb
                });
                vec![ctx.needs[0].then(|| ctx.grad.to_vec()), gb]
            }),
        ))
    }

    /// Elementwise product with a fixed array of the same shape.
    pub fn mul_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return shape_err(format!(
                "mul_const: {} weights for shape {:?}",
                weights.len(),
                self.shape(x)
            ));
        }
        let shape = self.shape(x).to_vec();
        let value = self
            .value(x)
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .collect();
        Ok(self.record(
            "mul_const",
            &[x],
            shape,
            value,
            Box::new(move |ctx| {
                vec![Some(
                    ctx.grad.iter().zip(&weights).map(|(&g, &w)| g * w).collect(),
                )]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let total = self.value(x).iter().copied().sum();
        self.record(
            "sum",
            &[x],
            Vec::new(),
            vec![total],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n.max(1) as f64))
    }

    /// `sum_i w_i * x_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return shape_err(format!(
                "weighted_sum: {} weights for shape {:?}",
                weights.len(),
                self.shape(x)
            ));
        }
        let total = self
            .value(x)
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .sum();
        Ok(self.record(
            "weighted_sum",
            &[x],
            Vec::new(),
            vec![total],
            Box::new(move |ctx| vec![Some(weights.iter().map(|&w| w * ctx.grad[0]).collect())]),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return shape_err(format!(
                "reshape: {:?} cannot become {:?}",
                self.shape(x),
                shape
            ));
        }
        let value = self.value(x).to_vec();
        Ok(self.record(
            "reshape",
            &[x],
            shape.to_vec(),
            value,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len()) {
            return shape_err(format!("permute: axes {:?} for shape {:?}", axes, shape));
        }
        for &a in axes {
            if std::mem::replace(&mut seen[a], true) {
                return shape_err(format!("permute: repeated axis in {:?}", axes));
            }
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = permute_values(self.value(x), &shape, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(self.record(
            "permute",
            &[x],
            out_shape,
            value,
            Box::new(move |ctx| vec![Some(permute_values(ctx.grad, &grad_shape, &inverse))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err(format!("transpose of rank-{r} array"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    /// Joins arrays along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptySet("concat of zero arrays".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} for shape {:?}", base));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return shape_err(format!("concat: {:?} vs {:?} on axis {axis}", s, base));
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &wd) in xs.iter().zip(&widths) {
                let chunk = wd * inner;
                value.extend_from_slice(&self.value(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.record(
            "concat",
            xs,
            out_shape,
            value,
            Box::new(move |ctx| {
                let mut offset = 0;
                let row = total * inner;
                widths
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&wd, &need)| {
                        let chunk = wd * inner;
                        let start = offset;
                        offset += chunk;
                        need.then(|| {
                            let mut g = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                g.extend_from_slice(
                                    &ctx.grad[o * row + start..o * row + start + chunk],
                                );
                            }
                            g
                        })
                    })
                    .collect()
            }),
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::LeakyRelu => self.leaky_relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        unary(
            self,
            "leaky_relu",
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        unary(
            self,
            "gelu",
            x,
            |v| v * std_normal_cdf(v),
            |x, _| std_normal_cdf(x) + x * std_normal_pdf(x),
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in train mode.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.record(
            "dropout",
            &[x],
            shape,
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} for shape {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut value = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    value[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    value[at(k)] = value[at(k)] / total;
                }
            }
        }
        Ok(self.record(
            "softmax",
            &[x],
            shape,
            value,
            Box::new(move |ctx| {
                let y = ctx.output;
                let dy = ctx.grad;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: T = (0..n).map(|k| dy[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (dy[at(k)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Scales each vector along the last axis to unit length, `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&width) = shape.last() else {
            return shape_err("l2_normalize of a scalar".into());
        };
        let src = self.value(x);
        let mut value = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(src.len() / width.max(1));
        for row in src.chunks(width) {
            let r = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(r);
            value.extend(row.iter().map(|&v| v / r));
        }
        Ok(self.record(
            "l2_normalize",
            &[x],
            shape,
            value,
            Box::new(move |ctx| {
                let mut dx = Vec::with_capacity(ctx.grad.len());
                for ((gy, y), &r) in ctx
                    .grad
                    .chunks(width)
                    .zip(ctx.output.chunks(width))
                    .zip(&norms)
                {
                    let dot: T = gy.iter().zip(y).map(|(&g, &v)| g * v).sum();
                    dx.extend(gy.iter().zip(y).map(|(&g, &v)| (g - v * dot) / r));
                }
                vec![Some(dx)]
            }),
        ))
    }
}
