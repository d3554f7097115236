//! Differentiable elementwise, reduction, shape and linear-algebra ops.

use crate::error::{invalid, Result, TensorError};
use crate::flops;
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch {
            op,
            left: sa,
            right: sb,
        });
    }
    Ok(())
}

fn n_of<T: Real>(n: usize) -> T {
    T::from_usize(n).unwrap()
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        flops::record(out.numel() as u64);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        flops::record(out.numel() as u64);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        flops::record(out.numel() as u64);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g, x, _| {
                vec![
                    Some(g.zip_map(x[1], |g, b| g * b)),
                    Some(g.zip_map(x[0], |g, a| g * a)),
                ]
            }),
        ))
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("div", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a / b);
        flops::record(out.numel() as u64);
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g, x, y| {
                let ga = g.zip_map(x[1], |g, b| g / b);
                let gb = Tensor::from_fn(g.shape(), |i| {
                    -g.data()[i] * y.data()[i] / x[1].data()[i]
                });
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scalar_mul(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        flops::record(out.numel() as u64);
        self.tape().record(
            &[self],
            out,
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]),
        )
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        flops::record(out.numel() as u64);
        self.tape()
            .record(&[self], out, Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.tape().record(
            &[self],
            out,
            Box::new(|g, x, _| {
                vec![Some(g.zip_map(x[0], |g, v| if v > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        flops::record(4 * out.numel() as u64);
        self.tape().record(
            &[self],
            out,
            Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, s| g * s * (T::one() - s)))]),
        )
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let v = self.value();
        let out = Tensor::scalar(v.sum());
        flops::record(v.numel() as u64);
        self.tape().record(
            &[self],
            out,
            Box::new(|g, x, _| vec![Some(Tensor::full(x[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let v = self.value();
        let out = Tensor::scalar(v.mean());
        flops::record(v.numel() as u64 + 1);
        self.tape().record(
            &[self],
            out,
            Box::new(|g, x, _| {
                let n: T = n_of(x[0].numel());
                vec![Some(Tensor::full(x[0].shape(), g.item() / n))]
            }),
        )
    }

    /// Population standard deviation over all elements.
    pub fn std_all(self) -> Var<'t, T> {
        let v = self.value();
        let mean = v.mean();
        let var = v.data().iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n_of(v.numel());
        let out = Tensor::scalar(var.sqrt());
        flops::record(4 * v.numel() as u64);
        self.tape().record(
            &[self],
            out,
            Box::new(|g, x, y| {
                let sd = y.item();
                let n: T = n_of(x[0].numel());
                if sd == T::zero() {
                    return vec![Some(Tensor::zeros(x[0].shape()))];
                }
                let mean = x[0].mean();
                let scale = g.item() / (n * sd);
                vec![Some(x[0].map(|a| (a - mean) * scale))]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape().record(
            &[self],
            out,
            Box::new(|g, x, _| vec![Some(g.clone().reshape(x[0].shape()).unwrap())]),
        ))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                shape: shape.to_vec(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} invalid for extent {}", shape[axis]),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape().record(
            &[self],
            out,
            Box::new(move |g, x, _| {
                let mut gx = Tensor::zeros(x[0].shape());
                let gd = gx.data_mut();
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    gd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product of rank-2 variables.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape().record(
            &[self, other],
            out,
            Box::new(|g, x, _| {
                let (m, k) = x[0].dims2().unwrap();
                let n = x[1].shape()[1];
                // grad_a = g·bᵀ, grad_b = aᵀ·g
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g.data(), (n, 1), x[1].data(), (1, n), T::zero(), &mut ga, (k, 1));
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, x[0].data(), (1, k), g.data(), (n, 1), T::zero(), &mut gb, (n, 1));
                vec![
                    Some(Tensor::new(&[m, k], ga).unwrap()),
                    Some(Tensor::new(&[k, n], gb).unwrap()),
                ]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.tape().record(
            &[self],
            out,
            Box::new(|g, _, _| vec![Some(g.transpose().unwrap())]),
        ))
    }

    /// Row-wise softmax of a rank-2 variable, stabilized by subtracting each
    /// row maximum.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, cols) = v.dims2()?;
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = T::zero();
            for (d, &a) in dst.iter_mut().zip(row) {
                *d = (a - max).exp();
                total = total + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        flops::record(4 * (rows * cols) as u64);
        let out = Tensor::new(&[rows, cols], out)?;
        Ok(self.tape().record(
            &[self],
            out,
            Box::new(move |g, _, y| {
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let yr = &y.data()[span.clone()];
                    let gr = &g.data()[span.clone()];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in gx[span].iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(Tensor::new(&[rows, cols], gx).unwrap())]
            }),
        ))
    }

    /// `(x − μ)/(σ + eps)` with mean and population standard deviation taken
    /// over every element.
    pub fn standardize(self, eps: T) -> Result<Var<'t, T>> {
        let v = self.value();
        let n = v.numel();
        if n < 2 {
            return Err(invalid("standardize", "needs at least 2 elements"));
        }
        let nt: T = n_of(n);
        let mean = v.mean();
        let sd = (v.data().iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nt).sqrt();
        let denom = sd + eps;
        let out = v.map(|a| (a - mean) / denom);
        flops::record(6 * n as u64);
        Ok(self.tape().record(
            &[self],
            out,
            Box::new(move |g, x, _| {
                let gmean = g.mean();
                let centered = x[0].map(|a| a - mean);
                let gdot: T = g.data().iter().zip(centered.data()).map(|(&a, &b)| a * b).sum();
                let coupling = if sd > T::zero() {
                    gdot / (denom * denom * nt * sd)
                } else {
                    T::zero()
                };
                let gx = Tensor::from_fn(x[0].shape(), |i| {
                    (g.data()[i] - gmean) / denom - coupling * centered.data()[i]
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates variables along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                let chunk = e * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(first.tape().record(
            parts,
            out,
            Box::new(move |g, x, _| {
                let mut grads: Vec<Vec<T>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gv, &e) in grads.iter_mut().zip(&extents) {
                        let chunk = e * inner;
                        gv.extend_from_slice(&g.data()[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                grads
                    .into_iter()
                    .zip(x)
                    .map(|(gv, xi)| Some(Tensor::new(xi.shape(), gv).unwrap()))
                    .collect()
            }),
        ))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
