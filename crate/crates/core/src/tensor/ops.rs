//! Elementwise, reduction, indexing and dense-product ops.

use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{from_usize, Scalar};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|a| vec![Some(a.grad.to_vec()), Some(a.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|a| vec![Some(a.grad.to_vec()), Some(a.grad.iter().map(|&g| -g).collect())]),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|a| {
                let x = a.parents[0].data();
                let y = a.parents[1].data();
                let gx = a.needs[0].then(|| a.grad.iter().zip(y.iter()).map(|(&g, &v)| g * v).collect());
                let gy = a.needs[1].then(|| a.grad.iter().zip(x.iter()).map(|(&g, &v)| g * v).collect());
                vec![gx, gy]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |a| vec![Some(a.grad.iter().map(|&g| g * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|a| vec![Some(a.grad.to_vec())]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    /// Multiplies every element by a single-element tensor that stays on the graph.
    pub fn scale_by(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("factor must have one element, got {:?}", s.shape()),
            ));
        }
        let k = s.item();
        let data = self.data().iter().map(|&v| v * k).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(|a| {
                let k = a.parents[1].item();
                let gx = a.needs[0].then(|| a.grad.iter().map(|&g| g * k).collect());
                let gs = a.needs[1].then(|| {
                    let x = a.parents[0].data();
                    vec![a.grad.iter().zip(x.iter()).map(|(&g, &v)| g * v).sum()]
                });
                vec![gx, gs]
            }),
        ))
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.max(T::zero())).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|a| {
                let x = a.parents[0].data();
                vec![Some(
                    a.grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.exp()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|a| vec![Some(a.grad.iter().zip(a.output).map(|(&g, &y)| g * y).collect())]),
        )
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v.ln()).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|a| {
                let x = a.parents[0].data();
                vec![Some(a.grad.iter().zip(x.iter()).map(|(&g, &v)| g / v).collect())]
            }),
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |a| vec![Some(vec![a.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(T::one() / from_usize(self.numel()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|a| vec![Some(a.grad.to_vec())]),
        ))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.shape()),
            ));
        }
        if start == 0 && len == self.shape()[axis] {
            return Ok(self.clone());
        }
        let (outer, extent, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&a.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Picks entries of a rank-1 tensor by index (repeats allowed).
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 1 {
            return Err(Error::shape(
                "gather",
                format!("expects rank 1, got {:?}", self.shape()),
            ));
        }
        let n = self.numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::invalid("gather", format!("indices {indices:?} for length {n}")));
        }
        let src = self.data();
        let data = indices.iter().map(|&i| src[i]).collect();
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            data,
            vec![indices.len()],
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = vec![T::zero(); n];
                for (&i, &gi) in idx.iter().zip(a.grad) {
                    g[i] += gi;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = &first.shape()[1..];
        if parts.iter().any(|p| p.ndim() == 0 || &p.shape()[1..] != tail) {
            return Err(Error::shape("concat", "trailing extents differ"));
        }
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut lead = 0;
        for p in parts {
            data.extend_from_slice(&p.data());
            sizes.push(p.numel());
            lead += p.shape()[0];
        }
        let mut shape = first.shape().to_vec();
        shape[0] = lead;
        Ok(Tensor::from_op(
            data,
            shape,
            parts.to_vec(),
            Box::new(move |a| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(a.needs)
                    .map(|(&n, &need)| {
                        let g = need.then(|| a.grad[off..off + n].to_vec());
                        off += n;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data(),
            k as isize,
            1,
            &other.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |a| {
                let ga = a.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    // g_a = g * b^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        a.grad,
                        n as isize,
                        1,
                        &a.parents[1].data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut g,
                        k as isize,
                        1,
                    );
                    g
                });
                let gb = a.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * n];
                    // g_b = a^T * g
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &a.parents[0].data(),
                        1,
                        k as isize,
                        a.grad,
                        n as isize,
                        1,
                        T::zero(),
                        &mut g,
                        n as isize,
                        1,
                    );
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine map `x * W^T + b` for `x: [N,D]`, `W: [K,D]`, `b: [K]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if self.ndim() != 2
            || weight.ndim() != 2
            || bias.ndim() != 1
            || self.shape()[1] != weight.shape()[1]
            || weight.shape()[0] != bias.shape()[0]
        {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            ));
        }
        let (n, d, k) = (self.shape()[0], self.shape()[1], weight.shape()[0]);
        let mut out = Vec::with_capacity(n * k);
        {
            let b = bias.data();
            for _ in 0..n {
                out.extend_from_slice(&b);
            }
        }
        T::gemm(
            n,
            d,
            k,
            T::one(),
            &self.data(),
            d as isize,
            1,
            &weight.data(),
            1,
            d as isize,
            T::one(),
            &mut out,
            k as isize,
            1,
        );
        Ok(Tensor::from_op(
            out,
            vec![n, k],
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |a| {
                let gx = a.needs[0].then(|| {
                    let mut g = vec![T::zero(); n * d];
                    T::gemm(
                        n,
                        k,
                        d,
                        T::one(),
                        a.grad,
                        k as isize,
                        1,
                        &a.parents[1].data(),
                        d as isize,
                        1,
                        T::zero(),
                        &mut g,
                        d as isize,
                        1,
                    );
                    g
                });
                let gw = a.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * d];
                    T::gemm(
                        k,
                        n,
                        d,
                        T::one(),
                        a.grad,
                        1,
                        k as isize,
                        &a.parents[0].data(),
                        d as isize,
                        1,
                        T::zero(),
                        &mut g,
                        d as isize,
                        1,
                    );
                    g
                });
                let gb = a.needs[2].then(|| {
                    let mut g = vec![T::zero(); k];
                    for row in a.grad.chunks_exact(k) {
                        g.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    g
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("log_softmax", "rank-0 input"))?;
        let src = self.data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            out.extend(row.iter().map(|&v| v - lse));
        }
        drop(src);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = Vec::with_capacity(a.grad.len());
                for (gr, yr) in a.grad.chunks_exact(k).zip(a.output.chunks_exact(k)) {
                    let total: T = gr.iter().copied().sum();
                    g.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * total));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let k = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let src = self.data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - m).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        drop(src);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = Vec::with_capacity(a.grad.len());
                for (gr, yr) in a.grad.chunks_exact(k).zip(a.output.chunks_exact(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    g.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `[N,K]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        Ok(self.log_softmax()?.pick(labels)?.mean().neg())
    }

    /// Row-wise selection `out[i] = self[i, cols[i]]` for a `[N,K]` input.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 || self.shape()[0] != cols.len() {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} indices", self.shape(), cols.len()),
            ));
        }
        let k = self.shape()[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(Error::invalid("pick", format!("index {bad} out of range 0..{k}")));
        }
        let src = self.data();
        let data = cols.iter().enumerate().map(|(i, &c)| src[i * k + c]).collect();
        drop(src);
        let cols = cols.to_vec();
        let n = cols.len();
        Ok(Tensor::from_op(
            data,
            vec![n],
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = vec![T::zero(); n * k];
                for (i, &c) in cols.iter().enumerate() {
                    g[i * k + c] = a.grad[i];
                }
                vec![Some(g)]
            }),
        ))
    }
}
