//! 2-D cross-correlation via im2col and a single batched GEMM.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Unrolls `x` into a `[cin*kh*kw, n*ho*wo]` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let g = *self;
        let cols = g.cols();
        let plane = g.ho * g.wo;
        let mut out = vec![T::zero(); g.rows() * cols];
        for c in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst_row = &mut out[row * cols..(row + 1) * cols];
                    for b in 0..g.n {
                        let src = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                        let dst = &mut dst_row[b * plane..(b + 1) * plane];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[oy * g.wo + ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of `im2col`: scatters a patch-matrix gradient back onto the input.
    fn col2im<T: Scalar>(&self, dcols: &[T]) -> Vec<T> {
        let g = *self;
        let cols = g.cols();
        let plane = g.ho * g.wo;
        let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
        for c in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src_row = &dcols[row * cols..(row + 1) * cols];
                    for b in 0..g.n {
                        let dst = &mut dx[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                        let src = &src_row[b * plane..(b + 1) * plane];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for ox in 0..g.wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    dst[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Output spatial extent of a convolution, if positive.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride >= 1 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kh,kw]`, no bias.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        let (Some(ho), Some(wo)) = (
            conv_output_size(xs[2], ws[2], stride, padding),
            conv_output_size(xs[3], ws[3], stride, padding),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ws:?} larger than padded input {xs:?}"),
            ));
        };
        let g = Geometry {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let cout = ws[0];
        let (rows, cols, plane) = (g.rows(), g.cols(), ho * wo);

        let patches = g.im2col(&self.data());
        let mut prod = vec![T::zero(); cout * cols];
        T::gemm(
            cout,
            rows,
            cols,
            T::one(),
            &weight.data(),
            rows as isize,
            1,
            &patches,
            cols as isize,
            1,
            T::zero(),
            &mut prod,
            cols as isize,
            1,
        );
        // [cout, n, plane] -> [n, cout, plane]
        let mut out = vec![T::zero(); g.n * cout * plane];
        for o in 0..cout {
            for b in 0..g.n {
                out[(b * cout + o) * plane..(b * cout + o + 1) * plane]
                    .copy_from_slice(&prod[o * cols + b * plane..o * cols + (b + 1) * plane]);
            }
        }

        Ok(Tensor::from_op(
            out,
            vec![g.n, cout, ho, wo],
            vec![self.clone(), weight.clone()],
            Box::new(move |a| {
                let mut gp = vec![T::zero(); cout * cols];
                for o in 0..cout {
                    for b in 0..g.n {
                        gp[o * cols + b * plane..o * cols + (b + 1) * plane]
                            .copy_from_slice(&a.grad[(b * cout + o) * plane..(b * cout + o + 1) * plane]);
                    }
                }
                let gw = a.needs[1].then(|| {
                    let patches = g.im2col(&a.parents[0].data());
                    let mut gw = vec![T::zero(); cout * rows];
                    T::gemm(
                        cout,
                        cols,
                        rows,
                        T::one(),
                        &gp,
                        cols as isize,
                        1,
                        &patches,
                        1,
                        cols as isize,
                        T::zero(),
                        &mut gw,
                        rows as isize,
                        1,
                    );
                    gw
                });
                let gx = a.needs[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * cols];
                    T::gemm(
                        rows,
                        cout,
                        cols,
                        T::one(),
                        &a.parents[1].data(),
                        1,
                        rows as isize,
                        &gp,
                        cols as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        cols as isize,
                        1,
                    );
                    g.col2im(&dcols)
                });
                vec![gx, gw]
            }),
        ))
    }
}
