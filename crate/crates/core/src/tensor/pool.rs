//! Adaptive average pooling along the channel axis and over space.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{from_usize, Scalar};

/// Window `[start, end)` of input positions averaged into output position `i`
/// when resizing an axis of length `input` to `output`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

fn windows(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output).map(|i| adaptive_window(i, input, output)).collect()
}

fn rank4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expects rank 4, got {:?}", t.shape()))),
    }
}

impl<T: Scalar> Tensor<T> {
    /// Resizes the channel axis of `[N,C,H,W]` to `target` channels by
    /// averaging adaptive windows of input channels at every pixel.
    pub fn channel_pool(&self, target: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = rank4("channel_pool", self)?;
        if target == 0 {
            return Err(Error::invalid("channel_pool", "target channel count must be >= 1"));
        }
        if target == c {
            return Ok(self.clone());
        }
        let hw = h * w;
        let win = windows(c, target);
        let x = self.data();
        let mut out = vec![T::zero(); n * target * hw];
        for b in 0..n {
            for (i, &(s, e)) in win.iter().enumerate() {
                let dst = &mut out[(b * target + i) * hw..(b * target + i + 1) * hw];
                for ch in s..e {
                    let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
                let len: T = from_usize(e - s);
                dst.iter_mut().for_each(|d| *d /= len);
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![n, target, h, w],
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for (i, &(s, e)) in win.iter().enumerate() {
                        let len: T = from_usize(e - s);
                        let src = &a.grad[(b * target + i) * hw..(b * target + i + 1) * hw];
                        for ch in s..e {
                            let dst = &mut g[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v / len);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Spatial adaptive average pooling to `[N,C,oh,ow]`.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let [n, c, h, w] = rank4("adaptive_avg_pool2d", self)?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("adaptive_avg_pool2d", "output extent must be >= 1"));
        }
        if (oh, ow) == (h, w) {
            return Ok(self.clone());
        }
        let wy = windows(h, oh);
        let wx = windows(w, ow);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.chunks_exact(h * w) {
            for &(ys, ye) in &wy {
                for &(xs, xe) in &wx {
                    let mut s = T::zero();
                    for yy in ys..ye {
                        for xx in xs..xe {
                            s += plane[yy * w + xx];
                        }
                    }
                    out.push(s / from_usize((ye - ys) * (xe - xs)));
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            vec![self.clone()],
            Box::new(move |a| {
                let mut g = vec![T::zero(); n * c * h * w];
                for (plane, gout) in g.chunks_exact_mut(h * w).zip(a.grad.chunks_exact(oh * ow)) {
                    for (iy, &(ys, ye)) in wy.iter().enumerate() {
                        for (ix, &(xs, xe)) in wx.iter().enumerate() {
                            let v = gout[iy * ow + ix] / from_usize((ye - ys) * (xe - xs));
                            for yy in ys..ye {
                                for xx in xs..xe {
                                    plane[yy * w + xx] += v;
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [n, c, h, w] = rank4("global_avg_pool", self)?;
        let hw = h * w;
        let inv = T::one() / from_usize(hw);
        let out = self
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |a| {
                vec![Some(
                    a.grad.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect(),
                )]
            }),
        ))
    }
}
