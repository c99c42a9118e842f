use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{from_usize, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Batch normalization over `[N,C,H,W]` with affine `gamma`/`shift`.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        shift: &Tensor<T>,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
        momentum: T,
        eps: T,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm", format!("expects rank 4, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if gamma.shape() != [c] || shift.shape() != [c] || stats.channels() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{c} channels but gamma {:?}, shift {:?}, stats {}",
                    gamma.shape(),
                    shift.shape(),
                    stats.channels()
                ),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        let m = n * hw;
        if mode == BatchNormMode::Train && m < 2 {
            return Err(Error::invalid(
                "batch_norm",
                "batch variance undefined for fewer than 2 values per channel",
            ));
        }
        let mf: T = from_usize(m);
        let x = self.data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum();
                    }
                    let mu = s / mf;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / mf;
                }
                let keep = T::one() - momentum;
                let unbias = mf / (mf - T::one());
                for ch in 0..c {
                    stats.mean[ch] = keep * stats.mean[ch] + momentum * mean[ch];
                    stats.var[ch] = keep * stats.var[ch] + momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = gamma.data();
        let sh = shift.data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gm[ch] * h + sh[ch];
                }
            }
        }
        drop((x, gm, sh));

        Ok(Tensor::from_op(
            out,
            xs.to_vec(),
            vec![self.clone(), gamma.clone(), shift.clone()],
            Box::new(move |a| {
                let g = a.grad;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gx = a.needs[0].then(|| {
                    let gm = a.parents[1].data();
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = match mode {
                                    BatchNormMode::Train => k * (g[i] - sum_g[ch] / mf - xhat[i] * sum_gx[ch] / mf),
                                    BatchNormMode::Eval => k * g[i],
                                };
                            }
                        }
                    }
                    dx
                });
                vec![gx, Some(sum_gx), Some(sum_g)]
            }),
        ))
    }
}
