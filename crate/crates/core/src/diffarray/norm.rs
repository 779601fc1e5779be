use super::ops::axis_split;
use super::tape::{Tape, Var};
use super::{shape_err, Float, Mode};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

impl<T: Float> Tape<T> {
    /// Batch normalization over `(n, h, w)` of an `[n, c, h, w]` array.
    ///
    /// Train mode normalizes with batch statistics and returns the updated
    /// running statistics (momentum 0.1, unbiased variance); eval mode uses
    /// `stats` and returns `None`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        mode: Mode,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("batchnorm2d expects [n, c, h, w], got {:?}", xs));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return shape_err(format!(
                "batchnorm2d: {} channels but gamma {:?}, beta {:?}",
                c,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (n, _, hw) = axis_split(&xs, 1);
        let count = n * hw;
        let eps = T::lit(BN_EPS);
        let src = self.value(x);
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let at = |i: usize, ch: usize, p: usize| (i * c + ch) * hw + p;

        let (mean, var, updated) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateStats(format!(
                        "train-mode batch norm over a single element per channel (shape {:?})",
                        xs
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        for p in 0..hw {
                            s += src[at(i, ch, p)];
                        }
                    }
                    let mu = s / T::lit(count as f64);
                    let mut sq = T::zero();
                    for i in 0..n {
                        for p in 0..hw {
                            let d = src[at(i, ch, p)] - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::lit(count as f64);
                }
                let mom = T::lit(BN_MOMENTUM);
                let unbias = T::lit(count as f64 / (count - 1) as f64);
                let updated = RunningStats {
                    mean: stats
                        .mean
                        .iter()
                        .zip(&mean)
                        .map(|(&r, &m)| (T::one() - mom) * r + mom * m)
                        .collect(),
                    var: stats
                        .var
                        .iter()
                        .zip(&var)
                        .map(|(&r, &v)| (T::one() - mom) * r + mom * v * unbias)
                        .collect(),
                };
                (mean, var, Some(updated))
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone(), None),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut value = vec![T::zero(); src.len()];
        for i in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let k = at(i, ch, p);
                    xhat[k] = (src[k] - mean[ch]) * inv_std[ch];
                    value[k] = g[ch] * xhat[k] + b[ch];
                }
            }
        }
        let train = mode == Mode::Train;
        let out = self.record(
            "batchnorm2d",
            &[x, gamma, beta],
            xs,
            value,
            Box::new(move |ctx| {
                let dy = ctx.grad;
                let at = |i: usize, ch: usize, p: usize| (i * c + ch) * hw + p;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let k = at(i, ch, p);
                            dgamma[ch] += dy[k] * xhat[k];
                            dbeta[ch] += dy[k];
                        }
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::lit(count as f64);
                    for ch in 0..c {
                        let gs = g[ch] * inv_std[ch];
                        for i in 0..n {
                            for p in 0..hw {
                                let k = at(i, ch, p);
                                dx[k] = if train {
                                    // batch statistics depend on x
                                    gs * (dy[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                                } else {
                                    gs * dy[k]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((out, updated))
    }
}
