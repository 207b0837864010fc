//! Per-channel batch normalization over N x C x H x W.
//!
//! Train mode normalizes with biased batch statistics and updates the running
//! statistics with momentum 0.9; eval mode normalizes with the running
//! statistics and is a pure function of the input.

use crate::error::{Error, Result};
use crate::layers::{Mode, Param, ParamRole};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct BatchNorm2d<E> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: E,
    pub momentum: E,
}

/// Normalized activations and per-channel inverse std, enough to rebuild the
/// full backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<E> {
    normalized: Tensor<E>,
    inv_std: Vec<E>,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        let mut bn = BatchNorm2d {
            gamma: Param::zeros(&[channels], ParamRole::BnScale),
            beta: Param::zeros(&[channels], ParamRole::BnShift),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::one()),
            eps: E::from_f64(1e-5),
            momentum: E::from_f64(0.9),
        };
        bn.gamma.value.fill(E::one());
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn describe(&self) -> String {
        format!("batchnorm({})", self.channels())
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::shape(
                self.describe(),
                format!("N x {} x H x W", self.channels()),
                s,
            ));
        }
        x.check_finite(&self.describe())?;
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn forward(&mut self, x: &Tensor<E>, mode: Mode) -> Result<(Tensor<E>, Option<BnCache<E>>)> {
        match mode {
            Mode::Train => {
                let (y, cache) = self.forward_train(x)?;
                Ok((y, Some(cache)))
            }
            Mode::Eval => Ok((self.forward_eval(x)?, None)),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<E>) -> Result<(Tensor<E>, BnCache<E>)> {
        let (n, c, h, w) = self.check_input(x)?;
        let m = n * h * w;
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        let mut normalized = Tensor::zeros(x.shape());
        let mut inv_std = vec![E::zero(); c];
        let inv_m = E::one() / E::from_f64(m as f64);

        for ch in 0..c {
            let mut sum = E::zero();
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for v in &x.data()[base..base + plane] {
                    sum += *v;
                }
            }
            let mean = sum * inv_m;
            let mut var_sum = E::zero();
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for v in &x.data()[base..base + plane] {
                    let d = *v - mean;
                    var_sum += d * d;
                }
            }
            let var = var_sum * inv_m; // biased
            let istd = E::one() / (var + self.eps).sqrt();
            inv_std[ch] = istd;

            let g = self.gamma.value.data()[ch];
            let b = self.beta.value.data()[ch];
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for idx in base..base + plane {
                    let xn = (x.data()[idx] - mean) * istd;
                    normalized.data_mut()[idx] = xn;
                    y.data_mut()[idx] = g * xn + b;
                }
            }

            let mom = self.momentum;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = mom * *rm + (E::one() - mom) * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = mom * *rv + (E::one() - mom) * var;
        }

        Ok((y, BnCache { normalized, inv_std }))
    }

    pub fn forward_eval(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.check_input(x)?;
        let plane = h * w;
        let mut y = Tensor::zeros(x.shape());
        for ch in 0..c {
            let mean = self.running_mean.data()[ch];
            let istd = E::one() / (self.running_var.data()[ch] + self.eps).sqrt();
            let g = self.gamma.value.data()[ch];
            let b = self.beta.value.data()[ch];
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for idx in base..base + plane {
                    y.data_mut()[idx] = g * (x.data()[idx] - mean) * istd + b;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
        let xn = &cache.normalized;
        if grad_out.shape() != xn.shape() {
            return Err(Error::shape(
                format!("{} backward", self.describe()),
                format!("{:?}", xn.shape()),
                grad_out.shape(),
            ));
        }
        let s = xn.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let m = E::from_f64((n * h * w) as f64);
        let mut gx = Tensor::zeros(xn.shape());

        for ch in 0..c {
            let mut sum_g = E::zero();
            let mut sum_gx = E::zero();
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for idx in base..base + plane {
                    let g = grad_out.data()[idx];
                    sum_g += g;
                    sum_gx += g * xn.data()[idx];
                }
            }
            self.beta.grad.data_mut()[ch] += sum_g;
            self.gamma.grad.data_mut()[ch] += sum_gx;

            // dx = gamma * inv_std / m * (m*g - xn*sum(g*xn) - sum(g))
            let scale = self.gamma.value.data()[ch] * cache.inv_std[ch] / m;
            for nn in 0..n {
                let base = (nn * c + ch) * plane;
                for idx in base..base + plane {
                    let g = grad_out.data()[idx];
                    gx.data_mut()[idx] = scale * (m * g - xn.data()[idx] * sum_gx - sum_g);
                }
            }
        }
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_per_channel() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        let x = Tensor::from_vec(&[2, 2, 3, 3], data).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        for ch in 0..2 {
            let mut vals = Vec::new();
            for nn in 0..2 {
                for p in 0..9 {
                    vals.push(y.data()[y.at4(nn, ch, p / 3, p % 3)]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {ch} var {var}");
        }
    }

    #[test]
    fn eval_mode_is_per_sample_and_batch_size_independent() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        // Push non-trivial running statistics.
        let x = Tensor::from_vec(&[2, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        bn.forward_train(&x).unwrap();

        let pair = Tensor::from_vec(&[2, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0, 9.0, 3.0, -2.0, 1.0]).unwrap();
        let single = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y_pair = bn.forward_eval(&pair).unwrap();
        let y_single = bn.forward_eval(&single).unwrap();
        assert_eq!(&y_pair.data()[..4], y_single.data());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        bn.forward_train(&x).unwrap();
        // batch mean 2, biased var 1; running = 0.9*init + 0.1*batch
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }
}
