//! Dense and convolutional layers with He-normal initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn he_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// `y = x·W + b` on row vectors `[1, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Linear {
        Linear {
            weight: Tensor::param(he_normal(rng, inputs, inputs * outputs), &[inputs, outputs]).expect("extent"),
            bias: Tensor::param(vec![0.0; outputs], &[1, outputs]).expect("extent"),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Linear {
        Linear {
            weight: Tensor::param(vec![0.0; inputs * outputs], &[inputs, outputs]).expect("extent"),
            bias: Tensor::param(vec![0.0; outputs], &[1, outputs]).expect("extent"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.weight.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Stride-1 "same" convolution with per-channel bias on `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn new(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize) -> Conv {
        let fan_in = c_in * k * k;
        Conv {
            kernel: Tensor::param(he_normal(rng, fan_in, c_out * fan_in), &[c_out, c_in, k, k]).expect("extent"),
            bias: Tensor::param(vec![0.0; c_out], &[c_out]).expect("extent"),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.kernel.shape()[2];
        x.conv2d(&self.kernel, 1, k / 2)?.add_channel_bias(&self.bias)
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.kernel.clone()));
        out.push((format!("{prefix}.b"), self.bias.clone()));
    }
}

/// Swaps in replacement tensors, checking count and shapes.
pub(crate) fn replace_parameters(slots: Vec<&mut Tensor>, with: &[Tensor]) -> Result<()> {
    if slots.len() != with.len() {
        return Err(Error::Shape(format!("expected {} parameter tensors, got {}", slots.len(), with.len())));
    }
    for (slot, w) in slots.into_iter().zip(with) {
        if slot.shape() != w.shape() {
            return Err(Error::Shape(format!("parameter shape {:?} replaced by {:?}", slot.shape(), w.shape())));
        }
        *slot = w.clone();
    }
    Ok(())
}

/// Scales a row vector to unit Euclidean norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    x.div(&x.square().sum().add_scalar(1e-24).sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut rng, 200, 100);
        let w = l.weight.to_vec();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 0.01).abs() < 0.001, "{var}");
        assert!(l.bias.to_vec().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn normalization_gives_unit_norm() {
        let x = Tensor::new(vec![3.0, 4.0], &[1, 2]).unwrap();
        assert_eq!(l2_normalize(&x).unwrap().to_vec(), vec![0.6, 0.8]);
    }
}
