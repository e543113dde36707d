//! The trainable model (network plus input statistics) and its masked loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Context;
use super::tensor::Tensor;
use super::unet::{UNet, UNetConfig};
use crate::error::Result;
use crate::preprocess::Standardization;

pub struct UNetModel {
    pub net: UNet,
    /// Mean input statistics of the training volumes (recorded for reference).
    pub standardization: Standardization,
    /// Optimizer steps taken.
    pub step: u64,
}

/// Builds a freshly initialized model; identical seeds give identical weights.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<UNetModel> {
    Ok(UNetModel { net: UNet::new(cfg, seed)?, standardization: Standardization { mean: 0.0, std: 1.0 }, step: 0 })
}

impl UNetModel {
    pub fn config(&self) -> &UNetConfig {
        self.net.config()
    }

    /// Susceptibility prediction in ppm for a standardized input batch.
    pub fn forward(&mut self, x: &Tensor, training: bool, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let scale = self.config().output_scale;
        let mut y = self.net.forward(x, &mut Context { training, rng })?;
        y.scale(scale);
        Ok(y)
    }

    /// Inference-mode prediction; no randomness is consumed.
    pub fn infer(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.forward(x, false, &mut rng)
    }

    /// Backpropagates `d loss / d prediction` (ppm units) through the last forward pass.
    pub fn backward(&mut self, grad_pred: &Tensor) -> Tensor {
        let mut g = grad_pred.clone();
        g.scale(self.config().output_scale);
        self.net.backward(&g)
    }
}

/// `sum_mask (pred - label)^2 / |mask|` and its gradient; an empty mask gives zero loss and gradient.
pub fn loss_masked_mse(pred: &Tensor, label: &Tensor, mask: &[bool]) -> (f64, Tensor) {
    assert_eq!(pred.shape(), label.shape(), "prediction and label shapes differ");
    assert_eq!(pred.len(), mask.len(), "mask length differs from prediction");
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Tensor::zeros(pred.shape());
    if count == 0 {
        return (0.0, grad);
    }
    let n = count as f64;
    let mut loss = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let d = pred.data()[i] - label.data()[i];
            loss += d * d;
            grad.data_mut()[i] = 2.0 * d / n;
        }
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::unet::SkipMode;
    use rand::Rng;

    fn tiny() -> UNetConfig {
        UNetConfig { depth: 2, base_channels: 2, patch_size: 8, ..Default::default() }
    }

    fn random_input(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn loss_hand_cases() {
        let shape = [1, 1, 1, 1, 3];
        let label = Tensor::from_vec(shape, vec![1.0, 2.0, 3.0]).unwrap();
        let (l, g) = loss_masked_mse(&label, &label, &[true, true, true]);
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let pred = Tensor::from_vec(shape, vec![4.0, 100.0, -7.0]).unwrap();
        let (l, g) = loss_masked_mse(&pred, &label, &[true, false, false]);
        assert_eq!(l, 9.0);
        assert_eq!(g.data(), &[6.0, 0.0, 0.0]);
        let (l, g) = loss_masked_mse(&pred, &label, &[false; 3]);
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let collect = |seed| {
            let mut m = build_unet(&UNetConfig::default(), seed).unwrap();
            let mut v = Vec::new();
            m.net.visit_params(&mut |p| v.extend_from_slice(&p.value));
            v
        };
        assert_eq!(collect(5), collect(5));
        assert_ne!(collect(5), collect(6));
    }

    #[test]
    fn desk_forward_preserves_shape() {
        let mut m = build_unet(&UNetConfig::default(), 1).unwrap();
        let x = random_input([1, 1, 32, 32, 32], 2);
        assert_eq!(m.infer(&x).unwrap().shape(), x.shape());
    }

    #[test]
    fn zero_head_gives_zero_output_and_head_is_linear() {
        for mode in [SkipMode::Concat, SkipMode::Add] {
            let mut m = build_unet(&UNetConfig { skip_mode: mode, ..tiny() }, 3).unwrap();
            let x = random_input([2, 1, 8, 8, 8], 4);
            let y1 = m.infer(&x).unwrap();
            m.net.head_mut().weight.value.iter_mut().for_each(|w| *w *= 2.0);
            let y2 = m.infer(&x).unwrap();
            for (a, b) in y1.data().iter().zip(y2.data()) {
                assert_eq!(2.0 * a, *b);
            }
            m.net.head_mut().weight.value.iter_mut().for_each(|w| *w = 0.0);
            assert!(m.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn inference_is_deterministic_and_batch_order_free() {
        let mut m = build_unet(&tiny(), 7).unwrap();
        // Populate running statistics with one training pass.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        m.forward(&random_input([2, 1, 8, 8, 8], 8), true, &mut rng).unwrap();
        let a = random_input([1, 1, 8, 8, 8], 9);
        let b = random_input([1, 1, 8, 8, 8], 10);
        let ab = m.infer(&Tensor::from_vec([2, 1, 8, 8, 8], [a.data(), b.data()].concat()).unwrap()).unwrap();
        let ba = m.infer(&Tensor::from_vec([2, 1, 8, 8, 8], [b.data(), a.data()].concat()).unwrap()).unwrap();
        assert_eq!(ab.data()[..512], ba.data()[512..]);
        assert_eq!(ab.data()[512..], ba.data()[..512]);
        assert_eq!(m.infer(&a).unwrap(), m.infer(&a).unwrap());
    }
}
