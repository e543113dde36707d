//! Central finite-difference verification of analytic gradients.
//!
//! Every parameter element and every input element is perturbed by `+-h`; the
//! difference quotient is compared with the backpropagated gradient tensor by tensor,
//! as `||analytic - numeric|| / max(||analytic||, ||numeric||)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Context, Layer, Param};
use super::model::{loss_masked_mse, UNetModel};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub elements: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

trait Probe {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param));
    fn loss(&mut self, x: &Tensor) -> f64;
    /// Runs forward and backward once, leaving parameter gradients in place.
    fn analytic(&mut self, x: &Tensor) -> Tensor;
}

struct LayerProbe<'a> {
    layer: &'a mut dyn Layer,
    coeffs: Tensor,
    training: bool,
    seed: u64,
}

impl Probe for LayerProbe<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layer.visit_params(f);
    }

    fn loss(&mut self, x: &Tensor) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let y = self.layer.forward(x, &mut Context { training: self.training, rng: &mut rng });
        y.data().iter().zip(self.coeffs.data()).map(|(a, b)| a * b).sum()
    }

    fn analytic(&mut self, x: &Tensor) -> Tensor {
        self.visit(&mut |p| p.zero_grad());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.layer.forward(x, &mut Context { training: self.training, rng: &mut rng });
        self.layer.backward(&self.coeffs)
    }
}

struct ModelProbe<'a> {
    model: &'a mut UNetModel,
    label: Tensor,
    mask: Vec<bool>,
    seed: u64,
}

impl Probe for ModelProbe<'_> {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.model.net.visit_params(f);
    }

    fn loss(&mut self, x: &Tensor) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let y = self.model.forward(x, true, &mut rng).expect("valid input shape");
        loss_masked_mse(&y, &self.label, &self.mask).0
    }

    fn analytic(&mut self, x: &Tensor) -> Tensor {
        self.model.net.zero_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let y = self.model.forward(x, true, &mut rng).expect("valid input shape");
        let (_, g) = loss_masked_mse(&y, &self.label, &self.mask);
        self.model.backward(&g)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn compare(name: String, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    let rel_error = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
    GradCheck { name, elements: analytic.len(), analytic_norm: norm(analytic), rel_error }
}

fn nudge(probe: &mut dyn Probe, pi: usize, j: usize, delta: f64) {
    let mut k = 0;
    probe.visit(&mut |p| {
        if k == pi {
            p.value[j] += delta;
        }
        k += 1;
    });
}

fn run(probe: &mut dyn Probe, x: &Tensor, h: f64) -> Vec<GradCheck> {
    let gx = probe.analytic(x);
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    probe.visit(&mut |p| analytic.push((p.name.clone(), p.grad.clone())));

    let mut results = Vec::new();
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            nudge(probe, pi, j, h);
            let plus = probe.loss(x);
            nudge(probe, pi, j, -2.0 * h);
            let minus = probe.loss(x);
            nudge(probe, pi, j, h);
            *slot = (plus - minus) / (2.0 * h);
        }
        results.push(compare(name.clone(), grad, &numeric));
    }

    let mut xp = x.clone();
    let mut numeric = vec![0.0; x.len()];
    for (j, slot) in numeric.iter_mut().enumerate() {
        let orig = xp.data()[j];
        xp.data_mut()[j] = orig + h;
        let plus = probe.loss(&xp);
        xp.data_mut()[j] = orig - h;
        let minus = probe.loss(&xp);
        xp.data_mut()[j] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    results.push(compare("input".into(), gx.data(), &numeric));
    results
}

/// Checks a single layer under the loss `sum(c * layer(x))` with fixed random `c`.
pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, training: bool, seed: u64, h: f64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(x, &mut Context { training, rng: &mut rng });
    let mut crng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let coeffs =
        Tensor::from_vec(y.shape(), (0..y.len()).map(|_| crng.random_range(-1.0..1.0)).collect()).expect("same shape");
    run(&mut LayerProbe { layer, coeffs, training, seed }, x, h)
}

/// Checks the whole model in training mode under the masked MSE loss.
pub fn check_model(model: &mut UNetModel, x: &Tensor, label: &Tensor, mask: &[bool], seed: u64, h: f64) -> Vec<GradCheck> {
    run(&mut ModelProbe { model, label: label.clone(), mask: mask.to_vec(), seed }, x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::layers::{BatchNorm3d, Conv3d, ConvBlock, ConvTranspose3d, Dropout, Relu};
    use crate::neural::model::build_unet;
    use crate::neural::unet::{SkipMode, UNetConfig};

    const H: f64 = 1e-4;

    fn random(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_ok(results: &[GradCheck]) {
        for r in results {
            assert!(r.rel_error < 1e-4, "{}: relative error {:.3e}", r.name, r.rel_error);
        }
    }

    #[test]
    fn conv_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 2, 4, 4, 4], 2);
        let mut c3 = Conv3d::new("c3", 2, 3, 3, 1, 1, true, &mut rng);
        assert_ok(&check_layer(&mut c3, &x, true, 0, H));
        let mut c2 = Conv3d::new("c2", 2, 3, 2, 2, 0, true, &mut rng);
        assert_ok(&check_layer(&mut c2, &x, true, 0, H));
        let mut c1 = Conv3d::new("c1", 2, 1, 1, 1, 0, true, &mut rng);
        assert_ok(&check_layer(&mut c1, &x, true, 0, H));
        let mut t = ConvTranspose3d::new("t", 2, 3, &mut rng);
        assert_ok(&check_layer(&mut t, &x, true, 0, H));
    }

    #[test]
    fn normalization_and_activations() {
        let x = random([2, 3, 2, 3, 2], 3);
        let mut bn = BatchNorm3d::new("bn", 3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        assert_ok(&check_layer(&mut bn, &x, true, 0, H));
        bn.running_var.value = vec![0.5, 2.0, 1.3];
        assert_ok(&check_layer(&mut bn, &x, false, 0, H));
        assert_ok(&check_layer(&mut Relu::default(), &x, true, 0, H));
        assert_ok(&check_layer(&mut Dropout::new(0.3), &x, true, 5, H));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_ok(&check_layer(&mut ConvBlock::new("b", 3, 2, &mut rng), &x, true, 0, H));
    }

    #[test]
    fn zero_input_path_has_zero_first_layer_gradient() {
        let cfg = UNetConfig { depth: 2, base_channels: 2, patch_size: 8, ..Default::default() };
        let mut m = build_unet(&cfg, 1).unwrap();
        let x = Tensor::zeros([2, 1, 8, 8, 8]);
        let label = random([2, 1, 8, 8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = m.forward(&x, true, &mut rng).unwrap();
        let (_, g) = loss_masked_mse(&y, &label, &vec![true; 1024]);
        m.net.zero_grad();
        m.backward(&g);
        let mut first = None;
        m.net.visit_params(&mut |p| {
            if first.is_none() {
                first = Some(p.clone());
            }
        });
        let first = first.unwrap();
        assert_eq!(first.name, "enc0.block1.conv.weight");
        assert!(first.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let cfg = UNetConfig { depth: 2, base_channels: 2, patch_size: 8, ..Default::default() };
        let mut m = build_unet(&cfg, 1).unwrap();
        let x = random([1, 1, 8, 8, 8], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = m.forward(&x, true, &mut rng).unwrap();
        let (l, g) = loss_masked_mse(&y, &y, &vec![true; 512]);
        assert_eq!(l, 0.0);
        m.net.zero_grad();
        let gx = m.backward(&g);
        assert!(gx.data().iter().all(|&v| v == 0.0));
        m.net.visit_params(&mut |p| assert!(p.grad.iter().all(|&v| v == 0.0), "{}", p.name));
    }

    #[test]
    fn tiny_net_add_mode() {
        let cfg = UNetConfig { depth: 1, base_channels: 2, patch_size: 4, skip_mode: SkipMode::Add, ..Default::default() };
        let mut m = build_unet(&cfg, 3).unwrap();
        let x = random([2, 1, 4, 4, 4], 4);
        let label = random([2, 1, 4, 4, 4], 5);
        let mask: Vec<bool> = (0..128).map(|i| i % 3 != 0).collect();
        assert_ok(&check_model(&mut m, &x, &label, &mask, 6, H));
    }
}
