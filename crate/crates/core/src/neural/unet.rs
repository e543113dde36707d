//! 3D U-net: conv blocks, strided-conv downsampling, transposed-conv upsampling,
//! skip connections by concatenation or addition, and a 1x1x1 output conv.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Context, ConvBlock, ConvTranspose3d, Conv3d, Dropout, Layer, Param, Relu, Sequential};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipMode {
    Concat,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Number of down/up resampling levels.
    pub depth: usize,
    /// Channels at the first level; doubled at every level below.
    pub base_channels: usize,
    /// Training patch edge; inference accepts any edge divisible by `2^depth`.
    pub patch_size: usize,
    pub skip_mode: SkipMode,
    pub dropout_rate: f64,
    /// Susceptibility (ppm) represented by one unit of network output.
    pub output_scale: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 3, base_channels: 8, patch_size: 32, skip_mode: SkipMode::Concat, dropout_rate: 0.1, output_scale: 0.1 }
    }
}

impl UNetConfig {
    /// Full-width configuration: 64^3 patches, widest level 128 channels.
    pub fn full_scale() -> Self {
        UNetConfig { base_channels: 16, patch_size: 64, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Invalid("depth and base_channels must be at least 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % (1 << self.depth) != 0 {
            return Err(Error::Invalid(format!(
                "patch_size {} must be a positive multiple of 2^{}",
                self.patch_size, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::Invalid("output_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

pub struct UNet {
    cfg: UNetConfig,
    enc: Vec<Sequential>,
    down: Vec<Sequential>,
    bottom: Sequential,
    up: Vec<Sequential>,
    dec: Vec<Sequential>,
    head: Conv3d,
}

fn double_block(name: &str, in_c: usize, out_c: usize, p: f64, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Box::new(ConvBlock::new(&format!("{name}.block1"), in_c, out_c, rng)),
        Box::new(ConvBlock::new(&format!("{name}.block2"), out_c, out_c, rng)),
        Box::new(Dropout::new(p)),
    ])
}

impl UNet {
    /// He-initialized network; biases zero, batch-norm affine at identity.
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = cfg.dropout_rate;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            let in_c = if l == 0 { 1 } else { cfg.channels(l - 1) };
            enc.push(double_block(&format!("enc{l}"), in_c, c, p, &mut rng));
            down.push(Sequential::new(vec![
                Box::new(Conv3d::new(&format!("down{l}"), c, c, 2, 2, 0, true, &mut rng)),
                Box::new(Relu::default()),
            ]));
        }
        let bottom = double_block("bottom", cfg.channels(cfg.depth - 1), cfg.channels(cfg.depth), p, &mut rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.depth {
            let c = cfg.channels(l);
            up.push(Sequential::new(vec![
                Box::new(ConvTranspose3d::new(&format!("up{l}"), cfg.channels(l + 1), c, &mut rng)),
                Box::new(Relu::default()),
            ]));
            let merged = match cfg.skip_mode {
                SkipMode::Concat => 2 * c,
                SkipMode::Add => c,
            };
            dec.push(double_block(&format!("dec{l}"), merged, c, p, &mut rng));
        }
        let head = Conv3d::new("head", cfg.channels(0), 1, 1, 1, 0, true, &mut rng);
        Ok(UNet { cfg: cfg.clone(), enc, down, bottom, up, dec, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn head_mut(&mut self) -> &mut Conv3d {
        &mut self.head
    }

    pub fn check_input(&self, shape: [usize; 5]) -> Result<()> {
        let unit = 1 << self.cfg.depth;
        if shape[1] != 1 {
            return Err(Error::Invalid(format!("network input must have one channel, got {}", shape[1])));
        }
        if shape[0] == 0 || shape[2..].iter().any(|&n| n == 0 || n % unit != 0) {
            return Err(Error::Invalid(format!("input shape {shape:?} must have spatial edges divisible by {unit}")));
        }
        Ok(())
    }

    /// Raw network output (scaled units, see `UNetConfig::output_scale`).
    pub fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            h = self.enc[l].forward(&h, ctx);
            skips.push(h.clone());
            h = self.down[l].forward(&h, ctx);
        }
        h = self.bottom.forward(&h, ctx);
        for l in (0..self.cfg.depth).rev() {
            h = self.up[l].forward(&h, ctx);
            h = match self.cfg.skip_mode {
                SkipMode::Concat => Tensor::concat_channels(&skips[l], &h),
                SkipMode::Add => {
                    h.add_assign(&skips[l]);
                    h
                }
            };
            h = self.dec[l].forward(&h, ctx);
        }
        Ok(self.head.forward(&h, ctx))
    }

    /// Gradient of the loss with respect to the input; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = self.head.backward(grad);
        let mut skip_grads = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            g = self.dec[l].backward(&g);
            let (g_skip, g_up) = match self.cfg.skip_mode {
                SkipMode::Concat => g.split_channels(self.cfg.channels(l)),
                SkipMode::Add => (g.clone(), g),
            };
            skip_grads.push(g_skip);
            g = self.up[l].backward(&g_up);
        }
        g = self.bottom.backward(&g);
        for l in (0..self.cfg.depth).rev() {
            g = self.down[l].backward(&g);
            g.add_assign(&skip_grads[l]);
            g = self.enc[l].backward(&g);
        }
        g
    }

    fn layers_mut(&mut self) -> Vec<&mut dyn Layer> {
        let mut v: Vec<&mut dyn Layer> = Vec::new();
        for (e, d) in self.enc.iter_mut().zip(self.down.iter_mut()) {
            v.push(e);
            v.push(d);
        }
        v.push(&mut self.bottom);
        for (u, d) in self.up.iter_mut().zip(self.dec.iter_mut()).rev() {
            v.push(u);
            v.push(d);
        }
        v.push(&mut self.head);
        v
    }

    /// Trainable parameters in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in self.layers_mut() {
            l.visit_params(f);
        }
    }

    /// Batch-norm running statistics in a fixed order.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in self.layers_mut() {
            l.visit_buffers(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// Number of convolution layers with cubic kernel edge `k` (stride-2 downsamplers have k = 2).
    pub fn conv_count(&self, k: usize) -> usize {
        let mut n = self.head.count_convs(k) + self.bottom.count_convs(k);
        for s in self.enc.iter().chain(&self.down).chain(&self.dec) {
            n += s.count_convs(k);
        }
        n
    }

    pub fn upsampler_count(&self) -> usize {
        self.up.len()
    }
}
