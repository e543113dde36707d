//! Network layers with hand-written reverse-mode gradients.
//!
//! Each layer caches what its backward pass needs during `forward`; `backward`
//! accumulates parameter gradients and returns the gradient for its input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// A named trainable tensor (or persistent buffer) and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![0.0; value.len()];
        Param { name, shape, value, grad }
    }

    pub fn filled(name: String, shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![v; n])
    }

    /// Fan-in scaled Gaussian: `N(0, 2 / fan_in)`.
    pub fn he(name: String, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let sd = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * sd).collect();
        Param::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub struct Context<'a> {
    pub training: bool,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
    /// Number of convolution layers with a cubic kernel of edge `k`.
    fn count_convs(&self, _k: usize) -> usize {
        0
    }
}

/// `C = A B + beta C` on strided views, bounds-checked before the call.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    // SAFETY: every index touched through the strided views was bounds-checked above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

const COL_BUDGET: usize = 1 << 20;

/// 3D convolution with cubic kernel, implemented as chunked im2col + GEMM.
pub struct Conv3d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k * k;
        Conv3d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::he(format!("{name}.weight"), vec![out_c, in_c, k, k, k], fan_in, rng),
            bias: bias.then(|| Param::filled(format!("{name}.bias"), vec![out_c], 0.0)),
            input: None,
        }
    }

    fn out_spatial(&self, sp: [usize; 3]) -> [usize; 3] {
        sp.map(|n| (n + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.in_c * self.k.pow(3)
    }

    /// Walks the in-bounds taps of the im2col matrix for output columns `s0..s0+len`
    /// as runs: `f(col_start, input_start, count)` covers columns `col_start..+count`
    /// reading inputs `input_start + t * stride`.
    fn for_each_run(&self, isp: [usize; 3], osp: [usize; 3], s0: usize, len: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (k, st, pad) = (self.k, self.stride as isize, self.pad as isize);
        let in_s = isp[0] * isp[1] * isp[2];
        let (ow, oh) = (osp[2], osp[1]);
        let iw = isp[2] as isize;
        let mut segs = Vec::new();
        let (mut j, mut s) = (0, s0);
        while j < len {
            let ox = s % ow;
            let run = (ow - ox).min(len - j);
            segs.push((j, run, s / (ow * oh), (s / ow) % oh, ox));
            j += run;
            s += run;
        }
        for ci in 0..self.in_c {
            for kz in 0..k {
                for ky in 0..k {
                    for &(j, run, oz, oy, ox) in &segs {
                        let iz = oz as isize * st + kz as isize - pad;
                        let iy = oy as isize * st + ky as isize - pad;
                        if iz < 0 || iy < 0 || iz >= isp[0] as isize || iy >= isp[1] as isize {
                            continue;
                        }
                        let line = ci * in_s + (iz as usize * isp[1] + iy as usize) * isp[2];
                        for kx in 0..k {
                            let row = ((ci * k + kz) * k + ky) * k + kx;
                            let base = ox as isize * st + kx as isize - pad;
                            let lo = if base >= 0 { 0 } else { (-base + st - 1) / st };
                            let hi = if base > iw - 1 { 0 } else { ((iw - 1 - base) / st + 1).min(run as isize) };
                            if lo < hi {
                                f(row * len + j + lo as usize, line + (base + lo * st) as usize, (hi - lo) as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, xin: &[f64], isp: [usize; 3], osp: [usize; 3], s0: usize, len: usize, col: &mut [f64]) {
        col.iter_mut().for_each(|v| *v = 0.0);
        let st = self.stride;
        self.for_each_run(isp, osp, s0, len, |c, i, n| {
            if st == 1 {
                col[c..c + n].copy_from_slice(&xin[i..i + n]);
            } else {
                for t in 0..n {
                    col[c + t] = xin[i + t * st];
                }
            }
        });
    }

    fn col2im(&self, dcol: &[f64], isp: [usize; 3], osp: [usize; 3], s0: usize, len: usize, dx: &mut [f64]) {
        let st = self.stride;
        self.for_each_run(isp, osp, s0, len, |c, i, n| {
            for t in 0..n {
                dx[i + t * st] += dcol[c + t];
            }
        });
    }

    fn chunk_len(&self, out_s: usize) -> usize {
        (COL_BUDGET / self.rows()).clamp(1, out_s)
    }
}

impl Layer for Conv3d {
    fn forward(&mut self, x: &Tensor, _ctx: &mut Context) -> Tensor {
        assert_eq!(x.channels(), self.in_c, "{}: channel mismatch", self.weight.name);
        let isp = x.spatial();
        let osp = self.out_spatial(isp);
        let (in_s, out_s) = (x.spatial_len(), osp.iter().product::<usize>());
        let mut out = Tensor::zeros([x.batch(), self.out_c, osp[0], osp[1], osp[2]]);
        let rows = self.rows();
        let chunk = self.chunk_len(out_s);
        let mut col = vec![0.0; rows * chunk];
        for n in 0..x.batch() {
            let xin = &x.data()[n * self.in_c * in_s..(n + 1) * self.in_c * in_s];
            let obase = n * self.out_c * out_s;
            let mut s0 = 0;
            while s0 < out_s {
                let len = chunk.min(out_s - s0);
                let col = &mut col[..rows * len];
                self.im2col(xin, isp, osp, s0, len, col);
                let c = &mut out.data_mut()[obase + s0..];
                gemm(self.out_c, rows, len, &self.weight.value, (rows, 1), col, (len, 1), 0.0, c, (out_s, 1));
                s0 += len;
            }
            if let Some(b) = &self.bias {
                for co in 0..self.out_c {
                    let o = obase + co * out_s;
                    out.data_mut()[o..o + out_s].iter_mut().for_each(|v| *v += b.value[co]);
                }
            }
        }
        self.input = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("backward before forward");
        let isp = x.spatial();
        let osp = grad.spatial();
        let (in_s, out_s) = (x.spatial_len(), grad.spatial_len());
        let rows = self.rows();
        let chunk = self.chunk_len(out_s);
        let mut col = vec![0.0; rows * chunk];
        let mut dcol = vec![0.0; rows * chunk];
        let mut dx = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let xin = &x.data()[n * self.in_c * in_s..(n + 1) * self.in_c * in_s];
            let g = &grad.data()[n * self.out_c * out_s..(n + 1) * self.out_c * out_s];
            let mut s0 = 0;
            while s0 < out_s {
                let len = chunk.min(out_s - s0);
                let col = &mut col[..rows * len];
                self.im2col(xin, isp, osp, s0, len, col);
                let gs = &g[s0..];
                gemm(self.out_c, len, rows, gs, (out_s, 1), col, (1, len), 1.0, &mut self.weight.grad, (rows, 1));
                let dcol = &mut dcol[..rows * len];
                gemm(rows, self.out_c, len, &self.weight.value, (1, rows), gs, (out_s, 1), 0.0, dcol, (len, 1));
                let dxn = &mut dx.data_mut()[n * self.in_c * in_s..(n + 1) * self.in_c * in_s];
                self.col2im(dcol, isp, osp, s0, len, dxn);
                s0 += len;
            }
            if let Some(b) = &mut self.bias {
                for co in 0..self.out_c {
                    b.grad[co] += g[co * out_s..(co + 1) * out_s].iter().sum::<f64>();
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn count_convs(&self, k: usize) -> usize {
        usize::from(self.k == k)
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
pub struct ConvTranspose3d {
    pub in_c: usize,
    pub out_c: usize,
    /// Shape `[in_c, out_c, 2, 2, 2]`.
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new(name: &str, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvTranspose3d {
            in_c,
            out_c,
            weight: Param::he(format!("{name}.weight"), vec![in_c, out_c, 2, 2, 2], in_c, rng),
            bias: Param::filled(format!("{name}.bias"), vec![out_c], 0.0),
            input: None,
        }
    }

    /// Visits `(column-matrix index, output index)` pairs for one sample.
    fn for_each_pair(&self, isp: [usize; 3], mut f: impl FnMut(usize, usize)) {
        let in_s = isp.iter().product::<usize>();
        let (oh, ow) = (2 * isp[1], 2 * isp[2]);
        let out_s = 8 * in_s;
        for co in 0..self.out_c {
            for kz in 0..2 {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let row = co * 8 + (kz * 2 + ky) * 2 + kx;
                        let mut s = 0;
                        for z in 0..isp[0] {
                            for y in 0..isp[1] {
                                for x in 0..isp[2] {
                                    let o = co * out_s + ((2 * z + kz) * oh + 2 * y + ky) * ow + 2 * x + kx;
                                    f(row * in_s + s, o);
                                    s += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for ConvTranspose3d {
    fn forward(&mut self, x: &Tensor, _ctx: &mut Context) -> Tensor {
        assert_eq!(x.channels(), self.in_c, "{}: channel mismatch", self.weight.name);
        let isp = x.spatial();
        let in_s = x.spatial_len();
        let oc8 = self.out_c * 8;
        let mut out = Tensor::zeros([x.batch(), self.out_c, 2 * isp[0], 2 * isp[1], 2 * isp[2]]);
        let out_s = out.spatial_len();
        let mut ycol = vec![0.0; oc8 * in_s];
        for n in 0..x.batch() {
            let xin = &x.data()[n * self.in_c * in_s..(n + 1) * self.in_c * in_s];
            gemm(oc8, self.in_c, in_s, &self.weight.value, (1, oc8), xin, (in_s, 1), 0.0, &mut ycol, (in_s, 1));
            let on = &mut out.data_mut()[n * self.out_c * out_s..(n + 1) * self.out_c * out_s];
            self.for_each_pair(isp, |ci, oi| on[oi] = ycol[ci]);
            for co in 0..self.out_c {
                on[co * out_s..(co + 1) * out_s].iter_mut().for_each(|v| *v += self.bias.value[co]);
            }
        }
        self.input = Some(x.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("backward before forward");
        let isp = x.spatial();
        let in_s = x.spatial_len();
        let out_s = grad.spatial_len();
        let oc8 = self.out_c * 8;
        let mut dycol = vec![0.0; oc8 * in_s];
        let mut dx = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let xin = &x.data()[n * self.in_c * in_s..(n + 1) * self.in_c * in_s];
            let g = &grad.data()[n * self.out_c * out_s..(n + 1) * self.out_c * out_s];
            self.for_each_pair(isp, |ci, oi| dycol[ci] = g[oi]);
            gemm(self.in_c, in_s, oc8, xin, (in_s, 1), &dycol, (1, in_s), 1.0, &mut self.weight.grad, (oc8, 1));
            let dxn = &mut dx.data_mut()[n * self.in_c * in_s..(n + 1) * self.in_c * in_s];
            gemm(self.in_c, oc8, in_s, &self.weight.value, (oc8, 1), &dycol, (in_s, 1), 0.0, dxn, (in_s, 1));
            for co in 0..self.out_c {
                self.bias.grad[co] += g[co * out_s..(co + 1) * out_s].iter().sum::<f64>();
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization with affine parameters and running statistics.
///
/// Training mode normalizes with batch statistics and updates the running
/// estimates (unbiased variance); inference uses the running estimates only.
pub struct BatchNorm3d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    training: bool,
}

impl BatchNorm3d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm3d {
            channels,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0),
            running_mean: Param::filled(format!("{name}.running_mean"), vec![channels], 0.0),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], 1.0),
            cache: None,
        }
    }
}

impl Layer for BatchNorm3d {
    fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Tensor {
        assert_eq!(x.channels(), self.channels, "{}: channel mismatch", self.gamma.name);
        let (nb, c, s) = (x.batch(), self.channels, x.spatial_len());
        let m = (nb * s) as f64;
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if ctx.training {
                let mut sum = 0.0;
                for n in 0..nb {
                    sum += x.channel(n, ch).iter().sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0;
                for n in 0..nb {
                    sq += x.channel(n, ch).iter().map(|v| (v - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m;
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                self.running_mean.value[ch] = (1.0 - BN_MOMENTUM) * self.running_mean.value[ch] + BN_MOMENTUM * mean;
                self.running_var.value[ch] = (1.0 - BN_MOMENTUM) * self.running_var.value[ch] + BN_MOMENTUM * unbiased;
                (mean, var)
            } else {
                (self.running_mean.value[ch], self.running_var.value[ch])
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for n in 0..nb {
                let o = (n * c + ch) * s;
                for i in o..o + s {
                    let h = (x.data()[i] - mean) * is;
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = g * h + b;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, training: ctx.training });
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (nb, c, s) = (grad.batch(), self.channels, grad.spatial_len());
        let m = (nb * s) as f64;
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for n in 0..nb {
                let o = (n * c + ch) * s;
                for i in o..o + s {
                    sum_g += grad.data()[i];
                    sum_gx += grad.data()[i] * cache.xhat.data()[i];
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for n in 0..nb {
                let o = (n * c + ch) * s;
                for i in o..o + s {
                    dx.data_mut()[i] = if cache.training {
                        g * is * (grad.data()[i] - sum_g / m - cache.xhat.data()[i] * sum_gx / m)
                    } else {
                        g * is * grad.data()[i]
                    };
                }
            }
        }
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _ctx: &mut Context) -> Tensor {
        self.active = x.data().iter().map(|&v| v > 0.0).collect();
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let data = grad.data().iter().zip(&self.active).map(|(&g, &a)| if a { g } else { 0.0 }).collect();
        Tensor::from_vec(grad.shape(), data).expect("same shape")
    }
}

/// Inverted dropout: in training, zeroes each activation with probability `p`
/// and scales survivors by `1 / (1 - p)`; identity at inference.
pub struct Dropout {
    pub p: f64,
    scale: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p, scale: None }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Tensor {
        if !ctx.training || self.p == 0.0 {
            self.scale = None;
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let scale: Vec<f64> =
            (0..x.len()).map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        self.scale = Some(scale);
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        match &self.scale {
            None => grad.clone(),
            Some(s) => {
                let data = grad.data().iter().zip(s).map(|(g, s)| g * s).collect();
                Tensor::from_vec(grad.shape(), data).expect("same shape")
            }
        }
    }
}

/// 3x3x3 convolution (no bias), batch norm, ReLU.
pub struct ConvBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    relu: Relu,
}

impl ConvBlock {
    pub fn new(name: &str, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv3d::new(&format!("{name}.conv"), in_c, out_c, 3, 1, 1, false, rng),
            bn: BatchNorm3d::new(&format!("{name}.bn"), out_c),
            relu: Relu::default(),
        }
    }
}

impl Layer for ConvBlock {
    fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Tensor {
        let h = self.conv.forward(x, ctx);
        let h = self.bn.forward(&h, ctx);
        self.relu.forward(&h, ctx)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let g = self.relu.backward(grad);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_buffers(f);
    }

    fn count_convs(&self, k: usize) -> usize {
        self.conv.count_convs(k)
    }
}

#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, ctx: &mut Context) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, ctx);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_params(f));
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_buffers(f));
    }

    fn count_convs(&self, k: usize) -> usize {
        self.layers.iter().map(|l| l.count_convs(k)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_tensor(shape: [usize; 5], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(c: &Conv3d, x: &Tensor) -> Tensor {
        let isp = x.spatial();
        let osp = c.out_spatial(isp);
        let mut out = Tensor::zeros([x.batch(), c.out_c, osp[0], osp[1], osp[2]]);
        let k = c.k;
        for n in 0..x.batch() {
            for co in 0..c.out_c {
                for oz in 0..osp[0] {
                    for oy in 0..osp[1] {
                        for ox in 0..osp[2] {
                            let mut acc = c.bias.as_ref().map_or(0.0, |b| b.value[co]);
                            for ci in 0..c.in_c {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * c.stride + kz) as isize - c.pad as isize;
                                            let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                            let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= isp[0] || iy >= isp[1] || ix >= isp[2] {
                                                continue;
                                            }
                                            let w = c.weight.value[(((co * c.in_c + ci) * k + kz) * k + ky) * k + kx];
                                            acc += w * x.channel(n, ci)[(iz * isp[1] + iy) * isp[2] + ix];
                                        }
                                    }
                                }
                            }
                            let o = ((n * c.out_c + co) * osp[0] + oz) * osp[1] * osp[2] + oy * osp[2] + ox;
                            out.data_mut()[o] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        for (k, stride, pad) in [(3, 1, 1), (2, 2, 0), (1, 1, 0)] {
            let mut c = Conv3d::new("c", 3, 4, k, stride, pad, true, &mut rng);
            c.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor([2, 3, 4, 6, 8], 2);
            let mut ctx = Context { training: true, rng: &mut ctx_rng };
            let y = c.forward(&x, &mut ctx);
            let r = naive_conv(&c, &x);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_inverts_shape_and_matches_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = ConvTranspose3d::new("t", 2, 3, &mut rng);
        let x = random_tensor([1, 2, 2, 3, 2], 4);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let y = t.forward(&x, &mut Context { training: false, rng: &mut ctx_rng });
        assert_eq!(y.shape(), [1, 3, 4, 6, 4]);
        // Output voxel (co, 2z+kz, 2y+ky, 2x+kx) = sum_ci W[ci, co, kz, ky, kx] x[ci, z, y, x].
        let (z, yy, xx, kz, ky, kx, co) = (1, 2, 0, 1, 0, 1, 2);
        let mut want = 0.0;
        for ci in 0..2 {
            want += t.weight.value[((ci * 3 + co) * 2 + kz) * 4 + ky * 2 + kx] * x.channel(0, ci)[(z * 3 + yy) * 2 + xx];
        }
        let got = y.channel(0, co)[((2 * z + kz) * 6 + 2 * yy + ky) * 4 + 2 * xx + kx];
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn batchnorm_training_output_is_standardized() {
        let mut bn = BatchNorm3d::new("bn", 2);
        let x = random_tensor([3, 2, 2, 2, 2], 5);
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(0);
        let y = bn.forward(&x, &mut Context { training: true, rng: &mut ctx_rng });
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.channel(n, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_identity_at_inference_and_scaled_in_training() {
        let mut d = Dropout::new(0.5);
        let x = Tensor::from_vec([1, 1, 10, 10, 10], vec![1.0; 1000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = d.forward(&x, &mut Context { training: false, rng: &mut rng });
        assert_eq!(y, x);
        let y = d.forward(&x, &mut Context { training: true, rng: &mut rng });
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = y.data().iter().filter(|&&v| v == 2.0).count();
        assert!((400..600).contains(&kept));
    }
}
