//! Dense 5D tensors laid out `[N, C, D, H, W]`, W fastest.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Invalid(format!("tensor data of length {} does not fit shape {:?}", data.len(), shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Contiguous block of sample `n`, channel `c`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let s = self.spatial_len();
        let o = (n * self.shape[1] + c) * s;
        &self.data[o..o + s]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "tensor shapes differ");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.batch(), b.batch());
        assert_eq!(a.spatial(), b.spatial());
        let s = a.spatial_len();
        let (ca, cb) = (a.channels(), b.channels());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..a.batch() {
            data.extend_from_slice(&a.data[n * ca * s..(n + 1) * ca * s]);
            data.extend_from_slice(&b.data[n * cb * s..(n + 1) * cb * s]);
        }
        let [nb, _, d, h, w] = a.shape;
        Tensor { shape: [nb, ca + cb, d, h, w], data }
    }

    /// Inverse of `concat_channels`: first `ca` channels, then the rest.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let s = self.spatial_len();
        let c = self.channels();
        assert!(ca <= c);
        let cb = c - ca;
        let mut a = Vec::with_capacity(self.batch() * ca * s);
        let mut b = Vec::with_capacity(self.batch() * cb * s);
        for n in 0..self.batch() {
            let base = n * c * s;
            a.extend_from_slice(&self.data[base..base + ca * s]);
            b.extend_from_slice(&self.data[base + ca * s..base + c * s]);
        }
        let [nb, _, d, h, w] = self.shape;
        (Tensor { shape: [nb, ca, d, h, w], data: a }, Tensor { shape: [nb, cb, d, h, w], data: b })
    }
}
