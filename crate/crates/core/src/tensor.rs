//! Dense `B x H x W x C` (channel-last) tensors of `f64`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!("tensor of shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    /// Values per batch item.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, i: usize, j: usize, c: usize) -> f64 {
        let [_, h, w, ch] = self.shape;
        self.data[((b * h + i) * w + j) * ch + c]
    }

    pub fn set(&mut self, b: usize, i: usize, j: usize, c: usize, v: f64) {
        let [_, h, w, ch] = self.shape;
        self.data[((b * h + i) * w + j) * ch + c] = v;
    }

    /// Stacks equally shaped single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let [_, h, w, c] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.data.len()).sum());
        let mut batch = 0;
        for t in items {
            if t.shape[1..] != [h, w, c] {
                return Err(Error::Shape(format!("cannot stack tensor {:?} with {:?}", t.shape, first.shape)));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: [batch, h, w, c], data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
