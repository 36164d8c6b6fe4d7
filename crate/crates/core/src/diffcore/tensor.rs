use crate::error::{Error, Result};

/// Batched multi-channel 1-D array of `f64`, row-major as `[batch][channel][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    batch: usize,
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(batch: usize, channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || channels == 0 || length == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got ({batch}, {channels}, {length})")));
        }
        if data.len() != batch * channels * length {
            return Err(Error::Shape(format!(
                "data has {} values, shape ({batch}, {channels}, {length}) needs {}",
                data.len(),
                batch * channels * length
            )));
        }
        Ok(Self { batch, channels, length, data })
    }

    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Self::filled(batch, channels, length, 0.0)
    }

    pub fn filled(batch: usize, channels: usize, length: usize, value: f64) -> Self {
        assert!(batch > 0 && channels > 0 && length > 0, "empty tensor shape");
        Self { batch, channels, length, data: vec![value; batch * channels * length] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { batch: 1, channels: 1, length: 1, data: vec![value] }
    }

    /// A `(1, 1, n)` tensor.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(1, 1, n, data)
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.batch, other.channels, other.length)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.channels, self.length)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn get(&self, b: usize, c: usize, x: usize) -> f64 {
        self.data[(b * self.channels + c) * self.length + x]
    }

    /// The contiguous row for `(b, c)`.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.length;
        &self.data[start..start + self.length]
    }

    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.channels + c) * self.length;
        &mut self.data[start..start + self.length]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            length: self.length,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}
