//! Dense row-major `f64` tensors.
//!
//! Feature maps use the layout `[channels, h, w, d]` with the spatial index
//! `(h * w_len + w) * d_len + d`; token matrices use `[tokens, width]`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Channel count of a `[c, h, w, d]` map.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extent of a `[c, h, w, d]` map.
    pub fn spatial(&self) -> [usize; 3] {
        assert_eq!(self.shape.len(), 4, "expected a [c, h, w, d] map");
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reverses a `[c, h, w, d]` map along the selected spatial axes.
    pub fn flip_spatial(&self, axes: [bool; 3]) -> Tensor {
        let [h, w, d] = self.spatial();
        let c = self.channels();
        let mut out = Tensor::zeros(&self.shape);
        for ci in 0..c {
            let src = self.channel(ci);
            let dst = out.channel_mut(ci);
            for i in 0..h {
                let si = if axes[0] { h - 1 - i } else { i };
                for j in 0..w {
                    let sj = if axes[1] { w - 1 - j } else { j };
                    for k in 0..d {
                        let sk = if axes[2] { d - 1 - k } else { k };
                        dst[(i * w + j) * d + k] = src[(si * w + sj) * d + sk];
                    }
                }
            }
        }
        out
    }

    /// Index of the largest channel per voxel of a `[c, h, w, d]` map.
    pub fn argmax_channels(&self) -> Vec<u8> {
        let c = self.channels();
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let mut best = 0;
                let mut best_val = self.data[v];
                for ci in 1..c {
                    let x = self.data[ci * n + v];
                    if x > best_val {
                        best = ci;
                        best_val = x;
                    }
                }
                best as u8
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution() {
        let t = Tensor::from_fn(&[2, 2, 3, 4], |i| i as f64);
        let f = t.flip_spatial([true, false, true]);
        assert_ne!(f, t);
        assert_eq!(f.flip_spatial([true, false, true]), t);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn argmax_picks_largest_channel() {
        let t = Tensor::from_vec(&[3, 1, 1, 2], vec![0.1, 0.5, 0.7, 0.2, 0.2, 0.3]).unwrap();
        assert_eq!(t.argmax_channels(), vec![1, 0]);
    }
}
