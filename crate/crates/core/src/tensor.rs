//! Dense row-major tensors and the video-clip / label domain types.
//!
//! Everything is 64-bit. Values are expected to stay finite on every
//! operation boundary; `check_finite` enforces that where the contract
//! requires it.

use crate::error::{Error, Result};

/// Dense tensor: `shape` and a row-major `data` buffer of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape {
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Flat index for a 4-D tensor.
    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise `self + scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Elementwise sign with sign(0) = 0.
    pub fn sign(&self) -> Tensor {
        self.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericFault { context: context.to_string() })
        }
    }

    /// Frame count for a T×H×W×C tensor.
    pub fn frames(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        self.shape[0]
    }

    /// Elements per frame for a T×H×W×C tensor.
    pub fn frame_len(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let fl = self.frame_len();
        &self.data[t * fl..(t + 1) * fl]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let fl = self.frame_len();
        &mut self.data[t * fl..(t + 1) * fl]
    }
}

/// Sum in a canonical (sorted) order so the result is invariant under
/// permutations of the inputs. Used by reductions whose output must not
/// depend on frame order (temporal pooling, log-sum-exp).
pub fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// A video sample: frames in T×H×W×C layout, every value in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 4 {
            return Err(Error::Shape {
                expected: "rank-4 T×H×W×C tensor".into(),
                got: format!("rank-{} {:?}", frames.shape().len(), frames.shape()),
            });
        }
        if frames.shape()[0] < 2 {
            return Err(Error::Spec(format!(
                "video clip needs at least 2 frames, got {}",
                frames.shape()[0]
            )));
        }
        if !frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Spec("clip values must lie in [0, 1]".into()));
        }
        Ok(VideoClip { frames })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn shape(&self) -> &[usize] {
        self.frames.shape()
    }
}

/// Class label: an index in [0, K).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Label(pub usize);

impl Label {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.0 < classes {
            Ok(())
        } else {
            Err(Error::Range {
                what: "class label".into(),
                value: self.0 as i64,
                bound: classes as i64,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn sign_is_zero_at_zero() {
        let t = Tensor::from_vec(&[4], vec![-2.0, 0.0, 3.5, -0.0]).unwrap();
        assert_eq!(t.sign().data(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let mut a = vec![0.1, 0.7, 1e-9, -0.3, 2.5];
        let mut b = vec![2.5, -0.3, 0.7, 0.1, 1e-9];
        assert_eq!(sorted_sum(&mut a).to_bits(), sorted_sum(&mut b).to_bits());
    }

    #[test]
    fn clip_invariants() {
        let ok = Tensor::filled(&[2, 4, 4, 1], 0.5);
        assert!(VideoClip::new(ok).is_ok());
        let one_frame = Tensor::filled(&[1, 4, 4, 1], 0.5);
        assert!(VideoClip::new(one_frame).is_err());
        let out_of_range = Tensor::filled(&[2, 4, 4, 1], 1.5);
        assert!(VideoClip::new(out_of_range).is_err());
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.check_finite("bad").is_err());
    }
}
