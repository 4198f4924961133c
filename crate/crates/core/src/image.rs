//! Square single-channel images of normalized intensities.

use crate::error::{invalid, Error, Result};

/// An `n x n` image stored row-major.
///
/// `n` is a power of two no smaller than 8 and every value is finite.
/// The same type carries clean images, low-dose observations, perturbed
/// states and denoised outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    n: usize,
    data: Vec<f64>,
}

pub fn validate_side(n: usize) -> Result<()> {
    if n < 8 || !n.is_power_of_two() {
        return Err(invalid(format!(
            "image side must be a power of two >= 8, got {n}"
        )));
    }
    Ok(())
}

impl ImageTensor {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        validate_side(n)?;
        if data.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {pos} of image")));
        }
        Ok(Self { n, data })
    }

    /// Builds an image of side `n` with `value` everywhere.
    pub fn filled(n: usize, value: f64) -> Result<Self> {
        Self::new(n, vec![value; n * n])
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::filled(n, 0.0)
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                data.push(f(r, c));
            }
        }
        Self::new(n, data)
    }

    /// Side length.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of pixels, `n * n`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.n != other.n {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    /// Applies `f` pixelwise and re-validates finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ImageTensor> {
        ImageTensor::new(self.n, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Combines two images pixelwise.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        ImageTensor::new(
            self.n,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sub(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a + b)
    }

    /// `self + alpha * other`
    pub fn add_scaled(&self, alpha: f64, other: &ImageTensor) -> Result<ImageTensor> {
        self.zip_map(other, |a, b| a + alpha * b)
    }

    pub fn scale(&self, alpha: f64) -> Result<ImageTensor> {
        self.map(|v| alpha * v)
    }

    pub fn clip(&self, lo: f64, hi: f64) -> ImageTensor {
        ImageTensor {
            n: self.n,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation of the pixel values.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Copies the `size x size` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size: usize) -> Result<ImageTensor> {
        if row + size > self.n || col + size > self.n {
            return Err(invalid(format!(
                "crop window {size} at ({row}, {col}) exceeds image side {}",
                self.n
            )));
        }
        ImageTensor::from_fn(size, |r, c| self.get(row + r, col + c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sides_and_values() {
        assert!(ImageTensor::zeros(4).is_err());
        assert!(ImageTensor::zeros(24).is_err());
        assert!(ImageTensor::new(8, vec![0.0; 63]).is_err());
        let mut v = vec![0.0; 64];
        v[5] = f64::NAN;
        assert!(matches!(ImageTensor::new(8, v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn crop_bounds() {
        let img = ImageTensor::from_fn(16, |r, c| (r * 16 + c) as f64).unwrap();
        let p = img.crop(8, 8, 8).unwrap();
        assert_eq!(p.get(0, 0), img.get(8, 8));
        assert!(img.crop(9, 0, 8).is_err());
    }
}
