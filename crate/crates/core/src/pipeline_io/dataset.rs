//! Class-conditional Gaussian-blob images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::item_rng;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Class `c` is a Gaussian blob whose center sits on a ring around the image
/// center at angle `2πc/K`. Each sample jitters the center and amplitude.
/// Pixel values are `−1 + 2·a·exp(−r²/2σ²)`, so they stay in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub len: usize,
    /// Ring radius as a fraction of the image side.
    pub ring: f64,
    /// Blob standard deviation as a fraction of the image side.
    pub radius: f64,
    /// Peak height in `[0, 1]`.
    pub amplitude: f64,
    /// Maximum center offset, in pixels.
    pub center_jitter: f64,
    /// Maximum relative amplitude reduction.
    pub amplitude_jitter: f64,
}

/// One image `[C, S, S]` with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub label: usize,
}

impl ToyDataset {
    pub fn new(num_classes: usize, image_size: usize, channels: usize, len: usize) -> Self {
        ToyDataset {
            num_classes,
            image_size,
            channels,
            len,
            ring: 0.25,
            radius: 0.14,
            amplitude: 1.0,
            center_jitter: 0.5,
            amplitude_jitter: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("dataset needs classes, size and channels > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.amplitude) || !(0.0..=1.0).contains(&self.amplitude_jitter) {
            return Err(Error::Config("amplitude and its jitter must lie in [0, 1]".into()));
        }
        if !(self.radius > 0.0) || self.center_jitter < 0.0 {
            return Err(Error::Config("blob radius must be > 0 and jitter >= 0".into()));
        }
        Ok(())
    }

    pub fn label(&self, index: usize) -> usize {
        index % self.num_classes
    }

    /// Sample `index` under `seed`; independent of any other index.
    pub fn sample<T: Scalar>(&self, seed: u64, index: usize) -> Sample<T> {
        let mut rng = item_rng(seed, index);
        let label = self.label(index);
        let s = self.image_size as f64;
        let mid = (s - 1.0) / 2.0;
        let angle = std::f64::consts::TAU * label as f64 / self.num_classes as f64;
        let mut jitter = || {
            if self.center_jitter > 0.0 {
                rng.random_range(-self.center_jitter..=self.center_jitter)
            } else {
                0.0
            }
        };
        let cy = mid + self.ring * s * angle.sin() + jitter();
        let cx = mid + self.ring * s * angle.cos() + jitter();
        let a = self.amplitude * (1.0 - self.amplitude_jitter * rng.random::<f64>());
        let sigma = self.radius * s;
        let n = self.image_size;
        let mut data = Vec::with_capacity(self.channels * n * n);
        for c in 0..self.channels {
            let ca = a * (1.0 - 0.5 * c as f64 / self.channels as f64);
            for i in 0..n {
                for j in 0..n {
                    let r2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    data.push(T::lit(-1.0 + 2.0 * ca * (-r2 / (2.0 * sigma * sigma)).exp()));
                }
            }
        }
        Sample {
            image: Tensor::from_parts(vec![self.channels, n, n], data),
            label,
        }
    }

    /// Stacks samples into `[b, C, S, S]` plus labels.
    pub fn batch<T: Scalar>(&self, seed: u64, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_size;
        let mut data = Vec::with_capacity(indices.len() * self.channels * n * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.sample::<T>(seed, i);
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        (
            Tensor::from_parts(vec![indices.len(), self.channels, n, n], data),
            labels,
        )
    }

    pub fn iter<T: Scalar>(&self, seed: u64) -> impl Iterator<Item = Sample<T>> + '_ {
        (0..self.len).map(move |i| self.sample(seed, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_in_range_and_deterministic() {
        let d = ToyDataset::new(4, 8, 1, 16);
        for i in 0..16 {
            let a = d.sample::<f64>(3, i);
            let b = d.sample::<f64>(3, i);
            assert!(a.image.bitwise_eq(&b.image));
            assert!(a.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(!d.sample::<f64>(3, 0).image.bitwise_eq(&d.sample::<f64>(4, 0).image));
    }

    #[test]
    fn zero_amplitude_is_blank() {
        let mut d = ToyDataset::new(4, 8, 2, 4);
        d.amplitude = 0.0;
        let s = d.sample::<f32>(1, 2);
        assert!(s.image.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn nearest_class_mean_recovers_labels() {
        let d = ToyDataset::new(4, 8, 1, 400);
        let per = 64;
        let mut means = vec![vec![0.0; per]; 4];
        for s in d.iter::<f64>(0) {
            for (m, v) in means[s.label].iter_mut().zip(s.image.data()) {
                *m += v / 100.0;
            }
        }
        let held_out = (0..200).map(|i| d.sample::<f64>(1, i));
        let correct = held_out
            .filter(|s| {
                let dist = |m: &Vec<f64>| m.iter().zip(s.image.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best == s.label
            })
            .count();
        assert_eq!(correct, 200);
    }

    #[test]
    fn batch_stacks_samples() {
        let d = ToyDataset::new(3, 4, 2, 10);
        let (x, y) = d.batch::<f32>(5, &[2, 7]);
        assert_eq!(x.shape(), &[2, 2, 4, 4]);
        assert_eq!(y, vec![2, 1]);
        assert_eq!(&x.data()[32..], d.sample::<f32>(5, 7).image.data());
    }
}
