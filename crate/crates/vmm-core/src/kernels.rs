//! Positive-definite kernels on instrument space and Gram matrix assembly.
//!
//! The Gaussian RBF kernel is the universal default; linear and polynomial
//! kernels are provided for finite-span instrument sets and are not
//! universal. Nothing here enforces universality.

use crate::numerics::SymMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degenerate data: all pairwise distances are zero")]
    DegenerateData,
}

/// Kernel family and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Gaussian { bandwidth: f64 },
    Linear,
    Polynomial { degree: u32, offset: f64 },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Self {
        assert!(bandwidth > 0.0, "bandwidth must be positive");
        KernelSpec::Gaussian { bandwidth }
    }

    pub fn polynomial(degree: u32, offset: f64) -> Self {
        assert!(degree >= 1, "degree must be at least 1");
        KernelSpec::Polynomial { degree, offset }
    }
}

/// Kernel Gram matrix `K[i, j] = K(z_i, z_j)` on `n` points.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    n: usize,
    k: SymMatrix,
}

impl GramMatrix {
    /// Wraps an explicit symmetric Gram matrix, e.g. one assembled under a
    /// kernel with a diagonal ridge.
    pub fn from_matrix(k: SymMatrix) -> Self {
        Self { n: k.dim(), k }
    }

    /// The Gram matrix of `kernel + ridge * 1{same index}`, which is the
    /// Gram of a positive-definite kernel whenever the points are distinct.
    pub fn with_ridge(&self, ridge: f64) -> Self {
        assert!(ridge >= 0.0);
        let mut k = self.k.array().clone();
        for i in 0..self.n {
            k[[i, i]] += ridge;
        }
        Self {
            n: self.n,
            k: SymMatrix::new(k),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.k
    }

    pub fn array(&self) -> &Array2<f64> {
        self.k.array()
    }
}

fn squared_distance(z: &[f64], z2: &[f64]) -> f64 {
    z.iter()
        .zip(z2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn dot(z: &[f64], z2: &[f64]) -> f64 {
    z.iter().zip(z2.iter()).map(|(a, b)| a * b).sum()
}

/// Evaluates the kernel at a pair of points.
pub fn eval_kernel(spec: &KernelSpec, z: &[f64], z2: &[f64]) -> Result<f64, KernelError> {
    if z.len() != z2.len() {
        return Err(KernelError::DimensionMismatch(z.len(), z2.len()));
    }
    Ok(match spec {
        KernelSpec::Gaussian { bandwidth } => {
            (-squared_distance(z, z2) / (2.0 * bandwidth * bandwidth)).exp()
        }
        KernelSpec::Linear => dot(z, z2),
        KernelSpec::Polynomial { degree, offset } => (dot(z, z2) + offset).powi(*degree as i32),
    })
}

/// Assembles the Gram matrix on `zs`. The Gaussian diagonal is set to exactly
/// one rather than evaluated.
pub fn gram_matrix(spec: &KernelSpec, zs: &[Vec<f64>]) -> Result<GramMatrix, KernelError> {
    let n = zs.len();
    assert!(n >= 1, "gram_matrix requires at least one point");
    let dim = zs[0].len();
    for z in zs {
        if z.len() != dim {
            return Err(KernelError::DimensionMismatch(dim, z.len()));
        }
    }
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                match spec {
                    KernelSpec::Gaussian { .. } => 1.0,
                    _ => eval_kernel(spec, &zs[i], &zs[j])?,
                }
            } else {
                eval_kernel(spec, &zs[i], &zs[j])?
            };
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(GramMatrix {
        n,
        k: SymMatrix::new(k),
    })
}

/// Median of the `n(n-1)/2` pairwise Euclidean distances; the default
/// bandwidth for Gaussian kernels. Even counts take the midpoint of the two
/// central order statistics. Duplicated points can push the median itself to
/// zero, which is unusable as a bandwidth; the median of the positive
/// distances is returned in that case.
pub fn median_bandwidth(zs: &[Vec<f64>]) -> Result<f64, KernelError> {
    assert!(zs.len() >= 2, "median_bandwidth requires at least two points");
    let mut dists = Vec::with_capacity(zs.len() * (zs.len() - 1) / 2);
    for i in 0..zs.len() {
        for j in (i + 1)..zs.len() {
            if zs[i].len() != zs[j].len() {
                return Err(KernelError::DimensionMismatch(zs[i].len(), zs[j].len()));
            }
            dists.push(squared_distance(&zs[i], &zs[j]).sqrt());
        }
    }
    match median_of(&mut dists) {
        Some(m) if m > 0.0 => Ok(m),
        _ => {
            let mut positive: Vec<f64> = dists.into_iter().filter(|d| *d > 0.0).collect();
            match median_of(&mut positive) {
                Some(m) => Ok(m),
                None => Err(KernelError::DegenerateData),
            }
        }
    }
}

fn median_of(values: &mut [f64]) -> Option<f64> {
    let len = values.len();
    if len == 0 {
        return None;
    }
    let mid = len / 2;
    let (below, pivot, _) = values.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    Some(if len % 2 == 1 {
        *pivot
    } else {
        let upper = *pivot;
        let lower = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn gaussian_examples() {
        let spec = KernelSpec::gaussian(1.0);
        assert_eq!(eval_kernel(&spec, &[0.0], &[0.0]).unwrap(), 1.0);
        let v = eval_kernel(&spec, &[0.0], &[1.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
        assert!((v - 0.6065307).abs() < 1e-7);
    }

    #[test]
    fn linear_dot_product() {
        let v = eval_kernel(&KernelSpec::Linear, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 11.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(matches!(
            eval_kernel(&KernelSpec::Linear, &[1.0], &[1.0, 2.0]),
            Err(KernelError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn gram_gaussian_two_points() {
        let g = gram_matrix(&KernelSpec::gaussian(1.0), &[vec![0.0], vec![1.0]]).unwrap();
        let e = (-0.5f64).exp();
        assert_eq!(g.array()[[0, 0]], 1.0);
        assert_eq!(g.array()[[1, 1]], 1.0);
        assert!((g.array()[[0, 1]] - e).abs() < 1e-15);
        assert!((g.array()[[1, 0]] - e).abs() < 1e-15);
    }

    #[test]
    fn gram_single_point_gaussian() {
        let g = gram_matrix(&KernelSpec::gaussian(2.0), &[vec![1.5]]).unwrap();
        assert_eq!(g.array()[[0, 0]], 1.0);
    }

    #[test]
    fn gram_linear_outer_product() {
        let g = gram_matrix(&KernelSpec::Linear, &[vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(g.array()[[0, 0]], 1.0);
        assert_eq!(g.array()[[0, 1]], 2.0);
        assert_eq!(g.array()[[1, 1]], 4.0);
    }

    #[test]
    fn median_bandwidth_examples() {
        let m = median_bandwidth(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(m, 2.0);
        let m2 = median_bandwidth(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(m2, 2.0);
        let m3 = median_bandwidth(&[vec![0.0], vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(m3, 1.0);
    }

    #[test]
    fn median_bandwidth_degenerate() {
        assert!(matches!(
            median_bandwidth(&[vec![1.0], vec![1.0]]),
            Err(KernelError::DegenerateData)
        ));
    }

    #[test]
    fn gaussian_gram_psd_up_to_n_300() {
        let mut rng = SplitMix64::new(31);
        for &n in &[2usize, 10, 60, 150, 300] {
            let zs: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.next_normal(), rng.next_normal()])
                .collect();
            let bw = median_bandwidth(&zs).unwrap();
            let g = gram_matrix(&KernelSpec::gaussian(bw), &zs).unwrap();
            let min_eig = g.matrix().min_eigenvalue();
            assert!(min_eig >= -1e-10, "n={n} min eigenvalue {min_eig}");
            for i in 0..n {
                assert_eq!(g.array()[[i, i]], 1.0);
            }
        }
    }

    #[test]
    fn kernel_symmetry_randomized() {
        let mut rng = SplitMix64::new(77);
        let specs = [
            KernelSpec::gaussian(0.7),
            KernelSpec::Linear,
            KernelSpec::polynomial(3, 0.5),
        ];
        for _ in 0..200 {
            let d = 1 + (rng.next_u64() % 4) as usize;
            let a: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
            for spec in &specs {
                let ab = eval_kernel(spec, &a, &b).unwrap();
                let ba = eval_kernel(spec, &b, &a).unwrap();
                assert_eq!(ab.to_bits(), ba.to_bits());
            }
        }
    }
}
