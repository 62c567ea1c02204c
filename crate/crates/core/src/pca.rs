//! Principal component analysis with optional whitening.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{Eigh, UPLO};
use thiserror::Error;

use crate::container::{ContainerError, Tensor, TensorContainer};

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need more than {k} samples for {k} components, got {samples}")]
    TooFewSamples { samples: usize, k: usize },
    #[error("cannot keep {k} components of {n}-dimensional data")]
    TooManyComponents { k: usize, n: usize },
    #[error("data has zero covariance")]
    ZeroCovariance,
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// k x n, rows are principal directions in decreasing variance order.
    pub basis: Array2<f64>,
    /// `1 / sqrt(lambda + reg)` per component.
    pub scales: Array1<f64>,
    pub whiten: bool,
}

/// Fits the top `k` directions of the centered sample covariance (divided by T - 1).
pub fn pca_train(x: ArrayView2<f64>, k: usize, whiten: bool) -> Result<PcaModel, PcaError> {
    let (t, n) = x.dim();
    if k == 0 || k > n {
        return Err(PcaError::TooManyComponents { k, n });
    }
    if t <= k {
        return Err(PcaError::TooFewSamples { samples: t, k });
    }
    let mean = x.mean_axis(Axis(0)).expect("t > 0");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (t as f64 - 1.0);
    let trace = cov.diag().sum();
    if !(trace > 0.0) {
        return Err(PcaError::ZeroCovariance);
    }
    let reg = 1e-5 * trace / n as f64;
    let (vals, vecs) = cov
        .eigh(UPLO::Lower)
        .map_err(|e| PcaError::Linalg(e.to_string()))?;
    // eigh is ascending
    let mut basis = Array2::zeros((k, n));
    let mut scales = Array1::zeros(k);
    for i in 0..k {
        let j = n - 1 - i;
        let mut v = vecs.column(j).to_owned();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            v.mapv_inplace(|a| -a);
        }
        basis.row_mut(i).assign(&v);
        scales[i] = 1.0 / (vals[j].max(0.0) + reg).sqrt();
    }
    Ok(PcaModel {
        mean,
        basis,
        scales,
        whiten,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }
    pub fn output_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `((X - mean) basis^T) diag(scales)` with scaling only when whitening.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, PcaError> {
        if x.ncols() != self.input_dim() {
            return Err(PcaError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let centered = &x - &self.mean.view().insert_axis(Axis(0));
        let mut y = centered.dot(&self.basis.t());
        if self.whiten {
            y *= &self.scales.view().insert_axis(Axis(0));
        }
        Ok(y)
    }

    /// Maps projections back to input space.
    pub fn invert(&self, y: ArrayView2<f64>) -> Result<Array2<f64>, PcaError> {
        if y.ncols() != self.output_dim() {
            return Err(PcaError::DimensionMismatch {
                expected: self.output_dim(),
                got: y.ncols(),
            });
        }
        let y = if self.whiten {
            &y / &self.scales.view().insert_axis(Axis(0))
        } else {
            y.to_owned()
        };
        Ok(y.dot(&self.basis) + &self.mean.view().insert_axis(Axis(0)))
    }

    /// The linear part of [`PcaModel::apply`] as a k x n matrix.
    pub fn projection(&self) -> Array2<f64> {
        if self.whiten {
            &self.basis * &self.scales.view().insert_axis(Axis(1))
        } else {
            self.basis.clone()
        }
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("mean", Tensor::from_array1(&self.mean)).unwrap();
        c.insert("basis", Tensor::from_array2(&self.basis)).unwrap();
        c.insert("scales", Tensor::from_array1(&self.scales)).unwrap();
        c.insert_scalar("whiten", if self.whiten { 1.0 } else { 0.0 }).unwrap();
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, PcaError> {
        let m = PcaModel {
            mean: c.array1("mean")?,
            basis: c.array2("basis")?,
            scales: c.array1("scales")?,
            whiten: c.scalar("whiten")? != 0.0,
        };
        if m.basis.ncols() != m.mean.len() || m.scales.len() != m.basis.nrows() {
            return Err(PcaError::DimensionMismatch {
                expected: m.mean.len(),
                got: m.basis.ncols(),
            });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn correlated(t: usize, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Array2::from_shape_fn((t, n), |_| StandardNormal.sample(&mut rng));
        let mix = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
        z.dot(&mix) + 3.0
    }

    fn sample_cov(y: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((y.ncols(), y.ncols()));
        let mean = y.mean_axis(Axis(0)).unwrap();
        for row in y.rows() {
            for a in 0..y.ncols() {
                for b in 0..y.ncols() {
                    out[[a, b]] += (row[a] - mean[a]) * (row[b] - mean[b]);
                }
            }
        }
        out / (y.nrows() as f64 - 1.0)
    }

    #[test]
    fn line_data_gives_diagonal_direction() {
        let x = Array2::from_shape_fn((20, 2), |(i, _)| i as f64);
        let m = pca_train(x.view(), 1, false).unwrap();
        let d = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.basis[[0, 0]].abs() - d).abs() < 1e-9);
        assert!((m.basis[[0, 1]].abs() - d).abs() < 1e-9);
    }

    #[test]
    fn whitening_gives_identity_covariance() {
        let x = correlated(2000, 6, 1);
        let m = pca_train(x.view(), 4, true).unwrap();
        let y = m.apply(x.view()).unwrap();
        let c = sample_cov(&y);
        for a in 0..4 {
            for b in 0..4 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((c[[a, b]] - want).abs() < 0.05, "cov[{a},{b}] = {}", c[[a, b]]);
            }
        }
        let basis_gram = m.basis.dot(&m.basis.t());
        assert!((&basis_gram - &Array2::<f64>::eye(4)).iter().all(|v| v.abs() < 1e-10));
        assert!(m.scales.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn complete_basis_reconstructs() {
        let x = correlated(50, 5, 2);
        for whiten in [false, true] {
            let m = pca_train(x.view(), 5, whiten).unwrap();
            let back = m.invert(m.apply(x.view()).unwrap().view()).unwrap();
            assert!((&back - &x).iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn mean_row_maps_to_zero_and_apply_is_deterministic() {
        let x = correlated(40, 4, 3);
        let m = pca_train(x.view(), 3, true).unwrap();
        let mean_row = m.mean.clone().insert_axis(Axis(0));
        assert!(m.apply(mean_row.view()).unwrap().iter().all(|v| v.abs() < 1e-12));
        assert_eq!(m.apply(x.view()).unwrap(), m.apply(x.view()).unwrap());
        let proj = (&x - &m.mean.view().insert_axis(Axis(0))).dot(&m.projection().t());
        assert!((&proj - &m.apply(x.view()).unwrap()).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn errors() {
        let x = correlated(3, 4, 4);
        assert!(matches!(pca_train(x.view(), 3, true), Err(PcaError::TooFewSamples { .. })));
        assert!(matches!(pca_train(x.view(), 5, true), Err(PcaError::TooManyComponents { .. })));
        let flat = Array2::from_elem((10, 3), 2.0);
        assert!(matches!(pca_train(flat.view(), 2, true), Err(PcaError::ZeroCovariance)));
        let m = pca_train(correlated(10, 4, 5).view(), 2, false).unwrap();
        assert!(matches!(
            m.apply(array![[1.0, 2.0]].view()),
            Err(PcaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn container_round_trip() {
        let m = pca_train(correlated(30, 5, 6).view(), 3, true).unwrap();
        let c = TensorContainer::from_bytes(&m.to_container().to_bytes()).unwrap();
        assert_eq!(PcaModel::from_container(&c).unwrap(), m);
    }
}
