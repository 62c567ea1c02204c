//! Independent subspace analysis: a projection `W` with orthonormal rows whose
//! outputs are pooled in contiguous groups by an l2 norm. Training minimizes the
//! summed group activations (a group-l1 sparsity penalty) under `W W^T = I`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray_linalg::{Eigh, QR, UPLO};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::container::{ContainerError, Tensor, TensorContainer};

#[derive(Debug, Error)]
pub enum IsaError {
    #[error("{len} units cannot be split into groups of {group_size}")]
    IndivisibleGroups { len: usize, group_size: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("matrix is rank deficient (smallest eigenvalue {0:e})")]
    RankDeficient(f64),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Learned projection plus its contiguous grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct IsaLayer {
    w: Array2<f64>,
    group_size: usize,
}

impl IsaLayer {
    pub fn new(w: Array2<f64>, group_size: usize) -> Result<Self, IsaError> {
        if group_size == 0 || w.nrows() % group_size != 0 {
            return Err(IsaError::IndivisibleGroups {
                len: w.nrows(),
                group_size,
            });
        }
        Ok(IsaLayer { w, group_size })
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }
    pub fn group_size(&self) -> usize {
        self.group_size
    }
    /// Latent units (rows of `W`).
    pub fn m(&self) -> usize {
        self.w.nrows()
    }
    /// Input dimension.
    pub fn n(&self) -> usize {
        self.w.ncols()
    }
    /// Output units.
    pub fn d(&self) -> usize {
        self.m() / self.group_size
    }

    /// Activations for each row of `x` (T x n) -> T x d.
    pub fn activate_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, IsaError> {
        if x.ncols() != self.n() {
            return Err(IsaError::DimensionMismatch {
                expected: self.n(),
                got: x.ncols(),
            });
        }
        let y = x.dot(&self.w.t());
        Ok(pool_groups(&y, self.group_size, 0.0))
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("w", Tensor::from_array2(&self.w)).unwrap();
        c.insert_scalar("group_size", self.group_size as f64).unwrap();
        c.insert_scalar("n", self.n() as f64).unwrap();
        c.insert_scalar("m", self.m() as f64).unwrap();
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, IsaError> {
        let w = c.array2("w")?;
        for (key, want) in [("n", w.ncols()), ("m", w.nrows())] {
            let got = c.usize_scalar(key)?;
            if got != want {
                return Err(IsaError::DimensionMismatch { expected: want, got });
            }
        }
        IsaLayer::new(w, c.usize_scalar("group_size")?)
    }
}

/// `sqrt(sum of squares + eps)` over contiguous column groups of `y`.
fn pool_groups(y: &Array2<f64>, group_size: usize, eps: f64) -> Array2<f64> {
    let d = y.ncols() / group_size;
    let mut out = Array2::zeros((y.nrows(), d));
    for (row, mut orow) in y.rows().into_iter().zip(out.rows_mut()) {
        for (i, o) in orow.iter_mut().enumerate() {
            let s: f64 = (0..group_size)
                .map(|j| row[i * group_size + j].powi(2))
                .sum();
            *o = (s + eps).sqrt();
        }
    }
    out
}

/// Sum over contiguous groups of the group's l2 norm.
pub fn group_l1_norm(a: ArrayView1<f64>, group_size: usize) -> Result<f64, IsaError> {
    if group_size == 0 || a.len() % group_size != 0 {
        return Err(IsaError::IndivisibleGroups {
            len: a.len(),
            group_size,
        });
    }
    Ok(a.exact_chunks(group_size)
        .into_iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum())
}

/// Second-layer outputs `p_i = sqrt(sum_{k in G_i} (W_k . x)^2)`.
pub fn isa_activation(x: ArrayView1<f64>, layer: &IsaLayer) -> Result<Array1<f64>, IsaError> {
    if x.len() != layer.n() {
        return Err(IsaError::DimensionMismatch {
            expected: layer.n(),
            got: x.len(),
        });
    }
    let gs = layer.group_size;
    let mut out = Array1::zeros(layer.d());
    for (i, o) in out.iter_mut().enumerate() {
        let s: f64 = (0..gs)
            .map(|j| layer.w.row(i * gs + j).dot(&x).powi(2))
            .sum();
        *o = s.sqrt();
    }
    Ok(out)
}

fn check_batch(batch: ArrayView2<f64>, layer: &IsaLayer) -> Result<(), IsaError> {
    if batch.nrows() == 0 {
        return Err(IsaError::EmptyBatch);
    }
    if batch.ncols() != layer.n() {
        return Err(IsaError::DimensionMismatch {
            expected: layer.n(),
            got: batch.ncols(),
        });
    }
    Ok(())
}

/// Smoothed objective `sum_t sum_i sqrt(sum_{k in G_i} (W_k . x_t)^2 + eps)`.
pub fn isa_loss(batch: ArrayView2<f64>, layer: &IsaLayer, smooth_eps: f64) -> Result<f64, IsaError> {
    check_batch(batch, layer)?;
    let y = batch.dot(&layer.w.t());
    Ok(pool_groups(&y, layer.group_size, smooth_eps).sum())
}

/// Gradient of [`isa_loss`] with respect to `W` (m x n).
pub fn isa_grad(batch: ArrayView2<f64>, layer: &IsaLayer, smooth_eps: f64) -> Result<Array2<f64>, IsaError> {
    check_batch(batch, layer)?;
    let y = batch.dot(&layer.w.t());
    let p = pool_groups(&y, layer.group_size, smooth_eps);
    let gs = layer.group_size;
    let mut scaled = y;
    for (mut row, prow) in scaled.rows_mut().into_iter().zip(p.rows()) {
        for (k, v) in row.iter_mut().enumerate() {
            *v /= prow[k / gs];
        }
    }
    Ok(scaled.t().dot(&batch))
}

/// `(W W^T)^{-1/2} W`, the nearest matrix with orthonormal rows.
pub fn symmetric_orthonormalize(w: &Array2<f64>) -> Result<Array2<f64>, IsaError> {
    let gram = w.dot(&w.t());
    let (vals, vecs) = gram
        .eigh(UPLO::Lower)
        .map_err(|e| IsaError::Linalg(e.to_string()))?;
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
        return Err(IsaError::RankDeficient(min));
    }
    let inv_sqrt = vals.mapv(|l| 1.0 / l.sqrt());
    let scaled = &vecs * &inv_sqrt.insert_axis(Axis(0));
    Ok(scaled.dot(&vecs.t()).dot(w))
}

/// `||W W^T - I||_F`.
pub fn orthogonality_error(w: &Array2<f64>) -> f64 {
    let g = w.dot(&w.t()) - Array2::<f64>::eye(w.nrows());
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Random `m x n` matrix with orthonormal rows, from the QR of a seeded Gaussian.
pub fn random_orthonormal(m: usize, n: usize, seed: u64) -> Result<Array2<f64>, IsaError> {
    if m > n {
        return Err(IsaError::InvalidOptions(format!(
            "cannot have {m} orthonormal rows in dimension {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Array2::from_shape_fn((n, m), |_| StandardNormal.sample(&mut rng));
    let (q, _r) = g.qr().map_err(|e| IsaError::Linalg(e.to_string()))?;
    Ok(q.t().to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOpts {
    /// Initial step size of the line search.
    pub learning_rate: f64,
    pub epochs: usize,
    /// Rows per chunk when accumulating the full-batch loss and gradient; 0 means all at once.
    pub batch_size: usize,
    pub smooth_eps: f64,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            learning_rate: 0.5,
            epochs: 100,
            batch_size: 0,
            smooth_eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedIsa {
    pub layer: IsaLayer,
    /// Loss before training followed by the loss after every epoch.
    pub loss_curve: Vec<f64>,
    /// `||W W^T - I||_F` after every epoch.
    pub orthogonality_errors: Vec<f64>,
}

fn chunked<F, T>(data: ArrayView2<f64>, batch_size: usize, mut f: F) -> Result<Vec<T>, IsaError>
where
    F: FnMut(ArrayView2<f64>) -> Result<T, IsaError>,
{
    let bs = if batch_size == 0 { data.nrows() } else { batch_size };
    data.axis_chunks_iter(Axis(0), bs.max(1)).map(|c| f(c)).collect()
}

/// Projected gradient descent with step halving on a square `W` (m = n).
pub fn train_isa(data: ArrayView2<f64>, group_size: usize, opts: &TrainOpts) -> Result<TrainedIsa, IsaError> {
    let (t, n) = data.dim();
    if t == 0 {
        return Err(IsaError::EmptyBatch);
    }
    if !(opts.learning_rate > 0.0) || !(opts.smooth_eps > 0.0) {
        return Err(IsaError::InvalidOptions(
            "learning_rate and smooth_eps must be positive".into(),
        ));
    }
    if group_size == 0 || n % group_size != 0 {
        return Err(IsaError::IndivisibleGroups {
            len: n,
            group_size,
        });
    }
    let loss_of = |layer: &IsaLayer| -> Result<f64, IsaError> {
        Ok(chunked(data, opts.batch_size, |c| isa_loss(c, layer, opts.smooth_eps))?
            .into_iter()
            .sum())
    };
    let grad_of = |layer: &IsaLayer| -> Result<Array2<f64>, IsaError> {
        let parts = chunked(data, opts.batch_size, |c| isa_grad(c, layer, opts.smooth_eps))?;
        Ok(parts
            .into_iter()
            .reduce(|a, b| a + b)
            .expect("nonempty data"))
    };

    let mut layer = IsaLayer::new(random_orthonormal(n, n, opts.seed)?, group_size)?;
    let mut loss = loss_of(&layer)?;
    if !loss.is_finite() {
        return Err(IsaError::Diverged { epoch: 0, loss });
    }
    let mut loss_curve = vec![loss];
    let mut orthogonality_errors = Vec::with_capacity(opts.epochs);
    let mut lr = opts.learning_rate;
    let floor = opts.learning_rate * 1e-10;

    for epoch in 1..=opts.epochs {
        let grad = grad_of(&layer)? / t as f64;
        let mut accepted = false;
        while lr >= floor {
            let cand_w = symmetric_orthonormalize(&(layer.w() - &(&grad * lr)))?;
            let cand = IsaLayer::new(cand_w, group_size)?;
            let cand_loss = loss_of(&cand)?;
            if cand_loss.is_nan() {
                return Err(IsaError::Diverged {
                    epoch,
                    loss: cand_loss,
                });
            }
            if cand_loss <= loss {
                layer = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        loss_curve.push(loss);
        orthogonality_errors.push(orthogonality_error(layer.w()));
        if !accepted {
            // no descent step exists at this resolution: converged
            break;
        }
        lr = (lr * 2.0).min(opts.learning_rate);
    }
    Ok(TrainedIsa {
        layer,
        loss_curve,
        orthogonality_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::Exp;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng))
    }

    /// Direct triple loop over instances, groups and members.
    fn loss_oracle(x: &Array2<f64>, w: &Array2<f64>, gs: usize, eps: f64) -> f64 {
        let mut total = 0.0;
        for t in 0..x.nrows() {
            for i in 0..w.nrows() / gs {
                let mut s = 0.0;
                for k in i * gs..(i + 1) * gs {
                    let mut dot = 0.0;
                    for j in 0..x.ncols() {
                        dot += w[[k, j]] * x[[t, j]];
                    }
                    s += dot * dot;
                }
                total += (s + eps).sqrt();
            }
        }
        total
    }

    #[test]
    fn group_norm_cases() {
        assert_eq!(group_l1_norm(array![3.0, 4.0].view(), 2).unwrap(), 5.0);
        let v = group_l1_norm(array![1.0, 1.0, 1.0, 1.0].view(), 2).unwrap();
        assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(group_l1_norm(Array1::zeros(4).view(), 2).unwrap(), 0.0);
        assert!(matches!(
            group_l1_norm(array![1.0, 2.0, 3.0].view(), 2),
            Err(IsaError::IndivisibleGroups { .. })
        ));
    }

    #[test]
    fn activation_cases() {
        let id = IsaLayer::new(Array2::eye(2), 2).unwrap();
        assert_eq!(isa_activation(array![3.0, 4.0].view(), &id).unwrap(), array![5.0]);
        let swap = IsaLayer::new(array![[0.0, 1.0], [1.0, 0.0]], 1).unwrap();
        assert_eq!(isa_activation(array![2.0, -3.0].view(), &swap).unwrap(), array![3.0, 2.0]);
        assert_eq!(isa_activation(array![0.0, 0.0].view(), &swap).unwrap(), array![0.0, 0.0]);
        assert!(matches!(
            isa_activation(array![1.0].view(), &swap),
            Err(IsaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn loss_cases() {
        let id = IsaLayer::new(Array2::eye(2), 2).unwrap();
        let x = array![[3.0, 4.0]];
        assert_eq!(isa_loss(x.view(), &id, 0.0).unwrap(), 5.0);
        let xx = array![[3.0, 4.0], [3.0, 4.0]];
        assert_eq!(isa_loss(xx.view(), &id, 1e-3).unwrap(), 2.0 * isa_loss(x.view(), &id, 1e-3).unwrap());
        assert!(matches!(
            isa_loss(Array2::zeros((0, 2)).view(), &id, 0.0),
            Err(IsaError::EmptyBatch)
        ));
        let w = random_matrix(6, 8, 1);
        let layer = IsaLayer::new(w.clone(), 2).unwrap();
        let b = random_matrix(7, 8, 2);
        let got = isa_loss(b.view(), &layer, 1e-4).unwrap();
        assert!((got - loss_oracle(&b, &w, 2, 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = random_matrix(6, 8, 3);
        let layer = IsaLayer::new(w.clone(), 2).unwrap();
        let b = random_matrix(5, 8, 4);
        let eps = 1e-6;
        let g = isa_grad(b.view(), &layer, eps).unwrap();
        let h = 1e-5;
        let mut num = Array2::zeros(w.dim());
        for idx in ndarray::indices(w.dim()) {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            num[idx] = (loss_oracle(&b, &wp, 2, eps) - loss_oracle(&b, &wm, 2, eps)) / (2.0 * h);
        }
        let rel = (&g - &num).iter().map(|v| v * v).sum::<f64>().sqrt()
            / num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rel < 1e-4, "relative error {rel}");

        let zeros = Array2::zeros((3, 8));
        assert!(isa_grad(zeros.view(), &layer, eps).unwrap().iter().all(|&v| v == 0.0));
        let twice = ndarray::concatenate(Axis(0), &[b.view(), b.view()]).unwrap();
        let g2 = isa_grad(twice.view(), &layer, eps).unwrap();
        assert!((&g2 - &(&g * 2.0)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn orthonormalize_cases() {
        let q = random_orthonormal(4, 4, 9).unwrap();
        let q2 = symmetric_orthonormalize(&q).unwrap();
        assert!((&q2 - &q).iter().all(|v| v.abs() < 1e-10));
        let two = Array2::<f64>::eye(2) * 2.0;
        let r = symmetric_orthonormalize(&two).unwrap();
        assert!((&r - &Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-12));
        let w = random_matrix(5, 8, 10);
        assert!(orthogonality_error(&symmetric_orthonormalize(&w).unwrap()) < 1e-10);
        let rank1 = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(
            symmetric_orthonormalize(&rank1),
            Err(IsaError::RankDeficient(_))
        ));
    }

    /// Unit-variance Laplacian sources mixed by a random orthogonal matrix.
    pub(crate) fn mixed_sources(n: usize, t: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exp = Exp::new(1.0).unwrap();
        let s = Array2::from_shape_fn((t, n), |_| {
            let mag: f64 = exp.sample(&mut rng);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * mag / std::f64::consts::SQRT_2
        });
        let a = random_orthonormal(n, n, seed ^ 0xA5A5).unwrap();
        // x_t = A s_t
        (s.dot(&a.t()), a)
    }

    pub(crate) fn recovered_sources(w: &Array2<f64>, a: &Array2<f64>) -> usize {
        // rows of W A approximate a signed permutation
        let m = w.dot(a);
        (0..a.ncols())
            .filter(|&j| m.column(j).iter().map(|v| v.abs()).fold(0.0, f64::max) > 0.95)
            .count()
    }

    #[test]
    fn training_recovers_sparse_sources() {
        let (x, a) = mixed_sources(16, 4000, 1);
        let opts = TrainOpts {
            epochs: 300,
            ..TrainOpts::default()
        };
        let trained = train_isa(x.view(), 1, &opts).unwrap();
        assert_eq!(recovered_sources(trained.layer.w(), &a), 16);
        assert!(trained.loss_curve.windows(2).all(|p| p[1] <= p[0]));
        assert!(trained.orthogonality_errors.iter().all(|&e| e < 1e-6));
        let again = train_isa(x.view(), 1, &opts).unwrap();
        assert_eq!(again.layer, trained.layer);
    }

    #[test]
    fn container_round_trip() {
        let layer = IsaLayer::new(random_orthonormal(4, 6, 2).unwrap(), 2).unwrap();
        let c = TensorContainer::from_bytes(&layer.to_container().to_bytes()).unwrap();
        assert_eq!(IsaLayer::from_container(&c).unwrap(), layer);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn activation_sum_equals_group_norm_and_scales(seed in 0u64..10_000, c in -5.0f64..5.0) {
            let w = random_matrix(6, 6, seed);
            let layer = IsaLayer::new(w.clone(), 3).unwrap();
            let x = random_matrix(1, 6, seed + 1).row(0).to_owned();
            let act = isa_activation(x.view(), &layer).unwrap();
            let wx = w.dot(&x);
            let g = group_l1_norm(wx.view(), 3).unwrap();
            proptest::prop_assert!((act.sum() - g).abs() < 1e-10);
            let scaled = isa_activation((&x * c).view(), &layer).unwrap();
            for (s, a) in scaled.iter().zip(act.iter()) {
                proptest::prop_assert!((s - c.abs() * a).abs() < 1e-9 * (1.0 + a));
            }
        }
    }
}
