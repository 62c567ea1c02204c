//! Multi-class iterative re-ranking and rank-score fusion.
//!
//! Each iteration lowers every score by an exponentially weighted sum of the
//! competing classes' scores in the same row, sorted in descending order.
//! The correction is annealed by `eta^(w-1)`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MirError {
    #[error("re-ranking needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("score matrix contains a non-finite value")]
    NonFinite,
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirParams {
    pub eta: f64,
    pub alpha: f64,
    /// Total iterations counting the input as the first, so at most `max_iters - 1` updates.
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MirParams {
    fn default() -> Self {
        MirParams {
            eta: 0.5,
            alpha: 1.0,
            max_iters: 5,
            tol: 1e-9,
        }
    }
}

impl MirParams {
    pub fn validate(&self) -> Result<(), MirError> {
        if !(self.alpha > 0.0) {
            return Err(MirError::Params(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(MirError::Params(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if self.max_iters == 0 {
            return Err(MirError::Params("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(MirError::Params("tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirResult {
    pub scores: Array2<f64>,
    /// Updates applied.
    pub iterations: usize,
    /// Max absolute change of each update.
    pub max_changes: Vec<f64>,
}

fn check(p: ArrayView2<f64>) -> Result<(), MirError> {
    if p.ncols() < 2 {
        return Err(MirError::TooFewClasses(p.ncols()));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(MirError::NonFinite);
    }
    Ok(())
}

fn update_row(row: ArrayView1<f64>, scale: f64, weights: &[f64], out: &mut [f64]) {
    let k = row.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    for j in 0..k {
        let penalty: f64 = order
            .iter()
            .filter(|&&o| o != j)
            .zip(weights)
            .map(|(&o, &w)| w * row[o])
            .sum();
        out[j] = row[j] - scale * penalty;
    }
}

/// One synchronous update of iteration `w` (1-based): every entry reads only `p`.
pub fn mir_step(p: ArrayView2<f64>, w: usize, params: &MirParams) -> Result<Array2<f64>, MirError> {
    check(p)?;
    params.validate()?;
    let k = p.ncols();
    let weights: Vec<f64> = (1..k).map(|r| (-params.alpha * r as f64).exp()).collect();
    let scale = params.eta.powi(w as i32 - 1);
    let mut out = Array2::zeros(p.dim());
    let rows: Vec<_> = p.axis_iter(Axis(0)).collect();
    let updated: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|r| {
            let mut o = vec![0.0; k];
            update_row(*r, scale, &weights, &mut o);
            o
        })
        .collect();
    for (mut dst, src) in out.rows_mut().into_iter().zip(updated) {
        dst.assign(&ArrayView1::from(&src[..]));
    }
    Ok(out)
}

/// Runs updates `w = 1 .. max_iters - 1`, stopping once the largest change falls below `tol`.
pub fn mir_rerank(p: ArrayView2<f64>, params: &MirParams) -> Result<MirResult, MirError> {
    check(p)?;
    params.validate()?;
    let mut cur = p.to_owned();
    let mut max_changes = Vec::new();
    for w in 1..params.max_iters {
        let next = mir_step(cur.view(), w, params)?;
        let change = (&next - &cur).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        cur = next;
        max_changes.push(change);
        if change < params.tol {
            break;
        }
    }
    Ok(MirResult {
        scores: cur,
        iterations: max_changes.len(),
        max_changes,
    })
}

/// Per column: min-max scale `p_final` to [0, 1], z-score it, then add `p_orig`.
pub fn rank_score_fuse(p_final: ArrayView2<f64>, p_orig: ArrayView2<f64>) -> Result<Array2<f64>, MirError> {
    if p_final.dim() != p_orig.dim() {
        return Err(MirError::Shape(p_final.dim(), p_orig.dim()));
    }
    if p_final.iter().chain(p_orig.iter()).any(|v| !v.is_finite()) {
        return Err(MirError::NonFinite);
    }
    let mut out = p_orig.to_owned();
    let n = p_final.nrows() as f64;
    for (col, mut dst) in p_final.columns().into_iter().zip(out.columns_mut()) {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let scaled: Vec<f64> = col
            .iter()
            .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect();
        let mean = scaled.iter().sum::<f64>() / n;
        let std = (scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for (d, s) in dst.iter_mut().zip(&scaled) {
            *d += (s - mean) / std;
        }
    }
    Ok(out)
}

/// Scores with planted confusions: classes come in similar pairs, a true
/// class scores high, its partner scores moderately high, and every row
/// carries a shared random offset. Returns the scores and true labels.
pub fn synthetic_confusion_scores(n: usize, k: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array2::zeros((n, k));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let c = i % k;
        let partner = if c % 2 == 0 { (c + 1) % k } else { c - 1 };
        let offset = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        for (j, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let base = if j == c {
                1.0
            } else if j == partner {
                0.7 * rng.random::<f64>()
            } else {
                0.0
            };
            *v = base + offset + 0.4 * noise;
        }
        labels.push(c);
    }
    (p, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, k), |_| StandardNormal.sample(&mut rng))
    }

    /// Literal reading of the update with explicit set-minus and sort.
    fn step_oracle(p: &Array2<f64>, w: usize, prm: &MirParams) -> Array2<f64> {
        let mut out = p.clone();
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let mut delta: Vec<f64> = (0..p.ncols()).filter(|&c| c != j).map(|c| p[[i, c]]).collect();
                delta.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut s = 0.0;
                for (r, d) in delta.iter().enumerate() {
                    s += (-prm.alpha * (r + 1) as f64).exp() * d;
                }
                out[[i, j]] = p[[i, j]] - prm.eta.powi(w as i32 - 1) * s;
            }
        }
        out
    }

    #[test]
    fn worked_two_by_two() {
        let p = array![[1.0, 0.5], [0.2, 0.8]];
        let prm = MirParams::default();
        let got = mir_step(p.view(), 1, &prm).unwrap();
        let e = (-1.0f64).exp();
        let want = array![[1.0 - e * 0.5, 0.5 - e * 1.0], [0.2 - e * 0.8, 0.8 - e * 0.2]];
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-12));
        assert!((&got - &step_oracle(&p, 1, &prm)).iter().all(|v| v.abs() < 1e-12));
        let rounded = got.mapv(|v| (v * 1e4).round() / 1e4);
        assert_eq!(rounded, array![[0.8161, 0.1321], [-0.0943, 0.7264]]);
    }

    #[test]
    fn constant_rows_shift_uniformly() {
        let p = Array2::from_elem((3, 4), 2.0);
        let r = mir_rerank(p.view(), &MirParams::default()).unwrap();
        let first = r.scores[[0, 0]];
        assert!(r.scores.iter().all(|&v| (v - first).abs() < 1e-12));
        assert!(first < 2.0);
    }

    #[test]
    fn changes_decay_and_loop_halts() {
        let prm = MirParams::default();
        for seed in 0..20 {
            let p = random(50, 10, seed);
            let r = mir_rerank(p.view(), &prm).unwrap();
            assert!(r.iterations <= prm.max_iters - 1);
            assert!(r.max_changes.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn reranking_improves_map_on_planted_confusions() {
        use crate::classify::eval_map;
        let prm = MirParams::default();
        let mut improved = 0;
        for seed in 0..20 {
            let (p, l) = synthetic_confusion_scores(200, 10, seed);
            let truth: Vec<Vec<usize>> = l.iter().map(|&c| vec![c]).collect();
            let mut maps = vec![eval_map(p.view(), &truth).unwrap()];
            let mut cur = p.clone();
            for w in 1..4 {
                cur = mir_step(cur.view(), w, &prm).unwrap();
                maps.push(eval_map(cur.view(), &truth).unwrap());
            }
            let fin = mir_rerank(p.view(), &prm).unwrap().scores;
            let ok = eval_map(fin.view(), &truth).unwrap() >= maps[0] && maps.windows(2).all(|w| w[1] >= w[0]);
            improved += ok as usize;
        }
        assert!(improved >= 18, "{improved}/20");
    }

    #[test]
    fn errors() {
        assert!(matches!(mir_rerank(array![[1.0], [2.0]].view(), &MirParams::default()), Err(MirError::TooFewClasses(1))));
        assert!(matches!(mir_rerank(array![[1.0, f64::NAN]].view(), &MirParams::default()), Err(MirError::NonFinite)));
        let bad = MirParams {
            alpha: 0.0,
            ..MirParams::default()
        };
        assert!(matches!(mir_rerank(array![[1.0, 2.0]].view(), &bad), Err(MirError::Params(_))));
        assert!(matches!(
            rank_score_fuse(Array2::zeros((2, 2)).view(), Array2::zeros((3, 2)).view()),
            Err(MirError::Shape(..))
        ));
    }

    #[test]
    fn fusion_oracle_and_degenerate_column() {
        let pf = array![[0.3, 1.0, 5.0], [-1.2, 2.0, 5.0], [0.7, 0.0, 5.0], [2.0, -3.0, 5.0]];
        let po = random(4, 3, 11);
        let got = rank_score_fuse(pf.view(), po.view()).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| pf[[r, c]]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mm: Vec<f64> = col.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect();
            let mean = mm.iter().sum::<f64>() / 4.0;
            let var = mm.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for r in 0..4 {
                let z = if var > 0.0 { (mm[r] - mean) / var.sqrt() } else { 0.0 };
                assert!((got[[r, c]] - (z + po[[r, c]])).abs() < 1e-12);
            }
        }
        assert_eq!(got.column(2), po.column(2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn step_matches_oracle(seed in 0u64..10_000, w in 1usize..5) {
            let p = random(6, 5, seed);
            let prm = MirParams::default();
            let got = mir_step(p.view(), w, &prm).unwrap();
            prop_assert!((&got - &step_oracle(&p, w, &prm)).iter().all(|v| v.abs() < 1e-12));
        }

        #[test]
        fn row_order_does_not_matter(seed in 0u64..10_000) {
            let p = random(8, 4, seed);
            let mut rev = p.clone();
            rev.invert_axis(Axis(0));
            let a = mir_rerank(p.view(), &MirParams::default()).unwrap().scores;
            let mut b = mir_rerank(rev.view(), &MirParams::default()).unwrap().scores;
            b.invert_axis(Axis(0));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn fusion_ignores_column_shift(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let pf = random(7, 3, seed);
            let po = random(7, 3, seed + 1);
            let mut shifted = pf.clone();
            shifted.column_mut(1).mapv_inplace(|v| v + shift);
            let a = rank_score_fuse(pf.view(), po.view()).unwrap();
            let b = rank_score_fuse(shifted.view(), po.view()).unwrap();
            prop_assert!((&a - &b).iter().all(|v| v.abs() < 1e-9));
        }

        #[test]
        fn dominant_top_score_keeps_argmax(seed in 0u64..10_000, k in 2usize..8, w in 1usize..5) {
            let p = random(4, k, seed);
            let prm = MirParams::default();
            let after = mir_step(p.view(), w, &prm).unwrap();
            for (before, now) in p.rows().into_iter().zip(after.rows()) {
                let mut sorted = before.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let bound: f64 = sorted[1..].iter().enumerate()
                    .map(|(r, s)| (-((r + 1) as f64)).exp() * (sorted[1] - s))
                    .sum();
                if sorted[0] - sorted[1] > bound {
                    prop_assert_eq!(crate::classify::argmax(before), crate::classify::argmax(now));
                }
            }
        }
    }
}
