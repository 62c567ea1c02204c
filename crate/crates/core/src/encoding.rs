//! Descriptor PCA, diagonal GMMs, Fisher vectors and multi-skip feature stacking.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::container::{ContainerError, Tensor, TensorContainer};
use crate::descriptors::DescriptorKind;
use crate::pca::{pca_train, PcaError, PcaModel};
use crate::trajectory::TRAJ_LEN;
use crate::video::GrayVideo;

const CHUNK: usize = 1024;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("need at least {needed} samples for {k} components, got {got}")]
    TooFewSamples { needed: usize, k: usize, got: usize },
    #[error("component {0} collapsed twice")]
    Collapsed(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("encoder has no model for descriptor kind `{0}`")]
    UnknownKind(DescriptorKind),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOpts {
    pub max_iters: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Variance floor as a fraction of each dimension's data variance.
    pub floor_ratio: f64,
}

impl Default for GmmOpts {
    fn default() -> Self {
        GmmOpts {
            max_iters: 200,
            tol: 1e-5,
            floor_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood of the samples under the parameters entering each EM iteration.
    pub log_likelihoods: Vec<f64>,
    pub reinitialized: Vec<usize>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }
    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Per-component `log w_k + log N(x | mu_k, sigma_k^2)` for each row.
    fn joint_log(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let k = self.k();
        let d = self.dim();
        let consts: Vec<f64> = (0..k)
            .map(|c| {
                self.weights[c].ln()
                    - 0.5 * (d as f64 * LN_2PI + self.variances.row(c).iter().map(|v| v.ln()).sum::<f64>())
            })
            .collect();
        let mut out = Array2::zeros((x.nrows(), k));
        for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
            for c in 0..k {
                let mu = self.means.row(c);
                let var = self.variances.row(c);
                let mut q = 0.0;
                for j in 0..d {
                    let diff = row[j] - mu[j];
                    q += diff * diff / var[j];
                }
                o[c] = consts[c] - 0.5 * q;
            }
        }
        out
    }

    /// Posteriors (rows sum to 1) and per-row log-likelihoods.
    pub fn posteriors(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
        let mut g = self.joint_log(x);
        let mut ll = Array1::zeros(x.nrows());
        for (mut row, l) in g.rows_mut().into_iter().zip(ll.iter_mut()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            row.mapv_inplace(|v| (v - lse).exp());
            *l = lse;
        }
        (g, ll)
    }

    pub fn mean_log_likelihood(&self, x: ArrayView2<f64>) -> f64 {
        let parts: Vec<f64> = x
            .axis_chunks_iter(Axis(0), CHUNK)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|c| self.posteriors(*c).1.sum())
            .collect();
        parts.iter().sum::<f64>() / x.nrows() as f64
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("weights", Tensor::from_array1(&self.weights)).unwrap();
        c.insert("means", Tensor::from_array2(&self.means)).unwrap();
        c.insert("variances", Tensor::from_array2(&self.variances)).unwrap();
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, EncodingError> {
        let g = GmmModel {
            weights: c.array1("weights")?,
            means: c.array2("means")?,
            variances: c.array2("variances")?,
        };
        if g.means.nrows() != g.k() || g.variances.dim() != g.means.dim() {
            return Err(EncodingError::Invalid("GMM tensor shapes disagree".into()));
        }
        Ok(g)
    }
}

/// Sufficient statistics of one E-step.
struct Stats {
    nk: Array1<f64>,
    sx: Array2<f64>,
    sxx: Array2<f64>,
    ll: f64,
}

fn e_step(gmm: &GmmModel, x: ArrayView2<f64>) -> Stats {
    let chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
    let parts: Vec<Stats> = chunks
        .par_iter()
        .map(|c| {
            let (g, ll) = gmm.posteriors(*c);
            Stats {
                nk: g.sum_axis(Axis(0)),
                sx: g.t().dot(c),
                sxx: g.t().dot(&c.mapv(|v| v * v)),
                ll: ll.sum(),
            }
        })
        .collect();
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("nonempty data");
    for p in it {
        acc.nk += &p.nk;
        acc.sx += &p.sx;
        acc.sxx += &p.sxx;
        acc.ll += p.ll;
    }
    acc
}

fn kmeans_pp(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.random_range(0..s)));
    let mut d2: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| (&r - &centers.row(0)).mapv(|v| v * v).sum())
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = s - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..s)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (r, d) in x.rows().into_iter().zip(d2.iter_mut()) {
            *d = d.min((&r - &centers.row(c)).mapv(|v| v * v).sum());
        }
    }
    centers
}

/// Hard-assignment statistics around the given centers.
fn init_from_centers(x: ArrayView2<f64>, centers: Array2<f64>, floor: &Array1<f64>, global_var: &Array1<f64>) -> GmmModel {
    let (k, d) = centers.dim();
    let mut counts = vec![0usize; k];
    let mut sum = Array2::<f64>::zeros((k, d));
    let mut sumsq = Array2::<f64>::zeros((k, d));
    for r in x.rows() {
        let best = (0..k)
            .map(|c| (c, (&r - &centers.row(c)).mapv(|v| v * v).sum()))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
            .0;
        counts[best] += 1;
        let mut srow = sum.row_mut(best);
        srow += &r;
        let mut qrow = sumsq.row_mut(best);
        qrow += &r.mapv(|v| v * v);
    }
    let mut variances = Array2::zeros((k, d));
    let mut means = centers;
    for c in 0..k {
        if counts[c] >= 2 {
            let n = counts[c] as f64;
            let m = sum.row(c).mapv(|v| v / n);
            let v = sumsq.row(c).mapv(|v| v / n) - m.mapv(|v| v * v);
            means.row_mut(c).assign(&m);
            variances.row_mut(c).assign(&v);
        } else {
            variances.row_mut(c).assign(global_var);
        }
        for j in 0..d {
            variances[[c, j]] = variances[[c, j]].max(floor[j]);
        }
    }
    let total = x.nrows() as f64;
    let weights = Array1::from_iter(counts.iter().map(|&n| (n.max(1) as f64) / total));
    let wsum = weights.sum();
    GmmModel {
        weights: weights / wsum,
        means,
        variances,
    }
}

/// k-means++ seeding followed by EM; deterministic given `seed`.
pub fn gmm_train(x: ArrayView2<f64>, k: usize, seed: u64, opts: &GmmOpts) -> Result<GmmFit, EncodingError> {
    let (s, d) = x.dim();
    if k == 0 || s < 10 * k {
        return Err(EncodingError::TooFewSamples {
            needed: 10 * k.max(1),
            k,
            got: s,
        });
    }
    if d == 0 {
        return Err(EncodingError::Invalid("zero-dimensional samples".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EncodingError::Numeric("non-finite sample".into()));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let global_var = x.var_axis(Axis(0), 0.0);
    let floor = global_var.mapv(|v| (opts.floor_ratio * v).max(1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gmm = if k == 1 {
        GmmModel {
            weights: Array1::ones(1),
            means: mean.clone().insert_axis(Axis(0)),
            variances: global_var.mapv(|v| v).insert_axis(Axis(0)),
        }
    } else {
        init_from_centers(x, kmeans_pp(x, k, &mut rng), &floor, &global_var)
    };
    for j in 0..d {
        for c in 0..k {
            gmm.variances[[c, j]] = gmm.variances[[c, j]].max(floor[j]);
        }
    }

    let mut lls = Vec::new();
    let mut reinitialized = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..opts.max_iters {
        let st = e_step(&gmm, x);
        let ll = st.ll / s as f64;
        if !ll.is_finite() {
            return Err(EncodingError::Numeric(format!("log-likelihood became {ll}")));
        }
        lls.push(ll);
        let converged = ll - prev < opts.tol;
        prev = ll;
        if converged {
            break;
        }
        let mut next = gmm.clone();
        let mut reinit = None;
        for c in 0..k {
            let n = st.nk[c];
            if n < 1e-8 * s as f64 || n < 1e-300 {
                reinit = Some(c);
                continue;
            }
            next.weights[c] = n / s as f64;
            for j in 0..d {
                let m = st.sx[[c, j]] / n;
                next.means[[c, j]] = m;
                next.variances[[c, j]] = (st.sxx[[c, j]] / n - m * m).max(floor[j]);
            }
        }
        if let Some(c) = reinit {
            if reinitialized.contains(&c) {
                return Err(EncodingError::Collapsed(c));
            }
            reinitialized.push(c);
            next.means.row_mut(c).assign(&x.row(rng.random_range(0..s)));
            next.variances.row_mut(c).assign(&global_var.mapv(|v| v.max(1e-12)));
            next.weights[c] = 1.0 / k as f64;
            // a reseeded component restarts the likelihood sequence
            prev = f64::NEG_INFINITY;
        }
        let wsum = next.weights.sum();
        next.weights /= wsum;
        gmm = next;
    }
    Ok(GmmFit {
        model: gmm,
        log_likelihoods: lls,
        reinitialized,
    })
}

/// Mean-then-variance gradients, component-major; zero for an empty set.
pub fn fisher_vector(x: ArrayView2<f64>, gmm: &GmmModel) -> Result<Array1<f64>, EncodingError> {
    let (k, d) = (gmm.k(), gmm.dim());
    if x.ncols() != d {
        return Err(EncodingError::DimensionMismatch {
            expected: d,
            got: x.ncols(),
        });
    }
    let mut out = Array1::zeros(2 * d * k);
    let m = x.nrows();
    if m == 0 {
        return Ok(out);
    }
    let (gamma, _) = gmm.posteriors(x);
    let sigma = gmm.variances.mapv(f64::sqrt);
    for c in 0..k {
        let mu_scale = 1.0 / (m as f64 * gmm.weights[c].sqrt());
        let var_scale = 1.0 / (m as f64 * (2.0 * gmm.weights[c]).sqrt());
        for (row, g) in x.rows().into_iter().zip(gamma.column(c)) {
            for j in 0..d {
                let z = (row[j] - gmm.means[[c, j]]) / sigma[[c, j]];
                out[c * d + j] += g * z;
                out[k * d + c * d + j] += g * (z * z - 1.0);
            }
        }
        for j in 0..d {
            out[c * d + j] *= mu_scale;
            out[k * d + c * d + j] *= var_scale;
        }
    }
    Ok(out)
}

/// Signed power then l2 normalization; the zero vector is left unchanged.
pub fn power_l2_normalize(v: &Array1<f64>, alpha: f64) -> Array1<f64> {
    let p = v.mapv(|x| if x == 0.0 { 0.0 } else { x.signum() * x.abs().powf(alpha) });
    let n = p.dot(&p).sqrt();
    if n == 0.0 {
        p
    } else {
        p / n
    }
}

/// Per-trajectory descriptors of one video: each kind holds one row per
/// location, with locations normalized to [0, 1] along x, y and t.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorSet {
    pub locations: Array2<f64>,
    pub kinds: BTreeMap<DescriptorKind, Array2<f64>>,
}

impl DescriptorSet {
    pub fn empty(kinds: &[(DescriptorKind, usize)]) -> Self {
        DescriptorSet {
            locations: Array2::zeros((0, 3)),
            kinds: kinds.iter().map(|&(k, d)| (k, Array2::zeros((0, d)))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.locations.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.locations.ncols() != 3 {
            return Err(EncodingError::Invalid("locations must have 3 columns".into()));
        }
        for (k, m) in &self.kinds {
            if m.nrows() != self.len() {
                return Err(EncodingError::Invalid(format!(
                    "{k} has {} rows for {} locations",
                    m.nrows(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    /// Tensors `locations` and `kind.<name>`.
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("locations", Tensor::from_array2(&self.locations)).unwrap();
        for (k, m) in &self.kinds {
            c.insert(format!("kind.{k}"), Tensor::from_array2(m)).unwrap();
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, EncodingError> {
        let mut kinds = BTreeMap::new();
        for name in c.names() {
            if let Some(k) = name.strip_prefix("kind.") {
                let kind = DescriptorKind::from_name(k)
                    .ok_or_else(|| EncodingError::Invalid(format!("unknown descriptor kind {k:?}")))?;
                kinds.insert(kind, c.array2(name)?);
            }
        }
        let set = DescriptorSet {
            locations: c.array2("locations")?,
            kinds,
        };
        set.validate()?;
        Ok(set)
    }

    /// Keeps only `wanted`, failing if one is absent.
    pub fn select(&self, wanted: &[DescriptorKind]) -> Result<DescriptorSet, EncodingError> {
        let mut kinds = BTreeMap::new();
        for &k in wanted {
            let m = self.kinds.get(&k).ok_or(EncodingError::UnknownKind(k))?;
            kinds.insert(k, m.clone());
        }
        Ok(DescriptorSet {
            locations: self.locations.clone(),
            kinds,
        })
    }

    /// Column-wise union of two sets over the same locations.
    pub fn merge_kinds(mut self, other: DescriptorSet) -> Result<DescriptorSet, EncodingError> {
        if self.locations != other.locations {
            return Err(EncodingError::Invalid("descriptor sets cover different locations".into()));
        }
        for (k, m) in other.kinds {
            if self.kinds.insert(k, m).is_some() {
                return Err(EncodingError::Invalid(format!("{k} present in both sets")));
            }
        }
        Ok(self)
    }

    /// Disjoint union: rows of `other` follow rows of `self`.
    pub fn append(&mut self, other: DescriptorSet) -> Result<(), EncodingError> {
        other.validate()?;
        if self.kinds.is_empty() && self.is_empty() {
            *self = other;
            return Ok(());
        }
        if self.kinds.keys().ne(other.kinds.keys()) {
            return Err(EncodingError::Invalid("descriptor kinds differ".into()));
        }
        self.locations = concatenate(Axis(0), &[self.locations.view(), other.locations.view()])
            .map_err(|e| EncodingError::Invalid(e.to_string()))?;
        for (k, m) in other.kinds {
            let mine = self.kinds.get_mut(&k).expect("same keys");
            *mine = concatenate(Axis(0), &[mine.view(), m.view()]).map_err(|_| EncodingError::DimensionMismatch {
                expected: mine.ncols(),
                got: m.ncols(),
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MifsReport {
    pub used: Vec<usize>,
    /// Skip levels the video was too short for.
    pub skipped: Vec<usize>,
}

/// Frames needed to extract anything at skip level `s`.
pub fn mifs_min_frames(skip: usize) -> usize {
    (TRAJ_LEN + 1) * (skip + 1)
}

/// Runs `extract` on every frame-subsampled copy of `video` and pools the results.
pub fn mifs_stack<F, E>(video: &GrayVideo, skips: &[usize], mut extract: F) -> Result<(DescriptorSet, MifsReport), E>
where
    F: FnMut(&GrayVideo) -> Result<DescriptorSet, E>,
    E: From<EncodingError>,
{
    let mut set = DescriptorSet::default();
    let mut report = MifsReport::default();
    for &s in skips {
        if (video.frames() as usize) < mifs_min_frames(s) {
            report.skipped.push(s);
            continue;
        }
        let level = if s == 0 {
            extract(video)?
        } else {
            extract(&video.subsample_frames(s + 1))?
        };
        set.append(level)?;
        report.used.push(s);
    }
    Ok((set, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub k: usize,
    /// Descriptors sampled per kind for PCA and GMM training.
    pub sample_count: usize,
    pub power_alpha: f64,
    /// Append normalized (x, y, t) after the PCA projection.
    pub xyt: bool,
    pub gmm: GmmOpts,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k: 256,
            sample_count: 256_000,
            power_alpha: 0.5,
            xyt: false,
            gmm: GmmOpts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KindEncoder {
    pub pca: PcaModel,
    pub gmm: GmmModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEncoder {
    pub kinds: BTreeMap<DescriptorKind, KindEncoder>,
    pub power_alpha: f64,
    pub xyt: bool,
}

pub fn halved_dim(dim: usize) -> usize {
    dim.div_ceil(2)
}

fn project(enc: &KindEncoder, values: ArrayView2<f64>, locations: ArrayView2<f64>, xyt: bool) -> Result<Array2<f64>, EncodingError> {
    let p = enc.pca.apply(values)?;
    Ok(if xyt {
        concatenate(Axis(1), &[p.view(), locations]).expect("same rows")
    } else {
        p
    })
}

/// Fits a halving PCA and a GMM per kind on descriptors pooled across `sets`.
pub fn train_encoder(sets: &[DescriptorSet], cfg: &EncoderConfig, seed: u64) -> Result<FisherEncoder, EncodingError> {
    let first = sets
        .first()
        .ok_or_else(|| EncodingError::Invalid("no descriptor sets".into()))?;
    let mut kinds = BTreeMap::new();
    for (ki, (&kind, proto)) in first.kinds.iter().enumerate() {
        let mut values = Vec::new();
        let mut locs = Vec::new();
        for set in sets {
            set.validate()?;
            let m = set.kinds.get(&kind).ok_or(EncodingError::UnknownKind(kind))?;
            if m.ncols() != proto.ncols() {
                return Err(EncodingError::DimensionMismatch {
                    expected: proto.ncols(),
                    got: m.ncols(),
                });
            }
            values.push(m.view());
            locs.push(set.locations.view());
        }
        let values = concatenate(Axis(0), &values).expect("checked widths");
        let locs = concatenate(Axis(0), &locs).expect("three columns");
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(ki as u64 * 7919));
        let (values, locs) = if values.nrows() > cfg.sample_count {
            let mut idx = sample(&mut rng, values.nrows(), cfg.sample_count).into_vec();
            idx.sort_unstable();
            (values.select(Axis(0), &idx), locs.select(Axis(0), &idx))
        } else {
            (values, locs)
        };
        let pca = pca_train(values.view(), halved_dim(proto.ncols()), false)?;
        let mut enc = KindEncoder {
            pca,
            gmm: GmmModel {
                weights: Array1::zeros(0),
                means: Array2::zeros((0, 0)),
                variances: Array2::zeros((0, 0)),
            },
        };
        let projected = project(&enc, values.view(), locs.view(), cfg.xyt)?;
        enc.gmm = gmm_train(projected.view(), cfg.k, rng.random(), &cfg.gmm)?.model;
        kinds.insert(kind, enc);
    }
    Ok(FisherEncoder {
        kinds,
        power_alpha: cfg.power_alpha,
        xyt: cfg.xyt,
    })
}

impl FisherEncoder {
    /// `2 * D * K` for each kind, in canonical kind order.
    pub fn block_lengths(&self) -> Vec<(DescriptorKind, usize)> {
        self.kinds
            .iter()
            .map(|(&k, e)| (k, 2 * e.gmm.dim() * e.gmm.k()))
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.block_lengths().iter().map(|b| b.1).sum()
    }

    /// Per kind: PCA, Fisher vector, power and l2 normalization; blocks
    /// concatenated in canonical kind order. A kind absent from `set` encodes
    /// as an empty block.
    pub fn encode(&self, set: &DescriptorSet) -> Result<Array1<f64>, EncodingError> {
        set.validate()?;
        if let Some(k) = set.kinds.keys().find(|k| !self.kinds.contains_key(k)) {
            return Err(EncodingError::UnknownKind(*k));
        }
        let mut out = Array1::zeros(self.output_dim());
        let mut at = 0;
        for (kind, enc) in &self.kinds {
            let len = 2 * enc.gmm.dim() * enc.gmm.k();
            if let Some(m) = set.kinds.get(kind) {
                if m.nrows() > 0 {
                    let p = project(enc, m.view(), set.locations.view(), self.xyt)?;
                    let fv = fisher_vector(p.view(), &enc.gmm)?;
                    out.slice_mut(s![at..at + len])
                        .assign(&power_l2_normalize(&fv, self.power_alpha));
                }
            }
            at += len;
        }
        Ok(out)
    }

    /// One representation row per set, in input order.
    pub fn encode_all(&self, sets: &[DescriptorSet]) -> Result<Array2<f64>, EncodingError> {
        let rows: Vec<Array1<f64>> = sets.par_iter().map(|s| self.encode(s)).collect::<Result<_, _>>()?;
        let mut out = Array2::zeros((rows.len(), self.output_dim()));
        for (r, mut o) in rows.iter().zip(out.rows_mut()) {
            o.assign(r);
        }
        Ok(out)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert_scalar("power_alpha", self.power_alpha).unwrap();
        c.insert_scalar("xyt", if self.xyt { 1.0 } else { 0.0 }).unwrap();
        let codes: Vec<f64> = self
            .kinds
            .keys()
            .map(|k| DescriptorKind::ALL.iter().position(|a| a == k).unwrap() as f64)
            .collect();
        c.insert("kinds", Tensor::from_slice(&codes)).unwrap();
        for (k, e) in &self.kinds {
            c.merge_prefixed(&format!("{k}.pca."), e.pca.to_container()).unwrap();
            c.merge_prefixed(&format!("{k}.gmm."), e.gmm.to_container()).unwrap();
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, EncodingError> {
        let mut kinds = BTreeMap::new();
        for code in c.f64_vec("kinds")? {
            let kind = *DescriptorKind::ALL
                .get(code as usize)
                .filter(|_| code >= 0.0 && code.fract() == 0.0)
                .ok_or_else(|| EncodingError::Invalid(format!("bad kind code {code}")))?;
            let enc = KindEncoder {
                pca: PcaModel::from_container(&c.sub(&format!("{kind}.pca.")))?,
                gmm: GmmModel::from_container(&c.sub(&format!("{kind}.gmm.")))?,
            };
            kinds.insert(kind, enc);
        }
        Ok(FisherEncoder {
            kinds,
            power_alpha: c.scalar("power_alpha")?,
            xyt: c.scalar("xyt")? != 0.0,
        })
    }
}
