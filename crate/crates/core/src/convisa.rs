//! Two-layer stacked convolutional ISA over 32x32x15 trajectory volumes.
//!
//! Layer 1 is PCA whitening followed by ISA, trained on sub-volumes the size
//! of the receptive field. It is then applied convolutionally across the
//! volume, and the concatenated responses feed a second PCA and ISA. The
//! descriptor stacks the leading second-layer PCA coordinates on top of the
//! second-layer ISA activations.

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::container::{ContainerError, Tensor, TensorContainer};
use crate::isa::{train_isa, IsaError, IsaLayer, TrainOpts};
use crate::pca::{pca_train, PcaError, PcaModel};
use crate::trajectory::{FlowVolume, PixelVolume, PATCH, TRAJ_LEN};

const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ConvIsaError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("dimension chain violated: {0}")]
    Chain(String),
    #[error("{stream} model cannot describe a {got} volume")]
    StreamMismatch { stream: Stream, got: Stream },
    #[error("volume has {got} values, expected {expected}")]
    VolumeSize { expected: usize, got: usize },
    #[error("need more than {needed} training volumes, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("corrupt model: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Pixel,
    Flow,
}

impl Stream {
    pub fn channels(self) -> usize {
        match self {
            Stream::Pixel => 1,
            Stream::Flow => 2,
        }
    }
    fn code(self) -> f64 {
        match self {
            Stream::Pixel => 0.0,
            Stream::Flow => 1.0,
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stream::Pixel => "pixel",
            Stream::Flow => "flow",
        })
    }
}

/// A 32x32x15 volume with channel-last interleaving.
pub trait Volume: Sync {
    fn stream(&self) -> Stream;
    fn values(&self) -> &[f32];
}

impl Volume for PixelVolume {
    fn stream(&self) -> Stream {
        Stream::Pixel
    }
    fn values(&self) -> &[f32] {
        &self.data
    }
}

impl Volume for FlowVolume {
    fn stream(&self) -> Stream {
        Stream::Flow
    }
    fn values(&self) -> &[f32] {
        &self.data
    }
}

/// Receptive field and stride as (spatial pixels, temporal frames).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub rf: (usize, usize),
    pub stride: (usize, usize),
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            rf: (16, 5),
            stride: (16, 5),
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<(), ConvIsaError> {
        let (rs, rt) = self.rf;
        let (ss, st) = self.stride;
        if rs == 0 || rt == 0 || ss == 0 || st == 0 {
            return Err(ConvIsaError::Geometry(
                "receptive field and stride must be positive".into(),
            ));
        }
        if rs > PATCH || rt > TRAJ_LEN {
            return Err(ConvIsaError::Geometry(format!(
                "receptive field {rs}x{rs}x{rt} does not fit in the {PATCH}x{PATCH}x{TRAJ_LEN} volume"
            )));
        }
        Ok(())
    }

    /// Positions along one spatial axis and along time.
    pub fn positions_per_axis(&self) -> (usize, usize) {
        (
            (PATCH - self.rf.0) / self.stride.0 + 1,
            (TRAJ_LEN - self.rf.1) / self.stride.1 + 1,
        )
    }

    pub fn positions(&self) -> usize {
        let (ps, pt) = self.positions_per_axis();
        ps * ps * pt
    }

    /// Top-left-first corners `(x, y, t)`, x fastest.
    pub fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let (ps, pt) = self.positions_per_axis();
        let mut out = Vec::with_capacity(self.positions());
        for t in 0..pt {
            for y in 0..ps {
                for x in 0..ps {
                    out.push((x * self.stride.0, y * self.stride.0, t * self.stride.1));
                }
            }
        }
        out
    }

    pub fn input_dim(&self, stream: Stream) -> usize {
        self.rf.0 * self.rf.0 * self.rf.1 * stream.channels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvIsaConfig {
    pub geometry: Geometry,
    pub pca1_dim: usize,
    pub group1: usize,
    pub pca2_dim: usize,
    pub group2: usize,
    /// Leading layer-2 PCA coordinates stacked into the descriptor.
    pub stack_top: usize,
    pub isa: TrainOpts,
}

impl Default for ConvIsaConfig {
    fn default() -> Self {
        ConvIsaConfig {
            geometry: Geometry::default(),
            pca1_dim: 300,
            group1: 1,
            pca2_dim: 200,
            group2: 2,
            stack_top: 100,
            isa: TrainOpts::default(),
        }
    }
}

/// Every size in the two-layer pipeline for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimensionChain {
    pub n1: usize,
    pub d1: usize,
    pub positions: usize,
    pub n2: usize,
    pub d2: usize,
    pub output: usize,
}

impl ConvIsaConfig {
    /// Sets the descriptor dimension: the layer-2 PCA keeps `dim` components
    /// and half of them are stacked on top of the ISA outputs.
    pub fn with_output_dim(mut self, dim: usize) -> Self {
        self.pca2_dim = dim;
        self.stack_top = dim / 2;
        self
    }

    pub fn dimension_chain(&self, stream: Stream) -> Result<DimensionChain, ConvIsaError> {
        self.geometry.validate()?;
        let g = &self.geometry;
        let c = stream.channels();
        let n1 = g.input_dim(stream);
        let chain = |msg: String| Err(ConvIsaError::Chain(msg));
        if self.pca1_dim == 0 || self.pca1_dim > n1 {
            return chain(format!(
                "pca1_dim {} must be in 1..=n1 where n1 = rf_s^2 * rf_t * channels = {}^2 * {} * {} = {n1}",
                self.pca1_dim, g.rf.0, g.rf.1, c
            ));
        }
        if self.group1 == 0 || self.pca1_dim % self.group1 != 0 {
            return chain(format!(
                "d1 = pca1_dim / group1 requires group1 to divide pca1_dim ({} / {})",
                self.pca1_dim, self.group1
            ));
        }
        let d1 = self.pca1_dim / self.group1;
        let positions = g.positions();
        let n2 = positions * d1;
        if self.pca2_dim == 0 || self.pca2_dim > n2 {
            return chain(format!(
                "pca2_dim {} must be in 1..=n2 where n2 = positions * d1 = {positions} * {d1} = {n2}",
                self.pca2_dim
            ));
        }
        if self.group2 == 0 || self.pca2_dim % self.group2 != 0 {
            return chain(format!(
                "d2 = pca2_dim / group2 requires group2 to divide pca2_dim ({} / {})",
                self.pca2_dim, self.group2
            ));
        }
        if self.stack_top > self.pca2_dim {
            return chain(format!(
                "stack_top {} must be <= pca2_dim {}",
                self.stack_top, self.pca2_dim
            ));
        }
        let d2 = self.pca2_dim / self.group2;
        Ok(DimensionChain {
            n1,
            d1,
            positions,
            n2,
            d2,
            output: self.stack_top + d2,
        })
    }
}

fn check_volume<V: Volume + ?Sized>(v: &V, stream: Stream) -> Result<(), ConvIsaError> {
    if v.stream() != stream {
        return Err(ConvIsaError::StreamMismatch {
            stream,
            got: v.stream(),
        });
    }
    let expected = PATCH * PATCH * TRAJ_LEN * stream.channels();
    if v.values().len() != expected {
        return Err(ConvIsaError::VolumeSize {
            expected,
            got: v.values().len(),
        });
    }
    Ok(())
}

/// Flattens the sub-volume at `(x0, y0, t0)` as ((t * rf + y) * rf + x) * C + c.
fn sub_volume(values: &[f32], channels: usize, rf: (usize, usize), origin: (usize, usize, usize), out: &mut [f64]) {
    let (x0, y0, t0) = origin;
    let row = rf.0 * channels;
    let mut k = 0;
    for t in 0..rf.1 {
        for y in 0..rf.0 {
            let start = (((t0 + t) * PATCH + y0 + y) * PATCH + x0) * channels;
            for (o, &v) in out[k..k + row].iter_mut().zip(&values[start..start + row]) {
                *o = v as f64;
            }
            k += row;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedModel {
    pub stream: Stream,
    pub geometry: Geometry,
    pub stack_top: usize,
    pub pca1: PcaModel,
    pub isa1: IsaLayer,
    pub pca2: PcaModel,
    pub isa2: IsaLayer,
}

impl StackedModel {
    pub fn output_dim(&self) -> usize {
        self.stack_top + self.isa2.d()
    }

    pub fn layer1_dim(&self) -> usize {
        self.geometry.positions() * self.isa1.d()
    }

    fn layer1_chunk<V: Volume>(&self, vols: &[V]) -> Result<Array2<f64>, ConvIsaError> {
        let offsets = self.geometry.offsets();
        let p = offsets.len();
        let n1 = self.pca1.input_dim();
        let c = self.stream.channels();
        let mut subs = Array2::zeros((vols.len() * p, n1));
        for (i, v) in vols.iter().enumerate() {
            check_volume(v, self.stream)?;
            for (j, &o) in offsets.iter().enumerate() {
                let mut row = subs.row_mut(i * p + j);
                sub_volume(
                    v.values(),
                    c,
                    self.geometry.rf,
                    o,
                    row.as_slice_mut().expect("standard layout"),
                );
            }
        }
        let act = self.isa1.activate_batch(self.pca1.apply(subs.view())?.view())?;
        let d1 = act.ncols();
        Ok(act
            .into_shape_with_order((vols.len(), p * d1))
            .expect("contiguous activations"))
    }

    fn describe_chunk<V: Volume>(&self, vols: &[V]) -> Result<Array2<f64>, ConvIsaError> {
        let l1 = self.layer1_chunk(vols)?;
        let z = self.pca2.apply(l1.view())?;
        let act = self.isa2.activate_batch(z.view())?;
        Ok(concatenate(Axis(1), &[z.slice(s![.., ..self.stack_top]), act.view()]).expect("same rows"))
    }

    /// Layer-1 convolution responses, one row of P * d1 values per volume.
    pub fn convolve_layer1<V: Volume>(&self, vols: &[V]) -> Result<Array2<f64>, ConvIsaError> {
        par_rows(vols, self.layer1_dim(), |c| self.layer1_chunk(c))
    }

    /// Descriptors, one row per volume.
    pub fn apply<V: Volume>(&self, vols: &[V]) -> Result<Array2<f64>, ConvIsaError> {
        par_rows(vols, self.output_dim(), |c| self.describe_chunk(c))
    }

    pub fn apply_one<V: Volume>(&self, vol: &V) -> Result<Vec<f64>, ConvIsaError> {
        Ok(self.describe_chunk(std::slice::from_ref(vol))?.row(0).to_vec())
    }

    /// Layer-1 filters in input space: `W1 * diag(scales) * basis`, one row per unit.
    pub fn filters(&self) -> Array2<f64> {
        self.isa1.w().dot(&self.pca1.projection())
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let g = self.geometry;
        c.insert(
            "geometry",
            Tensor::from_slice(&[g.rf.0 as f64, g.rf.1 as f64, g.stride.0 as f64, g.stride.1 as f64]),
        )
        .unwrap();
        c.insert_scalar("stream", self.stream.code()).unwrap();
        c.insert_scalar("stack_top", self.stack_top as f64).unwrap();
        c.merge_prefixed("pca1.", self.pca1.to_container()).unwrap();
        c.merge_prefixed("isa1.", self.isa1.to_container()).unwrap();
        c.merge_prefixed("pca2.", self.pca2.to_container()).unwrap();
        c.merge_prefixed("isa2.", self.isa2.to_container()).unwrap();
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, ConvIsaError> {
        let g = c.f64_vec("geometry")?;
        if g.len() != 4 || g.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(ConvIsaError::Corrupt("geometry must hold four counts".into()));
        }
        let geometry = Geometry {
            rf: (g[0] as usize, g[1] as usize),
            stride: (g[2] as usize, g[3] as usize),
        };
        geometry.validate()?;
        let stream = match c.scalar("stream")? {
            0.0 => Stream::Pixel,
            1.0 => Stream::Flow,
            v => return Err(ConvIsaError::Corrupt(format!("unknown stream code {v}"))),
        };
        let m = StackedModel {
            stream,
            geometry,
            stack_top: c.usize_scalar("stack_top")?,
            pca1: PcaModel::from_container(&c.sub("pca1."))?,
            isa1: IsaLayer::from_container(&c.sub("isa1."))?,
            pca2: PcaModel::from_container(&c.sub("pca2."))?,
            isa2: IsaLayer::from_container(&c.sub("isa2."))?,
        };
        let consistent = m.pca1.input_dim() == geometry.input_dim(stream)
            && m.isa1.n() == m.pca1.output_dim()
            && m.pca2.input_dim() == m.layer1_dim()
            && m.isa2.n() == m.pca2.output_dim()
            && m.stack_top <= m.pca2.output_dim();
        if !consistent {
            return Err(ConvIsaError::Corrupt("layer sizes do not chain".into()));
        }
        Ok(m)
    }
}

fn par_rows<V, F>(vols: &[V], width: usize, f: F) -> Result<Array2<f64>, ConvIsaError>
where
    V: Volume,
    F: Fn(&[V]) -> Result<Array2<f64>, ConvIsaError> + Sync,
{
    if vols.is_empty() {
        return Ok(Array2::zeros((0, width)));
    }
    let parts: Vec<Array2<f64>> = vols.par_chunks(CHUNK).map(|c| f(c)).collect::<Result<_, _>>()?;
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("uniform width"))
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Trains both layers on one stream; deterministic given `seed`.
pub fn train_stacked<V: Volume>(vols: &[V], cfg: &ConvIsaConfig, seed: u64) -> Result<StackedModel, ConvIsaError> {
    let stream = vols
        .first()
        .map(|v| v.stream())
        .ok_or(ConvIsaError::InsufficientSamples { needed: 1, got: 0 })?;
    let chain = cfg.dimension_chain(stream)?;
    let needed = cfg.pca1_dim.max(cfg.pca2_dim);
    if vols.len() <= needed {
        return Err(ConvIsaError::InsufficientSamples {
            needed,
            got: vols.len(),
        });
    }
    for v in vols {
        check_volume(v, stream)?;
    }
    let g = cfg.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((vols.len(), chain.n1));
    for (v, mut row) in vols.iter().zip(samples.rows_mut()) {
        let origin = (
            rng.random_range(0..=PATCH - g.rf.0),
            rng.random_range(0..=PATCH - g.rf.0),
            rng.random_range(0..=TRAJ_LEN - g.rf.1),
        );
        sub_volume(v.values(), stream.channels(), g.rf, origin, row.as_slice_mut().unwrap());
    }
    let pca1 = pca_train(samples.view(), cfg.pca1_dim, true)?;
    let isa1_opts = TrainOpts {
        seed: derive_seed(seed, 1),
        ..cfg.isa
    };
    let isa1 = train_isa(pca1.apply(samples.view())?.view(), cfg.group1, &isa1_opts)?.layer;
    drop(samples);

    let partial = StackedModel {
        stream,
        geometry: g,
        stack_top: cfg.stack_top,
        pca2: pca1.clone(),
        isa2: isa1.clone(),
        pca1,
        isa1,
    };
    let l1 = partial.convolve_layer1(vols)?;
    let pca2 = pca_train(l1.view(), cfg.pca2_dim, true)?;
    let isa2_opts = TrainOpts {
        seed: derive_seed(seed, 2),
        ..cfg.isa
    };
    let isa2 = train_isa(pca2.apply(l1.view())?.view(), cfg.group2, &isa2_opts)?.layer;
    Ok(StackedModel {
        pca2,
        isa2,
        ..partial
    })
}

/// Independent appearance (LOP) and motion (LOF) models with shared geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamModel {
    pub pixel: StackedModel,
    pub flow: StackedModel,
}

pub fn train_two_stream(
    pixel: &[PixelVolume],
    flow: &[FlowVolume],
    cfg: &ConvIsaConfig,
    seed: u64,
) -> Result<TwoStreamModel, ConvIsaError> {
    Ok(TwoStreamModel {
        pixel: train_stacked(pixel, cfg, derive_seed(seed, 10))?,
        flow: train_stacked(flow, cfg, derive_seed(seed, 11))?,
    })
}

impl TwoStreamModel {
    pub fn lop(&self, vols: &[PixelVolume]) -> Result<Array2<f64>, ConvIsaError> {
        self.pixel.apply(vols)
    }
    pub fn lof(&self, vols: &[FlowVolume]) -> Result<Array2<f64>, ConvIsaError> {
        self.flow.apply(vols)
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.merge_prefixed("pixel.", self.pixel.to_container()).unwrap();
        c.merge_prefixed("flow.", self.flow.to_container()).unwrap();
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, ConvIsaError> {
        let m = TwoStreamModel {
            pixel: StackedModel::from_container(&c.sub("pixel."))?,
            flow: StackedModel::from_container(&c.sub("flow."))?,
        };
        if m.pixel.stream != Stream::Pixel || m.flow.stream != Stream::Flow {
            return Err(ConvIsaError::Corrupt("stream slots swapped".into()));
        }
        if m.pixel.geometry != m.flow.geometry {
            return Err(ConvIsaError::Corrupt("streams disagree on geometry".into()));
        }
        Ok(m)
    }
}
