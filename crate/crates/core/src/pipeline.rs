//! Per-video extraction and dataset-level orchestration.
//!
//! Volumes are never held for a whole dataset: each video is tracked once per
//! frame-skip level and its volumes are rebuilt in small batches when
//! descriptors are computed.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::convisa::{StackedModel, Stream, TwoStreamModel};
use crate::descriptors::{hof, hog, mbh, root_sift, DescriptorKind};
use crate::encoding::{mifs_min_frames, mifs_stack, DescriptorSet, MifsReport};
use crate::flow::{compute_flow_sequence, matches_from_flow, rectify_flow, FlowSequence, RansacParams};
use crate::trajectory::{
    extract_flow_volume, extract_trajectories, extract_volume, trajectory_shape, FlowVolume, PixelVolume, Trajectory,
    TRAJ_LEN,
};
use crate::video::{build_scale_pyramid, GrayVideo, Image, ScalePyramid};
use crate::Error;

const BATCH: usize = 64;

/// Trajectories of one (possibly frame-subsampled) video with what is needed
/// to rebuild their volumes.
#[derive(Debug, Clone)]
pub struct LevelTracks {
    pub pyramid: ScalePyramid,
    pub flows: Vec<FlowSequence>,
    pub trajectories: Vec<Trajectory>,
}

impl LevelTracks {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn pixel_volume(&self, i: usize) -> PixelVolume {
        let t = &self.trajectories[i];
        extract_volume(&self.pyramid.levels[t.scale_index], t)
    }

    pub fn flow_volume(&self, i: usize) -> FlowVolume {
        let t = &self.trajectories[i];
        extract_flow_volume(&self.flows[t.scale_index], t)
    }

    /// Mean track position in level-0 coordinates and mid-track frame, each
    /// divided by the video extent.
    pub fn locations(&self) -> Array2<f64> {
        let v = &self.pyramid.levels[0];
        let (w, h, f) = (v.width() as f64, v.height() as f64, v.frames() as f64);
        let mut out = Array2::zeros((self.len(), 3));
        for (t, mut row) in self.trajectories.iter().zip(out.rows_mut()) {
            let s = self.pyramid.level_scale(t.scale_index) as f64;
            let p = t.mean_point();
            row[0] = (p.x as f64 / s / w).clamp(0.0, 1.0);
            row[1] = (p.y as f64 / s / h).clamp(0.0, 1.0);
            row[2] = ((t.start_frame + TRAJ_LEN / 2) as f64 / f).clamp(0.0, 1.0);
        }
        out
    }
}

/// Pyramid, per-level flow and dense trajectories of `video`.
pub fn track(video: &GrayVideo, cfg: &PipelineConfig) -> Result<LevelTracks, Error> {
    let t = &cfg.trajectory;
    let pyramid = build_scale_pyramid(video, t.scales, t.scale_factor);
    if (video.frames() as usize) < TRAJ_LEN + 1 {
        return Ok(LevelTracks {
            pyramid,
            flows: Vec::new(),
            trajectories: Vec::new(),
        });
    }
    let params = cfg.flow_params();
    let mut flows = Vec::with_capacity(pyramid.levels.len());
    for level in &pyramid.levels {
        let mut seq = compute_flow_sequence(level, &params)?;
        if cfg.flow.rectify {
            let ransac = RansacParams {
                seed: cfg.seed,
                ..RansacParams::default()
            };
            for field in &mut seq.fields {
                let matches = matches_from_flow(field, t.step);
                if let Ok(r) = rectify_flow(field, &matches, &ransac) {
                    *field = r.flow;
                }
            }
        }
        flows.push(seq);
    }
    let trajectories = extract_trajectories(&pyramid, &flows, &cfg.track_config());
    Ok(LevelTracks {
        pyramid,
        flows,
        trajectories,
    })
}

fn needs_pixels(kinds: &[DescriptorKind]) -> bool {
    kinds.iter().any(|k| matches!(k, DescriptorKind::Hog | DescriptorKind::Lop))
}

fn needs_flow(kinds: &[DescriptorKind]) -> bool {
    kinds
        .iter()
        .any(|k| matches!(k, DescriptorKind::Hof | DescriptorKind::Mbh | DescriptorKind::Lof))
}

fn rows(vals: Vec<Vec<f32>>, dim: usize) -> Array2<f64> {
    let n = vals.len();
    let flat: Vec<f64> = vals.into_iter().flatten().map(f64::from).collect();
    Array2::from_shape_vec((n, dim), flat).expect("descriptor dimension")
}

/// Descriptors of the requested kinds for every trajectory of `level`.
pub fn level_descriptors(
    level: &LevelTracks,
    kinds: &[DescriptorKind],
    model: Option<&TwoStreamModel>,
    cfg: &PipelineConfig,
) -> Result<DescriptorSet, Error> {
    let learned = kinds
        .iter()
        .any(|k| matches!(k, DescriptorKind::Lop | DescriptorKind::Lof));
    if learned && model.is_none() {
        return Err(Error::Config("lop/lof requested without a ConvISA model".into()));
    }
    let dims: Vec<(DescriptorKind, usize)> = kinds
        .iter()
        .map(|&k| {
            let d = match (k, model) {
                (DescriptorKind::Lop, Some(m)) => m.pixel.output_dim(),
                (DescriptorKind::Lof, Some(m)) => m.flow.output_dim(),
                _ => k.dim(),
            };
            (k, d)
        })
        .collect();
    let mut set = DescriptorSet::empty(&dims);
    let post = |v: Vec<f32>, k: DescriptorKind| {
        if cfg.trajectory.root_sift && k.is_histogram() {
            root_sift(&v)
        } else {
            v
        }
    };
    let idx: Vec<usize> = (0..level.len()).collect();
    for chunk in idx.chunks(BATCH) {
        let pix: Vec<PixelVolume> = if needs_pixels(kinds) {
            chunk.par_iter().map(|&i| level.pixel_volume(i)).collect()
        } else {
            Vec::new()
        };
        let flo: Vec<FlowVolume> = if needs_flow(kinds) {
            chunk.par_iter().map(|&i| level.flow_volume(i)).collect()
        } else {
            Vec::new()
        };
        let mut part = DescriptorSet::empty(&dims);
        part.locations = Array2::zeros((chunk.len(), 3));
        for &(k, d) in &dims {
            let m = match k {
                DescriptorKind::TrajShape => rows(
                    chunk
                        .iter()
                        .map(|&i| trajectory_shape(&level.trajectories[i]))
                        .collect(),
                    d,
                ),
                DescriptorKind::Hog => rows(pix.par_iter().map(|v| post(hog(v), k)).collect(), d),
                DescriptorKind::Hof => rows(
                    flo.par_iter()
                        .map(|v| post(hof(v, cfg.trajectory.hof_zero_thresh), k))
                        .collect(),
                    d,
                ),
                DescriptorKind::Mbh => rows(flo.par_iter().map(|v| post(mbh(v), k)).collect(), d),
                DescriptorKind::Lop => model.expect("checked").lop(&pix)?,
                DescriptorKind::Lof => model.expect("checked").lof(&flo)?,
            };
            part.kinds.insert(k, m);
        }
        set.append(part)?;
    }
    set.locations = level.locations();
    Ok(set)
}

/// Descriptors of `video` pooled over the configured frame-skip levels.
pub fn describe_video(
    video: &GrayVideo,
    kinds: &[DescriptorKind],
    model: Option<&TwoStreamModel>,
    cfg: &PipelineConfig,
) -> Result<(DescriptorSet, MifsReport), Error> {
    let (set, report) = mifs_stack(video, &cfg.encoding.mifs_skips, |v| {
        let level = track(v, cfg)?;
        level_descriptors(&level, kinds, model, cfg)
    })?;
    if report.used.is_empty() {
        let dims: Vec<_> = kinds
            .iter()
            .map(|&k| match (k, model) {
                (DescriptorKind::Lop, Some(m)) => (k, m.pixel.output_dim()),
                (DescriptorKind::Lof, Some(m)) => (k, m.flow.output_dim()),
                _ => (k, k.dim()),
            })
            .collect();
        return Ok((DescriptorSet::empty(&dims), report));
    }
    Ok((set, report))
}

/// Descriptors of `n` videos produced by `load`, in index order.
pub fn describe_all<F>(
    n: usize,
    load: F,
    kinds: &[DescriptorKind],
    model: Option<&TwoStreamModel>,
    cfg: &PipelineConfig,
) -> Result<Vec<DescriptorSet>, Error>
where
    F: Fn(usize) -> Result<GrayVideo, Error> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| Ok(describe_video(&load(i)?, kinds, model, cfg)?.0))
        .collect()
}

fn video_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0xD129_0C4B_7A8F_3E57) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Volume pairs drawn uniformly from the unskipped trajectories of each video,
/// at most `ceil(sample_count / n)` per video.
pub fn sample_training_volumes<F>(
    n: usize,
    load: F,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<PixelVolume>, Vec<FlowVolume>), Error>
where
    F: Fn(usize) -> Result<GrayVideo, Error> + Sync,
{
    let total = cfg.convisa.sample_count;
    let quota = total.div_ceil(n.max(1));
    let per_video: Vec<(Vec<PixelVolume>, Vec<FlowVolume>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let level = track(&load(i)?, cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(video_seed(seed, i));
            let mut pick = sample(&mut rng, level.len(), quota.min(level.len())).into_vec();
            pick.sort_unstable();
            Ok((
                pick.iter().map(|&j| level.pixel_volume(j)).collect(),
                pick.iter().map(|&j| level.flow_volume(j)).collect(),
            ))
        })
        .collect::<Result<_, Error>>()?;
    let mut pixel = Vec::new();
    let mut flow = Vec::new();
    for (p, f) in per_video {
        pixel.extend(p);
        flow.extend(f);
    }
    pixel.truncate(total);
    flow.truncate(total);
    Ok((pixel, flow))
}

pub fn train_convisa<F>(n: usize, load: F, cfg: &PipelineConfig) -> Result<TwoStreamModel, Error>
where
    F: Fn(usize) -> Result<GrayVideo, Error> + Sync,
{
    let (pixel, flow) = sample_training_volumes(n, load, cfg, cfg.seed)?;
    Ok(crate::convisa::train_two_stream(
        &pixel,
        &flow,
        &cfg.convisa_config(),
        cfg.seed,
    )?)
}

/// Frames a video needs for every configured skip level to contribute.
pub fn min_frames(cfg: &PipelineConfig) -> usize {
    cfg.encoding
        .mifs_skips
        .iter()
        .map(|&s| mifs_min_frames(s))
        .max()
        .unwrap_or(TRAJ_LEN + 1)
}

/// Layer-1 filters of one stream as an image grid. Each filter occupies one
/// row of `rf_t * channels` spatial tiles (channel-major, then time), min-max
/// scaled on its own; tiles are separated by a one-pixel white border.
pub fn filter_grid(model: &StackedModel) -> Image {
    let f = model.filters();
    let (rf, rf_t) = model.geometry.rf;
    let ch = model.stream.channels();
    let count = f.nrows();
    let cols = (count as f64).sqrt().ceil() as usize;
    let grid_rows = count.div_ceil(cols);
    let tile_w = rf_t * ch * (rf + 1);
    let tile_h = rf + 1;
    let (w, h) = (cols * tile_w + 1, grid_rows * tile_h + 1);
    let mut data = vec![1.0f32; w * h];
    for (fi, row) in f.rows().into_iter().enumerate() {
        let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (ox, oy) = ((fi % cols) * tile_w + 1, (fi / cols) * tile_h + 1);
        for c in 0..ch {
            for t in 0..rf_t {
                let tx = ox + (c * rf_t + t) * (rf + 1);
                for y in 0..rf {
                    for x in 0..rf {
                        let v = row[((t * rf + y) * rf + x) * ch + c];
                        data[(oy + y) * w + tx + x] = ((v - lo) / span) as f32;
                    }
                }
            }
        }
    }
    Image::new(w, h, data)
}

/// Grids for both streams, named after the stream.
pub fn filter_grids(model: &TwoStreamModel) -> Vec<(Stream, Image)> {
    vec![
        (Stream::Pixel, filter_grid(&model.pixel)),
        (Stream::Flow, filter_grid(&model.flow)),
    ]
}
