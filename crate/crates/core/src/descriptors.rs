//! HOG, HOF and MBH histograms over the 2x2x3 grid of a trajectory-aligned
//! volume, plus RootSIFT and xyt location extension.

use std::f64::consts::PI;

use crate::trajectory::{FlowVolume, PixelVolume, PATCH, TRAJ_LEN};

/// Cells along x and y.
pub const GRID_XY: usize = 2;
/// Cells along t.
pub const GRID_T: usize = 3;
pub const CELLS: usize = GRID_XY * GRID_XY * GRID_T;
pub const ORIENT_BINS: usize = 8;
pub const HOF_BINS: usize = ORIENT_BINS + 1;

const CELL_XY: usize = PATCH / GRID_XY;
const CELL_T: usize = TRAJ_LEN / GRID_T;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DescriptorKind {
    TrajShape,
    Hog,
    Hof,
    Mbh,
    Lop,
    Lof,
}

impl DescriptorKind {
    /// Canonical order used when concatenating per-kind blocks.
    pub const ALL: [DescriptorKind; 6] = [
        DescriptorKind::TrajShape,
        DescriptorKind::Hog,
        DescriptorKind::Hof,
        DescriptorKind::Mbh,
        DescriptorKind::Lop,
        DescriptorKind::Lof,
    ];

    pub fn dim(self) -> usize {
        match self {
            DescriptorKind::TrajShape => 2 * (TRAJ_LEN - 1),
            DescriptorKind::Hog => CELLS * ORIENT_BINS,
            DescriptorKind::Hof => CELLS * HOF_BINS,
            DescriptorKind::Mbh => 2 * CELLS * ORIENT_BINS,
            DescriptorKind::Lop | DescriptorKind::Lof => 200,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DescriptorKind::TrajShape => "traj_shape",
            DescriptorKind::Hog => "hog",
            DescriptorKind::Hof => "hof",
            DescriptorKind::Mbh => "mbh",
            DescriptorKind::Lop => "lop",
            DescriptorKind::Lof => "lof",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        DescriptorKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Histogram kinds that receive RootSIFT.
    pub fn is_histogram(self) -> bool {
        matches!(
            self,
            DescriptorKind::Hog | DescriptorKind::Hof | DescriptorKind::Mbh
        )
    }
}

impl std::fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub values: Vec<f32>,
    /// Mean trajectory point (x, y, t) in level-0 coordinates.
    pub location: [f32; 3],
}

#[inline]
fn cell_index(x: usize, y: usize, t: usize) -> usize {
    ((t / CELL_T) * GRID_XY + y / CELL_XY) * GRID_XY + x / CELL_XY
}

/// Split `angle` (radians, any range) linearly between its two nearest bin
/// centers at multiples of 45 degrees.
#[inline]
fn soft_bin(angle: f64) -> (usize, usize, f64) {
    let width = 2.0 * PI / ORIENT_BINS as f64;
    let mut pos = angle.rem_euclid(2.0 * PI) / width;
    if pos >= ORIENT_BINS as f64 {
        pos = 0.0;
    }
    let b0 = pos.floor() as usize % ORIENT_BINS;
    let frac = pos - pos.floor();
    (b0, (b0 + 1) % ORIENT_BINS, frac)
}

/// Magnitude-weighted 8-bin orientation histograms per cell from gradient planes
/// laid out like a pixel volume.
pub(crate) fn histogram_from_gradients(gx: &[f32], gy: &[f32]) -> Vec<f64> {
    let mut hist = vec![0.0f64; CELLS * ORIENT_BINS];
    for t in 0..TRAJ_LEN {
        for y in 0..PATCH {
            for x in 0..PATCH {
                let i = (t * PATCH + y) * PATCH + x;
                let (dx, dy) = (gx[i] as f64, gy[i] as f64);
                let mag = (dx * dx + dy * dy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let (b0, b1, frac) = soft_bin(dy.atan2(dx));
                let base = cell_index(x, y, t) * ORIENT_BINS;
                hist[base + b0] += (1.0 - frac) * mag;
                hist[base + b1] += frac * mag;
            }
        }
    }
    hist
}

/// Central-difference spatial gradients of a 32x32x15 plane with clamped borders.
fn spatial_gradients(plane: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; plane.len()];
    let mut gy = vec![0.0f32; plane.len()];
    let at = |x: usize, y: usize, t: usize| plane[(t * PATCH + y) * PATCH + x];
    for t in 0..TRAJ_LEN {
        for y in 0..PATCH {
            for x in 0..PATCH {
                let i = (t * PATCH + y) * PATCH + x;
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(PATCH - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(PATCH - 1));
                gx[i] = 0.5 * (at(xr, y, t) - at(xl, y, t));
                gy[i] = 0.5 * (at(x, yd, t) - at(x, yu, t));
            }
        }
    }
    (gx, gy)
}

fn l2_normalized(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x / n) as f32).collect()
}

/// Histogram of oriented gradients, 96 values, whole-vector l2 normalized.
pub fn hog(vol: &PixelVolume) -> Vec<f32> {
    let (gx, gy) = spatial_gradients(&vol.data);
    l2_normalized(&histogram_from_gradients(&gx, &gy))
}

/// Histogram of optical flow: 8 orientation bins plus a zero-motion bin per cell.
pub fn hof(vol: &FlowVolume, zero_thresh: f32) -> Vec<f32> {
    let mut hist = vec![0.0f64; CELLS * HOF_BINS];
    for t in 0..TRAJ_LEN {
        for y in 0..PATCH {
            for x in 0..PATCH {
                let (u, v) = vol.at(x, y, t);
                let (u, v) = (u as f64, v as f64);
                let mag = (u * u + v * v).sqrt();
                let base = cell_index(x, y, t) * HOF_BINS;
                if mag < zero_thresh as f64 {
                    hist[base + ORIENT_BINS] += 1.0;
                } else {
                    let (b0, b1, frac) = soft_bin(v.atan2(u));
                    hist[base + b0] += (1.0 - frac) * mag;
                    hist[base + b1] += frac * mag;
                }
            }
        }
    }
    l2_normalized(&hist)
}

/// Motion boundary histograms: HOG over each flow component, each half
/// normalized on its own, concatenated as [MBHx; MBHy].
pub fn mbh(vol: &FlowVolume) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * CELLS * ORIENT_BINS);
    for c in 0..2 {
        let plane = vol.channel(c);
        let (gx, gy) = spatial_gradients(&plane);
        out.extend(l2_normalized(&histogram_from_gradients(&gx, &gy)));
    }
    out
}

/// l1 normalization followed by an element-wise (signed) square root.
pub fn root_sift(values: &[f32]) -> Vec<f32> {
    let l1: f64 = values.iter().map(|v| v.abs() as f64).sum();
    if l1 == 0.0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v.abs() as f64 / l1).sqrt() as f32).copysign(v))
        .collect()
}

/// Append `(x/W, y/H, t/T)` of the descriptor's location.
pub fn xyt_extend(d: &Descriptor, width: u32, height: u32, frames: u32) -> Vec<f32> {
    let mut v = d.values.clone();
    v.push((d.location[0] / width as f32).clamp(0.0, 1.0));
    v.push((d.location[1] / height as f32).clamp(0.0, 1.0));
    v.push((d.location[2] / frames as f32).clamp(0.0, 1.0));
    v
}
