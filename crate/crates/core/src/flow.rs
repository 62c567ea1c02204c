//! Dense optical flow by polynomial expansion (Farnebäck), flow dumps, and
//! homography-based camera-motion rectification.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, Inverse, UPLO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::video::{bilinear, GrayVideo, Image};

const FLO_MAGIC: &[u8; 4] = b"FLO1";

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("frames must be at least 16x16, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("video has {0} frames; flow needs at least 2")]
    TooFewFrames(u32),
    #[error("need at least 4 correspondences, got {0}")]
    TooFewMatches(usize),
    #[error("correspondences are degenerate (collinear)")]
    Degenerate,
    #[error("corrupt flow file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-pixel displacement from one frame to the next, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        FlowField {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        (
            bilinear(&self.u, self.width, self.height, x, y),
            bilinear(&self.v, self.width, self.height, x, y),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn write_flo(&self, path: &Path) -> Result<(), FlowError> {
        let mut out = Vec::with_capacity(12 + 8 * self.u.len());
        out.extend_from_slice(FLO_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_flo(path: &Path) -> Result<FlowField, FlowError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
            return Err(FlowError::Corrupt("bad magic".into()));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 8 * w * h {
            return Err(FlowError::Corrupt(format!(
                "payload of {} bytes does not match {w}x{h}",
                bytes.len() - 12
            )));
        }
        let mut f = FlowField::zeros(w, h);
        for (i, chunk) in bytes[12..].chunks_exact(8).enumerate() {
            f.u[i] = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
            f.v[i] = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        }
        Ok(f)
    }
}

/// Flow for each consecutive frame pair: `fields[t]` maps frame `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    pub fields: Vec<FlowField>,
}

impl FlowSequence {
    pub fn len(&self) -> usize {
        self.fields.len()
    }
    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// Number of dyadic pyramid levels.
    pub levels: usize,
    /// Half-width of the polynomial-expansion neighborhood.
    pub poly_radius: usize,
    /// Std-dev of the Gaussian applicability.
    pub poly_sigma: f64,
    /// Half-width of the Gaussian window averaging the displacement equations.
    pub window_radius: usize,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            levels: 3,
            poly_radius: 7,
            poly_sigma: 1.5,
            window_radius: 7,
            iterations: 3,
        }
    }
}

/// Quadratic expansion f(p) ~ c + b.p + p'Ap around every pixel, stored per
/// pixel as [bx, by, axx, ayy, axy] (the constant is unused downstream).
struct PolyExpansion {
    width: usize,
    height: usize,
    coeffs: Vec<[f64; 5]>,
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    (-(radius as isize)..=radius as isize)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

fn poly_expand(img: &[f32], width: usize, height: usize, radius: usize, sigma: f64) -> PolyExpansion {
    let g = gaussian_kernel(radius, sigma);
    let r = radius as isize;

    // Gram matrix of the basis {1, x, y, x^2, y^2, xy} under the applicability.
    let mut gram = Array2::<f64>::zeros((6, 6));
    for j in -r..=r {
        for i in -r..=r {
            let a = g[(i + r) as usize] * g[(j + r) as usize];
            let (x, y) = (i as f64, j as f64);
            let b = [1.0, x, y, x * x, y * y, x * y];
            for k in 0..6 {
                for l in 0..6 {
                    gram[[k, l]] += a * b[k] * b[l];
                }
            }
        }
    }
    let ginv = gram.inv().expect("polynomial basis Gram matrix is nonsingular");

    // row pass: moments 0..2 along x with replicate borders
    let n = width * height;
    let mut r0 = vec![0.0f64; n];
    let mut r1 = vec![0.0f64; n];
    let mut r2 = vec![0.0f64; n];
    for y in 0..height {
        let row = &img[y * width..(y + 1) * width];
        for x in 0..width {
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for i in -r..=r {
                let xi = (x as isize + i).clamp(0, width as isize - 1) as usize;
                let f = row[xi] as f64 * g[(i + r) as usize];
                let fi = i as f64;
                s0 += f;
                s1 += f * fi;
                s2 += f * fi * fi;
            }
            r0[y * width + x] = s0;
            r1[y * width + x] = s1;
            r2[y * width + x] = s2;
        }
    }

    let mut coeffs = vec![[0.0; 5]; n];
    for y in 0..height {
        for x in 0..width {
            let mut m = [0.0f64; 6];
            for j in -r..=r {
                let yj = (y as isize + j).clamp(0, height as isize - 1) as usize;
                let idx = yj * width + x;
                let gj = g[(j + r) as usize];
                let fj = j as f64;
                m[0] += gj * r0[idx];
                m[1] += gj * r1[idx];
                m[2] += gj * fj * r0[idx];
                m[3] += gj * r2[idx];
                m[4] += gj * fj * fj * r0[idx];
                m[5] += gj * fj * r1[idx];
            }
            let mut c = [0.0f64; 6];
            for k in 0..6 {
                c[k] = (0..6).map(|l| ginv[[k, l]] * m[l]).sum();
            }
            coeffs[y * width + x] = [c[1], c[2], c[3], c[4], c[5]];
        }
    }
    PolyExpansion {
        width,
        height,
        coeffs,
    }
}

impl PolyExpansion {
    fn sample(&self, x: f64, y: f64) -> [f64; 5] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let c = |xx: usize, yy: usize| &self.coeffs[yy * self.width + xx];
        let mut out = [0.0; 5];
        for k in 0..5 {
            let top = c(x0, y0)[k] * (1.0 - fx) + c(x1, y0)[k] * fx;
            let bot = c(x0, y1)[k] * (1.0 - fx) + c(x1, y1)[k] * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

fn separable_blur(plane: &mut [f64], width: usize, height: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xi = (x as isize + k as isize - r).clamp(0, width as isize - 1) as usize;
                s += w * plane[y * width + xi];
            }
            tmp[y * width + x] = s / norm;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yi = (y as isize + k as isize - r).clamp(0, height as isize - 1) as usize;
                s += w * tmp[yi * width + x];
            }
            plane[y * width + x] = s / norm;
        }
    }
}

/// One round of displacement estimation given the current flow estimate.
fn update_flow(
    e1: &PolyExpansion,
    e2: &PolyExpansion,
    du: &mut [f64],
    dv: &mut [f64],
    window: &[f64],
) {
    let (w, h) = (e1.width, e1.height);
    let n = w * h;
    let mut planes = vec![vec![0.0f64; n]; 5];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (du[i], dv[i]);
            let c1 = &e1.coeffs[i];
            let c2 = e2.sample(x as f64 + dx, y as f64 + dy);
            let a11 = 0.5 * (c1[2] + c2[2]);
            let a22 = 0.5 * (c1[3] + c2[3]);
            let a12 = 0.25 * (c1[4] + c2[4]);
            let b1 = -0.5 * (c2[0] - c1[0]) + a11 * dx + a12 * dy;
            let b2 = -0.5 * (c2[1] - c1[1]) + a12 * dx + a22 * dy;
            planes[0][i] = a11 * a11 + a12 * a12;
            planes[1][i] = a12 * (a11 + a22);
            planes[2][i] = a12 * a12 + a22 * a22;
            planes[3][i] = a11 * b1 + a12 * b2;
            planes[4][i] = a12 * b1 + a22 * b2;
        }
    }
    for p in planes.iter_mut() {
        separable_blur(p, w, h, window);
    }
    for i in 0..n {
        let (g11, g12, g22, h1, h2) = (
            planes[0][i],
            planes[1][i],
            planes[2][i],
            planes[3][i],
            planes[4][i],
        );
        let scale = (g11 + g22).max(1e-300);
        let det = g11 * g22 - g12 * g12;
        // relative regularization: flat regions keep their prior estimate near zero
        let idet = 1.0 / (det + 1e-6 * scale * scale + 1e-18);
        du[i] = (g22 * h1 - g12 * h2) * idet;
        dv[i] = (g11 * h2 - g12 * h1) * idet;
    }
}

fn downsample_half(img: &[f32], width: usize, height: usize) -> (Vec<f32>, usize, usize) {
    let mut blurred: Vec<f64> = img.iter().map(|&x| x as f64).collect();
    separable_blur(&mut blurred, width, height, &gaussian_kernel(2, 1.0));
    let dw = width.div_ceil(2);
    let dh = height.div_ceil(2);
    let mut out = Vec::with_capacity(dw * dh);
    let bf: Vec<f32> = blurred.iter().map(|&x| x as f32).collect();
    for y in 0..dh {
        for x in 0..dw {
            let sx = (x as f32 + 0.5) * width as f32 / dw as f32 - 0.5;
            let sy = (y as f32 + 0.5) * height as f32 / dh as f32 - 0.5;
            out.push(bilinear(&bf, width, height, sx, sy));
        }
    }
    (out, dw, dh)
}

fn upsample_flow(
    u: &[f64],
    v: &[f64],
    sw: usize,
    sh: usize,
    dw: usize,
    dh: usize,
) -> (Vec<f64>, Vec<f64>) {
    let su: Vec<f32> = u.iter().map(|&x| x as f32).collect();
    let sv: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    let rx = dw as f64 / sw as f64;
    let ry = dh as f64 / sh as f64;
    let mut ou = Vec::with_capacity(dw * dh);
    let mut ov = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) / rx - 0.5) as f32;
            let sy = ((y as f64 + 0.5) / ry - 0.5) as f32;
            ou.push(bilinear(&su, sw, sh, sx, sy) as f64 * rx);
            ov.push(bilinear(&sv, sw, sh, sx, sy) as f64 * ry);
        }
    }
    (ou, ov)
}

/// Dense flow from `a` to `b`: a point at `p` in `a` appears at `p + flow(p)` in `b`.
pub fn compute_flow(a: &Image, b: &Image, params: &FlowParams) -> Result<FlowField, FlowError> {
    if a.width != b.width || a.height != b.height {
        return Err(FlowError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    if a.width < 16 || a.height < 16 {
        return Err(FlowError::TooSmall(a.width, a.height));
    }

    let mut pyr_a = vec![(a.data.clone(), a.width, a.height)];
    let mut pyr_b = vec![b.data.clone()];
    for _ in 1..params.levels.max(1) {
        let (prev, w, h) = pyr_a.last().unwrap();
        if w.div_ceil(2) < 8 || h.div_ceil(2) < 8 {
            break;
        }
        let (da, dw, dh) = downsample_half(prev, *w, *h);
        let (db, _, _) = downsample_half(pyr_b.last().unwrap(), *w, *h);
        pyr_a.push((da, dw, dh));
        pyr_b.push(db);
    }

    let window = gaussian_kernel(params.window_radius, (params.window_radius as f64 / 2.0).max(0.5));
    let mut flow: Option<(Vec<f64>, Vec<f64>, usize, usize)> = None;
    for lvl in (0..pyr_a.len()).rev() {
        let (ia, w, h) = &pyr_a[lvl];
        let (w, h) = (*w, *h);
        let ib = &pyr_b[lvl];
        let (mut du, mut dv) = match flow.take() {
            None => (vec![0.0; w * h], vec![0.0; w * h]),
            Some((u, v, sw, sh)) => upsample_flow(&u, &v, sw, sh, w, h),
        };
        let e1 = poly_expand(ia, w, h, params.poly_radius, params.poly_sigma);
        let e2 = poly_expand(ib, w, h, params.poly_radius, params.poly_sigma);
        for _ in 0..params.iterations.max(1) {
            update_flow(&e1, &e2, &mut du, &mut dv, &window);
        }
        flow = Some((du, dv, w, h));
    }
    let (du, dv, w, h) = flow.unwrap();
    let mut out = FlowField {
        width: w,
        height: h,
        u: du.iter().map(|&x| x as f32).collect(),
        v: dv.iter().map(|&x| x as f32).collect(),
    };
    fill_border(&mut out, params.window_radius);
    Ok(out)
}

/// Pixels within `r` of the border take the value of the nearest interior pixel.
fn fill_border(flow: &mut FlowField, r: usize) {
    let (w, h) = (flow.width, flow.height);
    if w <= 2 * r || h <= 2 * r {
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let cx = x.clamp(r, w - 1 - r);
            let cy = y.clamp(r, h - 1 - r);
            if cx != x || cy != y {
                let (u, v) = flow.at(cx, cy);
                flow.u[y * w + x] = u;
                flow.v[y * w + x] = v;
            }
        }
    }
}

pub fn compute_flow_sequence(video: &GrayVideo, params: &FlowParams) -> Result<FlowSequence, FlowError> {
    if video.frames() < 2 {
        return Err(FlowError::TooFewFrames(video.frames()));
    }
    let fields = (0..video.frames() as usize - 1)
        .into_par_iter()
        .map(|t| compute_flow(&video.frame_image(t), &video.frame_image(t + 1), params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FlowSequence { fields })
}

/// A point correspondence `(from, to)` between two frames.
pub type Match = ((f64, f64), (f64, f64));

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub inlier_threshold: f64,
    pub iterations: usize,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            inlier_threshold: 1.0,
            iterations: 200,
            min_inlier_ratio: 0.5,
            seed: 0,
        }
    }
}

/// 3x3 projective transform, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let m = &self.0;
        let x = m[0][0] * p.0 + m[0][1] * p.1 + m[0][2];
        let y = m[1][0] * p.0 + m[1][1] * p.1 + m[1][2];
        let z = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
        (x / z, y / z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RectifyStatus {
    Rectified { homography: Homography, inliers: usize },
    /// RANSAC found no model with enough support; flow returned unchanged.
    Unchanged { best_inliers: usize },
}

#[derive(Debug, Clone)]
pub struct Rectified {
    pub flow: FlowField,
    pub status: RectifyStatus,
}

fn triangle_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    0.5 * ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs()
}

fn sample_degenerate(pts: &[(f64, f64)]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if triangle_area(pts[i], pts[j], pts[k]) < 1e-6 {
                    return true;
                }
            }
        }
    }
    false
}

fn all_collinear(pts: &[(f64, f64)]) -> bool {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p.0 - mx, p.1 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    // smallest eigenvalue of the scatter matrix relative to its trace
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let lmin = tr / 2.0 - disc;
    tr <= 0.0 || lmin <= 1e-9 * tr
}

/// Normalized direct linear transform over all given correspondences.
pub fn fit_homography(matches: &[Match]) -> Option<Homography> {
    if matches.len() < 4 {
        return None;
    }
    let normalizer = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
        let pts: Vec<_> = pts.collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let d = pts
            .iter()
            .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
            .sum::<f64>()
            / n;
        let s = if d > 0.0 { std::f64::consts::SQRT_2 / d } else { 1.0 };
        (s, mx, my)
    };
    let (s1, mx1, my1) = normalizer(&mut matches.iter().map(|m| m.0));
    let (s2, mx2, my2) = normalizer(&mut matches.iter().map(|m| m.1));

    let mut ata = Array2::<f64>::zeros((9, 9));
    for &((x, y), (u, v)) in matches {
        let (x, y) = ((x - mx1) * s1, (y - my1) * s1);
        let (u, v) = ((u - mx2) * s2, (v - my2) * s2);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for row in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[[i, j]] += row[i] * row[j];
                }
            }
        }
    }
    let (_, vecs) = ata.eigh(UPLO::Upper).ok()?;
    let h: Array1<f64> = vecs.column(0).to_owned();
    let hn = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], h[8]]];
    // denormalize: H = T2^-1 * Hn * T1
    let t1 = [[s1, 0.0, -s1 * mx1], [0.0, s1, -s1 * my1], [0.0, 0.0, 1.0]];
    let t2inv = [[1.0 / s2, 0.0, mx2], [0.0, 1.0 / s2, my2], [0.0, 0.0, 1.0]];
    let m = matmul3(&t2inv, &matmul3(&hn, &t1));
    let z = m[2][2];
    if !z.is_finite() || z.abs() < 1e-12 {
        return None;
    }
    let mut out = m;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Some(Homography(out))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Grid-sampled correspondences `(p, p + flow(p))`.
pub fn matches_from_flow(flow: &FlowField, step: usize) -> Vec<Match> {
    let step = step.max(1);
    let mut out = Vec::new();
    for y in (step / 2..flow.height).step_by(step) {
        for x in (step / 2..flow.width).step_by(step) {
            let (u, v) = flow.at(x, y);
            out.push((
                (x as f64, y as f64),
                (x as f64 + u as f64, y as f64 + v as f64),
            ));
        }
    }
    out
}

/// Subtract the displacement field induced by a RANSAC homography fit.
pub fn rectify_flow(
    flow: &FlowField,
    matches: &[Match],
    params: &RansacParams,
) -> Result<Rectified, FlowError> {
    if matches.len() < 4 {
        return Err(FlowError::TooFewMatches(matches.len()));
    }
    let sources: Vec<(f64, f64)> = matches.iter().map(|m| m.0).collect();
    if all_collinear(&sources) {
        return Err(FlowError::Degenerate);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = matches.len();
    let count_inliers = |h: &Homography| -> Vec<usize> {
        (0..n)
            .filter(|&i| {
                let (p, q) = matches[i];
                let r = h.apply(p);
                let e = ((r.0 - q.0).powi(2) + (r.1 - q.1).powi(2)).sqrt();
                e.is_finite() && e < params.inlier_threshold
            })
            .collect()
    };

    let mut best: Vec<usize> = Vec::new();
    for _ in 0..params.iterations {
        let mut idx = [0usize; 4];
        let mut k = 0;
        while k < 4 {
            let c = rng.random_range(0..n);
            if !idx[..k].contains(&c) {
                idx[k] = c;
                k += 1;
            }
        }
        let pts: Vec<_> = idx.iter().map(|&i| matches[i].0).collect();
        if sample_degenerate(&pts) {
            continue;
        }
        let sample: Vec<Match> = idx.iter().map(|&i| matches[i]).collect();
        if let Some(h) = fit_homography(&sample) {
            let inl = count_inliers(&h);
            if inl.len() > best.len() {
                best = inl;
            }
        }
    }

    let min_inliers = (params.min_inlier_ratio * n as f64).ceil() as usize;
    let refit = if best.len() >= min_inliers.max(4) {
        let inlier_matches: Vec<Match> = best.iter().map(|&i| matches[i]).collect();
        fit_homography(&inlier_matches)
    } else {
        None
    };
    let Some(h) = refit else {
        return Ok(Rectified {
            flow: flow.clone(),
            status: RectifyStatus::Unchanged {
                best_inliers: best.len(),
            },
        });
    };

    let mut out = flow.clone();
    for y in 0..flow.height {
        for x in 0..flow.width {
            let p = (x as f64, y as f64);
            let q = h.apply(p);
            let i = y * flow.width + x;
            out.u[i] -= (q.0 - p.0) as f32;
            out.v[i] -= (q.1 - p.1) as f32;
        }
    }
    Ok(Rectified {
        flow: out,
        status: RectifyStatus::Rectified {
            homography: h,
            inliers: best.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{synth_video, MotionSpec};

    fn shifted_pair(dx: f64, dy: f64, seed: u64) -> (Image, Image) {
        let v = synth_video(MotionSpec::Translate { vx: dx, vy: dy }, 64, 64, 16, seed).unwrap();
        (v.frame_image(0), v.frame_image(1))
    }

    fn median(mut xs: Vec<f32>) -> f32 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    }

    fn interior_median(f: &FlowField, margin: usize) -> (f32, f32) {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in margin..f.height - margin {
            for x in margin..f.width - margin {
                let (u, v) = f.at(x, y);
                us.push(u);
                vs.push(v);
            }
        }
        (median(us), median(vs))
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let (a, _) = shifted_pair(0.0, 0.0, 3);
        let f = compute_flow(&a, &a, &FlowParams::default()).unwrap();
        let m = f.u.iter().chain(&f.v).fold(0.0f32, |m, x| m.max(x.abs()));
        assert!(m < 0.05, "max |flow| = {m}");
    }

    #[test]
    fn recovers_integer_shifts() {
        for (dx, dy) in [(3.0, 0.0), (-2.0, 1.0)] {
            let (a, b) = shifted_pair(dx, dy, 11);
            let f = compute_flow(&a, &b, &FlowParams::default()).unwrap();
            let (mu, mv) = interior_median(&f, 8);
            assert!((mu as f64 - dx).abs() < 0.25, "u {mu} vs {dx}");
            assert!((mv as f64 - dy).abs() < 0.25, "v {mv} vs {dy}");
        }
    }

    #[test]
    fn flow_is_deterministic_and_checks_dims() {
        let (a, b) = shifted_pair(1.0, 1.0, 2);
        let p = FlowParams::default();
        assert_eq!(compute_flow(&a, &b, &p).unwrap(), compute_flow(&a, &b, &p).unwrap());
        let small = Image::zeros(20, 20);
        assert!(matches!(
            compute_flow(&a, &small, &p),
            Err(FlowError::DimensionMismatch(..))
        ));
        let tiny = Image::zeros(8, 8);
        assert!(matches!(compute_flow(&tiny, &tiny, &p), Err(FlowError::TooSmall(..))));
    }

    #[test]
    fn sequence_counts_and_static() {
        let v = synth_video(MotionSpec::Static, 48, 48, 16, 4).unwrap();
        let s = compute_flow_sequence(&v, &FlowParams::default()).unwrap();
        assert_eq!(s.len(), 15);
        for f in &s.fields {
            assert!(f.u.iter().chain(&f.v).all(|x| x.abs() < 0.05));
        }
        let one = synth_video(MotionSpec::Static, 48, 48, 16, 4)
            .unwrap()
            .subsample_frames(16);
        assert!(matches!(
            compute_flow_sequence(&one, &FlowParams::default()),
            Err(FlowError::TooFewFrames(1))
        ));
    }

    #[test]
    fn flo_round_trip() {
        let (a, b) = shifted_pair(1.0, -1.0, 9);
        let f = compute_flow(&a, &b, &FlowParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.flo");
        f.write_flo(&p).unwrap();
        assert_eq!(FlowField::read_flo(&p).unwrap(), f);
    }

    #[test]
    fn rectify_removes_global_translation() {
        let f = FlowField::constant(64, 48, 2.5, -1.0);
        let m = matches_from_flow(&f, 8);
        let r = rectify_flow(&f, &m, &RansacParams::default()).unwrap();
        assert!(matches!(r.status, RectifyStatus::Rectified { .. }));
        assert!(r.flow.u.iter().chain(&r.flow.v).all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn rectify_identity_keeps_flow() {
        let f = FlowField::zeros(40, 40);
        let m = matches_from_flow(&f, 5);
        let r = rectify_flow(&f, &m, &RansacParams::default()).unwrap();
        assert!(r.flow.u.iter().chain(&r.flow.v).all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn rectify_preserves_local_blob_motion() {
        let (w, h) = (64, 64);
        let mut f = FlowField::constant(w, h, 1.0, 0.5);
        // blob moving (4, -3) on top of the camera translation
        for y in 20..32 {
            for x in 30..42 {
                f.u[y * w + x] = 1.0 + 4.0;
                f.v[y * w + x] = 0.5 - 3.0;
            }
        }
        let m = matches_from_flow(&f, 4);
        let r = rectify_flow(&f, &m, &RansacParams::default()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = r.flow.at(x, y);
                let inside = (20..32).contains(&y) && (30..42).contains(&x);
                let (eu, ev) = if inside { (4.0, -3.0) } else { (0.0, 0.0) };
                assert!((u - eu).abs() < 1e-3 && (v - ev).abs() < 1e-3, "({x},{y}) = ({u},{v})");
            }
        }
    }

    #[test]
    fn rectify_rejects_degenerate_and_reports_failure() {
        let f = FlowField::zeros(32, 32);
        let line: Vec<Match> = (0..10).map(|i| ((i as f64, 2.0 * i as f64), (i as f64, 2.0 * i as f64))).collect();
        assert!(matches!(
            rectify_flow(&f, &line, &RansacParams::default()),
            Err(FlowError::Degenerate)
        ));
        assert!(matches!(
            rectify_flow(&f, &line[..3], &RansacParams::default()),
            Err(FlowError::TooFewMatches(3))
        ));
        // scattered random displacements: no consistent model
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<Match> = (0..40)
            .map(|_| {
                let p = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
                let q = (p.0 + rng.random_range(-8.0..8.0), p.1 + rng.random_range(-8.0..8.0));
                (p, q)
            })
            .collect();
        let r = rectify_flow(&f, &noise, &RansacParams::default()).unwrap();
        assert!(matches!(r.status, RectifyStatus::Unchanged { .. }));
        assert_eq!(r.flow, f);
    }
}
