//! Dense point sampling, median-filtered flow tracking, static/drift pruning,
//! and trajectory-aligned pixel and flow volumes.

use std::fmt::Write as _;

use crate::flow::{FlowField, FlowSequence};
use crate::video::{bilinear, GrayVideo, Image, ScalePyramid};

/// Points per trajectory.
pub const TRAJ_LEN: usize = 15;
/// Side of the square patch cut around each tracked point.
pub const PATCH: usize = 32;
/// Values in a pixel volume (32 x 32 x 15).
pub const PIXEL_VOLUME_LEN: usize = PATCH * PATCH * TRAJ_LEN;
/// Values in a flow volume (32 x 32 x 15 x 2).
pub const FLOW_VOLUME_LEN: usize = 2 * PIXEL_VOLUME_LEN;

const MARGIN: usize = PATCH / 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Point { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Point>,
    pub scale_index: usize,
    pub start_frame: usize,
}

impl Trajectory {
    /// Displacement vectors between consecutive points.
    pub fn displacements(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        self.points
            .windows(2)
            .map(|w| (w[1].x - w[0].x, w[1].y - w[0].y))
    }

    pub fn mean_point(&self) -> Point {
        let n = self.points.len() as f32;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        Point::new(sx / n, sy / n)
    }
}

/// Gray intensities of a 32x32x15 trajectory-aligned volume, x fastest then y then t.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVolume {
    pub data: Vec<f32>,
}

/// Flow of a 32x32x15 trajectory-aligned volume; `(u, v)` interleaved per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVolume {
    pub data: Vec<f32>,
}

impl PixelVolume {
    #[inline]
    pub fn at(&self, x: usize, y: usize, t: usize) -> f32 {
        self.data[(t * PATCH + y) * PATCH + x]
    }
}

impl FlowVolume {
    #[inline]
    pub fn at(&self, x: usize, y: usize, t: usize) -> (f32, f32) {
        let i = 2 * ((t * PATCH + y) * PATCH + x);
        (self.data[i], self.data[i + 1])
    }

    /// One flow component as a pixel-volume layout.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(2).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    /// Grid spacing of sampled points.
    pub step: usize,
    /// Fraction of the frame's strongest corner score a point must exceed.
    pub texture_threshold: f32,
    /// New points are sampled every `refresh` frames.
    pub refresh: usize,
    /// Tracks with any per-frame displacement above this are discarded.
    pub max_jump: f32,
    /// Mean and std of displacement magnitudes below this mark a track static.
    pub static_tol: f32,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            step: 5,
            texture_threshold: 0.001,
            refresh: 5,
            max_jump: 16.0,
            static_tol: 0.3,
        }
    }
}

/// Minimum eigenvalue of the 3x3-summed structure tensor at every pixel.
pub fn corner_scores(frame: &Image) -> Vec<f32> {
    let (w, h) = (frame.width, frame.height);
    let mut gxx = vec![0.0f32; w * h];
    let mut gyy = vec![0.0f32; w * h];
    let mut gxy = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let dx = 0.5 * (frame.get_clamped(xi + 1, yi) - frame.get_clamped(xi - 1, yi));
            let dy = 0.5 * (frame.get_clamped(xi, yi + 1) - frame.get_clamped(xi, yi - 1));
            gxx[y * w + x] = dx * dx;
            gyy[y * w + x] = dy * dy;
            gxy[y * w + x] = dx * dy;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for j in -1isize..=1 {
                for i in -1isize..=1 {
                    let xx = (x as isize + i).clamp(0, w as isize - 1) as usize;
                    let yy = (y as isize + j).clamp(0, h as isize - 1) as usize;
                    a += gxx[yy * w + xx];
                    b += gyy[yy * w + xx];
                    c += gxy[yy * w + xx];
                }
            }
            let half_tr = 0.5 * (a + b);
            let disc = (0.25 * (a - b) * (a - b) + c * c).sqrt();
            out[y * w + x] = (half_tr - disc).max(0.0);
        }
    }
    out
}

/// Grid points `16 + k*step` whose 32x32 patch fits, filtered by corner strength.
pub fn dense_sample(frame: &Image, step: usize, texture_threshold: f32) -> Vec<Point> {
    let step = step.max(1);
    if frame.width < PATCH || frame.height < PATCH {
        return Vec::new();
    }
    let scores = corner_scores(frame);
    let max = scores.iter().cloned().fold(0.0f32, f32::max);
    let cut = texture_threshold * max;
    let mut pts = Vec::new();
    for y in (MARGIN..=frame.height - MARGIN).step_by(step) {
        for x in (MARGIN..=frame.width - MARGIN).step_by(step) {
            if scores[y * frame.width + x] > cut {
                pts.push(Point::new(x as f32, y as f32));
            }
        }
    }
    pts
}

/// Advance a point by the 3x3 median of the flow at its rounded position.
/// Returns `None` when the rounded position lacks a 1-px margin.
pub fn track_point(p: Point, flow: &FlowField) -> Option<Point> {
    let xr = p.x.round();
    let yr = p.y.round();
    if !(xr >= 1.0 && yr >= 1.0 && xr <= (flow.width - 2) as f32 && yr <= (flow.height - 2) as f32) {
        return None;
    }
    let (xr, yr) = (xr as usize, yr as usize);
    let mut us = [0.0f32; 9];
    let mut vs = [0.0f32; 9];
    let mut k = 0;
    for y in yr - 1..=yr + 1 {
        for x in xr - 1..=xr + 1 {
            let (u, v) = flow.at(x, y);
            us[k] = u;
            vs[k] = v;
            k += 1;
        }
    }
    us.sort_by(f32::total_cmp);
    vs.sort_by(f32::total_cmp);
    Some(Point::new(p.x + us[4], p.y + vs[4]))
}

/// Static iff both the mean and the std of per-frame displacement magnitudes are below `tol`.
pub fn is_static(traj: &Trajectory, tol: f32) -> bool {
    let mags: Vec<f64> = traj
        .displacements()
        .map(|(dx, dy)| ((dx * dx + dy * dy) as f64).sqrt())
        .collect();
    if mags.is_empty() {
        return true;
    }
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    mean < tol as f64 && var.sqrt() < tol as f64
}

/// Displacement sequence normalized by its summed magnitude (28 values).
pub fn trajectory_shape(traj: &Trajectory) -> Vec<f32> {
    let d: Vec<(f32, f32)> = traj.displacements().collect();
    let total: f32 = d.iter().map(|(x, y)| (x * x + y * y).sqrt()).sum();
    if total <= 0.0 {
        return vec![0.0; 2 * d.len()];
    }
    d.iter().flat_map(|&(x, y)| [x / total, y / total]).collect()
}

fn valid_track(points: &[Point], w: usize, h: usize, cfg: &TrackConfig) -> bool {
    let in_bounds = points
        .iter()
        .all(|p| p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f32 && p.y <= (h - 1) as f32);
    let jumps_ok = points.windows(2).all(|q| {
        let (dx, dy) = (q[1].x - q[0].x, q[1].y - q[0].y);
        (dx * dx + dy * dy).sqrt() <= cfg.max_jump
    });
    in_bounds && jumps_ok
}

/// Track one pyramid level. Output order: start frame, then grid order.
pub fn extract_level(video: &GrayVideo, flows: &FlowSequence, scale_index: usize, cfg: &TrackConfig) -> Vec<Trajectory> {
    let (w, h) = (video.width() as usize, video.height() as usize);
    let frames = video.frames() as usize;
    let step = cfg.step.max(1);
    let refresh = cfg.refresh.max(1);
    if frames < TRAJ_LEN || flows.len() + 1 < TRAJ_LEN {
        return Vec::new();
    }
    let last_start = frames - TRAJ_LEN;

    struct Active {
        points: Vec<Point>,
        start: usize,
        alive: bool,
    }
    let mut active: Vec<Active> = Vec::new();
    let mut done: Vec<Trajectory> = Vec::new();

    for t in 0..frames {
        if t % refresh == 0 && t <= last_start {
            let frame = video.frame_image(t);
            let cell = |p: &Point| {
                (
                    ((p.x - MARGIN as f32) / step as f32).round() as i64,
                    ((p.y - MARGIN as f32) / step as f32).round() as i64,
                )
            };
            let covered: std::collections::HashSet<(i64, i64)> = active
                .iter()
                .filter(|a| a.alive)
                .map(|a| cell(a.points.last().unwrap()))
                .collect();
            for p in dense_sample(&frame, step, cfg.texture_threshold) {
                if !covered.contains(&cell(&p)) {
                    active.push(Active {
                        points: vec![p],
                        start: t,
                        alive: true,
                    });
                }
            }
        }
        if t + 1 >= frames {
            break;
        }
        for a in active.iter_mut().filter(|a| a.alive) {
            match track_point(*a.points.last().unwrap(), &flows.fields[t]) {
                Some(next) => a.points.push(next),
                None => a.alive = false,
            }
            if a.points.len() == TRAJ_LEN {
                a.alive = false;
                let traj = Trajectory {
                    points: std::mem::take(&mut a.points),
                    scale_index,
                    start_frame: a.start,
                };
                if valid_track(&traj.points, w, h, cfg) && !is_static(&traj, cfg.static_tol) {
                    done.push(traj);
                }
            }
        }
        active.retain(|a| a.alive);
    }
    // stable sort keeps grid order within a start frame
    done.sort_by_key(|t| t.start_frame);
    done
}

/// Trajectories over all pyramid levels, ordered by (scale, start frame, grid order).
pub fn extract_trajectories(pyramid: &ScalePyramid, flows: &[FlowSequence], cfg: &TrackConfig) -> Vec<Trajectory> {
    assert_eq!(
        pyramid.levels.len(),
        flows.len(),
        "one flow sequence per pyramid level"
    );
    pyramid
        .levels
        .iter()
        .zip(flows)
        .enumerate()
        .flat_map(|(i, (v, f))| extract_level(v, f, i, cfg))
        .collect()
}

/// Bilinear 32x32 patches centered on each tracked point, from frames
/// `start_frame .. start_frame + 15` of the trajectory's own level.
pub fn extract_volume(video: &GrayVideo, traj: &Trajectory) -> PixelVolume {
    let (w, h) = (video.width() as usize, video.height() as usize);
    let mut data = Vec::with_capacity(PIXEL_VOLUME_LEN);
    for (t, p) in traj.points.iter().enumerate() {
        let frame = video.frame(traj.start_frame + t);
        let (x0, y0) = (p.x - MARGIN as f32, p.y - MARGIN as f32);
        for j in 0..PATCH {
            for i in 0..PATCH {
                data.push(bilinear(frame, w, h, x0 + i as f32, y0 + j as f32));
            }
        }
    }
    PixelVolume { data }
}

/// Flow patches along the trajectory. Step `t` reads field `start_frame + t`;
/// when that field does not exist (track ending on the last frame) the
/// preceding field is used.
pub fn extract_flow_volume(flows: &FlowSequence, traj: &Trajectory) -> FlowVolume {
    let mut data = Vec::with_capacity(FLOW_VOLUME_LEN);
    let last = flows.len() - 1;
    for (t, p) in traj.points.iter().enumerate() {
        let field = &flows.fields[(traj.start_frame + t).min(last)];
        let (x0, y0) = (p.x - MARGIN as f32, p.y - MARGIN as f32);
        for j in 0..PATCH {
            for i in 0..PATCH {
                let (u, v) = field.sample(x0 + i as f32, y0 + j as f32);
                data.push(u);
                data.push(v);
            }
        }
    }
    FlowVolume { data }
}

/// Debug dump: `scale_index,start_frame,x0,y0,...,x14,y14` per line.
pub fn trajectories_to_csv(trajs: &[Trajectory]) -> String {
    let mut s = String::from("scale_index,start_frame");
    for i in 0..TRAJ_LEN {
        let _ = write!(s, ",x{i},y{i}");
    }
    s.push('\n');
    for t in trajs {
        let _ = write!(s, "{},{}", t.scale_index, t.start_frame);
        for p in &t.points {
            let _ = write!(s, ",{},{}", p.x, p.y);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{compute_flow_sequence, FlowParams};
    use crate::video::{build_scale_pyramid, synth_video, MotionSpec};

    fn line(dx: f32, dy: f32) -> Trajectory {
        Trajectory {
            points: (0..TRAJ_LEN)
                .map(|i| Point::new(20.0 + dx * i as f32, 20.0 + dy * i as f32))
                .collect(),
            scale_index: 0,
            start_frame: 0,
        }
    }

    #[test]
    fn dense_sample_grid_and_texture() {
        let flat = Image::new(64, 64, vec![0.5; 64 * 64]);
        assert!(dense_sample(&flat, 5, 0.001).is_empty());
        let v = synth_video(MotionSpec::Static, 64, 64, 16, 3).unwrap();
        let frame = v.frame_image(0);
        let pts = dense_sample(&frame, 5, 0.0);
        assert_eq!(pts.len(), 49);
        assert!(pts.iter().all(|p| p.x >= 16.0 && p.x <= 48.0 && p.y >= 16.0 && p.y <= 48.0));
        assert!(dense_sample(&frame, 64, 0.0).len() <= 1);
    }

    #[test]
    fn tracking_uses_componentwise_median() {
        let f = FlowField::constant(16, 16, 1.0, 2.0);
        let p = track_point(Point::new(5.3, 7.8), &f).unwrap();
        assert!((p.x - 6.3).abs() < 1e-6 && (p.y - 9.8).abs() < 1e-6);
        let z = FlowField::zeros(16, 16);
        assert_eq!(track_point(Point::new(5.3, 7.8), &z), Some(Point::new(5.3, 7.8)));

        let mut f = FlowField::zeros(16, 16);
        let us = [0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 9.0, 9.0];
        let mut k = 0;
        for y in 4..7 {
            for x in 4..7 {
                f.u[y * 16 + x] = us[k];
                k += 1;
            }
        }
        let p = track_point(Point::new(5.0, 5.0), &f).unwrap();
        assert_eq!(p, Point::new(10.0, 5.0));
        assert_eq!(track_point(Point::new(0.2, 5.0), &f), None);
        assert_eq!(track_point(Point::new(14.6, 5.0), &f), None);
    }

    #[test]
    fn static_rule() {
        assert!(is_static(&line(0.0, 0.0), 0.3));
        assert!(!is_static(&line(1.0, 0.0), 0.3));
        let mut jitter = line(0.0, 0.0);
        for (i, p) in jitter.points.iter_mut().enumerate() {
            p.x += if i % 2 == 0 { 0.05 } else { -0.05 };
        }
        // magnitudes are all 0.1: mean 0.1, std 0
        assert!(is_static(&jitter, 0.3));
    }

    #[test]
    fn shape_descriptor() {
        let s = trajectory_shape(&line(1.0, 0.0));
        assert_eq!(s.len(), 28);
        for (i, v) in s.iter().enumerate() {
            let e = if i % 2 == 0 { 1.0 / 14.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-7);
        }
        assert!(trajectory_shape(&line(0.0, 0.0)).iter().all(|&v| v == 0.0));

        let mut back = line(0.0, 0.0);
        for (i, p) in back.points.iter_mut().enumerate() {
            p.x += (i % 2) as f32;
        }
        let s = trajectory_shape(&back);
        for (i, v) in s.iter().enumerate() {
            let e = if i % 2 == 1 {
                0.0
            } else if (i / 2) % 2 == 0 {
                1.0 / 14.0
            } else {
                -1.0 / 14.0
            };
            assert!((v - e).abs() < 1e-7, "{i}: {v}");
        }
    }

    fn pipeline(motion: MotionSpec, frames: u32) -> (GrayVideo, FlowSequence, Vec<Trajectory>) {
        let full = synth_video(motion, 64, 64, frames.max(16), 21).unwrap();
        let n = 64 * 64 * frames as usize;
        let v = GrayVideo::new(64, 64, frames, full.data()[..n].to_vec()).unwrap();
        let pyr = build_scale_pyramid(&v, 1, std::f32::consts::FRAC_1_SQRT_2);
        let flows = vec![compute_flow_sequence(&v, &FlowParams::default()).unwrap()];
        let trajs = extract_trajectories(&pyr, &flows, &TrackConfig::default());
        (v, flows.into_iter().next().unwrap(), trajs)
    }

    #[test]
    fn static_video_has_no_trajectories() {
        let (_, _, t) = pipeline(MotionSpec::Static, 16);
        assert!(t.is_empty());
    }

    #[test]
    fn translating_video_tracks_ground_truth() {
        let (v, flows, trajs) = pipeline(MotionSpec::Translate { vx: 1.0, vy: 0.0 }, 16);
        assert!(!trajs.is_empty());
        let mut mean_step = 0.0;
        for t in &trajs {
            assert_eq!(t.points.len(), TRAJ_LEN);
            let d = (t.points[14].x - t.points[0].x, t.points[14].y - t.points[0].y);
            assert!((d.0 - 14.0).abs() < 1.0 && d.1.abs() < 1.0, "{d:?}");
            mean_step += d.0 / 14.0;
        }
        mean_step /= trajs.len() as f32;
        assert!((mean_step - 1.0).abs() < 0.1);

        // aligned patches follow the motion
        let vol = extract_volume(&v, &trajs[0]);
        assert_eq!(vol.data.len(), PIXEL_VOLUME_LEN);
        for t in 1..TRAJ_LEN {
            for y in 4..28 {
                for x in 4..28 {
                    assert!((vol.at(x, y, t) - vol.at(x, y, t - 1)).abs() < 0.1);
                }
            }
        }
        let fv = extract_flow_volume(&flows, &trajs[0]);
        assert_eq!(fv.data.len(), FLOW_VOLUME_LEN);
    }

    #[test]
    fn flow_volume_of_translation() {
        let (_, flows, trajs) = pipeline(MotionSpec::Translate { vx: 1.0, vy: 2.0 }, 18);
        assert!(!trajs.is_empty());
        let fv = extract_flow_volume(&flows, &trajs[0]);
        let n = (fv.data.len() / 2) as f32;
        let mu = fv.channel(0).iter().sum::<f32>() / n;
        let mv = fv.channel(1).iter().sum::<f32>() / n;
        assert!((mu - 1.0).abs() < 0.1 && (mv - 2.0).abs() < 0.1, "{mu} {mv}");
    }

    #[test]
    fn fifteen_frames_start_only_at_zero() {
        let (_, _, trajs) = pipeline(MotionSpec::Translate { vx: 1.0, vy: 0.0 }, 15);
        assert!(!trajs.is_empty());
        assert!(trajs.iter().all(|t| t.start_frame == 0));
    }

    #[test]
    fn constant_video_constant_volume() {
        let v = GrayVideo::new(40, 40, 16, vec![0.25; 40 * 40 * 16]).unwrap();
        let vol = extract_volume(&v, &line(0.5, 0.2));
        assert!(vol.data.iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn csv_dump_has_30_coordinates() {
        let csv = trajectories_to_csv(&[line(1.0, 0.0)]);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row.split(',').count(), 32);
    }
}
