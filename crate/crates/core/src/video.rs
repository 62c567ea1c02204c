//! Grayscale video containers, the RGV / PGM readers and writers, the spatial
//! scale pyramid and a deterministic synthetic video generator.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Side length of the trajectory-aligned volumes; nothing smaller is usable.
pub const MIN_SPATIAL: u32 = 32;
/// Shortest video the synthetic generator accepts.
pub const MIN_FRAMES: u32 = 16;

const RGV_MAGIC: &[u8; 4] = b"RGV1";

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("video file not found: {0}")]
    Missing(PathBuf),
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("invalid video: {0}")]
    Invalid(String),
    #[error("video too small for volume extraction: {width}x{height}x{frames} (need at least 32x32x16)")]
    TooSmall { width: u32, height: u32, frames: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk layout accepted by [`load_video`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoFormat {
    /// Single raw file with an `RGV1` header.
    Rgv,
    /// Directory of binary P5 frames, read in lexicographic order.
    PgmSequence,
}

/// A single grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size mismatch");
        Image {
            width,
            height,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image::new(width, height, vec![0.0; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with indices clamped to the border.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample; coordinates outside the image are clamped to the border.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        bilinear(&self.data, self.width, self.height, x, y)
    }
}

/// Bilinear interpolation over a row-major plane, border-clamped.
#[inline]
pub fn bilinear(data: &[f32], width: usize, height: usize, x: f32, y: f32) -> f32 {
    let xm = (width - 1) as f32;
    let ym = (height - 1) as f32;
    let x = x.clamp(0.0, xm);
    let y = y.clamp(0.0, ym);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let a = data[y0 * width + x0];
    let b = data[y0 * width + x1];
    let c = data[y1 * width + x0];
    let d = data[y1 * width + x1];
    let top = a + (b - a) * fx;
    let bot = c + (d - c) * fx;
    top + (bot - top) * fy
}

/// Grayscale video with intensities in `[0, 1]`, frame-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayVideo {
    width: u32,
    height: u32,
    frames: u32,
    data: Vec<f32>,
}

impl GrayVideo {
    pub fn new(width: u32, height: u32, frames: u32, data: Vec<f32>) -> Result<Self, VideoError> {
        let expected = width as usize * height as usize * frames as usize;
        if data.len() != expected {
            return Err(VideoError::Invalid(format!(
                "data length {} does not match {width}x{height}x{frames}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(VideoError::Invalid(format!(
                "intensity {v} outside [0,1]"
            )));
        }
        Ok(GrayVideo {
            width,
            height,
            frames,
            data,
        })
    }

    pub fn from_frames(frames: &[Image]) -> Result<Self, VideoError> {
        let first = frames
            .first()
            .ok_or_else(|| VideoError::Invalid("no frames".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(w * h * frames.len());
        for f in frames {
            if f.width != w || f.height != h {
                return Err(VideoError::Invalid("frames differ in size".into()));
            }
            data.extend_from_slice(&f.data);
        }
        GrayVideo::new(w as u32, h as u32, frames.len() as u32, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn frames(&self) -> u32 {
        self.frames
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row-major pixels of frame `t`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.width as usize * self.height as usize;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_image(&self, t: usize) -> Image {
        Image::new(
            self.width as usize,
            self.height as usize,
            self.frame(t).to_vec(),
        )
    }

    pub fn get(&self, x: usize, y: usize, t: usize) -> f32 {
        let w = self.width as usize;
        let h = self.height as usize;
        self.data[t * w * h + y * w + x]
    }

    /// Keep every `step`-th frame starting at frame 0.
    pub fn subsample_frames(&self, step: usize) -> GrayVideo {
        let step = step.max(1);
        let n = self.width as usize * self.height as usize;
        let kept: Vec<usize> = (0..self.frames as usize).step_by(step).collect();
        let mut data = Vec::with_capacity(kept.len() * n);
        for &t in &kept {
            data.extend_from_slice(self.frame(t));
        }
        GrayVideo {
            width: self.width,
            height: self.height,
            frames: kept.len() as u32,
            data,
        }
    }
}

pub fn load_video(path: &Path, format: VideoFormat) -> Result<GrayVideo, VideoError> {
    if !path.exists() {
        return Err(VideoError::Missing(path.to_path_buf()));
    }
    match format {
        VideoFormat::Rgv => load_rgv(path),
        VideoFormat::PgmSequence => load_pgm_sequence(path),
    }
}

fn load_rgv(path: &Path) -> Result<GrayVideo, VideoError> {
    let bytes = fs::read(path)?;
    let corrupt = |reason: &str| VideoError::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(corrupt("header shorter than 16 bytes"));
    }
    if &bytes[0..4] != RGV_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (w, h, t) = (word(0), word(1), word(2));
    if w == 0 || h == 0 || t == 0 {
        return Err(corrupt("zero dimension"));
    }
    let expected = (w as u64) * (h as u64) * (t as u64);
    let found = bytes.len() - 16;
    if (found as u64) < expected {
        return Err(VideoError::Truncated {
            path: path.to_path_buf(),
            expected: expected as usize,
            found,
        });
    }
    if (found as u64) > expected {
        return Err(corrupt("payload longer than declared size"));
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    GrayVideo::new(w, h, t, data)
}

/// Write an RGV file; intensities are quantized to `round(v * 255)`.
pub fn save_rgv(video: &GrayVideo, path: &Path) -> Result<(), VideoError> {
    let mut out = Vec::with_capacity(16 + video.data.len());
    out.extend_from_slice(RGV_MAGIC);
    out.extend_from_slice(&video.width.to_le_bytes());
    out.extend_from_slice(&video.height.to_le_bytes());
    out.extend_from_slice(&video.frames.to_le_bytes());
    out.extend(video.data.iter().map(|v| quantize(*v)));
    fs::write(path, out)?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write one binary P5 file per frame as `frame_00000.pgm`, ...
pub fn save_pgm_sequence(video: &GrayVideo, dir: &Path) -> Result<(), VideoError> {
    fs::create_dir_all(dir)?;
    for t in 0..video.frames as usize {
        let img = video.frame_image(t);
        write_pgm(&img, &dir.join(format!("frame_{t:05}.pgm")))?;
    }
    Ok(())
}

pub fn write_pgm(img: &Image, path: &Path) -> Result<(), VideoError> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    f.write_all(&bytes)?;
    Ok(())
}

fn load_pgm_sequence(dir: &Path) -> Result<GrayVideo, VideoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("pgm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(VideoError::CorruptHeader {
            path: dir.to_path_buf(),
            reason: "directory holds no .pgm frames".into(),
        });
    }
    let frames = paths
        .iter()
        .map(|p| read_pgm(p))
        .collect::<Result<Vec<_>, _>>()?;
    GrayVideo::from_frames(&frames)
}

pub fn read_pgm(path: &Path) -> Result<Image, VideoError> {
    let bytes = fs::read(path)?;
    let corrupt = |reason: &str| VideoError::CorruptHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(corrupt("not a binary P5 file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(corrupt("header ended early")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(corrupt("unsupported dimensions or maxval"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let expected = w * h;
    let found = bytes.len().saturating_sub(pos);
    if found < expected {
        return Err(VideoError::Truncated {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let scale = maxval as f32;
    let data = bytes[pos..pos + expected]
        .iter()
        .map(|&b| (b as f32 / scale).min(1.0))
        .collect();
    Ok(Image::new(w, h, data))
}

/// Spatial pyramid of a video; `levels[0]` is the input.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    pub levels: Vec<GrayVideo>,
    pub factor: f32,
}

impl ScalePyramid {
    /// Ratio of level `i` width to level-0 width.
    pub fn level_scale(&self, i: usize) -> f32 {
        self.levels[i].width as f32 / self.levels[0].width as f32
    }
}

/// Bilinearly downsampled pyramid. Level `i` has dimensions
/// `round(dim0 * factor^i)`; levels narrower than 32 px are dropped.
pub fn build_scale_pyramid(video: &GrayVideo, num_scales: usize, factor: f32) -> ScalePyramid {
    let mut levels = vec![video.clone()];
    let valid_factor = factor > 0.0 && factor < 1.0;
    if valid_factor {
        for i in 1..num_scales {
            let s = (factor as f64).powi(i as i32);
            let w = (video.width as f64 * s).round() as u32;
            let h = (video.height as f64 * s).round() as u32;
            if w < MIN_SPATIAL || h < MIN_SPATIAL {
                break;
            }
            levels.push(resize_video(video, w, h));
        }
    }
    ScalePyramid { levels, factor }
}

fn resize_video(video: &GrayVideo, w: u32, h: u32) -> GrayVideo {
    let (sw, sh) = (video.width as usize, video.height as usize);
    let (dw, dh) = (w as usize, h as usize);
    let sx = sw as f32 / dw as f32;
    let sy = sh as f32 / dh as f32;
    let mut data = Vec::with_capacity(dw * dh * video.frames as usize);
    for t in 0..video.frames as usize {
        let frame = video.frame(t);
        for y in 0..dh {
            let fy = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..dw {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                data.push(bilinear(frame, sw, sh, fx, fy).clamp(0.0, 1.0));
            }
        }
    }
    GrayVideo {
        width: w,
        height: h,
        frames: video.frames,
        data,
    }
}

/// Spatial axis for oscillating motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Global motion applied to a synthetic texture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionSpec {
    /// Constant velocity in px/frame.
    Translate { vx: f64, vy: f64 },
    Static,
    /// Sinusoidal displacement `amplitude * sin(2 pi t / period)` along `axis`.
    Oscillate {
        axis: Axis,
        period: f64,
        amplitude: f64,
    },
}

impl MotionSpec {
    pub fn oscillate(axis: Axis, period: f64) -> Self {
        MotionSpec::Oscillate {
            axis,
            period,
            amplitude: 3.0,
        }
    }

    /// Texture offset at frame `t`.
    pub fn displacement(&self, t: f64) -> (f64, f64) {
        match *self {
            MotionSpec::Translate { vx, vy } => (vx * t, vy * t),
            MotionSpec::Static => (0.0, 0.0),
            MotionSpec::Oscillate {
                axis,
                period,
                amplitude,
            } => {
                let d = amplitude * (2.0 * PI * t / period).sin();
                match axis {
                    Axis::X => (d, 0.0),
                    Axis::Y => (0.0, d),
                }
            }
        }
    }

    /// Ground-truth flow from frame `t` to `t + 1`, identical at every pixel.
    pub fn flow_at(&self, t: usize) -> (f64, f64) {
        let (x0, y0) = self.displacement(t as f64);
        let (x1, y1) = self.displacement(t as f64 + 1.0);
        (x1 - x0, y1 - y0)
    }
}

/// Smooth random texture: a sum of oriented sinusoids mapped into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    norm: f64,
}

impl Texture {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let waves: Vec<_> = (0..n)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let wavelength = rng.random_range(6.0..18.0);
                let k = 2.0 * PI / wavelength;
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.5..1.0);
                (k * theta.cos(), k * theta.sin(), phase, amp)
            })
            .collect();
        let norm = waves.iter().map(|w| w.3).sum::<f64>();
        Texture { waves, norm }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin())
            .sum();
        // sum of sines lies in [-norm, norm]; shrink toward mid-gray for contrast headroom
        (0.5 + 0.5 * 1.6 * s / self.norm).clamp(0.0, 1.0)
    }
}

/// Deterministic textured video animated by `motion`.
pub fn synth_video(
    motion: MotionSpec,
    width: u32,
    height: u32,
    frames: u32,
    seed: u64,
) -> Result<GrayVideo, VideoError> {
    if width < MIN_SPATIAL || height < MIN_SPATIAL || frames < MIN_FRAMES {
        return Err(VideoError::TooSmall {
            width,
            height,
            frames,
        });
    }
    let tex = Texture::random(seed);
    let (w, h) = (width as usize, height as usize);
    let mut data = Vec::with_capacity(w * h * frames as usize);
    for t in 0..frames as usize {
        let (dx, dy) = motion.displacement(t as f64);
        for y in 0..h {
            for x in 0..w {
                data.push(tex.eval(x as f64 - dx, y as f64 - dy) as f32);
            }
        }
    }
    GrayVideo::new(width, height, frames, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgv_bytes_map_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.rgv");
        let mut bytes = b"RGV1".to_vec();
        for v in [2u32, 2, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 0, 255]);
        fs::write(&p, bytes).unwrap();
        let v = load_video(&p, VideoFormat::Rgv).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rgv_truncated_and_corrupt_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.rgv");
        let mut bytes = b"RGV1".to_vec();
        for v in [4u32, 4, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[7u8; 16]);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_video(&p, VideoFormat::Rgv),
            Err(VideoError::Truncated {
                expected: 32,
                found: 16,
                ..
            })
        ));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_video(&p, VideoFormat::Rgv),
            Err(VideoError::CorruptHeader { .. })
        ));
        assert!(matches!(
            load_video(&dir.path().join("nope.rgv"), VideoFormat::Rgv),
            Err(VideoError::Missing(_))
        ));
    }

    #[test]
    fn pgm_directory_reads_back_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let frames_dir = dir.path().join("frames");
        fs::create_dir_all(&frames_dir).unwrap();
        // reference emitter written independently of write_pgm
        let mut expected = Vec::new();
        for t in 0..3u8 {
            let raster: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(3).wrapping_add(t * 40)).collect();
            let mut file = b"P5\n# test frame\n8 8\n255\n".to_vec();
            file.extend_from_slice(&raster);
            fs::write(frames_dir.join(format!("f{t}.pgm")), file).unwrap();
            expected.extend(raster.iter().map(|&b| b as f32 / 255.0));
        }
        let v = load_video(&frames_dir, VideoFormat::PgmSequence).unwrap();
        assert_eq!((v.width(), v.height(), v.frames()), (8, 8, 3));
        assert_eq!(v.data(), expected.as_slice());
    }

    #[test]
    fn pyramid_levels_for_64px() {
        let v = synth_video(MotionSpec::Static, 64, 64, 16, 1).unwrap();
        let p = build_scale_pyramid(&v, 8, std::f32::consts::FRAC_1_SQRT_2);
        let widths: Vec<u32> = p.levels.iter().map(|l| l.width()).collect();
        assert_eq!(widths, vec![64, 45, 32]);
        let single = build_scale_pyramid(&v, 1, std::f32::consts::FRAC_1_SQRT_2);
        assert_eq!(single.levels.len(), 1);
        assert_eq!(single.levels[0], v);
    }

    #[test]
    fn pyramid_preserves_constants() {
        let v = GrayVideo::new(80, 70, 2, vec![0.37; 80 * 70 * 2]).unwrap();
        let p = build_scale_pyramid(&v, 8, std::f32::consts::FRAC_1_SQRT_2);
        for l in &p.levels {
            assert!(l.data().iter().all(|&x| (x - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn synth_is_deterministic_and_moves() {
        let m = MotionSpec::Translate { vx: 1.0, vy: 0.0 };
        let a = synth_video(m, 32, 32, 16, 7).unwrap();
        let b = synth_video(m, 32, 32, 16, 7).unwrap();
        assert_eq!(a, b);

        let s = synth_video(MotionSpec::Static, 40, 36, 16, 3).unwrap();
        for t in 1..16 {
            assert_eq!(s.frame(t), s.frame(0));
        }

        let m2 = MotionSpec::Translate { vx: 2.0, vy: 0.0 };
        let v = synth_video(m2, 48, 40, 16, 5).unwrap();
        for y in 0..40 {
            for x in 2..48 {
                assert_eq!(v.get(x, y, 1), v.get(x - 2, y, 0));
            }
        }
        assert!(matches!(
            synth_video(m2, 31, 40, 16, 5),
            Err(VideoError::TooSmall { .. })
        ));
    }

    #[test]
    fn translate_ground_truth_flow() {
        let m = MotionSpec::Translate { vx: 1.5, vy: -2.0 };
        for t in 0..10 {
            assert_eq!(m.flow_at(t), (1.5, -2.0));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn rgv_round_trip_is_bit_exact(w in 1u32..9, h in 1u32..9, t in 1u32..4, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = (w * h * t) as usize;
                let data: Vec<f32> = (0..n).map(|_| rng.random::<u8>() as f32 / 255.0).collect();
                let v = GrayVideo::new(w, h, t, data).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("r.rgv");
                save_rgv(&v, &p).unwrap();
                let back = load_video(&p, VideoFormat::Rgv).unwrap();
                prop_assert_eq!(back, v);
            }

            #[test]
            fn pyramid_is_monotone(w in 32u32..200, h in 32u32..200) {
                let v = GrayVideo::new(w, h, 1, vec![0.5; (w * h) as usize]).unwrap();
                let p = build_scale_pyramid(&v, 8, std::f32::consts::FRAC_1_SQRT_2);
                for pair in p.levels.windows(2) {
                    prop_assert!(pair[1].width() < pair[0].width() || pair[1].height() < pair[0].height());
                    prop_assert!(pair[1].width() <= pair[0].width() && pair[1].height() <= pair[0].height());
                }
                for l in &p.levels {
                    prop_assert!(l.width() >= 32 && l.height() >= 32);
                }
            }
        }
    }
}
