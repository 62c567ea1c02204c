//! Pipeline configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos surface as errors.
//!
//! ```toml
//! seed = 0
//!
//! [trajectory]
//! length = 15            # frames per track (fixed by the volume depth)
//! step = 5               # dense sampling grid spacing, px
//! scales = 8             # spatial pyramid levels
//! scale_factor = 0.70710678
//! texture_threshold = 0.001
//! refresh = 5
//! max_jump = 16.0
//! static_tol = 0.3
//! hof_zero_thresh = 0.4
//! root_sift = true
//!
//! [flow]
//! levels = 3
//! poly_radius = 7
//! poly_sigma = 1.5
//! window_radius = 7
//! iterations = 3
//! rectify = false
//!
//! [volume]
//! size = 32
//! grid_xy = 2
//! grid_t = 3
//!
//! [convisa]
//! rf_spatial = 16
//! rf_temporal = 5
//! stride_spatial = 16
//! stride_temporal = 5
//! pca1_dim = 300
//! group1 = 1
//! pca2_dim = 200
//! group2 = 2
//! stack_top = 100
//! sample_count = 200000
//! epochs = 100
//! learning_rate = 0.5
//! smooth_eps = 1e-8
//!
//! [encoding]
//! k = 256
//! sample_count = 256000
//! power_alpha = 0.5
//! xyt = false
//! mifs_skips = [0, 1, 2]
//! kinds = ["traj_shape", "hog", "hof", "mbh", "lop", "lof"]
//! gmm_max_iters = 200
//! gmm_tol = 1e-5
//!
//! [svm]
//! c = 100.0
//! tol = 1e-3
//! max_epochs = 2000
//!
//! [mir]
//! eta = 0.5
//! alpha = 1.0
//! max_iters = 5
//! tol = 1e-9
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::SvmOpts;
use crate::convisa::{ConvIsaConfig, Geometry, Stream};
use crate::descriptors::{DescriptorKind, GRID_T, GRID_XY};
use crate::encoding::{EncoderConfig, GmmOpts};
use crate::flow::FlowParams;
use crate::isa::TrainOpts;
use crate::mir::MirParams;
use crate::trajectory::{TrackConfig, PATCH, TRAJ_LEN};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub length: usize,
    pub step: usize,
    pub scales: usize,
    pub scale_factor: f32,
    pub texture_threshold: f32,
    pub refresh: usize,
    pub max_jump: f32,
    pub static_tol: f32,
    pub hof_zero_thresh: f32,
    pub root_sift: bool,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let t = TrackConfig::default();
        TrajectorySection {
            length: TRAJ_LEN,
            step: t.step,
            scales: 8,
            scale_factor: std::f32::consts::FRAC_1_SQRT_2,
            texture_threshold: t.texture_threshold,
            refresh: t.refresh,
            max_jump: t.max_jump,
            static_tol: t.static_tol,
            hof_zero_thresh: 0.4,
            root_sift: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub levels: usize,
    pub poly_radius: usize,
    pub poly_sigma: f32,
    pub window_radius: usize,
    pub iterations: usize,
    pub rectify: bool,
}

impl Default for FlowSection {
    fn default() -> Self {
        let f = FlowParams::default();
        FlowSection {
            levels: f.levels,
            poly_radius: f.poly_radius,
            poly_sigma: f.poly_sigma as f32,
            window_radius: f.window_radius,
            iterations: f.iterations,
            rectify: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeSection {
    pub size: usize,
    pub grid_xy: usize,
    pub grid_t: usize,
}

impl Default for VolumeSection {
    fn default() -> Self {
        VolumeSection {
            size: PATCH,
            grid_xy: GRID_XY,
            grid_t: GRID_T,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvIsaSection {
    pub rf_spatial: usize,
    pub rf_temporal: usize,
    pub stride_spatial: usize,
    pub stride_temporal: usize,
    pub pca1_dim: usize,
    pub group1: usize,
    pub pca2_dim: usize,
    pub group2: usize,
    pub stack_top: usize,
    pub sample_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub smooth_eps: f64,
}

impl Default for ConvIsaSection {
    fn default() -> Self {
        let c = ConvIsaConfig::default();
        ConvIsaSection {
            rf_spatial: c.geometry.rf.0,
            rf_temporal: c.geometry.rf.1,
            stride_spatial: c.geometry.stride.0,
            stride_temporal: c.geometry.stride.1,
            pca1_dim: c.pca1_dim,
            group1: c.group1,
            pca2_dim: c.pca2_dim,
            group2: c.group2,
            stack_top: c.stack_top,
            sample_count: 200_000,
            epochs: c.isa.epochs,
            learning_rate: c.isa.learning_rate,
            smooth_eps: c.isa.smooth_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingSection {
    pub k: usize,
    pub sample_count: usize,
    pub power_alpha: f64,
    pub xyt: bool,
    pub mifs_skips: Vec<usize>,
    pub kinds: Vec<String>,
    pub gmm_max_iters: usize,
    pub gmm_tol: f64,
}

impl Default for EncodingSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        EncodingSection {
            k: e.k,
            sample_count: e.sample_count,
            power_alpha: e.power_alpha,
            xyt: e.xyt,
            mifs_skips: vec![0, 1, 2],
            kinds: DescriptorKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            gmm_max_iters: e.gmm.max_iters,
            gmm_tol: e.gmm.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmSection {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmSection {
    fn default() -> Self {
        let s = SvmOpts::default();
        SvmSection {
            c: s.c,
            tol: s.tol,
            max_epochs: s.max_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MirSection {
    pub eta: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MirSection {
    fn default() -> Self {
        let m = MirParams::default();
        MirSection {
            eta: m.eta,
            alpha: m.alpha,
            max_iters: m.max_iters,
            tol: m.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub trajectory: TrajectorySection,
    pub flow: FlowSection,
    pub volume: VolumeSection,
    pub convisa: ConvIsaSection,
    pub encoding: EncodingSection,
    pub svm: SvmSection,
    pub mir: MirSection,
}

fn invalid(msg: String) -> Result<(), Error> {
    Err(Error::Config(msg))
}

impl PipelineConfig {
    /// Reduced sizes for desk-scale runs: 2 scales, K = 8, 5000 ConvISA samples.
    pub fn desk() -> Self {
        let mut c = PipelineConfig::default();
        c.trajectory.scales = 2;
        c.convisa.sample_count = 5000;
        c.encoding.k = 8;
        c.encoding.sample_count = 20_000;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let t = &self.trajectory;
        if t.length != TRAJ_LEN {
            return invalid(format!(
                "trajectory.length = {} but volume depth l = {TRAJ_LEN} is fixed",
                t.length
            ));
        }
        if self.volume.size != PATCH || self.volume.grid_xy != GRID_XY || self.volume.grid_t != GRID_T {
            return invalid(format!(
                "volume must be s = {PATCH} with a {GRID_XY}x{GRID_XY}x{GRID_T} grid, got s = {} grid {}x{}x{}",
                self.volume.size, self.volume.grid_xy, self.volume.grid_xy, self.volume.grid_t
            ));
        }
        if t.step == 0 || t.refresh == 0 || t.scales == 0 {
            return invalid("trajectory.step, refresh and scales must be positive".into());
        }
        if !(t.scale_factor > 0.0 && t.scale_factor < 1.0) {
            return invalid(format!("trajectory.scale_factor {} must be in (0, 1)", t.scale_factor));
        }
        if self.flow.levels == 0 || self.flow.poly_radius == 0 || !(self.flow.poly_sigma > 0.0) {
            return invalid("flow.levels, poly_radius and poly_sigma must be positive".into());
        }
        let cv = self.convisa_config();
        for stream in [Stream::Pixel, Stream::Flow] {
            cv.dimension_chain(stream).map_err(|e| Error::Config(format!("convisa ({stream} stream): {e}")))?;
        }
        let needed = cv.pca1_dim.max(cv.pca2_dim);
        if self.convisa.sample_count <= needed {
            return invalid(format!(
                "convisa.sample_count {} must exceed max(pca1_dim, pca2_dim) = {needed}",
                self.convisa.sample_count
            ));
        }
        if !(self.convisa.learning_rate > 0.0) || !(self.convisa.smooth_eps > 0.0) {
            return invalid("convisa.learning_rate and smooth_eps must be positive".into());
        }
        let e = &self.encoding;
        if e.k == 0 {
            return invalid("encoding.k must be positive".into());
        }
        if e.sample_count < 10 * e.k {
            return invalid(format!(
                "encoding.sample_count {} must be at least 10 * k = {}",
                e.sample_count,
                10 * e.k
            ));
        }
        if e.mifs_skips.is_empty() {
            return invalid("encoding.mifs_skips must not be empty".into());
        }
        if e.kinds.is_empty() {
            return invalid("encoding.kinds must not be empty".into());
        }
        for k in &e.kinds {
            if DescriptorKind::from_name(k).is_none() {
                return invalid(format!("unknown descriptor kind `{k}`"));
            }
        }
        if !(self.svm.c > 0.0) || !(self.svm.tol > 0.0) || self.svm.max_epochs == 0 {
            return invalid("svm.c, tol and max_epochs must be positive".into());
        }
        self.mir_params().validate().map_err(|e| Error::Config(format!("mir: {e}")))?;
        Ok(())
    }

    pub fn track_config(&self) -> TrackConfig {
        let t = &self.trajectory;
        TrackConfig {
            step: t.step,
            texture_threshold: t.texture_threshold,
            refresh: t.refresh,
            max_jump: t.max_jump,
            static_tol: t.static_tol,
        }
    }

    pub fn flow_params(&self) -> FlowParams {
        let f = &self.flow;
        FlowParams {
            levels: f.levels,
            poly_radius: f.poly_radius,
            poly_sigma: f.poly_sigma as _,
            window_radius: f.window_radius,
            iterations: f.iterations,
        }
    }

    pub fn convisa_config(&self) -> ConvIsaConfig {
        let c = &self.convisa;
        ConvIsaConfig {
            geometry: Geometry {
                rf: (c.rf_spatial, c.rf_temporal),
                stride: (c.stride_spatial, c.stride_temporal),
            },
            pca1_dim: c.pca1_dim,
            group1: c.group1,
            pca2_dim: c.pca2_dim,
            group2: c.group2,
            stack_top: c.stack_top,
            isa: TrainOpts {
                learning_rate: c.learning_rate,
                epochs: c.epochs,
                batch_size: 0,
                smooth_eps: c.smooth_eps,
                seed: 0,
            },
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoding;
        EncoderConfig {
            k: e.k,
            sample_count: e.sample_count,
            power_alpha: e.power_alpha,
            xyt: e.xyt,
            gmm: GmmOpts {
                max_iters: e.gmm_max_iters,
                tol: e.gmm_tol,
                ..GmmOpts::default()
            },
        }
    }

    pub fn svm_opts(&self) -> SvmOpts {
        SvmOpts {
            c: self.svm.c,
            tol: self.svm.tol,
            max_epochs: self.svm.max_epochs,
            seed: self.seed,
        }
    }

    pub fn mir_params(&self) -> MirParams {
        MirParams {
            eta: self.mir.eta,
            alpha: self.mir.alpha,
            max_iters: self.mir.max_iters,
            tol: self.mir.tol,
        }
    }

    /// Enabled kinds in canonical order.
    pub fn kinds(&self) -> Vec<DescriptorKind> {
        DescriptorKind::ALL
            .into_iter()
            .filter(|k| self.encoding.kinds.iter().any(|n| n == k.name()))
            .collect()
    }

    pub fn uses_convisa(&self) -> bool {
        self.kinds().iter().any(|k| matches!(k, DescriptorKind::Lop | DescriptorKind::Lof))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        PipelineConfig::desk().validate().unwrap();
        assert_eq!(PipelineConfig::from_toml("").unwrap(), c);
        assert_eq!(c.kinds(), DescriptorKind::ALL);
    }

    #[test]
    fn partial_file_overrides() {
        let c = PipelineConfig::from_toml("seed = 9\n[encoding]\nk = 16\nkinds = [\"hog\", \"lop\"]\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.encoding.k, 16);
        assert_eq!(c.kinds(), [DescriptorKind::Hog, DescriptorKind::Lop]);
        assert_eq!(c.trajectory.step, 5);
    }

    #[test]
    fn rejections_name_the_problem() {
        let msg = |t: &str| match PipelineConfig::from_toml(t) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(msg("[convisa]\nrf_spatial = 4\n").contains("n1 = rf_s^2 * rf_t * channels"));
        assert!(msg("[convisa]\npca2_dim = 5000\n").contains("n2 = positions * d1"));
        assert!(msg("[convisa]\nrf_spatial = 40\n").contains("does not fit"));
        assert!(msg("[trajectory]\nlength = 10\n").contains("trajectory.length"));
        assert!(msg("[encoding]\nkinds = [\"sift\"]\n").contains("sift"));
        assert!(msg("[mir]\nalpha = 0.0\n").contains("alpha"));
        assert!(msg("bogus = 1\n").contains("bogus"));
    }

    #[test]
    fn study_points_accepted() {
        for (rs, rt, ss, st) in [(8, 5, 16, 5), (24, 5, 16, 5), (16, 10, 16, 5), (16, 5, 4, 2), (16, 5, 8, 5)] {
            let text = format!(
                "[convisa]\nrf_spatial = {rs}\nrf_temporal = {rt}\nstride_spatial = {ss}\nstride_temporal = {st}\n"
            );
            PipelineConfig::from_toml(&text).unwrap();
        }
        for d in [50, 100, 200, 300] {
            let text = format!("[convisa]\npca2_dim = {d}\nstack_top = {}\n", d / 2);
            PipelineConfig::from_toml(&text).unwrap();
        }
    }
}
