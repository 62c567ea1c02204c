//! Synthetic end-to-end benchmark: textured videos whose class is their global motion.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classify::{eval_macc, eval_map, ova_predict, ova_train, LinearModel};
use crate::config::PipelineConfig;
use crate::encoding::train_encoder;
use crate::manifest::Split;
use crate::mir::{mir_rerank, rank_score_fuse};
use crate::pipeline::{describe_all, train_convisa};
use crate::video::{synth_video, Axis, GrayVideo, MotionSpec};
use crate::Error;

pub const CLASS_NAMES: [&str; 6] = [
    "translate_right",
    "translate_down",
    "oscillate_x",
    "oscillate_y",
    "translate_left",
    "translate_up",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            classes: 4,
            videos_per_class: 10,
            width: 64,
            height: 64,
            frames: 32,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub motion: MotionSpec,
    pub texture_seed: u64,
}

impl SyntheticVideo {
    pub fn render(&self, spec: &BenchSpec) -> Result<GrayVideo, Error> {
        Ok(synth_video(self.motion, spec.width, spec.height, spec.frames, self.texture_seed)?)
    }
}

fn class_motion(class: usize, rng: &mut ChaCha8Rng) -> MotionSpec {
    let speed = rng.random_range(0.8..1.5);
    let period = rng.random_range(8.0..12.0);
    let amplitude = rng.random_range(2.5..3.5);
    match class {
        0 => MotionSpec::Translate { vx: speed, vy: 0.0 },
        1 => MotionSpec::Translate { vx: 0.0, vy: speed },
        2 => MotionSpec::Oscillate {
            axis: Axis::X,
            period,
            amplitude,
        },
        3 => MotionSpec::Oscillate {
            axis: Axis::Y,
            period,
            amplitude,
        },
        4 => MotionSpec::Translate { vx: -speed, vy: 0.0 },
        _ => MotionSpec::Translate { vx: 0.0, vy: -speed },
    }
}

/// Videos in class-major order; within a class, even indices train and odd test.
pub fn synthetic_dataset(spec: &BenchSpec) -> Result<Vec<SyntheticVideo>, Error> {
    if spec.classes < 2 || spec.classes > CLASS_NAMES.len() {
        return Err(Error::Config(format!(
            "classes must be in 2..={}, got {}",
            CLASS_NAMES.len(),
            spec.classes
        )));
    }
    if spec.videos_per_class < 2 {
        return Err(Error::Config("videos_per_class must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for c in 0..spec.classes {
        for i in 0..spec.videos_per_class {
            out.push(SyntheticVideo {
                id: format!("{}_{i:03}", CLASS_NAMES[c]),
                label: c,
                split: if i % 2 == 0 { Split::Train } else { Split::Test },
                motion: class_motion(c, &mut rng),
                texture_seed: rng.random(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub classes: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub representation_dim: usize,
    pub macc: f64,
    pub map: f64,
    pub macc_mir: f64,
    pub map_mir: f64,
    pub mir_iterations: usize,
    /// Stage name and wall-clock seconds.
    pub timings: Vec<(String, f64)>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "classes={} train={} test={} dim={}",
            self.classes, self.train_videos, self.test_videos, self.representation_dim
        );
        let _ = writeln!(s, "MAcc={:.4} MAP={:.4}", self.macc, self.map);
        let _ = writeln!(
            s,
            "MIR+fusion: MAcc={:.4} MAP={:.4} (iterations {})",
            self.macc_mir, self.map_mir, self.mir_iterations
        );
        for (name, secs) in &self.timings {
            let _ = writeln!(s, "time {name}: {secs:.2}s");
        }
        s
    }
}

fn rows_of(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(NdAxis(0), idx)
}

/// Full pipeline on a synthetic dataset: ConvISA (when configured), descriptors
/// with MIFS, Fisher encoding, one-vs-all SVM, then MIR with rank-score fusion.
pub fn run_bench(spec: &BenchSpec, cfg: &PipelineConfig) -> Result<BenchReport, Error> {
    cfg.validate()?;
    let videos = synthetic_dataset(spec)?;
    let train: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].split == Split::Train).collect();
    let test: Vec<usize> = (0..videos.len()).filter(|&i| videos[i].split == Split::Test).collect();
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let model = if cfg.uses_convisa() {
        let m = train_convisa(train.len(), |i| videos[train[i]].render(spec), cfg)?;
        lap("train-convisa", &mut timings);
        Some(m)
    } else {
        None
    };

    let kinds = cfg.kinds();
    let sets = describe_all(videos.len(), |i| videos[i].render(spec), &kinds, model.as_ref(), cfg)?;
    lap("describe", &mut timings);

    let train_sets: Vec<_> = train.iter().map(|&i| sets[i].clone()).collect();
    let encoder = train_encoder(&train_sets, &cfg.encoder_config(), cfg.seed)?;
    let reps = encoder.encode_all(&sets)?;
    lap("encode", &mut timings);

    let labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
    let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let fits = ova_train(rows_of(&reps, &train).view(), &train_labels, spec.classes, &cfg.svm_opts())?;
    let models: Vec<LinearModel> = fits.into_iter().map(|f| f.model).collect();
    let scores = ova_predict(&models, rows_of(&reps, &test).view());
    lap("svm", &mut timings);

    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let truth_sets: Vec<Vec<usize>> = truth.iter().map(|&l| vec![l]).collect();
    let macc = eval_macc(scores.view(), &truth)?;
    let map = eval_map(scores.view(), &truth_sets)?;

    let mir = mir_rerank(scores.view(), &cfg.mir_params())?;
    let fused = rank_score_fuse(mir.scores.view(), scores.view())?;
    let macc_mir = eval_macc(fused.view(), &truth)?;
    let map_mir = eval_map(fused.view(), &truth_sets)?;
    lap("mir", &mut timings);

    Ok(BenchReport {
        classes: spec.classes,
        train_videos: train.len(),
        test_videos: test.len(),
        representation_dim: reps.ncols(),
        macc,
        map,
        macc_mir,
        map_mir,
        mir_iterations: mir.iterations,
        timings,
    })
}
