use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ndarray::{Array2, Axis};

use trajisa::bench::{run_bench, BenchSpec};
use trajisa::classify::{
    eval_macc, eval_map, models_from_container, models_to_container, ova_predict, ova_train, LinearModel, ScoreMatrix,
};
use trajisa::config::PipelineConfig;
use trajisa::container::{Tensor, TensorContainer};
use trajisa::convisa::TwoStreamModel;
use trajisa::descriptors::DescriptorKind;
use trajisa::encoding::{train_encoder, DescriptorSet, FisherEncoder};
use trajisa::manifest::{DatasetManifest, Split, VideoRecord};
use trajisa::mir::{mir_rerank, rank_score_fuse};
use trajisa::pipeline::{describe_video, filter_grids, track, train_convisa};
use trajisa::trajectory::{trajectories_to_csv, PIXEL_VOLUME_LEN, FLOW_VOLUME_LEN};
use trajisa::video::write_pgm;
use trajisa::Error;

#[derive(Parser)]
#[command(name = "trajisa", version, about = "Action recognition with dense trajectories and stacked ConvISA features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the reduced desk-scale defaults instead of the full ones.
    #[arg(long)]
    desk: bool,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match (&self.config, self.desk) {
            (Some(p), _) => PipelineConfig::load(p)?,
            (None, true) => PipelineConfig::desk(),
            (None, false) => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn select(self, m: &DatasetManifest) -> Vec<VideoRecord> {
        match self {
            SplitArg::Train => m.split(Split::Train),
            SplitArg::Test => m.split(Split::Test),
            SplitArg::All => m.records(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Trajectories, optional volumes and hand-crafted descriptors per video.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Also write the unskipped pixel and flow volumes.
        #[arg(long)]
        volumes: bool,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Trains the two-stream ConvISA model on volumes of the training split.
    TrainConvisa {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// LOP and LOF descriptors per video.
    Describe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Trains the per-kind PCA and GMM on training-split descriptors.
    TrainEncoder {
        #[arg(long)]
        manifest: PathBuf,
        /// Directories holding `<id>.hand.tcn` / `<id>.learned.tcn`.
        #[arg(long, required = true)]
        descriptors: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Fisher vector representation per video.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required = true)]
        descriptors: Vec<PathBuf>,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// One-vs-all linear SVMs on training-split representations.
    TrainSvm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        representations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Score matrix CSV for every representation row, or one split.
    Predict {
        #[arg(long)]
        representations: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict rows to a split of this manifest.
        #[arg(long, requires = "split")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Iterative re-ranking of a score matrix, fused with the original scores.
    Mir {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the re-ranked matrix without fusion.
        #[arg(long)]
        no_fuse: bool,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Mean per-class accuracy and mean average precision.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// CSV `instance_id,labels` with `;`-separated class names.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        truth: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// End-to-end run on generated motion-class videos.
    BenchSynthetic {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        videos_per_class: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Pipeline configuration; the desk-scale defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Layer-1 filters of both streams as PGM grids.
    ExportFilters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(p: &Path) -> Result<(), Error> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<(), Error> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn read_text(p: &Path) -> Result<String, Error> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

fn load_container(p: &Path) -> Result<TensorContainer, Error> {
    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
    Ok(TensorContainer::from_bytes(&bytes)?)
}

fn save_container(c: &TensorContainer, p: &Path) -> Result<(), Error> {
    fs::write(p, c.to_bytes()).map_err(|e| Error::io(p, e))
}

fn ids_path(reps: &Path) -> PathBuf {
    reps.with_extension("ids.csv")
}

fn hand_kinds(cfg: &PipelineConfig) -> Vec<DescriptorKind> {
    cfg.kinds()
        .into_iter()
        .filter(|k| !matches!(k, DescriptorKind::Lop | DescriptorKind::Lof))
        .collect()
}

fn learned_kinds(cfg: &PipelineConfig) -> Vec<DescriptorKind> {
    let k: Vec<_> = cfg
        .kinds()
        .into_iter()
        .filter(|k| matches!(k, DescriptorKind::Lop | DescriptorKind::Lof))
        .collect();
    if k.is_empty() {
        vec![DescriptorKind::Lop, DescriptorKind::Lof]
    } else {
        k
    }
}

fn volumes_container(level: &trajisa::pipeline::LevelTracks) -> Result<TensorContainer, Error> {
    let n = level.len();
    let mut pix = Vec::with_capacity(n * PIXEL_VOLUME_LEN);
    let mut flo = Vec::with_capacity(n * FLOW_VOLUME_LEN);
    for i in 0..n {
        pix.extend(level.pixel_volume(i).data);
        flo.extend(level.flow_volume(i).data);
    }
    let mut c = TensorContainer::new();
    c.insert("pixel", Tensor::f32(vec![n, PIXEL_VOLUME_LEN], pix))?;
    c.insert("flow", Tensor::f32(vec![n, FLOW_VOLUME_LEN], flo))?;
    Ok(c)
}

/// Merged descriptor sets of `rec` across `dirs`, restricted to the configured kinds.
fn load_descriptors(dirs: &[PathBuf], rec: &VideoRecord, kinds: &[DescriptorKind]) -> Result<DescriptorSet, Error> {
    let mut merged: Option<DescriptorSet> = None;
    for dir in dirs {
        for suffix in ["hand", "learned"] {
            let p = dir.join(format!("{}.{suffix}.tcn", rec.id));
            if !p.exists() {
                continue;
            }
            let set = DescriptorSet::from_container(&load_container(&p)?)?;
            merged = Some(match merged {
                None => set,
                Some(m) => m.merge_kinds(set)?,
            });
        }
    }
    let set = merged.ok_or_else(|| Error::Data(format!("no descriptor files for video {}", rec.id)))?;
    Ok(set.select(kinds)?)
}

fn read_ids(p: &Path) -> Result<Vec<String>, Error> {
    let text = read_text(p)?;
    let mut ids = Vec::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        let (row, id) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("{}: malformed line {}", p.display(), i + 2)))?;
        if row.trim().parse::<usize>().ok() != Some(i) {
            return Err(Error::Data(format!("{}: rows out of order at line {}", p.display(), i + 2)));
        }
        ids.push(id.trim().to_string());
    }
    Ok(ids)
}

fn load_representations(p: &Path) -> Result<(Array2<f64>, Vec<String>), Error> {
    let reps = load_container(p)?.array2("representations")?;
    let ids = read_ids(&ids_path(p))?;
    if ids.len() != reps.nrows() {
        return Err(Error::Data(format!(
            "{} rows but {} ids in {}",
            reps.nrows(),
            ids.len(),
            ids_path(p).display()
        )));
    }
    Ok((reps, ids))
}

fn row_index(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

fn truth_from_csv(text: &str, classes: &[String]) -> Result<HashMap<String, Vec<usize>>, Error> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, labels) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("truth line {}: expected `instance_id,labels`", i + 1)))?;
        let mut idx = Vec::new();
        for l in labels.split(';').map(str::trim).filter(|l| !l.is_empty()) {
            let c = classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| Error::Data(format!("truth line {}: unknown class {l:?}", i + 1)))?;
            idx.push(c);
        }
        if idx.is_empty() {
            return Err(Error::Data(format!("truth line {}: no labels", i + 1)));
        }
        out.insert(id.trim().to_string(), idx);
    }
    Ok(out)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Extract {
            manifest,
            out,
            split,
            volumes,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(&manifest)?;
            create_dir(&out)?;
            let kinds = hand_kinds(&cfg);
            for rec in split.select(&m) {
                let video = rec.load()?;
                let level = track(&video, &cfg)?;
                write_text(
                    &out.join(format!("{}.traj.csv", rec.id)),
                    &trajectories_to_csv(&level.trajectories),
                )?;
                if volumes {
                    save_container(&volumes_container(&level)?, &out.join(format!("{}.vol.tcn", rec.id)))?;
                }
                drop(level);
                let (set, report) = describe_video(&video, &kinds, None, &cfg)?;
                info!("{}: {} descriptors, skips used {:?}", rec.id, set.len(), report.used);
                save_container(&set.to_container(), &out.join(format!("{}.hand.tcn", rec.id)))?;
            }
            Ok(())
        }
        Command::TrainConvisa { manifest, out, cfg } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(&manifest)?;
            let train = m.split(Split::Train);
            let model = train_convisa(train.len(), |i| train[i].load(), &cfg)?;
            save_container(&model.to_container(), &out)
        }
        Command::Describe {
            manifest,
            model,
            out,
            split,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(&manifest)?;
            let model = TwoStreamModel::from_container(&load_container(&model)?)?;
            create_dir(&out)?;
            let kinds = learned_kinds(&cfg);
            for rec in split.select(&m) {
                let (set, _) = describe_video(&rec.load()?, &kinds, Some(&model), &cfg)?;
                info!("{}: {} descriptors", rec.id, set.len());
                save_container(&set.to_container(), &out.join(format!("{}.learned.tcn", rec.id)))?;
            }
            Ok(())
        }
        Command::TrainEncoder {
            manifest,
            descriptors,
            out,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(&manifest)?;
            let kinds = cfg.kinds();
            let sets = m
                .split(Split::Train)
                .iter()
                .map(|r| load_descriptors(&descriptors, r, &kinds))
                .collect::<Result<Vec<_>, _>>()?;
            let enc = train_encoder(&sets, &cfg.encoder_config(), cfg.seed)?;
            save_container(&enc.to_container(), &out)
        }
        Command::Encode {
            manifest,
            descriptors,
            encoder,
            out,
            split,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(&manifest)?;
            let enc = FisherEncoder::from_container(&load_container(&encoder)?)?;
            let kinds = cfg.kinds();
            let recs = split.select(&m);
            let mut reps = Array2::zeros((recs.len(), enc.output_dim()));
            let mut ids = String::from("row,video_id\n");
            for (i, r) in recs.iter().enumerate() {
                let set = load_descriptors(&descriptors, r, &kinds)?;
                reps.row_mut(i).assign(&enc.encode(&set)?);
                ids.push_str(&format!("{i},{}\n", r.id));
            }
            let mut c = TensorContainer::new();
            c.insert("representations", Tensor::from_array2(&reps))?;
            save_container(&c, &out)?;
            write_text(&ids_path(&out), &ids)
        }
        Command::TrainSvm {
            manifest,
            representations,
            out,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let m = DatasetManifest::load(&manifest)?;
            let (reps, ids) = load_representations(&representations)?;
            let index = row_index(&ids);
            let train = m.split(Split::Train);
            let mut rows = Vec::with_capacity(train.len());
            for r in &train {
                rows.push(
                    *index
                        .get(r.id.as_str())
                        .ok_or_else(|| Error::Data(format!("no representation for training video {}", r.id)))?,
                );
            }
            let labels: Vec<usize> = train.iter().map(|r| r.primary_label()).collect();
            let x = reps.select(Axis(0), &rows);
            let fits = ova_train(x.view(), &labels, m.classes.len(), &cfg.svm_opts())?;
            for (c, f) in m.classes.iter().zip(&fits) {
                info!("{c}: {} epochs, duality gap {:.3e}, converged {}", f.epochs, f.gap(), f.converged);
            }
            let models: Vec<LinearModel> = fits.into_iter().map(|f| f.model).collect();
            save_container(&models_to_container(&models, &m.classes), &out)
        }
        Command::Predict {
            representations,
            model,
            out,
            manifest,
            split,
        } => {
            let (reps, ids) = load_representations(&representations)?;
            let (models, classes) = models_from_container(&load_container(&model)?)?;
            let (x, ids) = match (manifest, split) {
                (Some(mp), Some(split)) => {
                    let m = DatasetManifest::load(&mp)?;
                    let index = row_index(&ids);
                    let mut rows = Vec::new();
                    let mut keep = Vec::new();
                    for r in split.select(&m) {
                        let i = *index
                            .get(r.id.as_str())
                            .ok_or_else(|| Error::Data(format!("no representation for video {}", r.id)))?;
                        rows.push(i);
                        keep.push(r.id);
                    }
                    (reps.select(Axis(0), &rows), keep)
                }
                _ => (reps, ids),
            };
            if models.first().is_some_and(|m| m.w.len() != x.ncols()) {
                return Err(Error::Data(format!(
                    "model expects {}-d representations, got {}",
                    models[0].w.len(),
                    x.ncols()
                )));
            }
            let scores = ScoreMatrix::new(ova_predict(&models, x.view()), classes, ids)?;
            write_text(&out, &scores.to_csv())
        }
        Command::Mir {
            scores,
            out,
            no_fuse,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let s = ScoreMatrix::from_csv(&read_text(&scores)?)?;
            let r = mir_rerank(s.scores.view(), &cfg.mir_params())?;
            info!("{} iterations, max changes {:?}", r.iterations, r.max_changes);
            let result = if no_fuse {
                r.scores
            } else {
                rank_score_fuse(r.scores.view(), s.scores.view())?
            };
            write_text(&out, &s.with_scores(result)?.to_csv())
        }
        Command::Eval {
            scores,
            truth,
            manifest,
        } => {
            let s = ScoreMatrix::from_csv(&read_text(&scores)?)?;
            let truth: HashMap<String, Vec<usize>> = match (truth, manifest) {
                (Some(t), _) => truth_from_csv(&read_text(&t)?, &s.class_names)?,
                (None, Some(mp)) => {
                    let m = DatasetManifest::load(&mp)?;
                    if m.classes != s.class_names {
                        return Err(Error::Data("score columns differ from manifest classes".into()));
                    }
                    m.records().into_iter().map(|r| (r.id, r.labels)).collect()
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            let labels = s
                .instance_ids
                .iter()
                .map(|id| {
                    truth
                        .get(id)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("no ground truth for {id}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let primary: Vec<usize> = labels.iter().map(|l| l[0]).collect();
            let macc = eval_macc(s.scores.view(), &primary)?;
            let map = eval_map(s.scores.view(), &labels)?;
            println!("MAcc={macc:.4} MAP={map:.4}");
            Ok(())
        }
        Command::BenchSynthetic {
            classes,
            videos_per_class,
            seed,
            config,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::desk(),
            };
            cfg.seed = seed;
            let spec = BenchSpec {
                classes,
                videos_per_class,
                seed,
                ..BenchSpec::default()
            };
            let report = run_bench(&spec, &cfg)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::ExportFilters { model, out } => {
            let model = TwoStreamModel::from_container(&load_container(&model)?)?;
            create_dir(&out)?;
            for (stream, img) in filter_grids(&model) {
                let p = out.join(format!("{stream}_filters.pgm"));
                write_pgm(&img, &p)?;
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
