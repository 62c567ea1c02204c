//! Linear one-vs-all SVMs trained by dual coordinate descent, score matrices,
//! and mean accuracy / mean average precision.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::container::{ContainerError, Tensor, TensorContainer};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("class {0} has no instances")]
    EmptyClass(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed score CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Array1<f64>,
    pub b: f64,
}

impl LinearModel {
    pub fn decision(&self, x: ArrayView1<f64>) -> f64 {
        self.w.dot(&x) + self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmOpts {
    pub c: f64,
    /// Duality-gap tolerance as a fraction of `C * N`.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmOpts {
    fn default() -> Self {
        SvmOpts {
            c: 100.0,
            tol: 1e-3,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvmFit {
    pub model: LinearModel,
    pub primal: f64,
    pub dual: f64,
    pub epochs: usize,
    pub converged: bool,
}

impl SvmFit {
    pub fn gap(&self) -> f64 {
        self.primal - self.dual
    }
}

/// Primal hinge objective with the bias treated as an extra weight.
pub fn svm_primal(x: ArrayView2<f64>, y: &[f64], model: &LinearModel, c: f64) -> f64 {
    let hinge: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(r, &yi)| (1.0 - yi * model.decision(r)).max(0.0))
        .sum();
    0.5 * (model.w.dot(&model.w) + model.b * model.b) + c * hinge
}

/// Minimizes `0.5 |w|^2 + 0.5 b^2 + C sum max(0, 1 - y (w x + b))` over labels in {-1, +1}.
pub fn svm_train(x: ArrayView2<f64>, y: &[f64], opts: &SvmOpts) -> Result<SvmFit, ClassifyError> {
    let (n, dim) = x.dim();
    if y.len() != n {
        return Err(ClassifyError::Shape(format!("{n} rows but {} labels", y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ClassifyError::NonFinite("features"));
    }
    if !y.iter().any(|&v| v > 0.0) || !y.iter().any(|&v| v < 0.0) {
        return Err(ClassifyError::SingleClass);
    }
    let c = opts.c;
    let qii: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = Array1::<f64>::zeros(dim);
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tol = opts.tol * c * n as f64;
    let mut fit = None;
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (w.dot(&xi) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y[i];
                w.scaled_add(step, &xi);
                b += step;
            }
        }
        let model = LinearModel { w: w.clone(), b };
        let primal = svm_primal(x, y, &model, c);
        let dual = alpha.iter().sum::<f64>() - 0.5 * (w.dot(&w) + b * b);
        let converged = primal - dual <= tol;
        if converged || epoch == opts.max_epochs {
            fit = Some(SvmFit {
                model,
                primal,
                dual,
                epochs: epoch,
                converged,
            });
            break;
        }
    }
    let fit = fit.expect("max_epochs >= 1");
    if !fit.primal.is_finite() {
        return Err(ClassifyError::NonFinite("SVM objective"));
    }
    Ok(fit)
}

fn check_labels(labels: &[usize], k: usize) -> Result<(), ClassifyError> {
    if k < 2 {
        return Err(ClassifyError::SingleClass);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(ClassifyError::Shape(format!("label {l} outside {k} classes")));
        }
        counts[l] += 1;
    }
    match counts.iter().position(|&c| c == 0) {
        Some(c) => Err(ClassifyError::EmptyClass(c)),
        None => Ok(()),
    }
}

/// One binary model per class, trained class-vs-rest in parallel.
pub fn ova_train(x: ArrayView2<f64>, labels: &[usize], k: usize, opts: &SvmOpts) -> Result<Vec<SvmFit>, ClassifyError> {
    check_labels(labels, k)?;
    (0..k)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            let o = SvmOpts {
                seed: opts.seed.wrapping_add(c as u64),
                ..*opts
            };
            svm_train(x, &y, &o)
        })
        .collect()
}

/// Raw decision values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Array2<f64>,
    pub class_names: Vec<String>,
    pub instance_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(scores: Array2<f64>, class_names: Vec<String>, instance_ids: Vec<String>) -> Result<Self, ClassifyError> {
        if scores.ncols() != class_names.len() || scores.nrows() != instance_ids.len() {
            return Err(ClassifyError::Shape(format!(
                "{}x{} scores for {} instances and {} classes",
                scores.nrows(),
                scores.ncols(),
                instance_ids.len(),
                class_names.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(ClassifyError::NonFinite("scores"));
        }
        Ok(ScoreMatrix {
            scores,
            class_names,
            instance_ids,
        })
    }

    /// Same labels, new values.
    pub fn with_scores(&self, scores: Array2<f64>) -> Result<Self, ClassifyError> {
        ScoreMatrix::new(scores, self.class_names.clone(), self.instance_ids.clone())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance_id");
        for c in &self.class_names {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (id, row) in self.instance_ids.iter().zip(self.scores.rows()) {
            s.push_str(id);
            for v in row {
                // shortest representation that round-trips
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, ClassifyError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(ClassifyError::Csv {
            line: 1,
            reason: "empty file".into(),
        })?;
        let mut cols = header.split(',').map(str::trim);
        if cols.next() != Some("instance_id") {
            return Err(ClassifyError::Csv {
                line: 1,
                reason: "header must start with instance_id".into(),
            });
        }
        let class_names: Vec<String> = cols.map(String::from).collect();
        let k = class_names.len();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != k + 1 {
                return Err(ClassifyError::Csv {
                    line: i + 1,
                    reason: format!("expected {} fields, found {}", k + 1, fields.len()),
                });
            }
            ids.push(fields[0].to_string());
            for f in &fields[1..] {
                values.push(f.parse::<f64>().map_err(|e| ClassifyError::Csv {
                    line: i + 1,
                    reason: format!("`{f}`: {e}"),
                })?);
            }
        }
        let n = ids.len();
        if n == 0 || k == 0 {
            return Err(ClassifyError::Csv {
                line: 1,
                reason: "no instances or no classes".into(),
            });
        }
        let scores = Array2::from_shape_vec((n, k), values).expect("counted fields");
        ScoreMatrix::new(scores, class_names, ids)
    }
}

/// Scores `w_k . x + b_k` for every instance and class.
pub fn ova_predict(models: &[LinearModel], x: ArrayView2<f64>) -> Array2<f64> {
    let mut scores = Array2::zeros((x.nrows(), models.len()));
    for (c, m) in models.iter().enumerate() {
        let mut col = scores.column_mut(c);
        for (o, row) in col.iter_mut().zip(x.rows()) {
            *o = m.decision(row);
        }
    }
    scores
}

pub fn models_to_container(models: &[LinearModel], class_names: &[String]) -> TensorContainer {
    let dim = models.first().map_or(0, |m| m.w.len());
    let mut w = Array2::zeros((models.len(), dim));
    for (mut r, m) in w.rows_mut().into_iter().zip(models) {
        r.assign(&m.w);
    }
    let b: Vec<f64> = models.iter().map(|m| m.b).collect();
    let mut c = TensorContainer::new();
    c.insert("w", Tensor::from_array2(&w)).unwrap();
    c.insert("b", Tensor::from_slice(&b)).unwrap();
    // class names as UTF-8 bytes separated by newlines
    let names: Vec<f32> = class_names.join("\n").bytes().map(|b| b as f32).collect();
    c.insert("class_names", Tensor::f32(vec![names.len()], names)).unwrap();
    c
}

pub fn models_from_container(c: &TensorContainer) -> Result<(Vec<LinearModel>, Vec<String>), ClassifyError> {
    let w = c.array2("w")?;
    let b = c.f64_vec("b")?;
    if b.len() != w.nrows() {
        return Err(ClassifyError::Shape("bias count differs from weight rows".into()));
    }
    let bytes: Vec<u8> = c.f64_vec("class_names")?.iter().map(|&v| v as u8).collect();
    let names: Vec<String> = String::from_utf8(bytes)
        .map_err(|_| ClassifyError::Shape("class names are not UTF-8".into()))?
        .split('\n')
        .map(String::from)
        .collect();
    if names.len() != w.nrows() {
        return Err(ClassifyError::Shape("class name count differs from models".into()));
    }
    let models = w
        .rows()
        .into_iter()
        .zip(b)
        .map(|(r, b)| LinearModel { w: r.to_owned(), b })
        .collect();
    Ok((models, names))
}

/// Row argmax with ties going to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over classes of the fraction of the class's instances whose row argmax is the class.
pub fn eval_macc(scores: ArrayView2<f64>, truth: &[usize]) -> Result<f64, ClassifyError> {
    let k = scores.ncols();
    if truth.len() != scores.nrows() {
        return Err(ClassifyError::Shape(format!(
            "{} truth labels for {} instances",
            truth.len(),
            scores.nrows()
        )));
    }
    check_labels(truth, k).or_else(|e| match e {
        ClassifyError::SingleClass if k == 1 => Ok(()),
        e => Err(e),
    })?;
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (row, &t) in scores.rows().into_iter().zip(truth) {
        total[t] += 1;
        if argmax(row) == t {
            correct[t] += 1;
        }
    }
    Ok(correct.iter().zip(&total).map(|(&c, &t)| c as f64 / t as f64).sum::<f64>() / k as f64)
}

/// Average precision of one ranked column; ties keep instance order.
pub fn average_precision(scores: ArrayView1<f64>, positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Mean over classes of average precision; `truth[i]` lists every class of instance `i`.
pub fn eval_map(scores: ArrayView2<f64>, truth: &[Vec<usize>]) -> Result<f64, ClassifyError> {
    let (n, k) = scores.dim();
    if truth.len() != n {
        return Err(ClassifyError::Shape(format!("{} truth rows for {n} instances", truth.len())));
    }
    let mut total = 0.0;
    for c in 0..k {
        let pos: Vec<bool> = truth.iter().map(|t| t.contains(&c)).collect();
        if !pos.iter().any(|&p| p) {
            return Err(ClassifyError::EmptyClass(c));
        }
        total += average_precision(scores.column(c), &pos);
    }
    Ok(total / k as f64)
}
