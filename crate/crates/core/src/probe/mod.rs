//! Linear probing of frozen embeddings: fold protocols, per-fold feature
//! standardization, logistic / ridge heads, and metric aggregation.
//!
//! Everything here is deterministic given the task and config seeds; folds
//! are evaluated in parallel but reduced in fold order.

mod logistic;
mod metrics;
mod ridge;

pub use logistic::{logistic_fit, LogisticModel, LOGISTIC_MAX_ITER, LOGISTIC_TOL};
pub use metrics::{classification_metrics, pcc, ClassificationMetrics};
pub use ridge::ridge_fit;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::rng;
use crate::tensor::{Tensor, TensorError};

/// Inner split count for the l2 sweep.
const INNER_K: usize = 5;
/// Features with (population) standard deviation below this are treated as
/// constant and mapped to zero rather than blown up.
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe input: {0}")]
    Config(String),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("class {class} has {got} members; {need}-fold stratification needs at least {need}")]
    TooFewPerClass {
        class: usize,
        got: usize,
        need: usize,
    },
    #[error("fold `{fold}` has no training samples of class {class}")]
    MissingClass { fold: String, class: usize },
    #[error("zero variance in {what}")]
    ZeroVariance { what: String },
    #[error("singular system: {0}")]
    Singular(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// One train/test split over row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Splitter {
    StratifiedKfold { k: usize, seed: u64 },
    LeaveOneSlideOut,
}

/// Class-stratified k-fold: each class is shuffled under its own stream and
/// dealt round-robin, so per-fold class counts differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(ProbeError::Config(format!("k = {k} folds, need at least 2")));
    }
    if labels.is_empty() {
        return Err(ProbeError::Config("no samples to split".into()));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(ProbeError::Config(format!(
                "labels are not contiguous: class {c} is absent"
            )));
        }
        if members.len() < k {
            return Err(ProbeError::TooFewPerClass {
                class: c,
                got: members.len(),
                need: k,
            });
        }
    }

    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut r = rng::substream(seed, &format!("fold/class{c}"));
        members.shuffle(&mut r);
        for (i, &idx) in members.iter().enumerate() {
            tests[i % k].push(idx);
        }
    }

    let n = labels.len();
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(j, mut test)| {
            test.sort_unstable();
            let mut in_test = vec![false; n];
            for &i in &test {
                in_test[i] = true;
            }
            Fold {
                name: format!("fold{j}"),
                train: (0..n).filter(|&i| !in_test[i]).collect(),
                test,
            }
        })
        .collect())
}

/// Unstratified seeded k-fold, used for regression targets.
fn plain_kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || n < k {
        return Err(ProbeError::Config(format!(
            "cannot split {n} samples into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "fold/plain"));
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &idx) in order.iter().enumerate() {
        tests[i % k].push(idx);
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(j, mut test)| {
            test.sort_unstable();
            let mut in_test = vec![false; n];
            for &i in &test {
                in_test[i] = true;
            }
            Fold {
                name: format!("fold{j}"),
                train: (0..n).filter(|&i| !in_test[i]).collect(),
                test,
            }
        })
        .collect())
}

/// One fold per distinct slide, named after it, in sorted slide order.
pub fn leave_one_slide_out(slides: &[String]) -> Result<Vec<Fold>> {
    let mut unique: Vec<&String> = slides.iter().collect();
    unique.sort();
    unique.dedup();
    if unique.len() < 2 {
        return Err(ProbeError::Config(format!(
            "leave-one-slide-out needs at least 2 slides, found {}",
            unique.len()
        )));
    }
    Ok(unique
        .into_iter()
        .map(|slide| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..slides.len()).partition(|&i| &slides[i] == slide);
            Fold {
                name: slide.clone(),
                train,
                test,
            }
        })
        .collect())
}

/// Per-feature affine standardization with statistics taken only from the
/// rows given to [`Scaler::fit`].
#[derive(Debug, Clone)]
pub struct Scaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Tensor, rows: &[usize]) -> Result<Scaler> {
        let (n, d) = expect_rank2(x)?;
        if rows.is_empty() {
            return Err(ProbeError::Config("scaler fit on zero rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(ProbeError::Config(format!(
                "row {bad} out of range for {n} samples"
            )));
        }
        let data = x.data();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (j, v) in mean.iter_mut().enumerate() {
                *v += data[r * d + j];
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        let mut var = vec![0.0; d];
        for &r in rows {
            for (j, v) in var.iter_mut().enumerate() {
                let c = data[r * d + j] - mean[j];
                *v += c * c;
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / m).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Scaler { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Standardizes the selected rows into a fresh `[rows.len(), d]` tensor.
    pub fn transform_rows(&self, x: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (n, d) = expect_rank2(x)?;
        if d != self.mean.len() {
            return Err(ProbeError::Config(format!(
                "scaler fitted on {} features, got {d}",
                self.mean.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(ProbeError::Config(format!(
                "row {bad} out of range for {n} samples"
            )));
        }
        let data = x.data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            for j in 0..d {
                out.push((data[r * d + j] - self.mean[j]) / self.std[j]);
            }
        }
        Ok(Tensor::from_vec(&[rows.len(), d], out)?)
    }
}

fn expect_rank2(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(ProbeError::Config(format!(
            "expected a [n, d] matrix, got {other:?}"
        ))),
    }
}

/// What the probe predicts from the frozen embeddings.
#[derive(Debug, Clone)]
pub enum Targets {
    /// Contiguous class labels `0..classes`.
    Labels(Vec<usize>),
    /// Raw gene counts `[n, genes]`; the probe regresses `log1p(counts)`.
    GeneCounts { counts: Tensor, genes: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct ProbeTask {
    /// `[n, d]` frozen embeddings.
    pub embeddings: Tensor,
    pub targets: Targets,
    /// Slide id per row; required for leave-one-slide-out, otherwise may be
    /// empty.
    pub slides: Vec<String>,
    pub splitter: Splitter,
}

impl ProbeTask {
    pub fn validate(&self) -> Result<()> {
        let (n, _) = expect_rank2(&self.embeddings)?;
        if n < 2 {
            return Err(ProbeError::Config(format!("{n} samples is too few")));
        }
        match &self.targets {
            Targets::Labels(labels) => {
                if labels.len() != n {
                    return Err(ProbeError::Config(format!(
                        "{n} embeddings but {} labels",
                        labels.len()
                    )));
                }
                let classes = labels.iter().max().unwrap() + 1;
                if classes < 2 {
                    return Err(ProbeError::SingleClass);
                }
                let mut seen = vec![false; classes];
                for &c in labels {
                    seen[c] = true;
                }
                if let Some(c) = seen.iter().position(|&s| !s) {
                    return Err(ProbeError::Config(format!(
                        "labels are not contiguous: class {c} is absent"
                    )));
                }
            }
            Targets::GeneCounts { counts, genes } => {
                let (cn, g) = expect_rank2(counts)?;
                if cn != n {
                    return Err(ProbeError::Config(format!(
                        "{n} embeddings but {cn} count rows"
                    )));
                }
                if g == 0 || genes.len() != g {
                    return Err(ProbeError::Config(format!(
                        "{g} count columns but {} gene names",
                        genes.len()
                    )));
                }
                if let Some(bad) = counts
                    .data()
                    .iter()
                    .find(|v| !v.is_finite() || **v < 0.0)
                {
                    return Err(ProbeError::Config(format!(
                        "gene counts must be finite and non-negative, found {bad}"
                    )));
                }
            }
        }
        if self.splitter == Splitter::LeaveOneSlideOut && self.slides.len() != n {
            return Err(ProbeError::Config(format!(
                "{n} embeddings but {} slide ids",
                self.slides.len()
            )));
        }
        Ok(())
    }

    pub fn folds(&self) -> Result<Vec<Fold>> {
        self.validate()?;
        let (n, _) = expect_rank2(&self.embeddings)?;
        match (self.splitter, &self.targets) {
            (Splitter::StratifiedKfold { k, seed }, Targets::Labels(labels)) => {
                stratified_kfold(labels, k, seed)
            }
            (Splitter::StratifiedKfold { k, seed }, Targets::GeneCounts { .. }) => {
                plain_kfold(n, k, seed)
            }
            (Splitter::LeaveOneSlideOut, _) => leave_one_slide_out(&self.slides),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// Candidate l2 penalties for the logistic head, swept on an inner
    /// split of each training fold. A single-element grid disables the
    /// sweep.
    pub l2_grid: Vec<f64>,
    /// Fixed penalty for the ridge head.
    pub ridge_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
            ridge_lambda: 1.0,
            max_iter: LOGISTIC_MAX_ITER,
            tol: LOGISTIC_TOL,
            seed: 0,
        }
    }
}

/// Mean and sample standard deviation over folds. Per-fold entries may be
/// NaN where a metric was undefined; the mean and sd skip those.
#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub per_fold: Vec<f64>,
}

impl MetricSummary {
    pub fn new(per_fold: Vec<f64>) -> Self {
        let finite: Vec<f64> = per_fold.iter().copied().filter(|v| v.is_finite()).collect();
        let (mean, sd) = if finite.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = finite.iter().sum::<f64>() / finite.len() as f64;
            let sd = if finite.len() < 2 {
                0.0
            } else {
                (finite.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / (finite.len() - 1) as f64)
                    .sqrt()
            };
            (m, sd)
        };
        Self { mean, sd, per_fold }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationReport {
    pub fold_names: Vec<String>,
    pub fold_metrics: Vec<ClassificationMetrics>,
    pub balanced_accuracy: MetricSummary,
    pub auc: MetricSummary,
    pub aupr: MetricSummary,
    pub f1_macro: MetricSummary,
    pub f1_weighted: MetricSummary,
    /// Penalty picked per fold, in fold order.
    pub chosen_l2: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionReport {
    pub fold_names: Vec<String>,
    pub genes: Vec<String>,
    /// Mean test PCC per gene over the folds where it was defined; `None`
    /// when it was defined on no fold.
    pub per_gene_pcc: Vec<Option<f64>>,
    /// Fold means of the per-gene PCC.
    pub mean_pcc: MetricSummary,
    /// Count of (fold, gene) pairs skipped for zero variance.
    pub excluded: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub enum ProbeReport {
    Classification(ClassificationReport),
    Regression(RegressionReport),
}

fn take<T: Copy>(xs: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| xs[i]).collect()
}

fn balanced_acc(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let classes = y_true.iter().max().map_or(0, |&c| c + 1);
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        total[t] += 1;
        if t == p {
            hit[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        if total[c] > 0 {
            sum += hit[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    sum / present as f64
}

/// Picks the grid penalty with the best balanced accuracy on one inner
/// holdout of the (already standardized) training fold. The inner split
/// reuses the outer-fold feature scaling; nothing outside the training rows
/// is touched. Ties keep the earliest grid entry.
fn choose_l2(
    xtr: &Tensor,
    ytr: &[usize],
    cfg: &ProbeConfig,
    fold_name: &str,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    if cfg.l2_grid.is_empty() {
        return Err(ProbeError::Config("empty l2 grid".into()));
    }
    if let Some(bad) = cfg.l2_grid.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(ProbeError::Config(format!("invalid l2 candidate {bad}")));
    }
    if cfg.l2_grid.len() == 1 {
        return Ok(cfg.l2_grid[0]);
    }
    let inner_seed = rng::stream_seed(cfg.seed, &format!("inner/{fold_name}"));
    let inner = match stratified_kfold(ytr, INNER_K, inner_seed) {
        Ok(folds) => folds,
        Err(e) => {
            warnings.push(format!(
                "fold `{fold_name}`: no inner split for the l2 sweep ({e}); using l2 = {}",
                cfg.l2_grid[0]
            ));
            return Ok(cfg.l2_grid[0]);
        }
    };
    // One holdout is enough to rank a coarse grid.
    let holdout = &inner[0];
    let d = xtr.shape()[1];
    let xin = Tensor::from_vec(
        &[holdout.train.len(), d],
        take_rows(xtr.data(), d, &holdout.train),
    )?;
    let xval = Tensor::from_vec(
        &[holdout.test.len(), d],
        take_rows(xtr.data(), d, &holdout.test),
    )?;
    let yin = take(ytr, &holdout.train);
    let yval = take(ytr, &holdout.test);

    let mut best = (f64::NEG_INFINITY, cfg.l2_grid[0]);
    for &l2 in &cfg.l2_grid {
        let model = logistic_fit(&xin, &yin, l2, cfg.max_iter, cfg.tol)?;
        let acc = balanced_acc(&yval, &model.predict(&xval)?);
        if acc > best.0 {
            best = (acc, l2);
        }
    }
    Ok(best.1)
}

fn take_rows(data: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&data[r * d..(r + 1) * d]);
    }
    out
}

fn run_classification(
    task: &ProbeTask,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ClassificationReport> {
    let folds = task.folds()?;
    let classes = labels.iter().max().unwrap() + 1;
    for fold in &folds {
        let mut seen = vec![false; classes];
        for &i in &fold.train {
            seen[labels[i]] = true;
        }
        if let Some(class) = seen.iter().position(|&s| !s) {
            return Err(ProbeError::MissingClass {
                fold: fold.name.clone(),
                class,
            });
        }
    }

    struct FoldOutcome {
        metrics: ClassificationMetrics,
        l2: f64,
        warnings: Vec<String>,
    }

    let x = &task.embeddings;
    let outcomes: Vec<Result<FoldOutcome>> = folds
        .par_iter()
        .map(|fold| {
            let scaler = Scaler::fit(x, &fold.train)?;
            let xtr = scaler.transform_rows(x, &fold.train)?;
            let xte = scaler.transform_rows(x, &fold.test)?;
            let ytr = take(labels, &fold.train);
            let yte = take(labels, &fold.test);
            let mut warnings = Vec::new();
            let l2 = choose_l2(&xtr, &ytr, cfg, &fold.name, &mut warnings)?;
            let model = logistic_fit(&xtr, &ytr, l2, cfg.max_iter, cfg.tol)?;
            if !model.converged {
                warnings.push(format!(
                    "fold `{}`: logistic fit stopped at the iteration cap",
                    fold.name
                ));
            }
            let preds = model.predict(&xte)?;
            let proba = model.predict_proba(&xte)?;
            let metrics = classification_metrics(&yte, &preds, &proba)?;
            for w in &metrics.warnings {
                warnings.push(format!("fold `{}`: {w}", fold.name));
            }
            Ok(FoldOutcome {
                metrics,
                l2,
                warnings,
            })
        })
        .collect();

    let mut fold_metrics = Vec::with_capacity(folds.len());
    let mut chosen_l2 = Vec::with_capacity(folds.len());
    let mut warnings = Vec::new();
    for outcome in outcomes {
        let mut o = outcome?;
        fold_metrics.push(o.metrics);
        chosen_l2.push(o.l2);
        warnings.append(&mut o.warnings);
    }

    let summary = |f: fn(&ClassificationMetrics) -> f64| {
        MetricSummary::new(fold_metrics.iter().map(f).collect())
    };
    Ok(ClassificationReport {
        fold_names: folds.into_iter().map(|f| f.name).collect(),
        balanced_accuracy: summary(|m| m.balanced_accuracy),
        auc: summary(|m| m.auc),
        aupr: summary(|m| m.aupr),
        f1_macro: summary(|m| m.f1_macro),
        f1_weighted: summary(|m| m.f1_weighted),
        fold_metrics,
        chosen_l2,
        warnings,
    })
}

fn run_regression(
    task: &ProbeTask,
    counts: &Tensor,
    genes: &[String],
    cfg: &ProbeConfig,
) -> Result<RegressionReport> {
    let folds = task.folds()?;
    let g = genes.len();
    let x = &task.embeddings;
    // The head regresses log1p counts; PCC is invariant to the per-gene
    // affine standardization applied below, so predictions are compared in
    // standardized space against raw log1p targets.
    let y_log: Vec<f64> = counts.data().iter().map(|v| v.ln_1p()).collect();

    struct FoldOutcome {
        per_gene: Vec<Option<f64>>,
        mean: f64,
        excluded: usize,
    }

    let outcomes: Vec<Result<FoldOutcome>> = folds
        .par_iter()
        .map(|fold| {
            let scaler = Scaler::fit(x, &fold.train)?;
            let xtr = scaler.transform_rows(x, &fold.train)?;
            let xte = scaler.transform_rows(x, &fold.test)?;

            let m = fold.train.len() as f64;
            let mut mean = vec![0.0; g];
            for &r in &fold.train {
                for (j, v) in mean.iter_mut().enumerate() {
                    *v += y_log[r * g + j];
                }
            }
            for v in mean.iter_mut() {
                *v /= m;
            }
            let mut var = vec![0.0; g];
            for &r in &fold.train {
                for (j, v) in var.iter_mut().enumerate() {
                    let c = y_log[r * g + j] - mean[j];
                    *v += c * c;
                }
            }
            let std: Vec<f64> = var
                .into_iter()
                .map(|v| (v / m).sqrt().max(STD_FLOOR))
                .collect();

            let mut ytr = Vec::with_capacity(fold.train.len() * g);
            for &r in &fold.train {
                for j in 0..g {
                    ytr.push((y_log[r * g + j] - mean[j]) / std[j]);
                }
            }
            let ytr = Tensor::from_vec(&[fold.train.len(), g], ytr)?;
            let w = ridge_fit(&xtr, &ytr, cfg.ridge_lambda)?;
            let pred = xte.matmul(&w)?;
            let pred = pred.data();

            let mut per_gene = Vec::with_capacity(g);
            let mut excluded = 0usize;
            let mut defined = Vec::new();
            for j in 0..g {
                let truth: Vec<f64> = fold.test.iter().map(|&r| y_log[r * g + j]).collect();
                let guess: Vec<f64> =
                    (0..fold.test.len()).map(|r| pred[r * g + j]).collect();
                match pcc(&truth, &guess) {
                    Ok(v) => {
                        defined.push(v);
                        per_gene.push(Some(v));
                    }
                    Err(ProbeError::ZeroVariance { .. }) => {
                        excluded += 1;
                        per_gene.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            if defined.is_empty() {
                return Err(ProbeError::ZeroVariance {
                    what: format!("every gene in fold `{}`", fold.name),
                });
            }
            Ok(FoldOutcome {
                per_gene,
                mean: defined.iter().sum::<f64>() / defined.len() as f64,
                excluded,
            })
        })
        .collect();

    let mut per_gene_sum = vec![0.0f64; g];
    let mut per_gene_n = vec![0usize; g];
    let mut fold_means = Vec::with_capacity(folds.len());
    let mut excluded = 0usize;
    for outcome in outcomes {
        let o = outcome?;
        fold_means.push(o.mean);
        excluded += o.excluded;
        for (j, v) in o.per_gene.iter().enumerate() {
            if let Some(v) = v {
                per_gene_sum[j] += v;
                per_gene_n[j] += 1;
            }
        }
    }
    let per_gene_pcc = per_gene_sum
        .into_iter()
        .zip(&per_gene_n)
        .map(|(s, &n)| if n > 0 { Some(s / n as f64) } else { None })
        .collect();
    let mut warnings = Vec::new();
    if excluded > 0 {
        warnings.push(format!(
            "{excluded} fold-gene pairs skipped for zero variance"
        ));
    }
    Ok(RegressionReport {
        fold_names: folds.into_iter().map(|f| f.name).collect(),
        genes: genes.to_vec(),
        per_gene_pcc,
        mean_pcc: MetricSummary::new(fold_means),
        excluded,
        warnings,
    })
}

/// Runs the full probing protocol: split, per-fold standardization, head
/// fit (with the l2 sweep for classification), and metric aggregation.
pub fn run_probe(task: &ProbeTask, cfg: &ProbeConfig) -> Result<ProbeReport> {
    task.validate()?;
    if cfg.max_iter == 0 || !(cfg.tol > 0.0) {
        return Err(ProbeError::Config(format!(
            "max_iter {} and tol {} must be positive",
            cfg.max_iter, cfg.tol
        )));
    }
    if !(cfg.ridge_lambda.is_finite() && cfg.ridge_lambda >= 0.0) {
        return Err(ProbeError::Config(format!(
            "ridge lambda {} must be finite and non-negative",
            cfg.ridge_lambda
        )));
    }
    match &task.targets {
        Targets::Labels(labels) => {
            Ok(ProbeReport::Classification(run_classification(task, labels, cfg)?))
        }
        Targets::GeneCounts { counts, genes } => {
            Ok(ProbeReport::Regression(run_regression(task, counts, genes, cfg)?))
        }
    }
}

/// Gene panel selection: per slide, genes are ranked by descending mean
/// count (ties by name); rank sums across slides pick the panel, again with
/// name tie-breaks. Asking for more genes than exist returns all of them
/// plus a warning.
#[derive(Debug, Clone)]
pub struct GeneSelection {
    pub genes: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn select_target_genes(
    genes: &[String],
    per_slide_counts: &[Tensor],
    top: usize,
) -> Result<GeneSelection> {
    let g = genes.len();
    if g == 0 || per_slide_counts.is_empty() || top == 0 {
        return Err(ProbeError::Config(
            "gene selection needs genes, slides, and a positive panel size".into(),
        ));
    }
    let mut rank_sum = vec![0usize; g];
    for (s, counts) in per_slide_counts.iter().enumerate() {
        let (n, cols) = expect_rank2(counts)?;
        if cols != g || n == 0 {
            return Err(ProbeError::Config(format!(
                "slide {s} counts are [{n}, {cols}], expected columns for {g} genes"
            )));
        }
        let data = counts.data();
        let mut means = vec![0.0f64; g];
        for row in data.chunks_exact(g) {
            for (j, v) in means.iter_mut().enumerate() {
                *v += row[j];
            }
        }
        for v in means.iter_mut() {
            *v /= n as f64;
        }
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| {
            means[b]
                .total_cmp(&means[a])
                .then_with(|| genes[a].cmp(&genes[b]))
        });
        for (rank, &j) in order.iter().enumerate() {
            rank_sum[j] += rank;
        }
    }
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| rank_sum[a].cmp(&rank_sum[b]).then_with(|| genes[a].cmp(&genes[b])));
    let mut warnings = Vec::new();
    if top > g {
        warnings.push(format!("requested {top} genes, only {g} available"));
    }
    Ok(GeneSelection {
        genes: order.into_iter().take(top).map(|j| genes[j].clone()).collect(),
        warnings,
    })
}

/// Uniform without-replacement subsample of `0..total`, at most `n` items,
/// sorted. The draw is keyed by slide so adding a slide never changes
/// another slide's selection.
pub fn subsample_cells(total: usize, n: usize, slide_id: &str, seed: u64) -> Vec<usize> {
    if total <= n {
        return (0..total).collect();
    }
    let mut r = rng::substream(seed, &format!("subsample/{slide_id}"));
    let mut idx = rand::seq::index::sample(&mut r, total, n).into_vec();
    idx.sort_unstable();
    idx
}
