//! Exact t-SNE and the report-embedding stages it is applied to.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::{average_embedding, fit_logistic, LogisticConfig, StaticEmbeddingTable};
use crate::corpus::Report;
use crate::error::{Error, Result};
use crate::model::{ReportClassifier, Representation};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            seed: 5,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if !(self.perplexity > 0.0) {
            return Err(Error::Projection("perplexity must be positive".into()));
        }
        if (n_points as f64) < 3.0 * self.perplexity {
            return Err(Error::Projection(format!(
                "{n_points} points are too few for perplexity {} (need at least 3x)",
                self.perplexity
            )));
        }
        if self.iterations < self.exaggeration_iterations.max(250) {
            return Err(Error::Projection("iterations must be at least 250".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Projection("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Row-conditional affinities `p_{j|i}` with their calibrated precisions.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub conditional: Array2<f64>,
    pub beta: Vec<f64>,
    pub entropy: Vec<f64>,
}

pub const ENTROPY_TOLERANCE: f64 = 1e-5;

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let sq = x.map_axis(Axis(1), |r| r.dot(&r));
    let gram = x.dot(&x.t());
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0)
        }
    })
}

fn row_distribution(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (o, &dj)) in out.iter_mut().zip(d).enumerate() {
        *o = if j == i { 0.0 } else { (-(dj - dmin) * beta).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.ln();
        }
    }
    h
}

/// Bisection on each point's precision until the row entropy (natural log)
/// is within [`ENTROPY_TOLERANCE`] of `ln(perplexity)`.
pub fn conditional_affinities(x: &Array2<f64>, perplexity: f64) -> Affinities {
    let n = x.nrows();
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut conditional = Array2::zeros((n, n));
    let mut betas = vec![1.0; n];
    let mut entropies = vec![0.0; n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let di = d.row(i).to_vec();
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = row_distribution(&di, i, beta, &mut row);
        for _ in 0..200 {
            if (h - target).abs() < ENTROPY_TOLERANCE {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = row_distribution(&di, i, beta, &mut row);
        }
        conditional.row_mut(i).assign(&Array1::from(row.clone()));
        betas[i] = beta;
        entropies[i] = h;
    }
    Affinities {
        conditional,
        beta: betas,
        entropy: entropies,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Array2<f64>,
    /// KL(P‖Q) after each iteration, measured against the unexaggerated P.
    pub kl_history: Vec<f64>,
}

/// Exact t-SNE with early exaggeration, momentum and per-coordinate gains.
pub fn tsne(x: &Array2<f64>, cfg: &ProjectionConfig) -> Result<Embedding> {
    let n = x.nrows();
    cfg.validate(n)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Projection("input vectors must be finite".into()));
    }
    let aff = conditional_affinities(x, cfg.perplexity);
    let mut p = &aff.conditional + &aff.conditional.t();
    p /= 2.0 * n as f64;
    p.mapv_inplace(|v| v.max(1e-12));

    let mut y = initial_layout(x, cfg.seed);
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut kl_history = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations {
            cfg.exaggeration
        } else {
            1.0
        };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };

        let (kl, grad) = kl_and_gradient(&p, &y, exaggeration, &mut num);
        kl_history.push(kl);

        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                *gain * 0.8
            };
            *gain = gain.max(0.01);
            *u = momentum * *u - cfg.learning_rate * *gain * g;
        }
        y += &update;
        let centre = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &centre;
    }
    Ok(Embedding { coords: y, kl_history })
}

/// Seeded random linear projection of the centred inputs, rescaled to a
/// standard deviation of 1e-4. Identical inputs start (and stay) together.
fn initial_layout(x: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let r = Array2::from_shape_fn((x.ncols(), 2), |_| normal.sample(&mut rng));
    let centre = x.mean_axis(Axis(0)).expect("non-empty");
    let mut y = (x - &centre).dot(&r);
    let std = y.std(0.0);
    if std > 0.0 {
        y *= 1e-4 / std;
    }
    y
}

/// KL(P‖Q) and its gradient with respect to `y`, with the attractive term
/// scaled by `exaggeration`. `num` is scratch space of shape `n × n`.
fn kl_and_gradient(p: &Array2<f64>, y: &Array2<f64>, exaggeration: f64, num: &mut Array2<f64>) -> (f64, Array2<f64>) {
    let n = y.nrows();
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[[i, 0]] - y[[j, 0]];
            let dy = y[[i, 1]] - y[[j, 1]];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            z += 2.0 * v;
        }
    }
    let mut grad = Array2::<f64>::zeros((n, 2));
    let mut kl = 0.0;
    for i in 0..n {
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..n {
            if i == j {
                continue;
            }
            let q = (num[[i, j]] / z).max(1e-12);
            let pij = p[[i, j]];
            kl += pij * (pij / q).ln();
            let w = (exaggeration * pij - q) * num[[i, j]];
            gx += w * (y[[i, 0]] - y[[j, 0]]);
            gy += w * (y[[i, 1]] - y[[j, 1]]);
        }
        grad[[i, 0]] = 4.0 * gx;
        grad[[i, 1]] = 4.0 * gy;
    }
    (kl, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub report_id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_prob: Option<f64>,
}

/// One report's vector plus the metadata carried onto its projected point.
#[derive(Debug, Clone)]
pub struct ReportVector {
    pub report_id: String,
    pub vector: Vec<f64>,
    pub label: Option<String>,
    pub predicted_prob: Option<f64>,
}

pub fn project(items: &[ReportVector], cfg: &ProjectionConfig) -> Result<Vec<ProjectedPoint>> {
    let dim = items.first().map_or(0, |i| i.vector.len());
    if items.iter().any(|i| i.vector.len() != dim) {
        return Err(Error::Projection("vectors have differing dimensions".into()));
    }
    let x = Array2::from_shape_vec(
        (items.len(), dim),
        items.iter().flat_map(|i| i.vector.clone()).collect(),
    )
    .map_err(|e| Error::Projection(e.to_string()))?;
    let emb = tsne(&x, cfg)?;
    Ok(items
        .iter()
        .zip(emb.coords.outer_iter())
        .map(|(item, c)| ProjectedPoint {
            report_id: item.report_id.clone(),
            x: c[0],
            y: c[1],
            label: item.label.clone(),
            predicted_prob: item.predicted_prob,
        })
        .collect())
}

pub fn write_points(path: &Path, points: &[ProjectedPoint]) -> Result<()> {
    crate::jsonl::write(path, points)
}

pub fn read_points(path: &Path) -> Result<Vec<ProjectedPoint>> {
    crate::jsonl::read(path)
}

/// Display label for colouring: "normal", "abnormal", or the present
/// granular categories joined by '+'.
pub fn source_label(report: &Report) -> Option<String> {
    use crate::corpus::Category;
    if let Some(g) = report.granular_labels {
        let present: Vec<&str> = Category::ALL
            .iter()
            .filter(|c| g[c.index()] == 1)
            .map(|c| c.name())
            .collect();
        if !present.is_empty() {
            return Some(present.join("+"));
        }
    }
    report
        .coarse_label
        .map(|c| if c == 1 { "abnormal" } else { "normal" }.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PreFinetune,
    PostFinetune,
    Word2vec,
}

/// Whatever models are available for embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageArtifacts<'a> {
    pub pre: Option<&'a ReportClassifier>,
    pub post: Option<&'a ReportClassifier>,
    pub table: Option<&'a StaticEmbeddingTable>,
}

/// Pooled (or CLS) encoder representations, or averaged static embeddings.
pub fn embed_reports(
    artifacts: StageArtifacts<'_>,
    stage: Stage,
    reports: &[Report],
    vocab: &Vocabulary,
    representation: Representation,
) -> Result<Array2<f64>> {
    let missing = |what: &str| Error::NotFound(format!("no {what} available for stage {stage:?}"));
    let rows: Vec<Array1<f64>> = match stage {
        Stage::PreFinetune | Stage::PostFinetune => {
            let model = if stage == Stage::PreFinetune {
                artifacts.pre
            } else {
                artifacts.post
            }
            .ok_or_else(|| missing("model checkpoint"))?;
            reports
                .iter()
                .map(|r| model.represent(&vocab.encode(&r.text, model.max_len()), representation))
                .collect::<Result<_>>()?
        }
        Stage::Word2vec => {
            let table = artifacts.table.ok_or_else(|| missing("embedding table"))?;
            reports
                .iter()
                .map(|r| average_embedding(&r.text, table, vocab))
                .collect::<Result<_>>()?
        }
    };
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Held-out accuracy of a logistic probe fit on `(train_x, train_y)`.
pub fn linear_probe_accuracy(
    train_x: &Array2<f64>,
    train_y: &[u8],
    test_x: &Array2<f64>,
    test_y: &[u8],
) -> Result<f64> {
    let y = Array2::from_shape_vec((train_y.len(), 1), train_y.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
    let probe = fit_logistic(train_x, &y, &LogisticConfig::default())?;
    let probs = probe.probs(test_x);
    if probs.nrows() != test_y.len() {
        return Err(Error::Shape("probe test rows do not match labels".into()));
    }
    let correct = probs
        .column(0)
        .iter()
        .zip(test_y)
        .filter(|&(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}
