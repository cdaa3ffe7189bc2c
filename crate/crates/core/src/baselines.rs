//! Comparison systems: an average-static-embedding logistic regression and
//! the frozen-encoder configuration of the full model.

use ndarray::{Array1, Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Report, Split};
use crate::error::{Error, Result};
use crate::head::DEFAULT_THRESHOLD;
use crate::metrics::EvalReport;
use crate::model::{ReportClassifier, Task};
use crate::nn::sigmoid;
use crate::optim::{Adam, AdamConfig};
use crate::tokenizer::{tokenize, Vocabulary, PAD, UNK};
use crate::trainer::{evaluate, train, TrainConfig};

pub const EMBEDDINGS_KIND: &str = "static_embeddings";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            window: 2,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticEmbeddingTable {
    pub config: SkipGramConfig,
    /// `vocab_size × dim`, the sum of input and output vectors; row 0 (PAD)
    /// stays zero.
    pub vectors: Array2<f64>,
    /// Mean negative-sampling loss per epoch.
    pub loss_history: Vec<f64>,
}

fn ids(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    tokenize(text).iter().map(|t| vocab.id(t).unwrap_or(UNK)).collect()
}

fn log_sigmoid(x: f64) -> f64 {
    -((-x.abs()).exp().ln_1p() + (-x).max(0.0))
}

/// Skip-gram with negative sampling; negatives drawn from the unigram
/// distribution raised to 0.75, learning rate decayed linearly to zero.
pub fn pretrain_static_embeddings(
    corpus: &[Report],
    vocab: &Vocabulary,
    cfg: &SkipGramConfig,
) -> Result<StaticEmbeddingTable> {
    if cfg.window == 0 || cfg.dim == 0 {
        return Err(Error::Config("window and dim must be at least 1".into()));
    }
    if vocab.len() - 1 < cfg.negatives + 1 {
        return Err(Error::Config(format!(
            "vocabulary of {} non-PAD tokens is too small for {} negatives",
            vocab.len() - 1,
            cfg.negatives
        )));
    }
    let (v, k) = (vocab.len(), cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Uniform::new(-0.5 / k as f64, 0.5 / k as f64).expect("valid range");
    let mut input = Array2::from_shape_fn(
        (v, k),
        |(r, _)| if r == PAD as usize { 0.0 } else { init.sample(&mut rng) },
    );
    let mut output = Array2::<f64>::zeros((v, k));

    let sentences: Vec<Vec<u32>> = corpus.iter().map(|r| ids(&r.text, vocab)).collect();
    let mut counts = vec![0.0f64; v];
    for s in &sentences {
        for &t in s {
            counts[t as usize] += 1.0;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("negative sampling: {e}")))?;
    let total_pairs: usize = sentences
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| i.min(cfg.window) + (s.len() - 1 - i).min(cfg.window))
                .sum::<usize>()
        })
        .sum();
    let total_steps = (total_pairs * cfg.epochs).max(1) as f64;

    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut grad_in = vec![0.0; k];
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for s in &sentences {
            for (i, &centre) in s.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(s.len() - 1);
                for j in (lo..=hi).filter(|&j| j != i) {
                    let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
                    step += 1;
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let c = centre as usize;
                    let targets = std::iter::once((s[j] as usize, 1.0))
                        .chain((0..cfg.negatives).map(|_| (noise.sample(&mut rng), 0.0)));
                    for (o, label) in targets {
                        let score = input.row(c).dot(&output.row(o));
                        epoch_loss -= if label == 1.0 {
                            log_sigmoid(score)
                        } else {
                            log_sigmoid(-score)
                        };
                        let g = lr * (label - sigmoid(score));
                        for d in 0..k {
                            grad_in[d] += g * output[[o, d]];
                            output[[o, d]] += g * input[[c, d]];
                        }
                    }
                    if c != PAD as usize {
                        for d in 0..k {
                            input[[c, d]] += grad_in[d];
                        }
                    }
                }
            }
        }
        loss_history.push(epoch_loss / total_pairs.max(1) as f64);
    }
    let mut vectors = input + output;
    vectors.row_mut(PAD as usize).fill(0.0);
    Ok(StaticEmbeddingTable {
        config: cfg.clone(),
        vectors,
        loss_history,
    })
}

impl StaticEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(EMBEDDINGS_KIND, serde_json::to_value(&self.config)?);
        ck.metadata
            .insert("loss_history".into(), serde_json::to_value(&self.loss_history)?);
        ck.push("vectors".into(), self.vectors.iter(), self.vectors.shape());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(EMBEDDINGS_KIND)?;
        let t = ck.tensor("vectors")?;
        let [rows, cols] = t.shape[..] else {
            return Err(Error::Format("embedding table must be 2-D".into()));
        };
        let data = t.data.iter().map(|&x| x as f64).collect();
        Ok(Self {
            config: serde_json::from_value(ck.config.clone())?,
            vectors: Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?,
            loss_history: ck
                .metadata
                .get("loss_history")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()?
                .unwrap_or_default(),
        })
    }
}

/// Unweighted mean of the word embeddings of `text` (UNK included, framing
/// and padding tokens excluded).
pub fn average_embedding(text: &str, table: &StaticEmbeddingTable, vocab: &Vocabulary) -> Result<Array1<f64>> {
    let ids = ids(text, vocab);
    if ids.is_empty() {
        return Err(Error::Evaluation("report has no tokens to average".into()));
    }
    let mut sum = Array1::zeros(table.dim());
    for id in &ids {
        if *id as usize >= table.vectors.nrows() {
            return Err(Error::Shape(format!("token id {id} outside embedding table")));
        }
        sum += &table.vectors.row(*id as usize);
    }
    Ok(sum / ids.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.05,
        }
    }
}

/// Affine map followed by a sigmoid per output.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LogisticModel {
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn probs(&self, x: &Array2<f64>) -> Array2<f64> {
        self.logits(x).mapv(sigmoid)
    }
}

/// Full-batch Adam on mean BCE over standardized features, starting from
/// zero weights. The scaling is folded back into the returned weights.
pub fn fit_logistic(x: &Array2<f64>, y: &Array2<u8>, cfg: &LogisticConfig) -> Result<LogisticModel> {
    if x.nrows() != y.nrows() || x.nrows() == 0 {
        return Err(Error::Shape(format!(
            "{} feature rows for {} label rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (x - &mean) / &std;
    let fitted = fit_standardized(&z, y, cfg);
    let weight = &fitted.weight / &std.view().insert_axis(Axis(1));
    let bias = &fitted.bias - &mean.dot(&weight);
    Ok(LogisticModel { weight, bias })
}

fn fit_standardized(x: &Array2<f64>, y: &Array2<u8>, cfg: &LogisticConfig) -> LogisticModel {
    let (d, m) = (x.ncols(), y.ncols());
    let yf = y.mapv(f64::from);
    let mut model = LogisticModel {
        weight: Array2::zeros((d, m)),
        bias: Array1::zeros(m),
    };
    let n_params = d * m + m;
    let mut adam = Adam::new(AdamConfig::default(), n_params);
    let trainable = vec![true; n_params];
    let scale = 1.0 / (x.nrows() * m) as f64;
    for _ in 0..cfg.epochs {
        let dz = (model.probs(x) - &yf) * scale;
        let gw = x.t().dot(&dz);
        let gb = dz.sum_axis(Axis(0));
        let mut flat: Vec<f64> = model.weight.iter().chain(model.bias.iter()).copied().collect();
        let grads: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        adam.update(&mut flat, &grads, cfg.learning_rate, &trainable);
        model.weight = Array2::from_shape_vec((d, m), flat[..d * m].to_vec()).expect("shape");
        model.bias = Array1::from(flat[d * m..].to_vec());
    }
    model
}

/// Extra per-report feature vector appended to the averaged embedding.
pub type FeatureHook<'a> = &'a dyn Fn(&Report) -> Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub task: Task,
    pub model: LogisticModel,
}

pub const LINEAR_KIND: &str = "linear_baseline";

impl LinearBaseline {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(LINEAR_KIND, serde_json::to_value(self.task)?);
        ck.push("weight".into(), self.model.weight.iter(), self.model.weight.shape());
        ck.push("bias".into(), self.model.bias.iter(), self.model.bias.shape());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(LINEAR_KIND)?;
        let w = ck.tensor("weight")?;
        let b = ck.tensor("bias")?;
        let [rows, cols] = w.shape[..] else {
            return Err(Error::Format("logistic weight must be 2-D".into()));
        };
        let weight = Array2::from_shape_vec((rows, cols), w.data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            task: serde_json::from_value(ck.config.clone())?,
            model: LogisticModel {
                weight,
                bias: b.data.iter().map(|&v| v as f64).collect(),
            },
        })
    }

    pub fn features(
        reports: &[Report],
        table: &StaticEmbeddingTable,
        vocab: &Vocabulary,
        extra: Option<FeatureHook<'_>>,
    ) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(reports.len());
        for r in reports {
            let mut row = average_embedding(&r.text, table, vocab)?.to_vec();
            if let Some(hook) = extra {
                row.extend(hook(r));
            }
            rows.push(row);
        }
        let width = rows.first().map_or(table.dim(), Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("extra features have inconsistent widths".into()));
        }
        Array2::from_shape_vec((rows.len(), width), rows.concat()).map_err(|e| Error::Shape(e.to_string()))
    }
}

fn label_matrix(reports: &[Report], task: Task) -> Result<Array2<u8>> {
    let m = task.n_outputs();
    let mut out = Array2::zeros((reports.len(), m));
    for (i, r) in reports.iter().enumerate() {
        for (j, y) in task.labels(r)?.into_iter().enumerate() {
            out[[i, j]] = y;
        }
    }
    Ok(out)
}

pub fn evaluate_linear(
    baseline: &LinearBaseline,
    reports: &[Report],
    table: &StaticEmbeddingTable,
    vocab: &Vocabulary,
    extra: Option<FeatureHook<'_>>,
    name: &str,
) -> Result<EvalReport> {
    let x = LinearBaseline::features(reports, table, vocab, extra)?;
    let labels = label_matrix(reports, baseline.task)?;
    let probs: Vec<Vec<f64>> = baseline.model.probs(&x).outer_iter().map(|r| r.to_vec()).collect();
    let labels: Vec<Vec<u8>> = labels.outer_iter().map(|r| r.to_vec()).collect();
    EvalReport::from_predictions(name, &baseline.task.output_names(), &probs, &labels, DEFAULT_THRESHOLD)
}

/// Fits on the train partition and reports test-partition metrics.
pub fn train_linear_baseline(
    split: &Split,
    table: &StaticEmbeddingTable,
    vocab: &Vocabulary,
    task: Task,
    cfg: &LogisticConfig,
    extra: Option<FeatureHook<'_>>,
) -> Result<(LinearBaseline, EvalReport)> {
    let x = LinearBaseline::features(&split.train, table, vocab, extra)?;
    let y = label_matrix(&split.train, task)?;
    let baseline = LinearBaseline {
        task,
        model: fit_logistic(&x, &y, cfg)?,
    };
    let report = evaluate_linear(&baseline, &split.test, table, vocab, extra, "linear")?;
    Ok((baseline, report))
}

/// Trains only the pooler and head on top of `model`'s encoder.
pub fn frozen_encoder_baseline(
    model: ReportClassifier,
    split: &Split,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(ReportClassifier, EvalReport)> {
    let cfg = TrainConfig {
        freeze_encoder: true,
        ..cfg.clone()
    };
    let (trained, _) = train(model, split, vocab, &cfg)?;
    let report = evaluate(&trained, &split.test, vocab, "frozen")?;
    Ok((trained, report))
}
