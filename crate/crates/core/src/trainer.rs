//! Epoch loop with Adam and exponential learning-rate decay, evaluation,
//! and a finite-difference gradient oracle.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::config_hash;
use crate::corpus::{Report, Split};
use crate::error::{Error, Result};
use crate::head::{bce_loss, Mode, DEFAULT_THRESHOLD};
use crate::metrics::EvalReport;
use crate::model::{examples, Example, ReportClassifier, Task};
use crate::nn::Parameters;
use crate::optim::{Adam, AdamConfig};
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 7,
            lr0: 1e-5,
            lr_decay: 0.97,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 42,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// `lr0 · decay^epoch`, epochs counted from 0.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were retained (lowest validation loss).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.learning_rate).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::jsonl::write(path, &self.epochs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let epochs: Vec<EpochRecord> = crate::jsonl::read(path)?;
        let first = epochs
            .first()
            .ok_or_else(|| Error::Format(format!("{} holds no epochs", path.display())))?;
        let best_epoch = epochs
            .iter()
            .min_by(|a, b| a.validation_loss.total_cmp(&b.validation_loss))
            .map_or(0, |e| e.epoch);
        Ok(Self {
            config_hash: first.config_hash.clone(),
            seed: first.seed,
            best_epoch,
            epochs,
        })
    }
}

/// SplitMix64 finalizer; used to derive per-batch dropout seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean BCE and element-wise accuracy of eval-mode predictions.
pub fn loss_and_accuracy(model: &ReportClassifier, data: &[Example]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Evaluation("no examples".into()));
    }
    let seqs: Vec<_> = data.iter().map(|e| &e.seq).collect();
    let preds = model.predict(&seqs)?;
    let mut loss = 0.0;
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, ex) in preds.iter().zip(data) {
        loss += bce_loss(p, &ex.labels)?;
        for (&prob, &y) in p.probs.iter().zip(&ex.labels) {
            correct += usize::from((prob >= DEFAULT_THRESHOLD) == (y == 1));
            total += 1;
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / total as f64))
}

/// Trains on tokenized examples. The returned model carries the weights of
/// the epoch with the lowest validation loss.
pub fn train_examples(
    model: ReportClassifier,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
) -> Result<(ReportClassifier, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Config(
            "train and validation partitions must be non-empty".into(),
        ));
    }
    let mut model = model.set_frozen(cfg.freeze_encoder);
    let hash = config_hash(&serde_json::json!({ "model": model.config, "train": cfg }))?;

    let trainable: Vec<bool> = model
        .tensors()
        .iter()
        .flat_map(|(name, t)| {
            let on = !(cfg.freeze_encoder && ReportClassifier::is_encoder_tensor(name));
            std::iter::repeat_n(on, t.len())
        })
        .collect();
    let mut adam = Adam::new(cfg.adam, trainable.len());
    let dropout = model.config.encoder.dropout_rate > 0.0;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ReportClassifier)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = dropout.then(|| mix(mix(cfg.seed, epoch as u64), b as u64));
            let out = model.forward_backward(&batch, Mode::Train, seed)?;
            if !out.loss.is_finite() {
                let norm = out.grads.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    diagnostic: format!(
                        "loss {}, gradient norm {norm}, first report {}",
                        out.loss, batch[0].report_id
                    ),
                });
            }
            loss_sum += out.loss * batch.len() as f64;
            model.head.update_running_stats(&out.head_cache);
            let mut flat = model.flatten();
            adam.update(&mut flat, &out.grads.flatten(), lr, &trainable);
            model.load_flat(&flat);
        }

        let (validation_loss, validation_accuracy) = loss_and_accuracy(&model, validation)?;
        tracing::info!(epoch, lr, validation_loss, validation_accuracy, "epoch finished");
        records.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / train.len() as f64,
            validation_loss,
            validation_accuracy,
            config_hash: hash.clone(),
            seed: cfg.seed,
        });
        if best.as_ref().is_none_or(|(l, _, _)| validation_loss < *l) {
            best = Some((validation_loss, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok((
        best_model,
        TrainHistory {
            config_hash: hash,
            seed: cfg.seed,
            epochs: records,
            best_epoch,
        },
    ))
}

pub fn train(
    model: ReportClassifier,
    split: &Split,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(ReportClassifier, TrainHistory)> {
    let (max_len, task) = (model.max_len(), model.config.task);
    let train = examples(&split.train, vocab, max_len, task)?;
    let validation = examples(&split.validation, vocab, max_len, task)?;
    train_examples(model, &train, &validation, cfg)
}

/// Thresholded evaluation at 0.5.
pub fn evaluate(model: &ReportClassifier, reports: &[Report], vocab: &Vocabulary, name: &str) -> Result<EvalReport> {
    let task = model.config.task;
    let data = examples(reports, vocab, model.max_len(), task)?;
    let seqs: Vec<_> = data.iter().map(|e| &e.seq).collect();
    let probs: Vec<Vec<f64>> = model.predict(&seqs)?.into_iter().map(|p| p.probs).collect();
    let labels: Vec<Vec<u8>> = data.into_iter().map(|e| e.labels).collect();
    EvalReport::from_predictions(name, &task.output_names(), &probs, &labels, DEFAULT_THRESHOLD)
}

/// Independent single-output models, one per granular category.
pub fn train_per_category(
    make_model: impl Fn(Task) -> Result<ReportClassifier>,
    split: &Split,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<(ReportClassifier, TrainHistory)>> {
    (0..Task::Granular.n_outputs())
        .map(|i| train(make_model(Task::Category(i))?, split, vocab, cfg))
        .collect()
}

/// Combines per-category models into one granular report.
pub fn evaluate_per_category(
    models: &[ReportClassifier],
    reports: &[Report],
    vocab: &Vocabulary,
    name: &str,
) -> Result<EvalReport> {
    let mut tasks = Vec::with_capacity(models.len());
    for m in models {
        tasks.extend(evaluate(m, reports, vocab, name)?.tasks);
    }
    Ok(EvalReport {
        model: name.to_string(),
        threshold: DEFAULT_THRESHOLD,
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub relative_error: f64,
    /// Frozen groups are not probed; their analytic gradient must be 0.
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
    pub max_relative_error: f64,
}

/// Norms below this are treated as zero when forming relative errors.
const GRAD_FLOOR: f64 = 1e-6;

/// Central differences of the train-mode batch loss (no dropout) against
/// the analytic gradient of every parameter tensor. The per-group error is
/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn gradient_check(model: &ReportClassifier, batch: &[&Example], step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let analytic = model.forward_backward(batch, Mode::Train, None)?.grads;
    let analytic = analytic.tensors();
    let mut probe = model.clone();
    let n_groups = analytic.len();
    let mut groups = Vec::with_capacity(n_groups);

    for g in 0..n_groups {
        let (name, a) = &analytic[g];
        let a: Vec<f64> = a.iter().copied().collect();
        let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if model.is_frozen() && ReportClassifier::is_encoder_tensor(name) {
            groups.push(GroupCheck {
                name: name.clone(),
                analytic_norm: a_norm,
                numeric_norm: 0.0,
                relative_error: if a_norm == 0.0 { 0.0 } else { f64::INFINITY },
                frozen: true,
            });
            continue;
        }
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        for (j, &aj) in a.iter().enumerate() {
            let original = entry(&mut probe, g, j, None);
            entry(&mut probe, g, j, Some(original + step));
            let plus = probe.batch_loss(batch, Mode::Train, None)?;
            entry(&mut probe, g, j, Some(original - step));
            let minus = probe.batch_loss(batch, Mode::Train, None)?;
            entry(&mut probe, g, j, Some(original));
            let numeric = (plus - minus) / (2.0 * step);
            diff_sq += (numeric - aj).powi(2);
            num_sq += numeric * numeric;
        }
        let n_norm = num_sq.sqrt();
        groups.push(GroupCheck {
            name: name.clone(),
            analytic_norm: a_norm,
            numeric_norm: n_norm,
            relative_error: diff_sq.sqrt() / a_norm.max(n_norm).max(GRAD_FLOOR),
            frozen: false,
        });
    }
    let max_relative_error = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        groups,
        max_relative_error,
    })
}

/// Reads entry `j` of tensor `g`, optionally overwriting it first.
fn entry(model: &mut ReportClassifier, g: usize, j: usize, set: Option<f64>) -> f64 {
    let mut tensors = model.tensors_mut();
    let t = tensors[g].1.as_slice_mut().expect("parameters are contiguous");
    if let Some(v) = set {
        t[j] = v;
    }
    t[j]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, split_by_patient, GeneratorSpec};
    use crate::encoder::EncoderConfig;
    use crate::head::HeadConfig;
    use crate::model::ModelConfig;
    use crate::pooling::AttentionConfig;
    use crate::tokenizer::Vocabulary;

    fn tiny_config(vocab: usize, max_len: usize, task: Task) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: vocab,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                ffn_width: 16,
                max_len,
                dropout_rate: 0.0,
                seed: 3,
            },
            attention: AttentionConfig::default(),
            attention_seed: 4,
            head: HeadConfig::scaled(8, task.n_outputs(), 5),
            task,
        }
    }

    fn toy_examples(vocab: &Vocabulary, max_len: usize, n: usize) -> Vec<Example> {
        let words = ["normal", "study", "infarct", "seen", "scan", "brain"];
        (0..n)
            .map(|i| {
                let abnormal = i % 2 == 0;
                let text = format!(
                    "{} {} {}",
                    words[i % 6],
                    if abnormal { "infarct" } else { "normal" },
                    words[(i / 2) % 6]
                );
                Example {
                    report_id: format!("T{i}"),
                    seq: vocab.encode(&text, max_len),
                    labels: vec![u8::from(abnormal)],
                }
            })
            .collect()
    }

    fn toy_vocab() -> Vocabulary {
        let reports = vec![Report {
            report_id: "a".into(),
            patient_id: "p".into(),
            text: "normal study infarct seen scan brain".into(),
            coarse_label: None,
            granular_labels: None,
            annotation: None,
        }];
        Vocabulary::build(&reports, 1).unwrap()
    }

    #[test]
    fn config_validation_and_schedule() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_decay: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_decay: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let lrs: Vec<f64> = (0..7).map(|k| cfg.learning_rate(k)).collect();
        assert_eq!(lrs[0], 1e-5);
        assert_eq!(lrs[1], 1e-5 * 0.97);
        assert!((lrs[2] - 0.9409e-5).abs() < 1e-20);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn gradient_check_tiny_model() {
        let vocab = toy_vocab();
        let data = toy_examples(&vocab, 5, 2);
        let model = ReportClassifier::new(tiny_config(vocab.len(), 5, Task::Coarse)).unwrap();
        let batch: Vec<&Example> = data.iter().collect();
        let report = gradient_check(&model, &batch, 1e-4).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:#?}");
        assert!(report.groups.iter().any(|g| g.name.starts_with("encoder.")));

        let frozen = model.clone().set_frozen(true);
        let report = gradient_check(&frozen, &batch, 1e-4).unwrap();
        for g in report.groups.iter().filter(|g| g.name.starts_with("encoder.")) {
            assert!(g.frozen);
            assert_eq!(g.analytic_norm, 0.0);
        }
        assert!(report.max_relative_error < 1e-4);
    }

    #[test]
    fn zero_final_layer_balanced_labels_gives_zero_bias_gradient() {
        let vocab = toy_vocab();
        let data = toy_examples(&vocab, 6, 4);
        let mut model = ReportClassifier::new(tiny_config(vocab.len(), 6, Task::Coarse)).unwrap();
        model.head.output.weight.fill(0.0);
        model.head.output.bias.fill(0.0);
        let batch: Vec<&Example> = data.iter().collect();
        let grads = model.forward_backward(&batch, Mode::Train, None).unwrap().grads;
        assert!(grads.head.output.bias[0].abs() < 1e-8);
    }

    #[test]
    fn separable_toy_task_learns_and_is_deterministic() {
        let vocab = toy_vocab();
        let data = toy_examples(&vocab, 8, 200);
        let model = ReportClassifier::new(tiny_config(vocab.len(), 8, Task::Coarse)).unwrap();
        let cfg = TrainConfig {
            lr0: 1e-2,
            ..Default::default()
        };
        let (trained, history) = train_examples(model.clone(), &data, &data[..40], &cfg).unwrap();
        assert_eq!(history.epochs.len(), 7);
        assert!(history.epochs[6].train_loss < history.epochs[0].train_loss);
        let (_, acc) = loss_and_accuracy(&trained, &data).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc}");

        let (again, history2) = train_examples(model, &data, &data[..40], &cfg).unwrap();
        assert_eq!(history, history2);
        assert_eq!(
            trained.to_checkpoint().unwrap().to_bytes().unwrap(),
            again.to_checkpoint().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn freeze_contract_across_phases() {
        let vocab = toy_vocab();
        let data = toy_examples(&vocab, 8, 48);
        let model = ReportClassifier::new(tiny_config(vocab.len(), 8, Task::Coarse)).unwrap();
        let encoder_of = |m: &ReportClassifier| m.encoder.flatten();
        let head_of = |m: &ReportClassifier| m.head.flatten();
        let cfg = TrainConfig {
            epochs: 1,
            lr0: 1e-3,
            freeze_encoder: true,
            ..Default::default()
        };
        let (frozen, _) = train_examples(model.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(encoder_of(&frozen), encoder_of(&model));
        assert_ne!(head_of(&frozen), head_of(&model));
        assert!(frozen.is_frozen());

        let cfg = TrainConfig {
            freeze_encoder: false,
            ..cfg
        };
        let (thawed, _) = train_examples(frozen.clone(), &data, &data, &cfg).unwrap();
        assert_ne!(encoder_of(&thawed), encoder_of(&frozen));
    }

    #[test]
    fn train_rejects_empty_partitions_and_logs_history() {
        let vocab = toy_vocab();
        let data = toy_examples(&vocab, 8, 8);
        let model = ReportClassifier::new(tiny_config(vocab.len(), 8, Task::Coarse)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        assert!(train_examples(model.clone(), &data, &[], &cfg).is_err());
        let (_, history) = train_examples(model, &data, &data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        history.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
        assert_eq!(
            TrainHistory::load(&path).unwrap().learning_rates(),
            history.learning_rates()
        );
    }

    #[test]
    fn evaluate_untrained_model_gives_majority_rate() {
        let reports = generate_corpus(&GeneratorSpec {
            n_reports: 60,
            abnormal_fraction: 0.3,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let vocab = Vocabulary::build(&reports, 1).unwrap();
        let split = split_by_patient(&reports, [0.6, 0.2, 0.2], 1).unwrap();
        let mut model = ReportClassifier::new(tiny_config(vocab.len(), 64, Task::Coarse)).unwrap();
        model.head.output.weight.fill(0.0);
        model.head.output.bias.fill(0.0);
        let report = evaluate(&model, &split.test, &vocab, "untrained").unwrap();
        // p = 0.5 everywhere and ties are positive
        let positives = split.test.iter().filter(|r| r.coarse_label == Some(1)).count();
        let expected = 100.0 * positives as f64 / split.test.len() as f64;
        assert!((report.tasks[0].summary.accuracy - expected).abs() < 1e-9);

        let unlabelled: Vec<Report> = split
            .test
            .iter()
            .cloned()
            .map(|r| Report {
                coarse_label: None,
                ..r
            })
            .collect();
        assert!(matches!(
            evaluate(&model, &unlabelled, &vocab, "x"),
            Err(Error::Evaluation(_))
        ));
    }
}
