//! The full report classifier: encoder → attention pooling → head.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Report;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{bce_logit_grad, bce_loss, ClassifierHead, HeadCache, HeadConfig, Mode, Prediction};
use crate::nn::{prefixed, Parameters};
use crate::pooling::{attention_weights, AttentionConfig, AttentionParams, AttentionRecord, PooledReport};
use crate::tokenizer::{TokenSeq, Vocabulary};

pub const CHECKPOINT_KIND: &str = "report_classifier";

/// Which label vector a model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One output: any abnormality.
    #[default]
    Coarse,
    /// Five outputs, one per category.
    Granular,
    /// One output for a single granular category (index into the five).
    Category(usize),
}

impl Task {
    pub fn n_outputs(self) -> usize {
        match self {
            Task::Granular => 5,
            Task::Coarse | Task::Category(_) => 1,
        }
    }

    pub fn output_names(self) -> Vec<String> {
        use crate::corpus::Category;
        match self {
            Task::Coarse => vec!["abnormal".into()],
            Task::Granular => Category::ALL.iter().map(|c| c.name().to_string()).collect(),
            Task::Category(i) => vec![Category::ALL[i].name().to_string()],
        }
    }

    pub fn labels(self, report: &Report) -> Result<Vec<u8>> {
        let missing = || Error::Evaluation(format!("report {} has no {self:?} label", report.report_id));
        match self {
            Task::Coarse => Ok(vec![report.coarse_label.ok_or_else(missing)?]),
            Task::Granular => Ok(report.granular_labels.ok_or_else(missing)?.to_vec()),
            Task::Category(i) => Ok(vec![report.granular_labels.ok_or_else(missing)?[i]]),
        }
    }
}

/// A tokenized report with its label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub report_id: String,
    pub seq: TokenSeq,
    pub labels: Vec<u8>,
}

pub fn examples(reports: &[Report], vocab: &Vocabulary, max_len: usize, task: Task) -> Result<Vec<Example>> {
    reports
        .iter()
        .map(|r| {
            Ok(Example {
                report_id: r.report_id.clone(),
                seq: vocab.encode(&r.text, max_len),
                labels: task.labels(r)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub attention_seed: u64,
    pub head: HeadConfig,
    pub task: Task,
}

impl ModelConfig {
    /// Desk-scale geometry for a vocabulary and task.
    pub fn desk(vocab_size: usize, task: Task, seed: u64) -> Self {
        let encoder = EncoderConfig {
            seed,
            ..EncoderConfig::desk(vocab_size)
        };
        let head = HeadConfig::scaled(encoder.d_model, task.n_outputs(), seed.wrapping_add(2));
        Self {
            encoder,
            attention: AttentionConfig::default(),
            attention_seed: seed.wrapping_add(1),
            head,
            task,
        }
    }
}

/// Which per-report vector to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Attention-pooled `c`.
    #[default]
    Pooled,
    /// Encoder output at the `[CLS]` position.
    Cls,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportClassifier {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub attention: AttentionParams,
    pub head: ClassifierHead,
}

/// Loss, gradients and batch statistics from one training batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: ReportClassifier,
    pub head_cache: HeadCache,
}

impl ReportClassifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.head.layer_widths.first() != Some(&config.encoder.d_model) {
            return Err(Error::Config("head input width must equal d_model".into()));
        }
        if config.head.n_outputs() != config.task.n_outputs() {
            return Err(Error::Config("head output width does not match task".into()));
        }
        Ok(Self {
            encoder: Encoder::new(config.encoder.clone())?,
            attention: AttentionParams::init(config.encoder.d_model, &config.attention, config.attention_seed)?,
            head: ClassifierHead::new(config.head.clone())?,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.zeros_like(),
            attention: self.attention.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn set_frozen(mut self, frozen: bool) -> Self {
        self.encoder.freeze(frozen);
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.encoder.is_frozen()
    }

    pub fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    fn real_part<'a>(&self, seq: &'a TokenSeq) -> Result<(&'a [u32], Vec<bool>)> {
        if seq.ids.len() != self.max_len() {
            return Err(Error::Shape(format!(
                "sequence length {} does not match max_len {}",
                seq.ids.len(),
                self.max_len()
            )));
        }
        let n = seq.original_length;
        Ok((&seq.ids[..n], vec![true; n]))
    }

    /// Evaluation-mode pooled representation for one sequence. Only the
    /// unpadded prefix is encoded; padding never influences real positions.
    pub fn pool(&self, seq: &TokenSeq) -> Result<PooledReport> {
        let (ids, mask) = self.real_part(seq)?;
        let (hidden, _) = self.encoder.forward(ids, &mask, None::<&mut ChaCha8Rng>)?;
        self.attention.pool(&hidden, &mask)
    }

    pub fn represent(&self, seq: &TokenSeq, kind: Representation) -> Result<Array1<f64>> {
        match kind {
            Representation::Pooled => Ok(self.pool(seq)?.representation),
            Representation::Cls => {
                let (ids, mask) = self.real_part(seq)?;
                let (hidden, _) = self.encoder.forward(ids, &mask, None::<&mut ChaCha8Rng>)?;
                Ok(hidden.row(0).to_owned())
            }
        }
    }

    pub fn predict(&self, seqs: &[&TokenSeq]) -> Result<Vec<Prediction>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.encoder.d_model;
        let mut reps = Array2::zeros((seqs.len(), d));
        for (i, seq) in seqs.iter().enumerate() {
            reps.row_mut(i).assign(&self.pool(seq)?.representation);
        }
        self.head.predict(&reps, Mode::Eval)
    }

    /// Mean BCE over `batch` with gradients of every parameter group.
    /// Frozen encoders receive exactly-zero gradients. `dropout_seed`
    /// enables dropout with one stream per example.
    pub fn forward_backward(
        &self,
        batch: &[&Example],
        mode: Mode,
        dropout_seed: Option<u64>,
    ) -> Result<BatchGradients> {
        let mut grads = self.zeros_like();
        let (loss, head_cache) = self.run_batch(batch, mode, dropout_seed, Some(&mut grads))?;
        Ok(BatchGradients {
            loss,
            grads,
            head_cache: head_cache.expect("cache retained"),
        })
    }

    pub fn batch_loss(&self, batch: &[&Example], mode: Mode, dropout_seed: Option<u64>) -> Result<f64> {
        Ok(self.run_batch(batch, mode, dropout_seed, None)?.0)
    }

    fn run_batch(
        &self,
        batch: &[&Example],
        mode: Mode,
        dropout_seed: Option<u64>,
        grads: Option<&mut ReportClassifier>,
    ) -> Result<(f64, Option<HeadCache>)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let d = self.config.encoder.d_model;
        let mut reps = Array2::zeros((batch.len(), d));
        let mut states = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let (ids, mask) = self.real_part(&ex.seq)?;
            let mut rng = dropout_seed.map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                r.set_stream(i as u64);
                r
            });
            let (hidden, cache) = self.encoder.forward(ids, &mask, rng.as_mut())?;
            let pooled = self.attention.pool(&hidden, &mask)?;
            reps.row_mut(i).assign(&pooled.representation);
            states.push((hidden, cache, pooled));
        }
        let (logits, head_cache) = self.head.forward(&reps, mode)?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut d_logits = Array2::zeros(logits.raw_dim());
        for (i, ex) in batch.iter().enumerate() {
            let pred = Prediction::from_logits(logits.row(i).to_vec());
            loss += bce_loss(&pred, &ex.labels)?;
            for (j, g) in bce_logit_grad(&pred, &ex.labels)?.into_iter().enumerate() {
                d_logits[[i, j]] = g / n;
            }
        }
        loss /= n;

        let Some(grads) = grads else {
            return Ok((loss, None));
        };
        let d_reps = self.head.backward(&head_cache, &d_logits, &mut grads.head);
        for (i, (hidden, cache, pooled)) in states.iter().enumerate() {
            let d_hidden = self
                .attention
                .backward(pooled, hidden, &d_reps.row(i).to_owned(), &mut grads.attention);
            if !self.is_frozen() {
                self.encoder.backward(cache, &d_hidden, &mut grads.encoder);
            }
        }
        Ok((loss, Some(head_cache)))
    }

    /// Word-aligned attention weights of one report.
    pub fn attention_record(&self, report_id: &str, seq: &TokenSeq, vocab: &Vocabulary) -> Result<AttentionRecord> {
        let pooled = self.pool(seq)?;
        let (tokens, alphas) = attention_weights(&pooled, seq, vocab)?.into_iter().unzip();
        Ok(AttentionRecord {
            report_id: report_id.to_string(),
            tokens,
            alphas,
        })
    }

    /// Names of the encoder's parameter tensors as they appear in
    /// [`Parameters::tensors`].
    pub fn is_encoder_tensor(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, serde_json::to_value(&self.config)?);
        ck.metadata.insert("frozen".into(), serde_json::json!(self.is_frozen()));
        for (name, t) in self.tensors() {
            ck.push(name, t.iter(), t.shape());
        }
        for (name, t) in self.head.buffers() {
            ck.push(format!("head.{name}"), t.iter(), t.shape());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: ModelConfig = serde_json::from_value(ck.config.clone())?;
        let frozen = ck.metadata.get("frozen").and_then(|v| v.as_bool()).unwrap_or(false);
        let mut model = Self::new(config)?.set_frozen(frozen);
        let fill = |name: String, mut t: ArrayViewMutD<'_, f64>| -> Result<()> {
            let stored = ck.tensor(&name)?;
            if stored.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.iter_mut().zip(&stored.data) {
                *dst = src as f64;
            }
            Ok(())
        };
        for (name, t) in model.tensors_mut() {
            fill(name, t)?;
        }
        for (name, t) in model.head.buffers_mut() {
            fill(format!("head.{name}"), t)?;
        }
        Ok(model)
    }
}

impl Parameters for ReportClassifier {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<_> = prefixed("encoder", self.encoder.tensors()).collect();
        out.extend(prefixed("attention", self.attention.tensors()));
        out.extend(prefixed("head", self.head.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<_> = prefixed("encoder", self.encoder.tensors_mut()).collect();
        out.extend(prefixed("attention", self.attention.tensors_mut()));
        out.extend(prefixed("head", self.head.tensors_mut()));
        out
    }
}
