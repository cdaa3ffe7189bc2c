//! Small trainable transformer encoder producing per-token contextual
//! embeddings.
//!
//! Pre-norm stack: token + learned positional embeddings, then per layer
//! `x += MHA(LN(x))` and `x += FFN(LN(x))`. Padding keys are never attended.

use ndarray::{s, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, dropout_mask, gelu, gelu_grad, prefixed, LayerNorm, LayerNormCache, Linear, Parameters};
use crate::tokenizer::TokenSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: width 64, two layers, four heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 256,
            max_len: crate::tokenizer::DEFAULT_MAX_LEN,
            dropout_rate: 0.1,
            seed: 42,
        }
    }

    /// BERT-base geometry.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_width: 3072,
            max_len: 512,
            dropout_rate: 0.1,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the reserved tokens".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.ffn_width == 0 {
            return Err(Error::Config("ffn_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderLayer {
    fn init(rng: &mut impl Rng, d: usize, ffn: usize) -> Self {
        Self {
            attn_norm: LayerNorm::new(d),
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            output: Linear::init(rng, d, d),
            ffn_norm: LayerNorm::new(d),
            ffn_in: Linear::init(rng, d, ffn),
            ffn_out: Linear::init(rng, ffn, d),
        }
    }
}

impl Parameters for EncoderLayer {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(prefixed("attn_norm", self.attn_norm.tensors()));
        out.extend(prefixed("query", self.query.tensors()));
        out.extend(prefixed("key", self.key.tensors()));
        out.extend(prefixed("value", self.value.tensors()));
        out.extend(prefixed("output", self.output.tensors()));
        out.extend(prefixed("ffn_norm", self.ffn_norm.tensors()));
        out.extend(prefixed("ffn_in", self.ffn_in.tensors()));
        out.extend(prefixed("ffn_out", self.ffn_out.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        out.extend(prefixed("attn_norm", self.attn_norm.tensors_mut()));
        out.extend(prefixed("query", self.query.tensors_mut()));
        out.extend(prefixed("key", self.key.tensors_mut()));
        out.extend(prefixed("value", self.value.tensors_mut()));
        out.extend(prefixed("output", self.output.tensors_mut()));
        out.extend(prefixed("ffn_norm", self.ffn_norm.tensors_mut()));
        out.extend(prefixed("ffn_in", self.ffn_in.tensors_mut()));
        out.extend(prefixed("ffn_out", self.ffn_out.tensors_mut()));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// `vocab_size × d_model`.
    pub token_embedding: Array2<f64>,
    /// `max_len × d_model`.
    pub position_embedding: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    frozen: bool,
}

/// Per-token encoder output with its padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEmbeddings {
    /// `T × d_model`, one row per position.
    pub hidden: Array2<f64>,
    /// 1 for real tokens; rows with 0 are excluded from pooling.
    pub mask: Vec<u8>,
}

impl ContextualEmbeddings {
    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m != 0).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    attn_norm: LayerNormCache,
    normed: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_dropout: Option<Array2<f64>>,
    ffn_norm: LayerNormCache,
    ffn_normed: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_dropout: Option<Array2<f64>>,
}

/// Activations retained by [`Encoder::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<u32>,
    embed_dropout: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

impl EncoderCache {
    /// Self-attention probabilities (`T × T`, rows = queries) for one head.
    pub fn attention_probs(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.layers[layer].probs[head]
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let token_embedding = nn::normal_matrix(&mut rng, config.vocab_size, d, 1.0);
        let position_embedding = nn::normal_matrix(&mut rng, config.max_len, d, 0.5);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(&mut rng, d, config.ffn_width))
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            frozen: false,
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.zero();
        out
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn freeze(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Full-length, evaluation-mode encoding of a padded sequence.
    pub fn encode_tokens(&self, seq: &TokenSeq) -> Result<ContextualEmbeddings> {
        if seq.ids.len() != self.config.max_len || seq.mask.len() != self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} does not match encoder max_len {}",
                seq.ids.len(),
                self.config.max_len
            )));
        }
        let mask: Vec<bool> = seq.mask.iter().map(|&m| m != 0).collect();
        let (hidden, _) = self.forward(&seq.ids, &mask, None::<&mut ChaCha8Rng>)?;
        Ok(ContextualEmbeddings {
            hidden,
            mask: seq.mask.clone(),
        })
    }

    /// Encodes `ids` (any length up to `max_len`). When `dropout` is given
    /// and the configured rate is positive, dropout masks are drawn from it.
    pub fn forward<R: Rng>(
        &self,
        ids: &[u32],
        mask: &[bool],
        mut dropout: Option<&mut R>,
    ) -> Result<(Array2<f64>, EncoderCache)> {
        let t = ids.len();
        if t == 0 || t > self.config.max_len || mask.len() != t {
            return Err(Error::Shape(format!(
                "{t} ids with {} mask entries for max_len {}",
                mask.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.d_model;
        let rate = self.config.dropout_rate;
        let draw = |rng: &mut Option<&mut R>| -> Option<Array2<f64>> {
            match rng {
                Some(r) if rate > 0.0 => Some(dropout_mask(*r, t, d, rate)),
                _ => None,
            }
        };

        let mut x = Array2::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.token_embedding.row(id as usize));
            row += &self.position_embedding.row(i);
        }
        let embed_dropout = draw(&mut dropout);
        if let Some(m) = &embed_dropout {
            x *= m;
        }

        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (normed, attn_norm) = layer.attn_norm.forward(&x);
            let q = layer.query.forward(&normed);
            let k = layer.key.forward(&normed);
            let v = layer.value.forward(&normed);
            let mut context = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                let mut p = Array2::zeros((t, t));
                for (i, row) in scores.rows().into_iter().enumerate() {
                    let sm = nn::masked_softmax(row.as_slice().unwrap(), mask);
                    p.row_mut(i).assign(&ndarray::ArrayView1::from(&sm));
                }
                context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                probs.push(p);
            }
            let mut attn_out = layer.output.forward(&context);
            let attn_dropout = draw(&mut dropout);
            if let Some(m) = &attn_dropout {
                attn_out *= m;
            }
            x += &attn_out;

            let (ffn_normed, ffn_norm) = layer.ffn_norm.forward(&x);
            let pre_act = layer.ffn_in.forward(&ffn_normed);
            let act = pre_act.mapv(gelu);
            let mut ffn_out = layer.ffn_out.forward(&act);
            let ffn_dropout = draw(&mut dropout);
            if let Some(m) = &ffn_dropout {
                ffn_out *= m;
            }
            x += &ffn_out;

            caches.push(LayerCache {
                attn_norm,
                normed,
                q,
                k,
                v,
                probs,
                context,
                attn_dropout,
                ffn_norm,
                ffn_normed,
                pre_act,
                act,
                ffn_dropout,
            });
        }
        Ok((
            x,
            EncoderCache {
                ids: ids.to_vec(),
                embed_dropout,
                layers: caches,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_hidden = ∂L/∂H` into `grads`.
    pub fn backward(&self, cache: &EncoderCache, d_hidden: &Array2<f64>, grads: &mut Encoder) {
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t = cache.ids.len();
        let d = self.config.d_model;
        let mut dx = d_hidden.clone();

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[li];
            let g = &mut grads.layers[li];

            // feed-forward branch
            let mut d_ffn = dx.clone();
            if let Some(m) = &c.ffn_dropout {
                d_ffn *= m;
            }
            let d_act = layer.ffn_out.backward(&c.act, &d_ffn, &mut g.ffn_out);
            let mut d_pre = d_act;
            ndarray::Zip::from(&mut d_pre)
                .and(&c.pre_act)
                .for_each(|dp, &z| *dp *= gelu_grad(z));
            let d_normed = layer.ffn_in.backward(&c.ffn_normed, &d_pre, &mut g.ffn_in);
            dx += &layer.ffn_norm.backward(&c.ffn_norm, &d_normed, &mut g.ffn_norm);

            // attention branch
            let mut d_attn = dx.clone();
            if let Some(m) = &c.attn_dropout {
                d_attn *= m;
            }
            let d_context = layer.output.backward(&c.context, &d_attn, &mut g.output);
            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let p = &c.probs[h];
                let d_out = d_context.slice(cols);
                let dp = d_out.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&d_out));
                // softmax backward, row-wise
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (p * &(&dp - &row_dot)) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            let mut d_normed = layer.query.backward(&c.normed, &dq, &mut g.query);
            d_normed += &layer.key.backward(&c.normed, &dk, &mut g.key);
            d_normed += &layer.value.backward(&c.normed, &dv, &mut g.value);
            dx += &layer.attn_norm.backward(&c.attn_norm, &d_normed, &mut g.attn_norm);
        }

        if let Some(m) = &cache.embed_dropout {
            dx *= m;
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = dx.row(i);
            let mut tok = grads.token_embedding.row_mut(id as usize);
            tok += &row;
            let mut pos = grads.position_embedding.row_mut(i);
            pos += &row;
        }
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view().into_dyn()),
            (
                "position_embedding".to_string(),
                self.position_embedding.view().into_dyn(),
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("layers.{i}"), layer.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            (
                "token_embedding".to_string(),
                self.token_embedding.view_mut().into_dyn(),
            ),
            (
                "position_embedding".to_string(),
                self.position_embedding.view_mut().into_dyn(),
            ),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(prefixed(&format!("layers.{i}"), layer.tensors_mut()));
        }
        out
    }
}
