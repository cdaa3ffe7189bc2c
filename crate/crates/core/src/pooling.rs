//! Attention pooling of per-token embeddings into one report vector.
//!
//! For each real token `t`:
//!
//! ```text
//! u_t   = tanh(W h_t + b)
//! s_t   = u_tᵀ u
//! α     = softmax(s)          (over unmasked positions only)
//! c     = Σ_t α_t h_t
//! ```
//!
//! `u` is a learned context vector. [`ScoreMode::Raw`] scores `h_tᵀ u`
//! directly and bypasses `W`, `b`.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ContextualEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{self, Parameters};
use crate::tokenizer::{surface_tokens, TokenSeq, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `s_t = tanh(W h_t + b)ᵀ u`.
    #[default]
    Transformed,
    /// `s_t = h_tᵀ u`.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Standard deviation of the zero-mean normal initialization.
    pub init_sigma: f64,
    pub zero_bias: bool,
    pub score_mode: ScoreMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            init_sigma: 0.05,
            zero_bias: false,
            score_mode: ScoreMode::Transformed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `d × d`, applied as `W h_t`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// The context vector `u`.
    pub context: Array1<f64>,
    pub init_sigma: f64,
    pub score_mode: ScoreMode,
}

/// Pooled representation plus the intermediates needed for inspection and
/// backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledReport {
    /// `c`, length `d`.
    pub representation: Array1<f64>,
    /// One weight per real token, in token order.
    pub alphas: Vec<f64>,
    /// Sequence positions the alphas refer to.
    pub positions: Vec<usize>,
    /// `u_t` rows for the real tokens (`Raw` mode: empty).
    pub transformed: Array2<f64>,
    pub scores: Vec<f64>,
}

pub fn init_attention(d_model: usize, sigma: f64, seed: u64) -> Result<AttentionParams> {
    AttentionParams::init(
        d_model,
        &AttentionConfig {
            init_sigma: sigma,
            ..AttentionConfig::default()
        },
        seed,
    )
}

impl AttentionParams {
    pub fn init(d_model: usize, config: &AttentionConfig, seed: u64) -> Result<Self> {
        let sigma = config.init_sigma;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("attention init sigma must be > 0, got {sigma}")));
        }
        if d_model == 0 {
            return Err(Error::Config("attention width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context = nn::normal_vector(&mut rng, d_model, sigma);
        let weight = nn::normal_matrix(&mut rng, d_model, d_model, sigma);
        let bias = if config.zero_bias {
            Array1::zeros(d_model)
        } else {
            nn::normal_vector(&mut rng, d_model, sigma)
        };
        Ok(Self {
            weight,
            bias,
            context,
            init_sigma: sigma,
            score_mode: config.score_mode,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.zero();
        out
    }

    pub fn d_model(&self) -> usize {
        self.context.len()
    }

    pub fn attend(&self, emb: &ContextualEmbeddings) -> Result<PooledReport> {
        self.pool(&emb.hidden, &emb.mask_bools())
    }

    /// Pools the rows of `hidden` where `mask` is set.
    pub fn pool(&self, hidden: &Array2<f64>, mask: &[bool]) -> Result<PooledReport> {
        if hidden.ncols() != self.d_model() || mask.len() != hidden.nrows() {
            return Err(Error::Shape(format!(
                "hidden {:?} / mask {} against attention width {}",
                hidden.dim(),
                mask.len(),
                self.d_model()
            )));
        }
        let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if positions.is_empty() {
            return Err(Error::Pooling("no unmasked tokens to pool".into()));
        }
        let real = hidden.select(Axis(0), &positions);
        let (transformed, scores) = match self.score_mode {
            ScoreMode::Transformed => {
                let u = (real.dot(&self.weight.t()) + &self.bias).mapv(f64::tanh);
                let s = u.dot(&self.context).to_vec();
                (u, s)
            }
            ScoreMode::Raw => (Array2::zeros((0, self.d_model())), real.dot(&self.context).to_vec()),
        };
        let (alphas, representation) = pool_from_scores(&real, &scores);
        Ok(PooledReport {
            representation,
            alphas,
            positions,
            transformed,
            scores,
        })
    }

    /// Given `∂L/∂c`, accumulates parameter gradients into `grads` and
    /// returns `∂L/∂H` (zero on masked rows).
    pub fn backward(
        &self,
        pooled: &PooledReport,
        hidden: &Array2<f64>,
        d_repr: &Array1<f64>,
        grads: &mut AttentionParams,
    ) -> Array2<f64> {
        let real = hidden.select(Axis(0), &pooled.positions);
        let alphas = Array1::from(pooled.alphas.clone());
        // c = Σ α_t h_t
        let d_alpha = real.dot(d_repr);
        let mut d_real = Array2::zeros(real.raw_dim());
        for (mut row, &a) in d_real.rows_mut().into_iter().zip(&alphas) {
            row.scaled_add(a, d_repr);
        }
        // softmax
        let mean = alphas.dot(&d_alpha);
        let d_scores = &alphas * &(&d_alpha - mean);
        match self.score_mode {
            ScoreMode::Transformed => {
                let u = &pooled.transformed;
                grads.context += &u.t().dot(&d_scores);
                let mut d_pre = Array2::zeros(u.raw_dim());
                for ((mut row, u_row), &ds) in d_pre.rows_mut().into_iter().zip(u.rows()).zip(&d_scores) {
                    for ((out, &ut), &ctx) in row.iter_mut().zip(u_row).zip(&self.context) {
                        *out = ds * ctx * (1.0 - ut * ut);
                    }
                }
                ndarray::linalg::general_mat_mul(1.0, &d_pre.t(), &real, 1.0, &mut grads.weight);
                grads.bias += &d_pre.sum_axis(Axis(0));
                d_real += &d_pre.dot(&self.weight);
            }
            ScoreMode::Raw => {
                grads.context += &real.t().dot(&d_scores);
                for (mut row, &ds) in d_real.rows_mut().into_iter().zip(&d_scores) {
                    row.scaled_add(ds, &self.context);
                }
            }
        }
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        for (k, &pos) in pooled.positions.iter().enumerate() {
            d_hidden.row_mut(pos).assign(&d_real.row(k));
        }
        d_hidden
    }
}

/// Softmax (max-subtracted) of `scores` and the weighted row sum of `rows`.
pub fn pool_from_scores(rows: &Array2<f64>, scores: &[f64]) -> (Vec<f64>, Array1<f64>) {
    let alphas = nn::masked_softmax(scores, &vec![true; scores.len()]);
    let c = Array1::from(alphas.clone()).dot(rows);
    (alphas, c)
}

impl Parameters for AttentionParams {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view().into_dyn()),
            ("bias".into(), self.bias.view().into_dyn()),
            ("context".into(), self.context.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("weight".into(), self.weight.view_mut().into_dyn()),
            ("bias".into(), self.bias.view_mut().into_dyn()),
            ("context".into(), self.context.view_mut().into_dyn()),
        ]
    }
}

/// (surface token, α_t) pairs in token order, `[CLS]`/`[SEP]` included.
pub fn attention_weights(pooled: &PooledReport, seq: &TokenSeq, vocab: &Vocabulary) -> Result<Vec<(String, f64)>> {
    let expected: Vec<usize> = (0..seq.mask.len()).filter(|&i| seq.mask[i] != 0).collect();
    if expected != pooled.positions || pooled.alphas.len() != pooled.positions.len() {
        return Err(Error::Alignment(format!(
            "pooled report covers {} positions, sequence has {} real tokens",
            pooled.positions.len(),
            expected.len()
        )));
    }
    let tokens = surface_tokens(seq, vocab)?;
    Ok(tokens.into_iter().zip(pooled.alphas.iter().copied()).collect())
}

/// One line of the attention-weight export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub report_id: String,
    pub tokens: Vec<String>,
    pub alphas: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn params(d: usize, seed: u64) -> AttentionParams {
        init_attention(d, 0.5, seed).unwrap()
    }

    fn emb(hidden: Array2<f64>) -> ContextualEmbeddings {
        let n = hidden.nrows();
        ContextualEmbeddings {
            hidden,
            mask: vec![1; n],
        }
    }

    #[test]
    fn init_statistics_and_determinism() {
        let p = init_attention(64, 0.05, 11).unwrap();
        let mean = p.context.mean().unwrap();
        assert!(mean.abs() < 4.0 * 0.05 / 8.0, "{mean}");
        assert_eq!(p, init_attention(64, 0.05, 11).unwrap());
        assert!(matches!(init_attention(64, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(init_attention(64, -1.0, 1), Err(Error::Config(_))));
        let zb = AttentionParams::init(
            4,
            &AttentionConfig {
                zero_bias: true,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(zb.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn single_token_gets_all_weight() {
        let h = array![[0.3, -1.2, 2.0]];
        let out = params(3, 1).attend(&emb(h.clone())).unwrap();
        assert_eq!(out.alphas, vec![1.0]);
        assert_eq!(out.representation, h.row(0).to_owned());
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let h = array![[0.3, -1.2], [0.3, -1.2]];
        let out = params(2, 2).attend(&emb(h)).unwrap();
        assert!((out.alphas[0] - 0.5).abs() < 1e-15);
        assert!((out.representation[0] - 0.3).abs() < 1e-15);
        assert!((out.representation[1] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_two_token_case() {
        let p = AttentionParams {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
            context: array![1.0, 0.0],
            init_sigma: 0.05,
            score_mode: ScoreMode::Transformed,
        };
        let out = p.attend(&emb(array![[1.0, 0.0], [-1.0, 0.0]])).unwrap();
        // straight-line recomputation
        let s1 = 1f64.tanh();
        let s2 = -(1f64.tanh());
        let a1 = s1.exp() / (s1.exp() + s2.exp());
        let a2 = 1.0 - a1;
        assert!((out.scores[0] - s1).abs() < 1e-15);
        assert!((out.scores[1] - s2).abs() < 1e-15);
        assert!((out.alphas[0] - a1).abs() < 1e-12);
        assert!((a1 - 0.821_007_5).abs() < 1e-7);
        assert!((out.representation[0] - (a1 - a2)).abs() < 1e-12);
        assert!((out.representation[0] - 0.642_015).abs() < 1e-6);
        assert_eq!(out.representation[1], 0.0);
    }

    #[test]
    fn masked_rows_excluded() {
        let p = params(2, 3);
        let hidden = array![[1.0, 2.0], [50.0, 50.0], [3.0, 4.0]];
        let masked = p.pool(&hidden, &[true, false, true]).unwrap();
        let compact = p.pool(&array![[1.0, 2.0], [3.0, 4.0]], &[true, true]).unwrap();
        assert_eq!(masked.alphas, compact.alphas);
        assert_eq!(masked.representation, compact.representation);
        assert_eq!(masked.positions, vec![0, 2]);
        assert!(matches!(p.pool(&hidden, &[false; 3]), Err(Error::Pooling(_))));
    }

    #[test]
    fn raw_mode_scores_hidden_directly() {
        let mut p = params(2, 4);
        p.score_mode = ScoreMode::Raw;
        p.context = array![2.0, 0.0];
        let out = p.attend(&emb(array![[1.0, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(out.scores, vec![2.0, 0.0]);
    }

    #[test]
    fn backward_matches_finite_differences_both_modes() {
        use rand::SeedableRng;
        for mode in [ScoreMode::Transformed, ScoreMode::Raw] {
            let mut p = params(4, 5);
            p.score_mode = mode;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let hidden = nn::normal_matrix(&mut rng, 5, 4, 1.0);
            let mask = [true, true, false, true, true];
            let probe = nn::normal_vector(&mut rng, 4, 1.0);
            let loss = |p: &AttentionParams, h: &Array2<f64>| p.pool(h, &mask).unwrap().representation.dot(&probe);
            let pooled = p.pool(&hidden, &mask).unwrap();
            let mut g = p.zeros_like();
            let dh = p.backward(&pooled, &hidden, &probe, &mut g);
            let step = 1e-6;
            let base = p.flatten();
            let ga = g.flatten();
            let mut q = p.clone();
            for i in 0..base.len() {
                let mut v = base.clone();
                v[i] += step;
                q.load_flat(&v);
                let up = loss(&q, &hidden);
                v[i] -= 2.0 * step;
                q.load_flat(&v);
                let down = loss(&q, &hidden);
                assert!(((up - down) / (2.0 * step) - ga[i]).abs() < 1e-7, "{mode:?} param {i}");
            }
            for idx in 0..hidden.len() {
                let (r, c) = (idx / 4, idx % 4);
                let mut hp = hidden.clone();
                hp[[r, c]] += step;
                let up = loss(&p, &hp);
                hp[[r, c]] -= 2.0 * step;
                let down = loss(&p, &hp);
                assert!(((up - down) / (2.0 * step) - dh[[r, c]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn weights_align_with_tokens() {
        use crate::corpus::Report;
        use crate::tokenizer::encode;
        let vocab = Vocabulary::build(
            &[Report {
                report_id: "R".into(),
                patient_id: "P".into(),
                text: "normal study".into(),
                coarse_label: None,
                granular_labels: None,
                annotation: None,
            }],
            1,
        )
        .unwrap();
        let seq = encode("study normal", &vocab, 8);
        let p = params(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = ContextualEmbeddings {
            hidden: nn::normal_matrix(&mut rng, 8, 3, 1.0),
            mask: seq.mask.clone(),
        };
        let pooled = p.attend(&e).unwrap();
        let pairs = attention_weights(&pooled, &seq, &vocab).unwrap();
        let words: Vec<&str> = pairs.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, ["[CLS]", "study", "normal", "[SEP]"]);
        assert!((pairs.iter().map(|(_, a)| a).sum::<f64>() - 1.0).abs() < 1e-12);

        let short = encode("study", &vocab, 8);
        assert!(matches!(
            attention_weights(&pooled, &short, &vocab),
            Err(Error::Alignment(_))
        ));

        let one = ContextualEmbeddings {
            hidden: nn::normal_matrix(&mut rng, 3, 3, 1.0),
            mask: vec![1, 0, 0],
        };
        let single = TokenSeq {
            ids: vec![2, 0, 0],
            mask: vec![1, 0, 0],
            original_length: 1,
        };
        let pairs = attention_weights(&p.attend(&one).unwrap(), &single, &vocab).unwrap();
        assert_eq!(pairs, vec![("[CLS]".to_string(), 1.0)]);
    }

    proptest! {
        #[test]
        fn normalization_and_convexity(seed in 0u64..1000, t in 1usize..6) {
            use rand::SeedableRng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = init_attention(3, 1.0, seed).unwrap();
            let hidden = nn::normal_matrix(&mut rng, t, 3, 2.0);
            let out = p.attend(&emb(hidden.clone())).unwrap();
            prop_assert!(out.alphas.iter().all(|&a| a >= 0.0));
            prop_assert!((out.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // bounding box is implied by the convex hull
            for j in 0..3 {
                let col = hidden.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.representation[j] >= lo - 1e-12 && out.representation[j] <= hi + 1e-12);
            }
        }
    }
}
