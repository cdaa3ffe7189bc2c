//! Fully connected classification head and binary cross-entropy loss.
//!
//! `c → [affine → batch-norm → ReLU]* → affine → sigmoid`, with widths
//! `d → 512·d/768 → 256·d/768 → n_outputs` by default.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prefixed, sigmoid, Linear, Parameters};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Input width first, `n_outputs` last.
    pub layer_widths: Vec<usize>,
    pub batchnorm_momentum: f64,
    pub seed: u64,
}

impl HeadConfig {
    /// Scales the 768-512-256 reference widths to `d_model`.
    pub fn scaled(d_model: usize, n_outputs: usize, seed: u64) -> Self {
        let scale = |w: f64| ((w * d_model as f64 / 768.0).round() as usize).max(1);
        Self {
            layer_widths: vec![d_model, scale(512.0), scale(256.0), n_outputs],
            batchnorm_momentum: 0.1,
            seed,
        }
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 2 || w.contains(&0) {
            return Err(Error::Config(format!("invalid head widths {w:?}")));
        }
        if w[..w.len() - 1].windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::Config(format!("head widths must strictly decrease: {w:?}")));
        }
        if !(0.0..=1.0).contains(&self.batchnorm_momentum) {
            return Err(Error::Config("batch-norm momentum outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub config: HeadConfig,
    pub hidden: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
    pub output: Linear,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    activated: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    mode: Mode,
    layers: Vec<LayerCache>,
    final_input: Array2<f64>,
}

/// Per-example output probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Self { logits, probs }
    }
}

impl ClassifierHead {
    pub fn new(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w = &config.layer_widths;
        let n = w.len();
        let hidden: Vec<Linear> = (0..n - 2).map(|i| Linear::init(&mut rng, w[i], w[i + 1])).collect();
        let norms = (0..n - 2).map(|i| BatchNorm::new(w[i + 1])).collect();
        let output = Linear::init(&mut rng, w[n - 2], w[n - 1]);
        Ok(Self {
            config,
            hidden,
            norms,
            output,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.zero();
        for bn in &mut out.norms {
            bn.running_mean.fill(0.0);
            bn.running_var.fill(0.0);
        }
        out
    }

    pub fn input_dim(&self) -> usize {
        self.config.layer_widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        self.config.n_outputs()
    }

    /// Logits for a batch (`B × d` in, `B × n_outputs` out). Does not touch
    /// running statistics; see [`ClassifierHead::update_running_stats`].
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, HeadCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut act = x.clone();
        let mut layers = Vec::with_capacity(self.hidden.len());
        for (lin, bn) in self.hidden.iter().zip(&self.norms) {
            let input = act;
            let z = lin.forward(&input);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = (&z - &mean)
                        .mapv(|v| v * v)
                        .mean_axis(Axis(0))
                        .expect("non-empty batch");
                    (mean, var)
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt());
            let normalized = (&z - &mean) * &inv_std;
            act = (&normalized * &bn.gamma + &bn.beta).mapv(|v| v.max(0.0));
            layers.push(LayerCache {
                input,
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                activated: act.clone(),
            });
        }
        let logits = self.output.forward(&act);
        Ok((
            logits,
            HeadCache {
                mode,
                layers,
                final_input: act,
            },
        ))
    }

    pub fn predict(&self, x: &Array2<f64>, mode: Mode) -> Result<Vec<Prediction>> {
        let (logits, _) = self.forward(x, mode)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| Prediction::from_logits(r.to_vec()))
            .collect())
    }

    /// Accumulates gradients for `d_logits` and returns `∂L/∂x`.
    pub fn backward(&self, cache: &HeadCache, d_logits: &Array2<f64>, grads: &mut ClassifierHead) -> Array2<f64> {
        let mut d = self.output.backward(&cache.final_input, d_logits, &mut grads.output);
        let b = d_logits.nrows() as f64;
        for (i, c) in cache.layers.iter().enumerate().rev() {
            let bn = &self.norms[i];
            let relu_mask = c.activated.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let dy = d * &relu_mask;
            grads.norms[i].gamma += &(&dy * &c.normalized).sum_axis(Axis(0));
            grads.norms[i].beta += &dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let dz = match cache.mode {
                Mode::Train => {
                    let sum = dxhat.sum_axis(Axis(0));
                    let sum_x = (&dxhat * &c.normalized).sum_axis(Axis(0));
                    ((&dxhat * b - &sum) - &c.normalized * &sum_x) * &c.inv_std / b
                }
                Mode::Eval => &dxhat * &c.inv_std,
            };
            d = self.hidden[i].backward(&c.input, &dz, &mut grads.hidden[i]);
        }
        d
    }

    /// Exponential moving average of the batch statistics in `cache`.
    pub fn update_running_stats(&mut self, cache: &HeadCache) {
        let m = self.config.batchnorm_momentum;
        for (bn, c) in self.norms.iter_mut().zip(&cache.layers) {
            bn.running_mean = &bn.running_mean * (1.0 - m) + &c.batch_mean * m;
            bn.running_var = &bn.running_var * (1.0 - m) + &c.batch_var * m;
        }
    }

    pub fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, bn) in self.norms.iter().enumerate() {
            out.push((format!("norms.{i}.running_mean"), bn.running_mean.view().into_dyn()));
            out.push((format!("norms.{i}.running_var"), bn.running_var.view().into_dyn()));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, bn) in self.norms.iter_mut().enumerate() {
            out.push((format!("norms.{i}.running_mean"), bn.running_mean.view_mut().into_dyn()));
            out.push((format!("norms.{i}.running_var"), bn.running_var.view_mut().into_dyn()));
        }
        out
    }
}

impl Parameters for ClassifierHead {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, (lin, bn)) in self.hidden.iter().zip(&self.norms).enumerate() {
            out.extend(prefixed(&format!("hidden.{i}"), lin.tensors()));
            out.push((format!("norms.{i}.gamma"), bn.gamma.view().into_dyn()));
            out.push((format!("norms.{i}.beta"), bn.beta.view().into_dyn()));
        }
        out.extend(prefixed("output", self.output.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, (lin, bn)) in self.hidden.iter_mut().zip(self.norms.iter_mut()).enumerate() {
            out.extend(prefixed(&format!("hidden.{i}"), lin.tensors_mut()));
            out.push((format!("norms.{i}.gamma"), bn.gamma.view_mut().into_dyn()));
            out.push((format!("norms.{i}.beta"), bn.beta.view_mut().into_dyn()));
        }
        out.extend(prefixed("output", self.output.tensors_mut()));
        out
    }
}

fn check_labels(pred: &Prediction, label: &[u8]) -> Result<()> {
    if label.len() != pred.probs.len() {
        return Err(Error::Label(format!(
            "{} labels for {} outputs",
            label.len(),
            pred.probs.len()
        )));
    }
    if let Some(bad) = label.iter().find(|&&y| y > 1) {
        return Err(Error::Label(format!("label {bad} is not binary")));
    }
    Ok(())
}

/// Mean over outputs of `-[y ln p + (1-y) ln(1-p)]`, with `p` clamped to
/// `[ε, 1-ε]`.
pub fn bce_loss(pred: &Prediction, label: &[u8]) -> Result<f64> {
    check_labels(pred, label)?;
    let n = label.len() as f64;
    Ok(pred
        .probs
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n)
}

/// `∂ bce / ∂ logits = (p - y) / n_outputs`.
pub fn bce_logit_grad(pred: &Prediction, label: &[u8]) -> Result<Vec<f64>> {
    check_labels(pred, label)?;
    let n = label.len() as f64;
    Ok(pred
        .probs
        .iter()
        .zip(label)
        .map(|(&p, &y)| (p - y as f64) / n)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;
    use proptest::prelude::*;

    fn head(d: usize, n: usize) -> ClassifierHead {
        ClassifierHead::new(HeadConfig::scaled(d, n, 3)).unwrap()
    }

    #[test]
    fn scaled_widths() {
        assert_eq!(HeadConfig::scaled(768, 1, 0).layer_widths, [768, 512, 256, 1]);
        assert_eq!(HeadConfig::scaled(64, 1, 0).layer_widths, [64, 43, 21, 1]);
        assert_eq!(HeadConfig::scaled(64, 5, 0).layer_widths, [64, 43, 21, 5]);
        let bad = HeadConfig {
            layer_widths: vec![8, 8, 1],
            batchnorm_momentum: 0.1,
            seed: 0,
        };
        assert!(ClassifierHead::new(bad).is_err());
    }

    #[test]
    fn zero_final_layer_gives_half() {
        let mut h = head(8, 1);
        h.output = Linear::zeros(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = nn::normal_matrix(&mut rng, 4, 8, 3.0);
        for mode in [Mode::Train, Mode::Eval] {
            for p in h.predict(&x, mode).unwrap() {
                assert_eq!(p.logits, vec![0.0]);
                assert_eq!(p.probs, vec![0.5]);
            }
        }
    }

    #[test]
    fn probs_increase_with_final_bias() {
        let mut h = head(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = nn::normal_matrix(&mut rng, 3, 8, 1.0);
        let mut last = h.predict(&x, Mode::Eval).unwrap();
        for _ in 0..5 {
            h.output.bias[0] += 0.5;
            let next = h.predict(&x, Mode::Eval).unwrap();
            for (a, b) in last.iter().zip(&next) {
                assert!(b.probs[0] > a.probs[0]);
            }
            last = next;
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let h = head(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = nn::normal_matrix(&mut rng, 6, 8, 1.0);
        let batch = h.predict(&x, Mode::Eval).unwrap();
        for i in 0..6 {
            let single = h
                .predict(&x.slice(ndarray::s![i..i + 1, ..]).to_owned(), Mode::Eval)
                .unwrap();
            for (a, b) in single[0].probs.iter().zip(&batch[i].probs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_converge_to_batch_stats() {
        let mut h = head(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = nn::normal_matrix(&mut rng, 16, 8, 2.0);
        for _ in 0..300 {
            let (_, cache) = h.forward(&x, Mode::Train).unwrap();
            h.update_running_stats(&cache);
        }
        let train = h.predict(&x, Mode::Train).unwrap();
        let eval = h.predict(&x, Mode::Eval).unwrap();
        for (a, b) in train.iter().zip(&eval) {
            assert!((a.probs[0] - b.probs[0]).abs() < 1e-4);
        }
    }

    #[test]
    fn width_mismatch() {
        let h = head(8, 1);
        assert!(matches!(
            h.forward(&Array2::zeros((2, 7)), Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let half = Prediction::from_logits(vec![0.0]);
        assert!((bce_loss(&half, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let sure = Prediction {
            logits: vec![50.0, -50.0],
            probs: vec![1.0, 0.0],
        };
        let l = bce_loss(&sure, &[1, 0]).unwrap();
        assert!(l >= 0.0 && l <= -(1.0 - PROB_CLAMP).ln() + 1e-18);
        assert!(matches!(bce_loss(&half, &[2]), Err(Error::Label(_))));
        assert!(matches!(bce_loss(&half, &[1, 0]), Err(Error::Label(_))));
    }

    #[test]
    fn bce_matches_direct_formula() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-6.0..6.0)).collect();
            let labels: Vec<u8> = (0..5).map(|_| rng.random_range(0..2)).collect();
            let pred = Prediction::from_logits(logits.clone());
            let mut direct = 0.0;
            for (z, y) in logits.iter().zip(&labels) {
                let p = (1.0 / (1.0 + (-z).exp())).clamp(1e-7, 1.0 - 1e-7);
                direct += -(*y as f64 * p.ln() + (1.0 - *y as f64) * (1.0 - p).ln());
            }
            direct /= 5.0;
            assert!((bce_loss(&pred, &labels).unwrap() - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for mode in [Mode::Train, Mode::Eval] {
            let mut h = head(6, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for bn in &mut h.norms {
                bn.running_mean = nn::normal_vector(&mut rng, bn.gamma.len(), 0.3);
                bn.running_var = nn::normal_vector(&mut rng, bn.gamma.len(), 0.3).mapv(|v| 1.0 + v.abs());
            }
            let x = nn::normal_matrix(&mut rng, 5, 6, 1.0);
            let w = nn::normal_matrix(&mut rng, 5, 2, 1.0);
            let loss = |h: &ClassifierHead, x: &Array2<f64>| (h.forward(x, mode).unwrap().0 * &w).sum();
            let (_, cache) = h.forward(&x, mode).unwrap();
            let mut g = h.zeros_like();
            let dx = h.backward(&cache, &w, &mut g);
            let base = h.flatten();
            let ga = g.flatten();
            let mut q = h.clone();
            let step = 1e-6;
            for i in 0..base.len() {
                let mut v = base.clone();
                v[i] += step;
                q.load_flat(&v);
                let up = loss(&q, &x);
                v[i] -= 2.0 * step;
                q.load_flat(&v);
                let down = loss(&q, &x);
                let num = (up - down) / (2.0 * step);
                assert!(
                    (num - ga[i]).abs() < 1e-6 * (1.0 + num.abs()),
                    "{mode:?} {i}: {num} {}",
                    ga[i]
                );
            }
            for r in 0..5 {
                for c in 0..6 {
                    let mut xp = x.clone();
                    xp[[r, c]] += step;
                    let up = loss(&h, &xp);
                    xp[[r, c]] -= 2.0 * step;
                    let down = loss(&h, &xp);
                    let num = (up - down) / (2.0 * step);
                    assert!((num - dx[[r, c]]).abs() < 1e-6 * (1.0 + num.abs()));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn bce_nonnegative_and_grad_is_p_minus_y(z in -20.0f64..20.0, y in 0u8..2) {
            let pred = Prediction::from_logits(vec![z]);
            let loss = bce_loss(&pred, &[y]).unwrap();
            prop_assert!(loss >= 0.0);
            let g = bce_logit_grad(&pred, &[y]).unwrap()[0];
            let h = 1e-5;
            // softplus form avoids cancellation in 1 - p
            let lf = |z: f64| {
                let s = if y == 1 { -z } else { z };
                s.max(0.0) + (-s.abs()).exp().ln_1p()
            };
            let num = (lf(z + h) - lf(z - h)) / (2.0 * h);
            prop_assume!(sigmoid(z) > 1e-6 && sigmoid(z) < 1.0 - 1e-6);
            prop_assert!((num - g).abs() <= 1e-6 * num.abs().max(1e-3));
        }
    }
}
