//! Fully connected critic with hand-derived first- and second-order backprop.

use serde::{Deserialize, Serialize};

use super::{ModelError, TrainConfig, FEATURE_LEN};
use crate::rng::{standard_normal, RngExt, SeededRng};

/// Affine layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// `W^T d`
    fn apply_transposed(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (o, &dv) in d.iter().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += w * dv;
            }
        }
        out
    }
}

/// Chain of affine layers with ReLU between consecutive layers; scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub layers: Vec<Layer>,
}

pub const CRITIC_WIDTHS: [usize; 6] = [FEATURE_LEN, 32, 32, 16, 8, 1];

struct Trace {
    /// Layer inputs: `acts[k]` feeds layer `k`.
    acts: Vec<Vec<f64>>,
    /// ReLU gates of the hidden layers.
    gates: Vec<Vec<bool>>,
    score: f64,
}

impl CriticParams {
    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    /// He-initialized weights, zero biases.
    pub fn random(widths: &[usize], rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(widths);
        for l in &mut p.layers {
            let std = (2.0 / l.inputs as f64).sqrt();
            for w in &mut l.weights {
                *w = std * standard_normal(rng);
            }
        }
        p
    }

    /// Single affine layer `w . f + b`.
    pub fn linear(w: Vec<f64>, b: f64) -> Self {
        Self {
            layers: vec![Layer {
                inputs: w.len(),
                outputs: 1,
                weights: w,
                bias: vec![b],
            }],
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("parameter count");
            }
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let mismatch = |expected, got| Err(ModelError::ShapeMismatch { expected, got });
        if self.layers.is_empty() {
            return mismatch(1, 0);
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs {
                return mismatch(l.inputs * l.outputs, l.weights.len());
            }
            if l.bias.len() != l.outputs {
                return mismatch(l.outputs, l.bias.len());
            }
        }
        for w in self.layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return mismatch(w[0].outputs, w[1].inputs);
            }
        }
        let last = self.layers.last().unwrap().outputs;
        if last != 1 {
            return mismatch(1, last);
        }
        Ok(())
    }

    fn check_input(&self, f: &[f64]) -> Result<(), ModelError> {
        self.check()?;
        if f.len() != self.input_len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.input_len(),
                got: f.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, f: &[f64]) -> Trace {
        let mut acts = vec![f.to_vec()];
        let mut gates = Vec::new();
        let last = self.layers.len() - 1;
        let mut score = 0.0;
        for (k, l) in self.layers.iter().enumerate() {
            let z = l.apply(&acts[k]);
            if k == last {
                score = z[0];
            } else {
                gates.push(z.iter().map(|&v| v > 0.0).collect());
                acts.push(z.into_iter().map(|v| v.max(0.0)).collect());
            }
        }
        Trace { acts, gates, score }
    }

    /// Backpropagated signals `delta[k] = dD/dz_k` for every layer's pre-activation.
    fn deltas(&self, t: &Trace) -> Vec<Vec<f64>> {
        let n = self.layers.len();
        let mut deltas = vec![Vec::new(); n];
        deltas[n - 1] = vec![1.0];
        for k in (0..n - 1).rev() {
            let up = self.layers[k + 1].apply_transposed(&deltas[k + 1]);
            deltas[k] = up
                .iter()
                .zip(&t.gates[k])
                .map(|(&v, &g)| if g { v } else { 0.0 })
                .collect();
        }
        deltas
    }

    fn score_param_grad(&self, t: &Trace, deltas: &[Vec<f64>], scale: f64, acc: &mut [f64]) {
        let mut off = 0;
        for (k, l) in self.layers.iter().enumerate() {
            for o in 0..l.outputs {
                for i in 0..l.inputs {
                    acc[off + o * l.inputs + i] += scale * deltas[k][o] * t.acts[k][i];
                }
            }
            off += l.weights.len();
            for o in 0..l.outputs {
                acc[off + o] += scale * deltas[k][o];
            }
            off += l.outputs;
        }
    }

    /// Gradient of `(|g| - 1)^2` with respect to the parameters, where `g` is the
    /// input gradient at `x`. The ReLU gates are locally constant, so `g` is a
    /// multilinear function of the weights and the biases do not enter it.
    fn penalty_param_grad(&self, t: &Trace, deltas: &[Vec<f64>], c: &[f64], scale: f64, acc: &mut [f64]) {
        // g = W0^T delta0, delta_k = gate_k . (W_{k+1}^T delta_{k+1}).
        // Adjoint of delta_0 is e0 = W0 c; adjoint flows upward through the chain.
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |o, l| {
                let cur = *o;
                *o += l.weights.len() + l.bias.len();
                Some(cur)
            })
            .collect();
        let l0 = &self.layers[0];
        for o in 0..l0.outputs {
            for i in 0..l0.inputs {
                acc[offsets[0] + o * l0.inputs + i] += scale * c[i] * deltas[0][o];
            }
        }
        let mut e = l0.apply(c);
        for (v, b) in e.iter_mut().zip(&l0.bias) {
            *v -= b;
        }
        for k in 0..self.layers.len() - 1 {
            let gated: Vec<f64> = e
                .iter()
                .zip(&t.gates[k])
                .map(|(&v, &g)| if g { v } else { 0.0 })
                .collect();
            let l = &self.layers[k + 1];
            for o in 0..l.outputs {
                for i in 0..l.inputs {
                    acc[offsets[k + 1] + o * l.inputs + i] += scale * gated[i] * deltas[k + 1][o];
                }
            }
            e = l.apply(&gated);
            for (v, b) in e.iter_mut().zip(&l.bias) {
                *v -= b;
            }
        }
    }
}

pub fn critic_forward(p: &CriticParams, f: &[f64]) -> Result<f64, ModelError> {
    p.check_input(f)?;
    Ok(p.trace(f).score)
}

/// `dD/df`; the ReLU derivative at exactly zero is taken as zero.
pub fn critic_input_gradient(p: &CriticParams, f: &[f64]) -> Result<Vec<f64>, ModelError> {
    p.check_input(f)?;
    let t = p.trace(f);
    Ok(p.layers[0].apply_transposed(&p.deltas(&t)[0]))
}

/// `dD/dtheta` in flattened parameter order.
pub fn critic_param_gradient(p: &CriticParams, f: &[f64]) -> Result<Vec<f64>, ModelError> {
    p.check_input(f)?;
    let t = p.trace(f);
    let d = p.deltas(&t);
    let mut acc = vec![0.0; p.param_count()];
    p.score_param_grad(&t, &d, 1.0, &mut acc);
    Ok(acc)
}

/// Interpolation pairs between the two batches, the shorter one cycled.
pub(crate) fn pairs<'a>(h_s: &'a [Vec<f64>], h_t: &'a [Vec<f64>]) -> impl Iterator<Item = (&'a [f64], &'a [f64])> {
    let n = h_s.len().max(h_t.len());
    (0..n).map(move |i| (h_s[i % h_s.len()].as_slice(), h_t[i % h_t.len()].as_slice()))
}

pub(crate) fn interpolate(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + alpha * (y - x)).collect()
}

/// Clips `g` to `max_norm`, returning the (possibly scaled) norm and whether it was clipped.
pub fn clipped_norm(g: &[f64], max_norm: f64) -> (f64, bool) {
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        (g.iter().map(|v| (v * s) * (v * s)).sum::<f64>().sqrt(), true)
    } else {
        (n, false)
    }
}

/// Value and parameter gradient of `mean D(h_s) - mean D(h_t) + penalty`, with
/// one interpolation coefficient per pair drawn from `alphas`.
pub fn wd_objective_gradient(
    p: &CriticParams,
    h_s: &[Vec<f64>],
    h_t: &[Vec<f64>],
    alphas: &[f64],
    max_norm: f64,
) -> Result<(f64, Vec<f64>), ModelError> {
    if h_s.is_empty() || h_t.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut acc = vec![0.0; p.param_count()];
    let mut value = 0.0;
    for (batch, sign) in [(h_s, 1.0), (h_t, -1.0)] {
        let w = sign / batch.len() as f64;
        for f in batch {
            p.check_input(f)?;
            let t = p.trace(f);
            value += w * t.score;
            p.score_param_grad(&t, &p.deltas(&t), w, &mut acc);
        }
    }
    let n_pairs = h_s.len().max(h_t.len());
    if alphas.len() != n_pairs {
        return Err(ModelError::ShapeMismatch {
            expected: n_pairs,
            got: alphas.len(),
        });
    }
    let w = 1.0 / n_pairs as f64;
    for ((a, b), &alpha) in pairs(h_s, h_t).zip(alphas) {
        let x = interpolate(a, b, alpha);
        let t = p.trace(&x);
        let d = p.deltas(&t);
        let g = p.layers[0].apply_transposed(&d[0]);
        let (norm, clipped) = clipped_norm(&g, max_norm);
        value += w * (norm - 1.0).powi(2);
        // A clipped gradient has constant norm, so the penalty is locally flat.
        if !clipped && norm > 0.0 {
            let c: Vec<f64> = g.iter().map(|v| 2.0 * (norm - 1.0) * v / norm).collect();
            p.penalty_param_grad(&t, &d, &c, w, &mut acc);
        }
    }
    Ok((value, acc))
}

/// Gradient descent on `mean D(unlabeled) - mean D(labeled) + penalty`, which
/// pushes labeled features to high scores and unlabeled ones to low scores.
pub fn train_critic(
    p: &CriticParams,
    labeled: &[Vec<f64>],
    unlabeled: &[Vec<f64>],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<CriticParams, ModelError> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut out = p.clone();
    let mut theta = out.params();
    let n_pairs = labeled.len().max(unlabeled.len());
    for _ in 0..cfg.critic_steps {
        let alphas: Vec<f64> = (0..n_pairs).map(|_| rng.random::<f64>()).collect();
        let (_, grad) = wd_objective_gradient(&out, unlabeled, labeled, &alphas, cfg.max_norm)?;
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.critic_learning_rate * g;
        }
        out.set_params(&theta);
    }
    Ok(out)
}
