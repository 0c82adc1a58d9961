//! Contrastive training of a linear adapter over frozen base embeddings.
//!
//! The adapter maps a base vector `v` to `normalize(Wᵀv)`. Two losses are
//! available: a margin triplet loss on cosine similarity, and the
//! angle-optimized (AoE) objective, which combines three terms over a batch of
//! `B` triplets:
//!
//! * a CoSENT ranking term on cosine similarity,
//!   `log(1 + Σ_{t,u} exp(τ_cos · (cos(a_u, n_u) − cos(a_t, p_t))))`;
//! * an in-batch-negative term: for each anchor, softmax cross-entropy at
//!   temperature `τ_ibn` over all positives and negatives of the batch,
//!   averaged over anchors;
//! * the same CoSENT ranking term on the complex-angle similarity: both
//!   vectors are split into real and imaginary halves, the quotient z/w is
//!   taken elementwise and normalized by |z||w|, and the similarity is the
//!   absolute value of the sum of its real and imaginary parts.
//!
//! The terms are weighted by `cosine_weight`, `ibn_weight` and
//! `angle_weight`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt;
use crate::embed::{EmbedError, EmbeddingVector};
use crate::triplets::Triplet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("non-finite loss or gradient in batch {batch}")]
    NumericalFault { batch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("embedding dimension {found} does not match adapter input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("AoE angle term needs an even output dimension, got {0}")]
    OddDimension(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("triplet references unknown indicator `{0}`")]
    UnknownId(String),
    #[error("gradient check failed: trial seed {seed}, relative deviation {deviation:.3e}")]
    GradCheckFailure { seed: u64, deviation: f64 },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("adapter I/O: {0}")]
    Io(String),
}

/// `d_in × d_out` map applied as `v ↦ normalize(Wᵀv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter {
    w: DMatrix<f64>,
}

impl LinearAdapter {
    pub fn new(w: DMatrix<f64>) -> Result<Self, TrainError> {
        if w.ncols() == 0 || w.ncols() > w.nrows() {
            return Err(TrainError::InvalidConfig(format!("adapter must have 0 < d_out <= d_in, got {}x{}", w.nrows(), w.ncols())));
        }
        Ok(Self { w })
    }

    /// Leading-coordinate projection (the identity when square).
    pub fn identity(d_in: usize, d_out: usize) -> Result<Self, TrainError> {
        Self::new(DMatrix::from_fn(d_in, d_out, |i, j| if i == j { 1.0 } else { 0.0 }))
    }

    pub fn random(d_in: usize, d_out: usize, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_in as f64).sqrt();
        Self::new(DMatrix::from_fn(d_in, d_out, |_, _| rng.random_range(-1.0..1.0) * scale))
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    fn forward(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let mut u = vec![0.0; self.d_out()];
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = self.w.column(j).iter().zip(v).map(|(w, x)| w * x).sum();
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        (u, norm)
    }

    pub fn apply(&self, v: &[f64]) -> Result<EmbeddingVector, TrainError> {
        if v.len() != self.d_in() {
            return Err(TrainError::DimensionMismatch { expected: self.d_in(), found: v.len() });
        }
        Ok(EmbeddingVector::normalized(self.forward(v).0)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path).map_err(|e| TrainError::Io(e.to_string()))?;
        binfmt::write_matrix(std::io::BufWriter::new(file), &self.w).map_err(|e| TrainError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path).map_err(|e| TrainError::Io(e.to_string()))?;
        Self::new(binfmt::read_matrix(std::io::BufReader::new(file)).map_err(|e| TrainError::Io(e.to_string()))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CosineTriplet,
    Aoe,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine-triplet" | "cosine" => Ok(LossKind::CosineTriplet),
            "aoe" => Ok(LossKind::Aoe),
            _ => Err(format!("unknown loss `{s}` (expected cosine-triplet or aoe)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub ibn_tau: f64,
    pub angle_tau: f64,
    pub cosine_tau: f64,
    pub cosine_weight: f64,
    pub ibn_weight: f64,
    pub angle_weight: f64,
}

impl LossConfig {
    pub fn cosine_triplet() -> Self {
        Self { kind: LossKind::CosineTriplet, ..Self::aoe() }
    }

    pub fn aoe() -> Self {
        Self {
            kind: LossKind::Aoe,
            margin: 0.2,
            ibn_tau: 20.0,
            angle_tau: 20.0,
            cosine_tau: 20.0,
            cosine_weight: 1.0,
            ibn_weight: 1.0,
            angle_weight: 1.0,
        }
    }

    pub fn for_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::CosineTriplet => Self::cosine_triplet(),
            LossKind::Aoe => Self::aoe(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let taus = [self.ibn_tau, self.angle_tau, self.cosine_tau];
        if taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(TrainError::InvalidConfig("temperatures must be positive".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(TrainError::InvalidConfig("margin must be non-negative".into()));
        }
        let weights = [self.cosine_weight, self.ibn_weight, self.angle_weight];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(TrainError::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::aoe()
    }
}

/// Base embeddings of one triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletRef<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

struct Forward<'a> {
    input: &'a [f64],
    y: Vec<f64>,
    norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// log(1 + Σ exp(x_i)) and its gradient weights.
fn log1p_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(0.0f64, f64::max);
    let base = (-m).exp();
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z = base + exps.iter().sum::<f64>();
    (m + z.ln(), exps.iter().map(|e| e / z).collect())
}

/// CoSENT ranking over B positive and B negative pair scores; adds gradients
/// with respect to the scores into `d_pos` / `d_neg`.
fn cosent(pos: &[f64], neg: &[f64], tau: f64, weight: f64, d_pos: &mut [f64], d_neg: &mut [f64]) -> f64 {
    let b = pos.len();
    let mut xs = Vec::with_capacity(b * b);
    for t in 0..b {
        for u in 0..b {
            xs.push(tau * (neg[u] - pos[t]));
        }
    }
    let (loss, weights) = log1p_sum_exp(&xs);
    for t in 0..b {
        for u in 0..b {
            let w = weight * tau * weights[t * b + u];
            d_neg[u] += w;
            d_pos[t] -= w;
        }
    }
    weight * loss
}

/// Complex-angle similarity of two vectors split into (re, im) halves.
fn angle_similarity(z: &[f64], w: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let h = z.len() / 2;
    let (a, b) = z.split_at(h);
    let (c, d) = w.split_at(h);
    let mut s = 0.0;
    for k in 0..h {
        s += a[k] * c[k] + b[k] * d[k] + b[k] * c[k] - a[k] * d[k];
    }
    let norm_z = dot(z, z).sqrt();
    let norm_w = dot(w, w).sqrt();
    let sign = if s < 0.0 { -1.0 } else { 1.0 };
    let value = s.abs() / (norm_z * norm_w);
    let scale = sign / (norm_z * norm_w);
    let mut dz = vec![0.0; z.len()];
    let mut dw = vec![0.0; w.len()];
    for k in 0..h {
        dz[k] = scale * (c[k] - d[k]);
        dz[h + k] = scale * (d[k] + c[k]);
        dw[k] = scale * (a[k] + b[k]);
        dw[h + k] = scale * (b[k] - a[k]);
    }
    axpy(-value / (norm_z * norm_z), z, &mut dz);
    axpy(-value / (norm_w * norm_w), w, &mut dw);
    (value, dz, dw)
}

/// Loss and ∂loss/∂W for a batch of triplets.
pub fn loss_and_grad(adapter: &LinearAdapter, batch: &[TripletRef<'_>], cfg: &LossConfig) -> Result<(f64, DMatrix<f64>), TrainError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let d_out = adapter.d_out();
    if cfg.kind == LossKind::Aoe && cfg.angle_weight > 0.0 && !d_out.is_multiple_of(2) {
        return Err(TrainError::OddDimension(d_out));
    }
    let mut fwd = Vec::with_capacity(batch.len() * 3);
    for t in batch {
        for v in [t.anchor, t.positive, t.negative] {
            if v.len() != adapter.d_in() {
                return Err(TrainError::DimensionMismatch { expected: adapter.d_in(), found: v.len() });
            }
            let (u, norm) = adapter.forward(v);
            if norm.is_nan() || norm <= 0.0 {
                return Err(TrainError::NumericalFault { batch: 0 });
            }
            fwd.push(Forward { input: v, y: u.iter().map(|x| x / norm).collect(), norm });
        }
    }
    let b = batch.len();
    let (ia, ip, ineg) = (|t: usize| 3 * t, |t: usize| 3 * t + 1, |t: usize| 3 * t + 2);
    let mut dy: Vec<Vec<f64>> = vec![vec![0.0; d_out]; fwd.len()];
    let mut loss = 0.0;

    match cfg.kind {
        LossKind::CosineTriplet => {
            for t in 0..b {
                let (a, p, n) = (&fwd[ia(t)].y, &fwd[ip(t)].y, &fwd[ineg(t)].y);
                let l = cfg.margin - dot(a, p) + dot(a, n);
                if l > 0.0 {
                    loss += l;
                    let (p, n, a) = (p.clone(), n.clone(), a.clone());
                    axpy(-1.0, &p, &mut dy[ia(t)]);
                    axpy(1.0, &n, &mut dy[ia(t)]);
                    axpy(-1.0, &a, &mut dy[ip(t)]);
                    axpy(1.0, &a, &mut dy[ineg(t)]);
                }
            }
        }
        LossKind::Aoe => {
            if cfg.cosine_weight > 0.0 {
                let pos: Vec<f64> = (0..b).map(|t| dot(&fwd[ia(t)].y, &fwd[ip(t)].y)).collect();
                let neg: Vec<f64> = (0..b).map(|t| dot(&fwd[ia(t)].y, &fwd[ineg(t)].y)).collect();
                let (mut dp, mut dn) = (vec![0.0; b], vec![0.0; b]);
                loss += cosent(&pos, &neg, cfg.cosine_tau, cfg.cosine_weight, &mut dp, &mut dn);
                for t in 0..b {
                    let (a, p, n) = (fwd[ia(t)].y.clone(), fwd[ip(t)].y.clone(), fwd[ineg(t)].y.clone());
                    axpy(dp[t], &p, &mut dy[ia(t)]);
                    axpy(dp[t], &a, &mut dy[ip(t)]);
                    axpy(dn[t], &n, &mut dy[ia(t)]);
                    axpy(dn[t], &a, &mut dy[ineg(t)]);
                }
            }
            if cfg.ibn_weight > 0.0 {
                let candidates: Vec<usize> = (0..b).map(ip).chain((0..b).map(ineg)).collect();
                for t in 0..b {
                    let anchor = fwd[ia(t)].y.clone();
                    let logits: Vec<f64> = candidates.iter().map(|&c| cfg.ibn_tau * dot(&anchor, &fwd[c].y)).collect();
                    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    // target is candidate t (the anchor's own positive)
                    loss += cfg.ibn_weight * (m + z.ln() - logits[t]) / b as f64;
                    for (ci, &c) in candidates.iter().enumerate() {
                        let g = cfg.ibn_weight * (exps[ci] / z - f64::from(u8::from(ci == t))) / b as f64 * cfg.ibn_tau;
                        let cand = fwd[c].y.clone();
                        axpy(g, &cand, &mut dy[ia(t)]);
                        axpy(g, &anchor, &mut dy[c]);
                    }
                }
            }
            if cfg.angle_weight > 0.0 {
                let mut pos = Vec::with_capacity(b);
                let mut neg = Vec::with_capacity(b);
                let mut pos_grads = Vec::with_capacity(b);
                let mut neg_grads = Vec::with_capacity(b);
                for t in 0..b {
                    let (v, dz, dw) = angle_similarity(&fwd[ia(t)].y, &fwd[ip(t)].y);
                    pos.push(v);
                    pos_grads.push((dz, dw));
                    let (v, dz, dw) = angle_similarity(&fwd[ia(t)].y, &fwd[ineg(t)].y);
                    neg.push(v);
                    neg_grads.push((dz, dw));
                }
                let (mut dp, mut dn) = (vec![0.0; b], vec![0.0; b]);
                loss += cosent(&pos, &neg, cfg.angle_tau, cfg.angle_weight, &mut dp, &mut dn);
                for t in 0..b {
                    axpy(dp[t], &pos_grads[t].0, &mut dy[ia(t)]);
                    axpy(dp[t], &pos_grads[t].1, &mut dy[ip(t)]);
                    axpy(dn[t], &neg_grads[t].0, &mut dy[ia(t)]);
                    axpy(dn[t], &neg_grads[t].1, &mut dy[ineg(t)]);
                }
            }
        }
    }

    // back through normalization and the linear map
    let mut grad = DMatrix::zeros(adapter.d_in(), d_out);
    for (f, g) in fwd.iter().zip(&dy) {
        let radial = dot(&f.y, g);
        let du: Vec<f64> = g.iter().zip(&f.y).map(|(gi, yi)| (gi - radial * yi) / f.norm).collect();
        for (i, x) in f.input.iter().enumerate() {
            if *x != 0.0 {
                for (j, d) in du.iter().enumerate() {
                    grad[(i, j)] += x * d;
                }
            }
        }
    }
    if !loss.is_finite() || grad.iter().any(|g: &f64| !g.is_finite()) {
        return Err(TrainError::NumericalFault { batch: 0 });
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, learning_rate: 1e-2, epochs: 1, max_steps: None, seed: 0 }
    }
}

/// Error from [`train`] together with the loss history up to the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error} (after {} steps)", history.len())]
pub struct TrainFailure {
    pub error: TrainError,
    pub history: Vec<f64>,
}

/// Plain SGD over shuffled triplet batches. Deterministic given the seed.
pub fn train(
    adapter: &LinearAdapter,
    triplets: &[Triplet],
    base: &HashMap<String, Vec<f64>>,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(LinearAdapter, Vec<f64>), TrainFailure> {
    let fail = |error: TrainError, history: &[f64]| TrainFailure { error, history: history.to_vec() };
    if train_cfg.batch_size == 0 {
        return Err(fail(TrainError::InvalidConfig("batch_size must be at least 1".into()), &[]));
    }
    let lookup = |id: &str| base.get(id).map(Vec::as_slice).ok_or_else(|| TrainError::UnknownId(id.to_string()));
    let mut resolved = Vec::with_capacity(triplets.len());
    for t in triplets {
        let r = (|| {
            Ok::<_, TrainError>(TripletRef { anchor: lookup(&t.anchor)?, positive: lookup(&t.positive)?, negative: lookup(&t.negative)? })
        })();
        resolved.push(r.map_err(|e| fail(e, &[]))?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut w = adapter.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    'epochs: for _ in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_cfg.batch_size) {
            if train_cfg.max_steps.is_some_and(|m| history.len() >= m) {
                break 'epochs;
            }
            let batch: Vec<TripletRef<'_>> = chunk.iter().map(|&i| resolved[i]).collect();
            let step = history.len();
            let (loss, grad) = loss_and_grad(&w, &batch, loss_cfg).map_err(|e| {
                let e = match e {
                    TrainError::NumericalFault { .. } => TrainError::NumericalFault { batch: step },
                    other => other,
                };
                fail(e, &history)
            })?;
            history.push(loss);
            if train_cfg.learning_rate != 0.0 {
                w.w -= grad * train_cfg.learning_rate;
            }
        }
    }
    Ok((w, history))
}

/// CSV `step,loss`.
pub fn write_loss_history<W: Write>(mut writer: W, history: &[f64]) -> std::io::Result<()> {
    writeln!(writer, "step,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(writer, "{i},{l}")?;
    }
    Ok(())
}

/// Bound on the per-entry relative deviation between analytic and
/// finite-difference gradients.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub worst_deviation: f64,
    pub worst_seed: u64,
}

/// Relative deviation of one gradient entry; magnitudes below `floor` are
/// compared on the absolute scale of `floor`.
pub fn relative_deviation(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient of the batch loss with respect to W.
pub fn numeric_gradient(
    adapter: &LinearAdapter,
    batch: &[TripletRef<'_>],
    cfg: &LossConfig,
    step: f64,
) -> Result<DMatrix<f64>, TrainError> {
    let mut grad = DMatrix::zeros(adapter.d_in(), adapter.d_out());
    let mut probe = adapter.clone();
    for i in 0..adapter.d_in() {
        for j in 0..adapter.d_out() {
            let orig = probe.w[(i, j)];
            probe.w[(i, j)] = orig + step;
            let up = loss_and_grad(&probe, batch, cfg)?.0;
            probe.w[(i, j)] = orig - step;
            let down = loss_and_grad(&probe, batch, cfg)?.0;
            probe.w[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Random small instances: d_in = 6, d_out = 4, batches of 4 triplets.
pub fn grad_check(cfg: &LossConfig, trials: usize, seed: u64) -> Result<GradCheckReport, TrainError> {
    grad_check_with(cfg, trials, seed, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradient before
/// comparison (used to confirm that the check detects broken gradients).
pub fn grad_check_with<F: Fn(&mut DMatrix<f64>)>(
    cfg: &LossConfig,
    trials: usize,
    seed: u64,
    tamper: F,
) -> Result<GradCheckReport, TrainError> {
    if trials == 0 {
        return Err(TrainError::InvalidConfig("trials must be at least 1".into()));
    }
    const D_IN: usize = 6;
    const D_OUT: usize = 4;
    const BATCH: usize = 4;
    let mut report = GradCheckReport { trials, worst_deviation: 0.0, worst_seed: seed };
    for trial in 0..trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let adapter = LinearAdapter::random(D_IN, D_OUT, rng.random())?;
        let vectors: Vec<Vec<f64>> = (0..3 * BATCH).map(|_| (0..D_IN).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<TripletRef<'_>> = (0..BATCH)
            .map(|t| TripletRef { anchor: &vectors[3 * t], positive: &vectors[3 * t + 1], negative: &vectors[3 * t + 2] })
            .collect();
        let (_, mut analytic) = loss_and_grad(&adapter, &batch, cfg)?;
        tamper(&mut analytic);
        let numeric = numeric_gradient(&adapter, &batch, cfg, 1e-6)?;
        let floor = 1e-6_f64.max(1e-4 * numeric.amax());
        let worst = analytic.iter().zip(numeric.iter()).map(|(a, n)| relative_deviation(*a, *n, floor)).fold(0.0, f64::max);
        if worst > report.worst_deviation {
            report.worst_deviation = worst;
            report.worst_seed = trial_seed;
        }
        if worst >= GRAD_CHECK_TOLERANCE {
            return Err(TrainError::GradCheckFailure { seed: trial_seed, deviation: worst });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_triplet_hand_cases() {
        let adapter = LinearAdapter::identity(2, 2).unwrap();
        let cfg = LossConfig::cosine_triplet();
        let a = [1.0, 0.0];
        let n = [0.0, 1.0];
        let (l, g) = loss_and_grad(&adapter, &[TripletRef { anchor: &a, positive: &a, negative: &n }], &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let (l, _) = loss_and_grad(&adapter, &[TripletRef { anchor: &a, positive: &n, negative: &a }], &cfg).unwrap();
        assert_abs_diff_eq!(l, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn cosine_triplet_sums_over_batch() {
        let adapter = LinearAdapter::random(4, 4, 1).unwrap();
        let cfg = LossConfig::cosine_triplet();
        let vs: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect()).collect();
        let t1 = TripletRef { anchor: &vs[0], positive: &vs[1], negative: &vs[2] };
        let t2 = TripletRef { anchor: &vs[3], positive: &vs[4], negative: &vs[5] };
        let both = loss_and_grad(&adapter, &[t1, t2], &cfg).unwrap().0;
        let sep = loss_and_grad(&adapter, &[t1], &cfg).unwrap().0 + loss_and_grad(&adapter, &[t2], &cfg).unwrap().0;
        assert_abs_diff_eq!(both, sep, epsilon = 1e-12);
    }

    #[test]
    fn aoe_single_triplet_reduces_to_pairwise_terms() {
        let adapter = LinearAdapter::random(6, 4, 3).unwrap();
        let cfg = LossConfig::aoe();
        let a = [0.3, -0.2, 0.9, 0.1, 0.5, -0.7];
        let p = [0.2, -0.1, 0.8, 0.3, 0.4, -0.5];
        let n = [-0.6, 0.4, 0.1, 0.9, -0.2, 0.3];
        let (l, _) = loss_and_grad(&adapter, &[TripletRef { anchor: &a, positive: &p, negative: &n }], &cfg).unwrap();
        let (ya, yp, yn) = (unit(&adapter.forward(&a).0), unit(&adapter.forward(&p).0), unit(&adapter.forward(&n).0));
        let softplus = |x: f64| (1.0 + x.exp()).ln();
        let (cp, cn) = (dot(&ya, &yp), dot(&ya, &yn));
        let (gp, gn) = (angle_similarity(&ya, &yp).0, angle_similarity(&ya, &yn).0);
        let expected = softplus(20.0 * (cn - cp)) + softplus(20.0 * (cn - cp)) + softplus(20.0 * (gn - gp));
        assert_abs_diff_eq!(l, expected, epsilon = 1e-10);
    }

    #[test]
    fn angle_similarity_of_identical_vectors_is_one() {
        let v = unit(&[0.3, -0.4, 0.5, 0.1]);
        assert_abs_diff_eq!(angle_similarity(&v, &v).0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        grad_check(&LossConfig::cosine_triplet(), 10, 1).unwrap();
        grad_check(&LossConfig::aoe(), 10, 1).unwrap();
    }

    #[test]
    fn corrupted_gradient_detected() {
        let err = grad_check_with(&LossConfig::aoe(), 3, 9, |g| g[(0, 0)] += 0.5).unwrap_err();
        assert!(matches!(err, TrainError::GradCheckFailure { seed: 9, .. }));
    }

    #[test]
    fn odd_output_rejected_for_aoe() {
        let adapter = LinearAdapter::identity(3, 3).unwrap();
        let v = [1.0, 0.0, 0.0];
        let err = loss_and_grad(&adapter, &[TripletRef { anchor: &v, positive: &v, negative: &v }], &LossConfig::aoe());
        assert_eq!(err, Err(TrainError::OddDimension(3)));
    }

    #[test]
    fn zero_projection_is_a_numerical_fault() {
        let adapter = LinearAdapter::identity(3, 2).unwrap();
        let v = [0.0, 0.0, 1.0];
        let err = loss_and_grad(&adapter, &[TripletRef { anchor: &v, positive: &v, negative: &v }], &LossConfig::cosine_triplet());
        assert_eq!(err, Err(TrainError::NumericalFault { batch: 0 }));
    }

    fn toy_data() -> (Vec<Triplet>, HashMap<String, Vec<f64>>) {
        let mut base = HashMap::new();
        for i in 0..6 {
            let angle = i as f64 * 0.4;
            base.insert(format!("x{i}"), vec![angle.cos(), angle.sin(), 0.3, (i % 2) as f64]);
        }
        let t = |a: usize, p: usize, n: usize| Triplet { anchor: format!("x{a}"), positive: format!("x{p}"), negative: format!("x{n}") };
        (vec![t(0, 2, 1), t(1, 3, 0), t(2, 4, 3), t(3, 5, 2), t(4, 0, 5), t(5, 1, 4)], base)
    }

    #[test]
    fn zero_learning_rate_keeps_adapter() {
        let (triplets, base) = toy_data();
        let adapter = LinearAdapter::identity(4, 4).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, batch_size: 2, ..Default::default() };
        let (trained, history) = train(&adapter, &triplets, &base, &cfg, &LossConfig::cosine_triplet()).unwrap();
        assert_eq!(trained, adapter);
        assert_eq!(history.len(), 9);
        // the cosine-triplet loss is additive, so every epoch sums to the same total
        let sums: Vec<f64> = history.chunks(3).map(|c| c.iter().sum()).collect();
        assert_abs_diff_eq!(sums[0], sums[1], epsilon = 1e-12);
        assert_abs_diff_eq!(sums[0], sums[2], epsilon = 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let (triplets, base) = toy_data();
        let adapter = LinearAdapter::identity(4, 4).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 3, seed: 5, ..Default::default() };
        let a = train(&adapter, &triplets, &base, &cfg, &LossConfig::aoe()).unwrap();
        let b = train(&adapter, &triplets, &base, &cfg, &LossConfig::aoe()).unwrap();
        assert_eq!(a, b);
        let capped = train(&adapter, &triplets, &base, &TrainConfig { max_steps: Some(3), ..cfg }, &LossConfig::aoe()).unwrap();
        assert_eq!(capped.1.len(), 3);
    }

    #[test]
    fn unknown_ids_fail() {
        let (mut triplets, base) = toy_data();
        triplets[0].negative = "missing".into();
        let adapter = LinearAdapter::identity(4, 4).unwrap();
        let err = train(&adapter, &triplets, &base, &TrainConfig::default(), &LossConfig::aoe()).unwrap_err();
        assert_eq!(err.error, TrainError::UnknownId("missing".into()));
    }

    #[test]
    fn adapter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.bin");
        let a = LinearAdapter::random(5, 3, 2).unwrap();
        a.save(&path).unwrap();
        assert_eq!(LinearAdapter::load(&path).unwrap(), a);
    }
}
