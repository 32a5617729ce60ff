//! BF16 update absorption and Adam update-magnitude analysis.
//!
//! A weight update is *absorbed* when `bf16(w + Δ) == w`: the update is below
//! half the BF16 grid spacing at `|w|` and rounds away. Adam bounds the
//! per-step update by `η·sqrt((1-β1)/(1-β2) · (1-β2^t)/(1-β1^t))`, so weights
//! above `256·η·bound` can never move in a single BF16 step.

use serde::Serialize;
use thiserror::Error;

use crate::bf16::{round_to_bf16, Bf16};
use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::patch::{check_compatible, PatchError};

/// Exponent of the approximate relative absorption threshold `2^-8`.
pub const ABSORPTION_LOG2: i32 = -8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("Adam requires 0 < beta1 < beta2 < 1 (got beta1={beta1}, beta2={beta2})")]
    InvalidBetas { beta1: f64, beta2: f64 },
    #[error("learning rate must be positive (got {0})")]
    InvalidLearningRate(f64),
    #[error("checkpoint has no elements")]
    EmptyCheckpoint,
    #[error("gradient sequence is empty")]
    EmptySequence,
    #[error("gradient shape mismatch at step {step}, tensor `{tensor}`: expected {expected} values, got {actual}")]
    GradientShape {
        step: usize,
        tensor: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Mismatch(#[from] PatchError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamConfig {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            eta: 3e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn new(eta: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            eta,
            beta1,
            beta2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(AnalysisError::InvalidBetas {
                beta1: self.beta1,
                beta2: self.beta2,
            });
        }
        if !(self.eta > 0.0) {
            return Err(AnalysisError::InvalidLearningRate(self.eta));
        }
        Ok(())
    }
}

/// True iff adding `delta` to `w` and rounding back to BF16 leaves the bit
/// pattern unchanged.
pub fn is_absorbed_exact(w: Bf16, delta: f64) -> bool {
    round_to_bf16(w.to_f64() + delta) == w
}

/// Approximate absorption threshold `|w|·2^-8`.
///
/// The exact threshold is half the local grid spacing, which lies in
/// `(|w|·2^-9, |w|·2^-8]` for normal `w`. For `w = 0` this returns the
/// smallest positive subnormal step.
pub fn absorption_threshold(w: Bf16) -> f64 {
    let mag = w.to_f64().abs();
    if mag == 0.0 {
        Bf16::MIN_POSITIVE_SUBNORMAL.to_f64()
    } else {
        mag * 2f64.powi(ABSORPTION_LOG2)
    }
}

/// Step horizon for [`adam_bound`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Step(u64),
    Infinite,
}

/// Upper bound on `|Δw| / η` at step `t` (1-based).
pub fn adam_bound(cfg: &AdamConfig, t: Horizon) -> Result<f64, AnalysisError> {
    if !(0.0 < cfg.beta1 && cfg.beta1 < cfg.beta2 && cfg.beta2 < 1.0) {
        return Err(AnalysisError::InvalidBetas {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
        });
    }
    let asymptotic = (1.0 - cfg.beta1) / (1.0 - cfg.beta2);
    Ok(match t {
        Horizon::Infinite => asymptotic.sqrt(),
        Horizon::Step(t) => {
            let t = t.max(1) as f64;
            (asymptotic * (1.0 - cfg.beta2.powf(t)) / (1.0 - cfg.beta1.powf(t))).sqrt()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalMode {
    /// Uses the asymptotic Adam bound.
    Theoretical,
    /// Assumes `|m̂|/sqrt(v̂) ≈ 1`.
    Effective,
}

/// Largest weight magnitude that can still receive a non-absorbed update:
/// `256·η·bound`.
pub fn critical_weight(cfg: &AdamConfig, mode: CriticalMode) -> Result<f64, AnalysisError> {
    cfg.validate()?;
    let ratio = match mode {
        CriticalMode::Theoretical => adam_bound(cfg, Horizon::Infinite)?,
        CriticalMode::Effective => 1.0,
    };
    Ok(2f64.powi(-ABSORPTION_LOG2) * cfg.eta * ratio)
}

/// Fraction of elements with `|w| > threshold` (strict).
pub fn frozen_fraction(c: &Checkpoint, threshold: f64) -> Result<f64, AnalysisError> {
    let d = c.num_elements();
    if d == 0 {
        return Err(AnalysisError::EmptyCheckpoint);
    }
    let above: usize = c
        .tensors()
        .iter()
        .map(|t| t.data().iter().filter(|v| v.to_f64().abs() > threshold).count())
        .sum();
    Ok(above as f64 / d as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityReport {
    /// Step gap between the compared checkpoints (metadata only).
    pub k: u64,
    pub sparsity: f64,
    pub changed: usize,
    pub total: usize,
}

impl SparsityReport {
    fn from_counts(k: u64, changed: usize, total: usize) -> Self {
        let sparsity = if total == 0 { 1.0 } else { 1.0 - changed as f64 / total as f64 };
        Self { k, sparsity, changed, total }
    }
}

/// Fraction of parameters that are bitwise identical between `a` and `b`.
pub fn sparsity(a: &Checkpoint, b: &Checkpoint, k: u64) -> Result<SparsityReport, AnalysisError> {
    check_compatible(a, b)?;
    let mut changed = 0;
    for ta in a.tensors() {
        let tb = b.tensor(ta.name()).expect("compatible");
        changed += ta.data().iter().zip(tb.data()).filter(|(x, y)| x != y).count();
    }
    Ok(SparsityReport::from_counts(k, changed, a.num_elements()))
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioTrajectory {
    /// `|m̂_t| / (sqrt(v̂_t) + ε)` for t = 1..=n.
    pub ratios: Vec<f64>,
    pub peak: f64,
    /// 0-based index into `ratios`.
    pub peak_index: usize,
    /// Number of steps from the phase boundary through the peak, counting the
    /// boundary step as 1. `None` when no boundary was given or the peak lies
    /// before it.
    pub peak_steps_after_boundary: Option<usize>,
}

/// Runs the bias-corrected Adam moment recursion on a scalar gradient
/// sequence. `boundary` is the 0-based index of the first step of the phase
/// whose peak should be located (e.g. the first large gradient).
pub fn simulate_adam_ratio(
    gradients: &[f64],
    cfg: &AdamConfig,
    boundary: Option<usize>,
) -> Result<RatioTrajectory, AnalysisError> {
    if gradients.is_empty() {
        return Err(AnalysisError::EmptySequence);
    }
    adam_bound(cfg, Horizon::Infinite)?;
    let mut m = 0.0f64;
    let mut v = 0.0f64;
    let mut b1t = 1.0f64;
    let mut b2t = 1.0f64;
    let mut ratios = Vec::with_capacity(gradients.len());
    for &g in gradients {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        let m_hat = m / (1.0 - b1t);
        let v_hat = v / (1.0 - b2t);
        ratios.push(m_hat.abs() / (v_hat.sqrt() + cfg.epsilon));
    }
    let (peak_index, peak) = ratios
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, r)| if r > best.1 { (i, r) } else { best });
    let peak_steps_after_boundary = boundary.and_then(|b| (peak_index >= b).then(|| peak_index - b + 1));
    Ok(RatioTrajectory {
        ratios,
        peak,
        peak_index,
        peak_steps_after_boundary,
    })
}

/// `[quiet]·quiet_steps + [1.0]·loud_steps`, the sequence that pushes the
/// ratio toward the bound. Returns the sequence and the boundary index.
pub fn adversarial_sequence(quiet_steps: usize, quiet_value: f64, loud_steps: usize) -> (Vec<f64>, usize) {
    let mut g = vec![quiet_value; quiet_steps];
    g.extend(std::iter::repeat(1.0).take(loud_steps));
    (g, quiet_steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionMode {
    /// Weights live in BF16; each step rounds `w - Δ` back to BF16.
    PureBf16,
    /// Wide master weights accumulate updates; BF16 is a per-step cast.
    Fp32Master,
}

#[derive(Clone, Debug)]
pub struct AbsorptionRun {
    /// One report per step comparing consecutive BF16 weights (k = 1).
    pub reports: Vec<SparsityReport>,
    pub final_checkpoint: Checkpoint,
}

/// Per-step gradients: `gradients[step][tensor][element]`, tensors in the
/// checkpoint's insertion order.
pub type GradientSteps = [Vec<Vec<f64>>];

/// A gradient schedule that repeats `value` for every element.
pub fn constant_gradients(weights: &Checkpoint, value: f64, steps: usize) -> Vec<Vec<Vec<f64>>> {
    let one: Vec<Vec<f64>> = weights.tensors().iter().map(|t| vec![value; t.len()]).collect();
    vec![one; steps]
}

/// Runs Adam elementwise over a checkpoint and reports per-step BF16 sparsity.
pub fn simulate_absorbed_updates(
    weights: &Checkpoint,
    gradients: &GradientSteps,
    cfg: &AdamConfig,
    mode: PrecisionMode,
) -> Result<AbsorptionRun, AnalysisError> {
    cfg.validate()?;
    for (step, g) in gradients.iter().enumerate() {
        if g.len() != weights.tensors().len() {
            return Err(AnalysisError::GradientShape {
                step,
                tensor: "<tensor count>".into(),
                expected: weights.tensors().len(),
                actual: g.len(),
            });
        }
        for (t, gt) in weights.tensors().iter().zip(g) {
            if gt.len() != t.len() {
                return Err(AnalysisError::GradientShape {
                    step,
                    tensor: t.name().to_string(),
                    expected: t.len(),
                    actual: gt.len(),
                });
            }
        }
    }

    let d = weights.num_elements();
    let mut master: Vec<Vec<f64>> = weights
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_f64()).collect())
        .collect();
    let mut shown: Vec<Vec<Bf16>> = weights.tensors().iter().map(|t| t.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = master.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut v = m.clone();
    let mut b1t = 1.0;
    let mut b2t = 1.0;
    let mut reports = Vec::with_capacity(gradients.len());

    for g in gradients {
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        let mut changed = 0;
        for ti in 0..master.len() {
            for i in 0..master[ti].len() {
                let gi = g[ti][i];
                m[ti][i] = cfg.beta1 * m[ti][i] + (1.0 - cfg.beta1) * gi;
                v[ti][i] = cfg.beta2 * v[ti][i] + (1.0 - cfg.beta2) * gi * gi;
                let update = cfg.eta * (m[ti][i] / (1.0 - b1t)) / ((v[ti][i] / (1.0 - b2t)).sqrt() + cfg.epsilon);
                let next = match mode {
                    PrecisionMode::PureBf16 => {
                        let w = round_to_bf16(shown[ti][i].to_f64() - update);
                        master[ti][i] = w.to_f64();
                        w
                    }
                    PrecisionMode::Fp32Master => {
                        master[ti][i] -= update;
                        round_to_bf16(master[ti][i])
                    }
                };
                if next != shown[ti][i] {
                    changed += 1;
                }
                shown[ti][i] = next;
            }
        }
        reports.push(SparsityReport::from_counts(1, changed, d));
    }

    let steps = gradients.len() as u64;
    let tensors = weights
        .tensors()
        .iter()
        .zip(shown)
        .map(|(t, data)| TensorRecord::new(t.name(), t.shape().to_vec(), data))
        .collect::<Result<Vec<_>, _>>()
        .expect("shapes are unchanged");
    let final_checkpoint = Checkpoint::new(weights.step() + steps, tensors).expect("names are unchanged");
    Ok(AbsorptionRun {
        reports,
        final_checkpoint,
    })
}
