//! Seeded synthetic checkpoint pairs and chains with controlled sparsity.
//!
//! Changes are placed in contiguous runs of `cluster_width` elements over the
//! flattened parameter space, mimicking the spatial locality of real updates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bf16::Bf16;
use crate::checkpoint::{numel, Checkpoint, ModelError, TensorRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("at least one tensor shape is required")]
    EmptyShapes,
    #[error("sparsity {0} is outside [0, 1]")]
    InvalidSparsity(f64),
    #[error("cluster width must be positive")]
    ZeroClusterWidth,
    #[error("invalid weight distribution: {0}")]
    Distribution(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// `(name, shape)` per tensor.
    pub tensors: Vec<(String, Vec<usize>)>,
    /// Target fraction of bitwise-unchanged elements.
    pub sparsity: f64,
    pub cluster_width: usize,
    pub seed: u64,
    /// Median weight magnitude of the base checkpoint.
    pub median_magnitude: f64,
    /// Log-space standard deviation of weight magnitudes.
    pub log_sigma: f64,
    /// Step assigned to the base checkpoint.
    pub base_step: u64,
}

impl SyntheticSpec {
    pub fn new(shapes: Vec<Vec<usize>>, sparsity: f64, cluster_width: usize, seed: u64) -> Self {
        let tensors = shapes
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("layers.{i:03}.weight"), s))
            .collect();
        Self {
            tensors,
            sparsity,
            cluster_width,
            seed,
            median_magnitude: 0.0117,
            log_sigma: 1.0,
            base_step: 0,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.tensors.is_empty() {
            return Err(SynthError::EmptyShapes);
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(SynthError::InvalidSparsity(self.sparsity));
        }
        if self.cluster_width == 0 {
            return Err(SynthError::ZeroClusterWidth);
        }
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|(_, s)| numel(s)).sum()
    }

    /// Exact number of elements that will change per step.
    pub fn changes_per_step(&self) -> usize {
        let d = self.num_elements() as f64;
        ((1.0 - self.sparsity) * d).round() as usize
    }
}

/// Base weights drawn with random sign and log-normal magnitude.
pub fn generate_base(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Checkpoint, SynthError> {
    spec.validate()?;
    let dist = LogNormal::new(spec.median_magnitude.ln(), spec.log_sigma)
        .map_err(|e| SynthError::Distribution(e.to_string()))?;
    let mut tensors = Vec::with_capacity(spec.tensors.len());
    for (name, shape) in &spec.tensors {
        let data = (0..numel(shape))
            .map(|_| {
                let mag: f64 = dist.sample(rng);
                let v = if rng.gen::<bool>() { -mag } else { mag };
                Bf16::from_f64(v)
            })
            .collect();
        tensors.push(TensorRecord::new(name.clone(), shape.clone(), data)?);
    }
    Ok(Checkpoint::new(spec.base_step, tensors)?)
}

/// Applies one synthetic step: exactly `spec.changes_per_step()` elements get
/// a different bit pattern, in clusters.
pub fn perturb(prev: &Checkpoint, spec: &SyntheticSpec, rng: &mut impl Rng) -> Checkpoint {
    let d = prev.num_elements();
    let target = spec.changes_per_step().min(d);
    let width = spec.cluster_width;
    let blocks = d.div_ceil(width);
    let mut order: Vec<usize> = (0..blocks).collect();
    order.shuffle(rng);

    let mut positions = Vec::with_capacity(target);
    for b in order {
        if positions.len() == target {
            break;
        }
        let start = b * width;
        let end = (start + width).min(d);
        let take = (end - start).min(target - positions.len());
        positions.extend(start..start + take);
    }
    positions.sort_unstable();

    let mut next = prev.clone().with_step(prev.step() + 1);
    // map global positions to (tensor, offset) in insertion order
    let mut bounds = Vec::with_capacity(next.tensors().len());
    let mut acc = 0;
    for t in next.tensors() {
        bounds.push(acc);
        acc += t.len();
    }
    let mut ti = 0;
    for p in positions {
        while ti + 1 < bounds.len() && bounds[ti + 1] <= p {
            ti += 1;
        }
        let slot = &mut next.tensors_mut()[ti].data_mut()[p - bounds[ti]];
        *slot = nudge(*slot, rng);
    }
    next
}

/// A nearby value with a different bit pattern: XOR 1..=7 into the low
/// mantissa bits. The exponent is untouched so finite values stay finite.
fn nudge(v: Bf16, rng: &mut impl Rng) -> Bf16 {
    let flip: u16 = rng.gen_range(1..=7);
    Bf16::from_bits(v.to_bits() ^ flip)
}

/// Returns `(previous, current)` with steps `base_step` and `base_step + 1`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Checkpoint, Checkpoint), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = generate_base(spec, &mut rng)?;
    let next = perturb(&base, spec, &mut rng);
    Ok((base, next))
}

/// Returns `steps + 1` checkpoints: the base and `steps` successive updates.
pub fn generate_chain(spec: &SyntheticSpec, steps: usize) -> Result<Vec<Checkpoint>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chain = Vec::with_capacity(steps + 1);
    chain.push(generate_base(spec, &mut rng)?);
    for _ in 0..steps {
        let next = perturb(chain.last().unwrap(), spec, &mut rng);
        chain.push(next);
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_equal(a: &Checkpoint, b: &Checkpoint) -> usize {
        a.tensors()
            .iter()
            .zip(b.tensors())
            .map(|(x, y)| x.data().iter().zip(y.data()).filter(|(p, q)| p == q).count())
            .sum()
    }

    #[test]
    fn full_sparsity_is_identity() {
        let spec = SyntheticSpec::new(vec![vec![64, 32], vec![100]], 1.0, 16, 1);
        let (a, b) = generate_synthetic(&spec).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_eq!(b.step(), a.step() + 1);
    }

    #[test]
    fn zero_sparsity_changes_everything() {
        let spec = SyntheticSpec::new(vec![vec![64, 32], vec![100]], 0.0, 16, 2);
        let (a, b) = generate_synthetic(&spec).unwrap();
        assert_eq!(count_equal(&a, &b), 0);
    }

    #[test]
    fn measured_sparsity_within_one_over_d() {
        let spec = SyntheticSpec::new(vec![vec![1000, 1000]], 0.99, 64, 3);
        let (a, b) = generate_synthetic(&spec).unwrap();
        let d = a.num_elements() as f64;
        let measured = count_equal(&a, &b) as f64 / d;
        assert!((measured - 0.99).abs() <= 1e-6, "measured {measured}");
    }

    #[test]
    fn changes_are_clustered() {
        let spec = SyntheticSpec::new(vec![vec![4096]], 0.75, 64, 4);
        let (a, b) = generate_synthetic(&spec).unwrap();
        let changed: Vec<usize> = a.tensors()[0]
            .data()
            .iter()
            .zip(b.tensors()[0].data())
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(changed.len(), 1024);
        // 1024 changes in whole 64-wide blocks
        let blocks: std::collections::BTreeSet<usize> = changed.iter().map(|i| i / 64).collect();
        assert_eq!(blocks.len(), 16);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::new(vec![vec![50, 50]], 0.9, 8, 7);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap().0, generate_synthetic(&other).unwrap().0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(generate_synthetic(&SyntheticSpec::new(vec![], 0.5, 1, 0)), Err(SynthError::EmptyShapes)));
        assert!(matches!(
            generate_synthetic(&SyntheticSpec::new(vec![vec![4]], 1.5, 1, 0)),
            Err(SynthError::InvalidSparsity(_))
        ));
        assert!(matches!(
            generate_synthetic(&SyntheticSpec::new(vec![vec![4]], 0.5, 0, 0)),
            Err(SynthError::ZeroClusterWidth)
        ));
    }

    #[test]
    fn chain_steps_increment() {
        let spec = SyntheticSpec::new(vec![vec![32, 8]], 0.9, 4, 5);
        let chain = generate_chain(&spec, 5).unwrap();
        assert_eq!(chain.len(), 6);
        for (i, c) in chain.iter().enumerate() {
            assert_eq!(c.step(), i as u64);
        }
    }
}
