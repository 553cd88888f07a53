//! Randomized property suites: the finite Jensen bound, the pre-softmax
//! averaging identity and exact invariance under finite groups.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{apply_transform, enumerate_group, AugmentationPolicy};
use crate::error::Result;
use crate::inference::{mean_embedding, mean_sample_nll, metta_nll, metta_probs, presoftmax_probs};
use crate::model::{Checkpoint, LinearHead};
use crate::rng;
use crate::tensor::Tensor;

pub const JENSEN_SLACK: f64 = 1e-6;
pub const SAMPLE_SIZES: [usize; 3] = [2, 4, 8];

/// A random head, embedding set and label.
#[derive(Clone, Debug)]
pub struct Trial {
    pub head: LinearHead,
    pub samples: Vec<Tensor>,
    pub label: usize,
}

fn uniform_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect())
        .expect("shape by construction")
}

/// Trial `t` of a suite: 2 to 10 classes, 1 to 32 dims, `S` cycling through
/// [`SAMPLE_SIZES`], magnitudes log-uniform over two decades.
pub fn random_trial(seed: u64, t: u64) -> Trial {
    let mut r = rng::stream(seed, &[t]);
    let k = r.gen_range(2..=10);
    let d = r.gen_range(1..=32);
    let s = SAMPLE_SIZES[t as usize % SAMPLE_SIZES.len()];
    let w_scale = 10f32.powf(r.gen_range(-1.0..1.0));
    let a_scale = 10f32.powf(r.gen_range(-1.0..1.0));
    let head = LinearHead::new(
        uniform_tensor(&mut r, vec![k, d], w_scale),
        uniform_tensor(&mut r, vec![k], w_scale),
    )
    .expect("shapes by construction");
    let samples = (0..s)
        .map(|_| uniform_tensor(&mut r, vec![d], a_scale))
        .collect();
    Trial {
        head,
        samples,
        label: r.gen_range(0..k),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JensenSummary {
    pub trials: usize,
    pub violations: usize,
    /// Largest `metta_nll - mean_sample_nll` seen (negative when all hold).
    pub max_excess: f64,
}

pub fn jensen_trials(trials: usize, seed: u64) -> Result<JensenSummary> {
    let mut violations = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for t in 0..trials as u64 {
        let tr = random_trial(seed, t);
        let excess = metta_nll(&tr.head, &tr.samples, tr.label)?
            - mean_sample_nll(&tr.head, &tr.samples, tr.label)?;
        violations += (excess > JENSEN_SLACK) as usize;
        max_excess = max_excess.max(excess);
    }
    Ok(JensenSummary {
        trials,
        violations,
        max_excess,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceSummary {
    pub trials: usize,
    pub max_abs_diff: f64,
}

/// Compares `softmax(W·mean + b)` with `softmax(mean(W·a_s + b))`.
pub fn presoftmax_trials(trials: usize, seed: u64) -> Result<EquivalenceSummary> {
    let mut max_abs_diff: f64 = 0.0;
    for t in 0..trials as u64 {
        let tr = random_trial(seed, t);
        let a = metta_probs(&tr.head, &tr.samples)?;
        let b = presoftmax_probs(&tr.head, &tr.samples)?;
        for (x, y) in a.iter().zip(&b) {
            max_abs_diff = max_abs_diff.max((x - y).abs());
        }
    }
    Ok(EquivalenceSummary {
        trials,
        max_abs_diff,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceSummary {
    pub policy: String,
    pub images: usize,
    pub comparisons: usize,
    pub max_abs_diff: f64,
}

/// Largest difference between the mean embedding of `x` and of `g·x` over
/// every group element `g` and image `x`.
pub fn group_invariance(
    ckpt: &Checkpoint,
    images: &[Tensor],
    policy: &AugmentationPolicy,
) -> Result<InvarianceSummary> {
    let mut max_abs_diff: f32 = 0.0;
    let mut comparisons = 0;
    for image in images {
        let (_, h, w) = image.dims3()?;
        let base = mean_embedding(ckpt, image, policy, 1, 0, 0)?;
        for g in enumerate_group(policy, h, w)? {
            let moved = mean_embedding(ckpt, &apply_transform(image, &g)?, policy, 1, 0, 0)?;
            max_abs_diff = max_abs_diff.max(base.mean.max_abs_diff(&moved.mean));
            comparisons += 1;
        }
    }
    Ok(InvarianceSummary {
        policy: policy.descriptor(),
        images: images.len(),
        comparisons,
        max_abs_diff: max_abs_diff as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes_dataset;
    use crate::model::{build_backbone, BackboneConfig};

    #[test]
    fn trials_are_reproducible_and_varied() {
        let a = random_trial(3, 17);
        let b = random_trial(3, 17);
        assert_eq!(a.head, b.head);
        assert_eq!(a.samples, b.samples);
        let sizes: Vec<usize> = (0..6).map(|t| random_trial(3, t).samples.len()).collect();
        assert_eq!(sizes, [2, 4, 8, 2, 4, 8]);
    }

    #[test]
    fn small_suites_hold() {
        let j = jensen_trials(300, 1).unwrap();
        assert_eq!(j.violations, 0);
        assert!(j.max_excess <= JENSEN_SLACK);
        assert!(presoftmax_trials(300, 1).unwrap().max_abs_diff < 1e-6);
    }

    #[test]
    fn untrained_backbone_is_group_invariant() {
        let c = build_backbone(&BackboneConfig::small(1, 16), 2).unwrap();
        let ds = gen_shapes_dataset(3, 5, 4, 16).unwrap();
        let images: Vec<Tensor> = (0..ds.len()).map(|i| ds.image(i).clone()).collect();
        for p in [
            AugmentationPolicy::FlipGroup,
            AugmentationPolicy::Rot90Group,
        ] {
            let s = group_invariance(&c, &images, &p).unwrap();
            assert!(s.max_abs_diff < 1e-5, "{s:?}");
        }
    }
}
