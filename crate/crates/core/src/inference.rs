//! Augmentation-averaged inference: mean embeddings, TTA and MeTTA
//! predictions, and a cosine retrieval index over mean embeddings.
//!
//! Per-sample forward passes may run on worker threads; every reduction is
//! done afterwards in ascending sample order.

use std::io::{Read, Write};

use crate::data::{
    apply_transform, enumerate_group, sample_transform, AugmentationPolicy, Dataset,
};
use crate::error::{Error, Result};
use crate::model::{embed, Checkpoint, LinearHead};
use crate::parallel;
use crate::rng;
use crate::tensor::{argmax, log_softmax_f64, softmax_f64, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStats {
    pub mean: Tensor,
    /// Elementwise population variance.
    pub variance: Tensor,
    pub sample_count: usize,
    pub policy: String,
    pub image_id: u64,
}

/// The deterministic test transform for this backbone's input size.
pub fn central_policy(ckpt: &Checkpoint) -> AugmentationPolicy {
    AugmentationPolicy::central_crop(ckpt.config.input_shape[1])
}

pub fn central_embedding(ckpt: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    let t = sample_transform(&central_policy(ckpt), h, w, 0, 0, 0);
    embed(ckpt, &apply_transform(image, &t)?)
}

/// The augmented inputs a mean embedding averages over. Enumerable policies
/// yield their exact member list and ignore `samples`.
pub fn augmented_inputs(
    image: &Tensor,
    policy: &AugmentationPolicy,
    samples: usize,
    global_seed: u64,
    image_index: u64,
) -> Result<Vec<Tensor>> {
    if samples < 1 {
        return Err(Error::TooFewSamples {
            min: 1,
            got: samples,
        });
    }
    policy.validate()?;
    let (_, h, w) = image.dims3()?;
    let transforms = if policy.is_enumerable() {
        enumerate_group(policy, h, w)?
    } else {
        (0..samples as u64)
            .map(|s| sample_transform(policy, h, w, global_seed, image_index, s))
            .collect()
    };
    transforms
        .iter()
        .map(|t| apply_transform(image, t))
        .collect()
}

/// One embedding per augmentation sample, in sample order.
pub fn sample_embeddings(
    ckpt: &Checkpoint,
    image: &Tensor,
    policy: &AugmentationPolicy,
    samples: usize,
    global_seed: u64,
    image_index: u64,
) -> Result<Vec<Tensor>> {
    if policy.is_deterministic() {
        // every sample is the same image
        let one = augmented_inputs(image, policy, 1, global_seed, image_index)?;
        if samples < 1 {
            return Err(Error::TooFewSamples {
                min: 1,
                got: samples,
            });
        }
        let e = embed(ckpt, &one[0])?;
        return Ok(vec![e; samples]);
    }
    let inputs = augmented_inputs(image, policy, samples, global_seed, image_index)?;
    parallel::try_map(inputs.len(), |s| embed(ckpt, &inputs[s]))
}

/// Mean and population variance (two-pass, `f64`) of per-sample embeddings.
pub fn embedding_stats(samples: &[Tensor], policy: &str, image_id: u64) -> Result<EmbeddingStats> {
    let first = samples
        .first()
        .ok_or(Error::TooFewSamples { min: 1, got: 0 })?;
    let d = first.len();
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::shape(
                "embedding_stats",
                format!("{:?}", first.shape()),
                format!("{:?}", s.shape()),
            ));
        }
    }
    let mean = mean_f64(samples);
    let n = samples.len() as f64;
    let mut var = vec![0.0f64; d];
    for s in samples {
        for ((v, &x), &m) in var.iter_mut().zip(s.data()).zip(&mean) {
            let dx = x as f64 - m;
            *v += dx * dx;
        }
    }
    Ok(EmbeddingStats {
        mean: Tensor::new(
            first.shape().to_vec(),
            mean.iter().map(|&m| m as f32).collect(),
        )?,
        variance: Tensor::new(
            first.shape().to_vec(),
            var.iter().map(|&v| (v / n) as f32).collect(),
        )?,
        sample_count: samples.len(),
        policy: policy.to_string(),
        image_id,
    })
}

pub fn mean_embedding(
    ckpt: &Checkpoint,
    image: &Tensor,
    policy: &AugmentationPolicy,
    samples: usize,
    global_seed: u64,
    image_index: u64,
) -> Result<EmbeddingStats> {
    let emb = sample_embeddings(ckpt, image, policy, samples, global_seed, image_index)?;
    embedding_stats(&emb, &policy.descriptor(), image_index)
}

/// Elementwise mean in `f64`, accumulated in sample order.
pub fn mean_f64(samples: &[Tensor]) -> Vec<f64> {
    let d = samples.first().map_or(0, Tensor::len);
    let mut acc = vec![0.0f64; d];
    for s in samples {
        acc.iter_mut()
            .zip(s.data())
            .for_each(|(a, &x)| *a += x as f64);
    }
    let n = samples.len() as f64;
    acc.into_iter().map(|a| a / n).collect()
}

fn require_samples(samples: &[Tensor]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { min: 1, got: 0 });
    }
    Ok(())
}

fn head_logits(head: &LinearHead, samples: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| head.logits(s)).collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0f64; rows[0].len()];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, &x)| *a += x);
    }
    acc.into_iter().map(|a| a / rows.len() as f64).collect()
}

/// `softmax(W · mean(a_s) + b)`.
pub fn metta_probs(head: &LinearHead, samples: &[Tensor]) -> Result<Vec<f64>> {
    require_samples(samples)?;
    Ok(softmax_f64(&head.logits_f64(&mean_f64(samples))?))
}

/// `softmax(mean_s(W · a_s + b))`, the pre-softmax averaging order.
pub fn presoftmax_probs(head: &LinearHead, samples: &[Tensor]) -> Result<Vec<f64>> {
    require_samples(samples)?;
    Ok(softmax_f64(&mean_rows(&head_logits(head, samples)?)))
}

/// `mean_s softmax(W · a_s + b)`.
pub fn tta_probs(head: &LinearHead, samples: &[Tensor]) -> Result<Vec<f64>> {
    require_samples(samples)?;
    let probs: Vec<Vec<f64>> = head_logits(head, samples)?
        .iter()
        .map(|z| softmax_f64(z))
        .collect();
    Ok(mean_rows(&probs))
}

/// Per-sample softmax outputs, one row per sample.
pub fn sample_probs(head: &LinearHead, samples: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    Ok(head_logits(head, samples)?
        .iter()
        .map(|z| softmax_f64(z))
        .collect())
}

fn check_label(head: &LinearHead, label: usize) -> Result<()> {
    if label >= head.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: head.num_classes(),
        });
    }
    Ok(())
}

/// `-log p(y)` under the mean-embedding prediction, unclamped.
pub fn metta_nll(head: &LinearHead, samples: &[Tensor], label: usize) -> Result<f64> {
    require_samples(samples)?;
    check_label(head, label)?;
    Ok(-log_softmax_f64(&head.logits_f64(&mean_f64(samples))?)[label])
}

/// Mean over samples of `-log p(y | a_s)`, the augmented-training loss.
pub fn mean_sample_nll(head: &LinearHead, samples: &[Tensor], label: usize) -> Result<f64> {
    require_samples(samples)?;
    check_label(head, label)?;
    let total: f64 = head_logits(head, samples)?
        .iter()
        .map(|z| -log_softmax_f64(z)[label])
        .sum();
    Ok(total / samples.len() as f64)
}

fn to_tensor(p: Vec<f64>) -> Tensor {
    let k = p.len();
    Tensor::new(vec![k], p.into_iter().map(|v| v as f32).collect()).expect("rank-1 by construction")
}

fn check_head(ckpt: &Checkpoint, head: &LinearHead) -> Result<()> {
    if head.dim() != ckpt.config.embedding_dim {
        return Err(Error::shape("head", ckpt.config.embedding_dim, head.dim()));
    }
    Ok(())
}

/// Averaged softmax over augmentation samples.
pub fn tta_predict(
    ckpt: &Checkpoint,
    head: &LinearHead,
    image: &Tensor,
    policy: &AugmentationPolicy,
    samples: usize,
    global_seed: u64,
    image_index: u64,
) -> Result<Tensor> {
    check_head(ckpt, head)?;
    let emb = sample_embeddings(ckpt, image, policy, samples, global_seed, image_index)?;
    Ok(to_tensor(tta_probs(head, &emb)?))
}

/// Softmax of the head applied to the mean embedding.
pub fn metta_predict(
    ckpt: &Checkpoint,
    head: &LinearHead,
    image: &Tensor,
    policy: &AugmentationPolicy,
    samples: usize,
    global_seed: u64,
    image_index: u64,
) -> Result<Tensor> {
    check_head(ckpt, head)?;
    let emb = sample_embeddings(ckpt, image, policy, samples, global_seed, image_index)?;
    Ok(to_tensor(metta_probs(head, &emb)?))
}

/// L2-normalized mean embeddings of a corpus, compared by cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<usize>,
    /// `[N, D]`, unit rows.
    vectors: Tensor,
    policy: AugmentationPolicy,
    samples: usize,
    seed: u64,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data()[row * d..(row + 1) * d]
    }

    pub fn policy(&self) -> &AugmentationPolicy {
        &self.policy
    }
}

/// Unit-norm copy of `v`; `id` names the offending item on a zero vector.
pub fn l2_normalize(v: &[f32], id: usize) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm(id));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}

/// Per-image sampling is keyed by image content, so the index does not
/// depend on corpus order and a corpus image queried under the same policy
/// reproduces its stored vector exactly.
fn retrieval_vector(
    ckpt: &Checkpoint,
    image: &Tensor,
    policy: &AugmentationPolicy,
    samples: usize,
    seed: u64,
    id: usize,
) -> Result<Vec<f32>> {
    let key = rng::content_key(image.data());
    let stats = mean_embedding(ckpt, image, policy, samples, seed, key)?;
    l2_normalize(stats.mean.data(), id)
}

/// `samples` and `seed` only matter for stochastic policies.
pub fn build_index(
    ckpt: &Checkpoint,
    corpus: &Dataset,
    policy: &AugmentationPolicy,
    samples: usize,
    seed: u64,
) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = parallel::try_map(corpus.len(), |i| {
        retrieval_vector(ckpt, corpus.image(i), policy, samples, seed, i)
    })?;
    let d = rows[0].len();
    Ok(RetrievalIndex {
        ids: (0..corpus.len()).collect(),
        vectors: Tensor::new(vec![corpus.len(), d], rows.concat())?,
        policy: policy.clone(),
        samples,
        seed,
    })
}

/// Cosine score of a unit query against every stored row, in row order.
pub fn cosine_scores(index: &RetrievalIndex, query: &[f32]) -> Vec<f64> {
    (0..index.len())
        .map(|r| {
            index
                .vector(r)
                .iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        })
        .collect()
}

/// Top-`k` corpus ids by descending cosine score, lowest id first on ties.
pub fn query_index(
    index: &RetrievalIndex,
    ckpt: &Checkpoint,
    query: &Tensor,
    policy: &AugmentationPolicy,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > index.len() {
        return Err(Error::KOutOfRange {
            k,
            size: index.len(),
        });
    }
    let q = retrieval_vector(ckpt, query, policy, index.samples, index.seed, usize::MAX)?;
    if q.len() != index.dim() {
        return Err(Error::shape("query_index", index.dim(), q.len()));
    }
    let scores = cosine_scores(index, &q);
    let mut ranked: Vec<(usize, f64)> = index.ids.iter().copied().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Index of the most probable class, lowest index on ties.
pub fn predicted_class(probs: &[f64]) -> usize {
    argmax(probs)
}

/// One image's entries in an embedding dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpEntry {
    pub image_id: u64,
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
}

/// CSV `image_id,sample_index,dim_0..`: one row per sample, then a row with
/// `sample_index = -1` holding the mean.
pub fn write_embedding_dump<W: Write>(out: W, entries: &[DumpEntry]) -> Result<()> {
    let d = entries.first().map_or(0, |e| e.mean.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image_id".to_string(), "sample_index".to_string()];
    header.extend((0..d).map(|i| format!("dim_{i}")));
    w.write_record(&header)?;
    for e in entries {
        let rows = e.samples.iter().enumerate().map(|(s, t)| (s as i64, t));
        for (s, t) in rows.chain([(-1, &e.mean)]) {
            if t.len() != d {
                return Err(Error::shape("embedding dump", d, t.len()));
            }
            let mut rec = vec![e.image_id.to_string(), s.to_string()];
            rec.extend(t.data().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding_dump<R: Read>(input: R) -> Result<Vec<DumpEntry>> {
    let mut r = csv::Reader::from_reader(input);
    let d = r.headers()?.len().saturating_sub(2);
    let mut out: Vec<DumpEntry> = Vec::new();
    let mut pending: Vec<Tensor> = Vec::new();
    let parse = |s: &str| {
        s.parse::<f32>()
            .map_err(|e| Error::Format(format!("embedding dump value `{s}`: {e}")))
    };
    for rec in r.records() {
        let rec = rec?;
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("image_id `{}`", &rec[0])))?;
        let s: i64 = rec[1]
            .parse()
            .map_err(|_| Error::Format(format!("sample_index `{}`", &rec[1])))?;
        let vals = rec
            .iter()
            .skip(2)
            .map(parse)
            .collect::<Result<Vec<f32>>>()?;
        let t = Tensor::new(vec![d], vals)?;
        if s < 0 {
            out.push(DumpEntry {
                image_id: id,
                samples: std::mem::take(&mut pending),
                mean: t,
            });
        } else {
            pending.push(t);
        }
    }
    if !pending.is_empty() {
        return Err(Error::Truncated(
            "embedding dump without summary row".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes_dataset;
    use crate::model::{build_backbone, BackboneConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn fixture() -> (Checkpoint, Dataset) {
        (
            build_backbone(&BackboneConfig::small(1, 16), 11).unwrap(),
            gen_shapes_dataset(5, 12, 4, 16).unwrap(),
        )
    }

    fn random_head(classes: usize, dim: usize, seed: u64) -> LinearHead {
        let mut r = rng::stream(seed, &[]);
        LinearHead::new(
            Tensor::new(
                vec![classes, dim],
                (0..classes * dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            Tensor::new(
                vec![classes],
                (0..classes).map(|_| r.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn central_crop_policy_collapses_the_average() {
        let (c, ds) = fixture();
        let central = central_embedding(&c, ds.image(0)).unwrap();
        let stats = mean_embedding(&c, ds.image(0), &central_policy(&c), 8, 3, 0).unwrap();
        assert_eq!(stats.sample_count, 8);
        assert!(stats.mean.bits_eq(&central));
        assert!(stats.variance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stochastic_mean_differs_from_central() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let stats = mean_embedding(&c, ds.image(1), &policy, 8, 3, 1).unwrap();
        assert!(
            stats
                .mean
                .max_abs_diff(&central_embedding(&c, ds.image(1)).unwrap())
                > 1e-6
        );
        assert!(stats.variance.data().iter().all(|&v| v >= 0.0));
        assert!(stats.variance.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn single_sample_has_zero_variance() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let stats = mean_embedding(&c, ds.image(2), &policy, 1, 3, 2).unwrap();
        assert!(stats.variance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_samples_rejected() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        assert!(matches!(
            mean_embedding(&c, ds.image(0), &policy, 0, 1, 0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn replayed_inputs_reproduce_mean() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let stats = mean_embedding(&c, ds.image(3), &policy, 6, 9, 3).unwrap();
        let inputs = augmented_inputs(ds.image(3), &policy, 6, 9, 3).unwrap();
        let mut acc = vec![0.0f64; 64];
        for x in &inputs {
            for (a, &v) in acc.iter_mut().zip(embed(&c, x).unwrap().data()) {
                *a += v as f64;
            }
        }
        for (a, &m) in acc.iter().zip(stats.mean.data()) {
            assert!((a / 6.0 - m as f64).abs() <= 1e-6);
        }
    }

    #[test]
    fn flip_and_rotation_invariance() {
        let (c, ds) = fixture();
        for policy in [
            AugmentationPolicy::FlipGroup,
            AugmentationPolicy::Rot90Group,
        ] {
            let (_, h, w) = ds.image(4).dims3().unwrap();
            let base = mean_embedding(&c, ds.image(4), &policy, 1, 0, 0).unwrap();
            for g in enumerate_group(&policy, h, w).unwrap() {
                let moved = apply_transform(ds.image(4), &g).unwrap();
                let other = mean_embedding(&c, &moved, &policy, 1, 0, 0).unwrap();
                assert!(base.mean.max_abs_diff(&other.mean) < 1e-5);
            }
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let (c, ds) = fixture();
        let head = LinearHead::zeros(4, 64);
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let p = metta_predict(&c, &head, ds.image(0), &policy, 4, 1, 0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn single_sample_tta_equals_metta() {
        let (c, ds) = fixture();
        let head = random_head(4, 64, 1);
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let a = tta_predict(&c, &head, ds.image(5), &policy, 1, 2, 5).unwrap();
        let b = metta_predict(&c, &head, ds.image(5), &policy, 1, 2, 5).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        assert!((a.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tta_and_metta_differ_in_general() {
        let (c, ds) = fixture();
        let head = random_head(4, 64, 2);
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let emb = sample_embeddings(&c, ds.image(6), &policy, 8, 4, 6).unwrap();
        let t = tta_probs(&head, &emb).unwrap();
        let m = metta_probs(&head, &emb).unwrap();
        assert!(t.iter().zip(&m).any(|(a, b)| (a - b).abs() > 1e-6));
        let replay: Vec<f64> = (0..4)
            .map(|k| {
                emb.iter()
                    .map(|e| softmax_f64(&head.logits(e).unwrap())[k])
                    .sum::<f64>()
                    / 8.0
            })
            .collect();
        assert!(t.iter().zip(&replay).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn head_dimension_checked() {
        let (c, ds) = fixture();
        let head = LinearHead::zeros(4, 10);
        let policy = central_policy(&c);
        assert!(metta_predict(&c, &head, ds.image(0), &policy, 1, 0, 0).is_err());
        assert!(tta_predict(&c, &head, ds.image(0), &policy, 1, 0, 0).is_err());
    }

    fn embedding_set(seed: u64, s: usize, d: usize) -> Vec<Tensor> {
        let mut r = rng::stream(seed, &[1]);
        (0..s)
            .map(|_| {
                Tensor::new(vec![d], (0..d).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn presoftmax_order_matches(seed in any::<u64>(), s in 1usize..9) {
            let head = random_head(5, 6, seed);
            let set = embedding_set(seed, s, 6);
            let a = metta_probs(&head, &set).unwrap();
            let b = presoftmax_probs(&head, &set).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn jensen_bound(seed in any::<u64>(), s in 1usize..9, y in 0usize..5) {
            let head = random_head(5, 6, seed);
            let set = embedding_set(seed, s, 6);
            prop_assert!(metta_nll(&head, &set, y).unwrap() <= mean_sample_nll(&head, &set, y).unwrap() + 1e-6);
        }
    }

    #[test]
    fn index_rows_are_unit_and_self_retrieval_works() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::multi_scale_default();
        let index = build_index(&c, &ds, &policy, 1, 0).unwrap();
        for r in 0..index.len() {
            let n: f64 = index
                .vector(r)
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        for i in 0..ds.len() {
            let top = query_index(&index, &c, ds.image(i), &policy, 3).unwrap();
            assert_eq!(top[0].0, i);
            assert!((top[0].1 - 1.0).abs() < 1e-5);
            assert!(top
                .iter()
                .all(|&(_, s)| (-1.0 - 1e-9..=1.0 + 1e-6).contains(&s)));
        }
    }

    #[test]
    fn single_scale_index_is_normalized_plain_embedding() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::MultiScale { scales: vec![1.0] };
        let index = build_index(&c, &ds, &policy, 1, 0).unwrap();
        for i in 0..ds.len() {
            let plain = l2_normalize(embed(&c, ds.image(i)).unwrap().data(), i).unwrap();
            assert_eq!(index.vector(i), plain.as_slice());
        }
    }

    #[test]
    fn index_is_order_independent() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let perm: Vec<usize> = (0..ds.len()).rev().collect();
        let a = build_index(&c, &ds, &policy, 4, 7).unwrap();
        let b = build_index(&c, &ds.select(&perm), &policy, 4, 7).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.vector(i), b.vector(j));
        }
    }

    #[test]
    fn index_errors() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::FlipGroup;
        let empty = Dataset::new(vec![], vec![], 4, [1, 16, 16]).unwrap();
        assert!(matches!(
            build_index(&c, &empty, &policy, 1, 0),
            Err(Error::EmptyDataset)
        ));
        let index = build_index(&c, &ds, &policy, 1, 0).unwrap();
        assert!(matches!(
            query_index(&index, &c, ds.image(0), &policy, 13),
            Err(Error::KOutOfRange { k: 13, size: 12 })
        ));
        assert!(query_index(&index, &c, ds.image(0), &policy, 0).is_err());
        assert!(matches!(
            l2_normalize(&[0.0, 0.0], 4),
            Err(Error::ZeroNorm(4))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let (c, ds) = fixture();
        let policy = AugmentationPolicy::random_resized_crop_flip(16);
        let entries: Vec<DumpEntry> = (0..3)
            .map(|i| {
                let samples = sample_embeddings(&c, ds.image(i), &policy, 3, 1, i as u64).unwrap();
                let mean = embedding_stats(&samples, "p", i as u64).unwrap().mean;
                DumpEntry {
                    image_id: i as u64,
                    samples,
                    mean,
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_embedding_dump(&mut buf, &entries).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,sample_index,dim_0,"));
        assert!(text.lines().any(|l| l.starts_with("2,-1,")));
        let back = read_embedding_dump(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in entries.iter().zip(&back) {
            assert!(a.mean.bits_eq(&b.mean));
            assert_eq!(a.samples.len(), b.samples.len());
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert!(x.bits_eq(y));
            }
        }
    }
}
