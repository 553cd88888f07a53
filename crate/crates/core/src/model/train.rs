//! Minibatch SGD under augmentation.
//!
//! Every image in a minibatch is replaced by one augmentation sample, drawn
//! with `sample_index = epoch`. Per-example gradients may be computed on
//! worker threads; they are summed in batch order, so the result does not
//! depend on the thread count.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::embed_on_tape;
use super::{embed, Checkpoint, LinearHead};
use crate::data::{apply_transform, sample_transform, AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng;
use crate::tensor::{sgd_step, NodeId, OptimizerState, Tape, Tensor};

const BACKBONE_AUG: u64 = 0xB0;
const HEAD_AUG: u64 = 0x4E;
const SHUFFLE: u64 = 0x5F;
const HEAD_INIT: u64 = 0x1A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch size 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-example training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE, epoch as u64]));
    order
}

fn augmented(
    ds: &Dataset,
    policy: &AugmentationPolicy,
    seed: u64,
    index: usize,
    epoch: usize,
) -> Result<Tensor> {
    let [_, h, w] = ds.image_shape();
    let t = sample_transform(policy, h, w, seed, index as u64, epoch as u64);
    apply_transform(ds.image(index), &t)
}

fn init_head(classes: usize, dim: usize, seed: u64) -> LinearHead {
    let bound = 1.0 / (dim as f32).sqrt();
    let mut r = rng::stream(seed, &[HEAD_INIT]);
    let w = (0..classes * dim)
        .map(|_| r.gen_range(-bound..bound))
        .collect();
    LinearHead {
        weight: Tensor::new(vec![classes, dim], w).expect("shape by construction"),
        bias: Tensor::zeros(&[classes]),
    }
}

/// Sums per-example gradients in order and scales by `1 / n`.
fn reduce_grads(per_example: Vec<(f64, Vec<Tensor>)>, shapes: &[Vec<usize>]) -> (f64, Vec<Tensor>) {
    let n = per_example.len() as f64;
    let mut acc: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| vec![0.0; s.iter().product()])
        .collect();
    let mut loss = 0.0;
    for (l, grads) in per_example {
        loss += l;
        for (a, g) in acc.iter_mut().zip(&grads) {
            a.iter_mut()
                .zip(g.data())
                .for_each(|(a, &v)| *a += v as f64);
        }
    }
    let grads = acc
        .into_iter()
        .zip(shapes)
        .map(|(a, s)| {
            Tensor::new(s.clone(), a.into_iter().map(|v| (v / n) as f32).collect()).unwrap()
        })
        .collect();
    (loss, grads)
}

/// Trains backbone and a jointly learned softmax head on augmented
/// cross-entropy. The head is kept in `train_head` of the result.
pub fn train_backbone(
    ckpt: &Checkpoint,
    ds: &Dataset,
    policy: &AugmentationPolicy,
    opts: &TrainOptions,
) -> Result<(Checkpoint, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    opts.validate()?;
    policy.validate()?;

    let mut out = ckpt.clone();
    let dim = out.config.embedding_dim;
    let mut head = match out.train_head.take() {
        Some(h) if h.num_classes() == ds.num_classes() => h,
        _ => init_head(ds.num_classes(), dim, opts.seed),
    };
    let aug_seed = rng::mix(opts.seed, &[BACKBONE_AUG]);

    let shapes: Vec<Vec<usize>> = out
        .config
        .param_shapes()
        .into_iter()
        .map(|(_, s)| s)
        .chain([head.weight.shape().to_vec(), head.bias.shape().to_vec()])
        .collect();
    let mut state = {
        let mut refs: Vec<&Tensor> = out.backbone_params().into_iter().map(|(_, t)| t).collect();
        refs.push(&head.weight);
        refs.push(&head.bias);
        OptimizerState::new(opts.learning_rate, opts.momentum, &refs)?
    };

    let mut report = TrainReport::default();
    for epoch in 0..opts.epochs {
        let order = epoch_order(ds.len(), opts.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch) {
            let per_example = {
                let params: Vec<&Tensor> =
                    out.backbone_params().into_iter().map(|(_, t)| t).collect();
                let cfg = &out.config;
                let head = &head;
                parallel::try_map(batch.len(), |j| {
                    let idx = batch[j];
                    let image = augmented(ds, policy, aug_seed, idx, epoch)?;
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = params.iter().map(|t| tape.leaf((*t).clone())).collect();
                    let w = tape.leaf(head.weight.clone());
                    let b = tape.leaf(head.bias.clone());
                    let x = tape.leaf(image);
                    let e = embed_on_tape(cfg, &mut tape, &ids, x)?;
                    let logits = tape.dense(e, w, b)?;
                    let loss = tape.softmax_cross_entropy(logits, ds.label(idx))?;
                    let mut g = tape.backward(loss)?;
                    let grads = ids.iter().chain([&w, &b]).map(|&id| g.take(id)).collect();
                    Ok::<_, Error>((tape.value(loss).data()[0] as f64, grads))
                })?
            };
            let (loss, grads) = reduce_grads(per_example, &shapes);
            epoch_loss += loss;
            let mut targets = out.backbone_params_mut();
            targets.push(&mut head.weight);
            targets.push(&mut head.bias);
            sgd_step(&mut targets, &grads, &mut state)?;
        }
        report.epoch_losses.push(epoch_loss / ds.len() as f64);
    }

    out.train_head = Some(head);
    out.meta.seed = opts.seed;
    out.meta.epochs = opts.epochs as u32;
    out.meta.policy = policy.descriptor();
    Ok((out, report))
}

/// Fits a linear softmax head on per-augmentation embeddings of a frozen
/// backbone (the augmented cross-entropy that upper-bounds the
/// mean-embedding loss). The head starts at zero.
pub fn train_linear_head(
    ckpt: &Checkpoint,
    ds: &Dataset,
    policy: &AugmentationPolicy,
    opts: &TrainOptions,
) -> Result<(LinearHead, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    opts.validate()?;
    policy.validate()?;

    let mut head = LinearHead::zeros(ds.num_classes(), ckpt.config.embedding_dim);
    let mut state = OptimizerState::new(
        opts.learning_rate,
        opts.momentum,
        &[&head.weight, &head.bias],
    )?;
    let aug_seed = rng::mix(opts.seed, &[HEAD_AUG]);
    let mut report = TrainReport::default();

    for epoch in 0..opts.epochs {
        let embeddings = parallel::try_map(ds.len(), |i| {
            embed(ckpt, &augmented(ds, policy, aug_seed, i, epoch)?)
        })?;
        let order = epoch_order(ds.len(), opts.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch) {
            let mut tape = Tape::new();
            let w = tape.leaf(head.weight.clone());
            let b = tape.leaf(head.bias.clone());
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let e = tape.leaf(embeddings[i].clone());
                let logits = tape.dense(e, w, b)?;
                let l = tape.softmax_cross_entropy(logits, ds.label(i))?;
                epoch_loss += tape.value(l).data()[0] as f64;
                losses.push(l);
            }
            let mean = tape.mean(&losses)?;
            let mut g = tape.backward(mean)?;
            let grads = [g.take(w), g.take(b)];
            sgd_step(&mut [&mut head.weight, &mut head.bias], &grads, &mut state)?;
        }
        report.epoch_losses.push(epoch_loss / ds.len() as f64);
    }
    Ok((head, report))
}
