use std::collections::BTreeMap;

use rand::Rng;

use super::{BackboneConfig, Checkpoint};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, NodeId, Tape, Tensor};

/// He-style uniform init, `U(-b, b)` with `b = sqrt(6 / fan_in)`; zero biases.
pub fn build_backbone(cfg: &BackboneConfig, init_seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    for (i, (name, shape)) in cfg.param_shapes().into_iter().enumerate() {
        let t = if shape.len() == 4 {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let mut r = rng::stream(init_seed, &[i as u64]);
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| r.gen_range(-bound..bound)).collect())?
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    Checkpoint::new(cfg.clone(), params)
}

fn check_input(cfg: &BackboneConfig, image: &Tensor) -> Result<()> {
    let (c, _, _) = image.dims3()?;
    if c != cfg.input_shape[0] {
        return Err(Error::shape(
            "embed",
            format!("{} input channels", cfg.input_shape[0]),
            format!("{:?}", image.shape()),
        ));
    }
    Ok(())
}

/// Global-pooled embedding of one image. Any spatial size the stages can
/// convolve is accepted; the channel count must match the config.
pub fn embed(ckpt: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    check_input(&ckpt.config, image)?;
    let params = ckpt.backbone_params();
    let mut x = image.clone();
    for (i, stage) in ckpt.config.stages.iter().enumerate() {
        let (w, b) = (params[2 * i].1, params[2 * i + 1].1);
        x = tensor::conv2d(&x, w, stage.stride, stage.kernel / 2)?;
        x = tensor::add_channel_bias(&x, b)?;
        x = tensor::relu(&x);
    }
    tensor::global_avg_pool(&x)
}

/// Records the backbone forward on `tape`; `params` are leaf ids in
/// [`BackboneConfig::param_shapes`] order. Returns the embedding node.
pub(crate) fn embed_on_tape(
    cfg: &BackboneConfig,
    tape: &mut Tape,
    params: &[NodeId],
    image: NodeId,
) -> Result<NodeId> {
    check_input(cfg, tape.value(image))?;
    let mut x = image;
    for (i, stage) in cfg.stages.iter().enumerate() {
        x = tape.conv2d(x, params[2 * i], stage.stride, stage.kernel / 2)?;
        x = tape.add_channel_bias(x, params[2 * i + 1])?;
        x = tape.relu(x);
    }
    tape.global_avg_pool(x)
}
