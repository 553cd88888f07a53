use super::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(learning_rate: f32, momentum: f32, params: &[&Tensor]) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum {momentum} not in [0, 1)"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} parameter tensors", state.velocity.len()),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Tensor, g: f32, st: &mut OptimizerState) {
        sgd_step(&mut [p], &[Tensor::from_vec(vec![g])], st).unwrap();
    }

    #[test]
    fn plain_step() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = OptimizerState::new(0.1, 0.0, &[&p]).unwrap();
        step(&mut p, 1.0, &mut st);
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = OptimizerState::new(0.1, 0.9, &[&p]).unwrap();
        step(&mut p, 1.0, &mut st);
        assert!((st.velocity()[0].data()[0] - 1.0).abs() < 1e-7);
        step(&mut p, 1.0, &mut st);
        assert!((st.velocity()[0].data()[0] - 1.9).abs() < 1e-6);
        assert!((p.data()[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![0.25, -3.0]);
        let before = p.clone();
        let mut st = OptimizerState::new(0.5, 0.9, &[&p]).unwrap();
        sgd_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut st).unwrap();
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let mut st = OptimizerState::new(0.1, 0.0, &[&p]).unwrap();
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st).is_err());
    }
}
