//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Applies one Adam update in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(format!(
                "adam: parameter {:?}, gradient {:?}, state {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powf(t));
    let c2 = T::lit(1.0 - cfg.beta2.powf(t));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.epsilon);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = gd[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::<f64>::full(&[3], 0.5);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        for &v in p.data() {
            assert!((v + 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::<f64>::full(&[2], 0.7);
        let g = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        for _ in 0..100 {
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.data(), &[0.7, 0.7]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::<f32>::full(&[4], 1.0);
            let g = Tensor::<f32>::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
            let mut st = AdamState::new([&p]);
            for _ in 0..10 {
                adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::new([&p]);
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default()),
            Err(Error::Dimension(_))
        ));
    }
}
