use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Adam optimizer state, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Number of `adam_step` calls so far.
    pub step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(base_lr: f64) -> Self {
        Self::with_betas(base_lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(base_lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            base_lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn n_tracked(&self) -> usize {
        self.moments.len()
    }
}

/// One bias-corrected Adam update at learning rate `lr`, then clears the
/// gradients. Every parameter passed in must carry a gradient.
pub fn adam_step<T: Scalar>(
    params: &[(&str, &Tensor<T>)],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.has_grad()) {
        return Err(Error::Backward(format!("parameter `{name}` has no gradient")));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let eps = T::lit(state.eps);
    for (name, p) in params {
        let g = p.take_grad().expect("checked above");
        let mo = state
            .moments
            .entry((*name).to_owned())
            .or_insert_with(|| Moments {
                m: vec![T::zero(); g.len()],
                v: vec![T::zero(); g.len()],
                steps: 0,
            });
        if mo.m.len() != g.len() {
            return Err(Error::shape(
                "adam_step",
                format!("moments for `{name}` have {} entries, gradient {}", mo.m.len(), g.len()),
            ));
        }
        mo.steps += 1;
        let t = mo.steps as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::lit(lr);
        p.update_data(|data| {
            for i in 0..data.len() {
                mo.m[i] = b1 * mo.m[i] + (T::one() - b1) * g[i];
                mo.v[i] = b2 * mo.v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = mo.m[i] / c1;
                let vhat = mo.v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// Linear warm-up from 0 to `base` over `warmup` steps, then linear decay to
/// 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, base: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let step = step.min(total);
    if warmup > 0 && step < warmup {
        base * (step as f64 / warmup as f64)
    } else if total > warmup {
        base * ((total - step) as f64 / (total - warmup) as f64)
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_moves_by_lr() {
        let p = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
        p.sum().backward().unwrap();
        let mut st = AdamState::new(0.1);
        adam_step(&[("p", &p)], &mut st, 0.1).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-6, "{}", p.item());
        assert!(!p.has_grad());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let p = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        p.scale(0.0).sum().backward().unwrap();
        let mut st = AdamState::new(0.1);
        adam_step(&[("p", &p)], &mut st, 0.1).unwrap();
        assert_eq!(p.item(), 3.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let p = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let mut st = AdamState::new(0.1);
        assert!(adam_step(&[("p", &p)], &mut st, 0.1).is_err());
    }

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x - 2)², hand-derived Adam steps from x = 0
        let p = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
        let mut st = AdamState::new(0.1);
        let mut xs = vec![0.0];
        for _ in 0..2 {
            let d = p.add_scalar(-2.0);
            d.mul(&d).unwrap().sum().backward().unwrap();
            adam_step(&[("p", &p)], &mut st, 0.1).unwrap();
            xs.push(p.item());
        }
        assert!(xs[1] > xs[0] && xs[2] > xs[1] && xs[2] < 2.0);
        // step 1: g=-4 → m̂/√v̂ = -1 → x = 0.1
        assert!((xs[1] - 0.1).abs() < 1e-6);
        // step 2: g=-3.8, m=0.9·(-0.4)+0.1·(-3.8)=-0.74, v=0.999·0.016+0.001·14.44=0.030424
        let m_hat = -0.74 / (1.0 - 0.81);
        let v_hat: f64 = 0.030424 / (1.0 - 0.998001);
        let expect = 0.1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((xs[2] - expect).abs() < 1e-9, "{} vs {expect}", xs[2]);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_schedule(0, 10, 100, 1e-4), 0.0);
        assert_eq!(lr_schedule(10, 10, 100, 1e-4), 1e-4);
        assert!((lr_schedule(55, 10, 100, 1e-4) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(100, 10, 100, 1e-4), 0.0);
        assert!((lr_schedule(5, 10, 100, 1.0) - 0.5).abs() < 1e-15);
    }
}
