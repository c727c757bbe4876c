//! Adam with decoupled weight decay, plus the warmup-then-cosine learning
//! rate schedule used by all training runs.

use crate::network::ParamBank;
use crate::tensor::{Scalar, Tensor};

pub struct AdamW<E: Scalar> {
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(bank: &ParamBank<E>, weight_decay: f64) -> Self {
        let m = bank.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        let v = bank.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamW { m, v, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads` is aligned with the bank's parameter order;
    /// `None` entries (parameters outside the loss) still advance their
    /// moment estimates with a zero gradient.
    pub fn step(&mut self, bank: &mut ParamBank<E>, grads: &[Option<Tensor<E>>], lr: f64) {
        assert_eq!(grads.len(), bank.len(), "gradient count");
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr_e = E::from_f64(lr / bc1);
        let bc2_sqrt = E::from_f64(1.0 / bc2.sqrt());
        let eps = E::from_f64(self.eps);
        let wd = E::from_f64(lr * self.weight_decay);

        for (i, (_, p)) in bank.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match &grads[i] {
                Some(gt) => {
                    for ((pv, (mv, vv)), &g) in
                        pd.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(gt.data().iter())
                    {
                        *mv = *mv * b1 + g * one_m_b1;
                        *vv = *vv * b2 + g * g * one_m_b2;
                        let denom = (*vv).sqrt() * bc2_sqrt + eps;
                        *pv = *pv - lr_e * (*mv / denom) - wd * *pv;
                    }
                }
                None => {
                    for ((pv, (mv, vv)), _) in
                        pd.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(std::iter::repeat(()))
                    {
                        *mv = *mv * b1;
                        *vv = *vv * b2;
                        let denom = (*vv).sqrt() * bc2_sqrt + eps;
                        *pv = *pv - lr_e * (*mv / denom) - wd * *pv;
                    }
                }
            }
        }
    }

    pub fn state_tensors(&self) -> impl Iterator<Item = (String, &Tensor<E>)> + '_ {
        self.m
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("m.{i}"), t))
            .chain(self.v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t)))
    }

    pub fn restore(&mut self, m: Vec<Tensor<E>>, v: Vec<Tensor<E>>, t: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero over the rest.
pub fn lr_at(base_lr: f64, warmup_steps: u64, total_steps: u64, step: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let span = (total_steps.saturating_sub(warmup_steps)).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
