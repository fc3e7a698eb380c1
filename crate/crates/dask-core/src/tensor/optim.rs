//! Adam with bias correction. Moment buffers are keyed by parameter position,
//! so the caller must pass the same parameter list in the same order on every
//! step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every parameter must carry a gradient; gradients
    /// are cleared afterwards and the step counter advances.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "parameter count changed: {} state slots, {} params",
                self.m.len(),
                params.len()
            )));
        }
        for (idx, p) in params.iter().enumerate() {
            match p.grad() {
                None => {
                    return Err(Error::Optimizer(format!(
                        "parameter {idx} has no gradient"
                    )))
                }
                Some(g) if g.len() != self.m[idx].len() => {
                    return Err(Error::Optimizer(format!(
                        "parameter {idx} shape changed mid-run"
                    )))
                }
                Some(_) => {}
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let g = p.grad().unwrap().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((data, (mv, vv)), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(&g)
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *data -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}
