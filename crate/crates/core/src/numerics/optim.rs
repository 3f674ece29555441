use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Result};

/// RMSprop with the square root taken over `s + eps`.
///
/// `s <- alpha * s + (1 - alpha) * g^2`, `p <- p - lr * g / sqrt(s + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub step: u64,
    sq_avg: Vec<Vec<f64>>,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self::new(5e-4, 0.99, 1e-5)
    }
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            step: 0,
            sq_avg: Vec::new(),
        }
    }

    /// Running mean of squared gradients, one vector per parameter.
    pub fn sq_avg(&self) -> &[Vec<f64>] {
        &self.sq_avg
    }

    /// Applies one update and clears the gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(NumericsError::InvalidState(format!(
                "parameter {} has no gradient; run backward first",
                p.name
            )));
        }
        if self.sq_avg.is_empty() {
            self.sq_avg = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        if self.sq_avg.len() != params.len() {
            return Err(NumericsError::InvalidState(
                "optimizer state does not match parameter table".into(),
            ));
        }
        for (p, s) in params.iter_mut().zip(&mut self.sq_avg) {
            let g = p.grad.take().expect("checked above");
            for ((w, gi), si) in p.value.data_mut().iter_mut().zip(&g).zip(s.iter_mut()) {
                *si = self.alpha * *si + (1.0 - self.alpha) * gi * gi;
                *w -= self.lr * gi / (*si + self.eps).sqrt();
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}
