//! First-order optimizers over flat parameter lists.

use crate::tensor::matrix::Matrix;

/// Adam with the standard moment estimates and bias correction
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
///
/// Weight decay is not applied here; models that regularize add an explicit
/// L2 penalty to their loss so the decay flows through the same gradients
/// that are being tested against finite differences.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params` and `grads` must stay aligned (same
    /// order, same shapes) across every call on a given optimizer.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic_bowl() {
        // f(x) = ||x - target||^2, gradient 2(x - target).
        let target = Matrix::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
        let mut x = Matrix::zeros(2, 2);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let grad = x.sub(&target).scale(2.0);
            opt.step(&mut [&mut x], &[grad]);
        }
        let err = x.sub(&target).max_abs();
        assert!(err < 1e-4, "did not converge: err {err}");
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction the first Adam step has magnitude ~lr
        // regardless of the gradient scale.
        let mut x = Matrix::scalar(0.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut x], &[Matrix::scalar(1234.5)]);
        assert!((x.item() + 0.01).abs() < 1e-6);
    }
}
