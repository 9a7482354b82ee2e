//! Adam over lists of dense parameter matrices.

use ndarray::Array2;

/// Weight decay is classic L2-in-gradient, applied before the moment update.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
            self.v = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + self.weight_decay * *p;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn quadratic_converges_to_minimum() {
        // f(w) = ||w - target||^2 / 2
        let target = arr2(&[[3.0, -1.0]]);
        let mut w = vec![arr2(&[[0.0, 0.0]])];
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let grad = vec![&w[0] - &target];
            opt.step(&mut w, &grad);
        }
        assert!((&w[0] - &target).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut w = vec![arr2(&[[1.0]])];
        let mut opt = Adam::new(0.01, 0.0);
        opt.step(&mut w, &[arr2(&[[123.0]])]);
        // bias-corrected first step ≈ lr · sign(g)
        assert!((w[0][[0, 0]] - (1.0 - 0.01)).abs() < 1e-6);
    }
}
