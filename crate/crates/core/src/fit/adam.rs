/// Adaptive-moment gradient descent with bias correction and a
/// multiplicative per-step learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is multiplied by this after every step.
    pub decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 1.0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay = decay;
        self
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates `x` in place against gradient `g`.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        self.lr *= self.decay;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(2, 0.1);
        let mut x = [1.0, -1.0];
        a.step(&mut x, &[3.0, -0.5]);
        assert!((x[0] - 0.9).abs() < 1e-7);
        assert!((x[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut a = Adam::new(3, 0.1);
        let mut x = [1.0, 2.0, 3.0];
        for _ in 0..10 {
            a.step(&mut x, &[0.0; 3]);
        }
        assert_eq!(x, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(2, 0.05);
        let mut x = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0), 8.0 * (x[1] + 0.5)];
            a.step(&mut x, &g);
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn decay_is_multiplicative() {
        let mut a = Adam::new(1, 1.0).with_decay(0.99);
        let mut x = [0.0];
        for _ in 0..3 {
            a.step(&mut x, &[1.0]);
        }
        assert!((a.lr - 0.99f64.powi(3)).abs() < 1e-15);
    }
}
