use serde::{Deserialize, Serialize};

use super::Matrix;

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        assert_eq!(params.len(), self.first.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let mut p = Matrix::row_vector(vec![1.0, -2.0, 0.5]);
        let mut opt = Adam::new(0.1, &[&p]);
        let g = Matrix::row_vector(vec![3.0, -0.01, 0.0]);
        opt.step(vec![&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-4);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Matrix::row_vector(vec![4.0, -3.0]);
        let mut opt = Adam::new(0.05, &[&p]);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * (x - 1.0));
            opt.step(vec![&mut p], &[g]);
        }
        for x in p.data() {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }
}
