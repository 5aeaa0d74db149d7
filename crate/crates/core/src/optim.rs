//! Adam with global-norm gradient clipping.

use crate::model::ModelParams;
use crate::tape::Mat;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &ModelParams| p.tensors.iter().map(|t| Mat::zeros(t.dim())).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Apply one update. Missing gradients count as zero.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Mat>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for (i, param) in params.tensors.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match &grads[i] {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

pub fn global_norm(grads: &[Option<Mat>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// Element-wise sum of two gradient sets.
pub fn add_grads(acc: &mut [Option<Mat>], other: Vec<Option<Mat>>) {
    for (a, b) in acc.iter_mut().zip(other) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => *a += &b,
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = ModelParams {
            names: vec!["w".into()],
            tensors: vec![array![[1.0, -1.0]]],
        };
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &[Some(array![[2.0, -3.0]])]);
        assert!((p.tensors[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.tensors[0][[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Some(array![[3.0, 4.0]]), None, Some(array![[0.0]])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
