use crate::model::ParameterSet;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p: ParameterSet = [("w".to_string(), Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap())]
            .into_iter()
            .collect();
        let g: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap())]
            .into_iter()
            .collect();
        let mut opt = Adam::new(0.9, 0.95, 1e-8, 0.0);
        opt.step(&mut p, &g, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] - 1.1).abs() < 1e-8 && w[2] == 1.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g: BTreeMap<String, Tensor> = [("a".to_string(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())]
            .into_iter()
            .collect();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), global_norm(&g));
    }
}
