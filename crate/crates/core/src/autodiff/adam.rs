use super::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer. Dense gradients update whole tensors; row
/// gradients from embedding lookups update only the rows they touch, with
/// bias correction taken from the global step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        };
        for (&id, g) in &grads.dense {
            update(
                &mut params.get_mut(id).data,
                &mut self.m[id.0],
                &mut self.v[id.0],
                g,
            );
        }
        for (&id, rows) in &grads.rows {
            let width = params.get(id).row_len();
            for (&r, g) in rows {
                let span = r * width..(r + 1) * width;
                update(
                    &mut params.get_mut(id).data[span.clone()],
                    &mut self.m[id.0][span.clone()],
                    &mut self.v[id.0][span],
                    g,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    #[test]
    fn minimises_a_quadratic() {
        let mut s = ParamStore::new();
        let x = s.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&s);
                let p = g.param(x);
                let sq = g.mul(p, p).unwrap();
                let f = g.sum(sq);
                g.backward(f)
            };
            opt.step(&mut s, &grads);
        }
        assert!(s.get(x).data.iter().all(|v| v.abs() < 1e-2), "{:?}", s.get(x).data);
    }

    #[test]
    fn sparse_rows_leave_others_untouched() {
        let mut s = ParamStore::new();
        let e = s.insert("emb", Tensor::new(vec![3, 2], vec![1.0; 6]));
        let mut opt = Adam::new(AdamConfig { lr: 0.5, ..Default::default() }, &s);
        let mut grads = Gradients::default();
        grads.add_row(e, 1, &[1.0, -1.0]);
        opt.step(&mut s, &grads);
        let d = &s.get(e).data;
        assert_eq!(&d[0..2], &[1.0, 1.0]);
        assert_eq!(&d[4..6], &[1.0, 1.0]);
        assert!(d[2] < 1.0 && d[3] > 1.0);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut s = ParamStore::new();
        let x = s.insert("x", Tensor::new(vec![2], vec![0.25, -4.0]));
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &s);
        let mut grads = Gradients::default();
        grads.add_dense(x, &[3.0, 1e-3]);
        opt.step(&mut s, &grads);
        assert_eq!(s, before);
    }
}
