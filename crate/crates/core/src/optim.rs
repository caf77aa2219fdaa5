use ndarray::Array2;

use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<Array2<T>> = store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &mut Grads<T>) {
        if let Some(max) = self.clip_norm {
            let norm = grads.global_norm().as_f64();
            if norm > max {
                grads.scale(T::of(max / norm));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let one = T::one();
        for (i, slot) in grads.slots.iter().enumerate() {
            let Some(g) = slot else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                });
            let p = store.get_mut(crate::params::ParamId(i));
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / c1;
                let vh = v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", array![[3.0, -2.0]]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = Graph::new(&store);
            let x = g.param(w);
            let c = g.constant(array![[1.0, 1.0]]);
            let d = g.sub(x, c);
            let sq = g.square(d);
            let loss = g.sum_all(sq);
            let mut grads = g.backward(loss).into_params();
            opt.step(&mut store, &mut grads);
        }
        for &v in store.get(w).iter() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
