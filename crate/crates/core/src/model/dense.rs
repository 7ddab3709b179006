//! Residual fully connected blocks and the scalar prediction head.

use crate::model::store::{ParamId, ParamStore};
use ndarray::Array1;
use rand::Rng;

/// `y = x + W2 * relu(W1 * x + b1) + b2`, width preserved.
pub struct ResidualBlock {
    pub width: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct ResidualCache {
    x: Array1<f64>,
    hidden: Array1<f64>, // post-ReLU
}

impl ResidualBlock {
    pub fn new(prefix: &str, width: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            width,
            w1: store.add_fan_in(format!("{prefix}.w1"), &[width, width], width, rng),
            b1: store.add_fan_in(format!("{prefix}.b1"), &[width], width, rng),
            w2: store.add_fan_in(format!("{prefix}.w2"), &[width, width], width, rng),
            b2: store.add_fan_in(format!("{prefix}.b2"), &[width], width, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(
        &self,
        x: &Array1<f64>,
        store: &ParamStore,
        want_cache: bool,
    ) -> (Array1<f64>, Option<ResidualCache>) {
        let w1 = store.value(self.w1).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b1 = store.value(self.b1).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let w2 = store.value(self.w2).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = store.value(self.b2).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut hidden = w1.dot(x) + &b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let y = x + &w2.dot(&hidden) + &b2;
        let cache = want_cache.then(|| ResidualCache { x: x.clone(), hidden: hidden.clone() });
        (y, cache)
    }

    pub fn backward(
        &self,
        cache: &ResidualCache,
        d_y: &Array1<f64>,
        store: &mut ParamStore,
    ) -> Array1<f64> {
        let w1 = store
            .value(self.w1)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let w2 = store
            .value(self.w2)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        {
            let (_, g) = store.pair_mut(self.b2);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += d_y;
        }
        {
            let (_, g) = store.pair_mut(self.w2);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for (r, &dv) in d_y.iter().enumerate() {
                if dv != 0.0 {
                    g.row_mut(r).scaled_add(dv, &cache.hidden);
                }
            }
        }
        let mut d_hidden = w2.t().dot(d_y);
        for (dh, &h) in d_hidden.iter_mut().zip(cache.hidden.iter()) {
            if h <= 0.0 {
                *dh = 0.0;
            }
        }
        {
            let (_, g) = store.pair_mut(self.b1);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += &d_hidden;
        }
        {
            let (_, g) = store.pair_mut(self.w1);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for (r, &dv) in d_hidden.iter().enumerate() {
                if dv != 0.0 {
                    g.row_mut(r).scaled_add(dv, &cache.x);
                }
            }
        }
        // skip connection adds the output grad straight through
        d_y + &w1.t().dot(&d_hidden)
    }
}

/// Affine map to a scalar travel-time estimate.
pub struct ScalarHead {
    pub input_dim: usize,
    w: ParamId,
    pub bias: ParamId,
}

impl ScalarHead {
    pub fn new(prefix: &str, input_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self {
            input_dim,
            w: store.add_fan_in(format!("{prefix}.w"), &[input_dim], input_dim, rng),
            bias: store.add_fan_in(format!("{prefix}.b"), &[1], input_dim, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.bias]
    }

    pub fn forward(&self, x: &Array1<f64>, store: &ParamStore) -> f64 {
        let w = store.value(self.w).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        w.dot(x) + store.value(self.bias)[0]
    }

    pub fn backward(&self, x: &Array1<f64>, d_out: f64, store: &mut ParamStore) -> Array1<f64> {
        let w = store
            .value(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        {
            let (_, g) = store.pair_mut(self.w);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g.scaled_add(d_out, x);
        }
        store.grad_mut(self.bias)[0] += d_out;
        w * d_out
    }
}
