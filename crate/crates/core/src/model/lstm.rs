//! Bidirectional LSTM over fused step vectors, with full
//! backpropagation through time.

use crate::model::store::{ParamId, ParamStore};
use ndarray::{Array1, Array2};
use rand::Rng;

/// One directional LSTM cell; gates stacked [input, forget, cell,
/// output] along the first axis.
pub struct Lstm {
    pub input_dim: usize,
    pub hidden: usize,
    w_x: ParamId, // (4H, D)
    w_h: ParamId, // (4H, H)
    b: ParamId,   // (4H,)
}

struct StepCache {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    tanh_c: Array1<f64>,
}

pub struct LstmCache {
    steps: Vec<StepCache>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn new(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = input_dim + hidden;
        Self {
            input_dim,
            hidden,
            w_x: store.add_fan_in(format!("{prefix}.w_x"), &[4 * hidden, input_dim], fan_in, rng),
            w_h: store.add_fan_in(format!("{prefix}.w_h"), &[4 * hidden, hidden], fan_in, rng),
            b: store.add_fan_in(format!("{prefix}.bias"), &[4 * hidden], fan_in, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_x, self.w_h, self.b]
    }

    /// Run over the input sequence from zero initial state, returning
    /// per-step hidden states.
    pub fn forward(
        &self,
        inputs: &[Array1<f64>],
        store: &ParamStore,
        want_cache: bool,
    ) -> (Vec<Array1<f64>>, Option<LstmCache>) {
        let h_n = self.hidden;
        let w_x = store.value(self.w_x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w_h = store.value(self.w_h).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = store.value(self.b).view().into_dimensionality::<ndarray::Ix1>().unwrap();

        let mut h = Array1::zeros(h_n);
        let mut c: Array1<f64> = Array1::zeros(h_n);
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut steps = Vec::new();
        for x in inputs {
            let pre = w_x.dot(x) + w_h.dot(&h) + &b;
            let mut i = Array1::zeros(h_n);
            let mut f = Array1::zeros(h_n);
            let mut g = Array1::zeros(h_n);
            let mut o = Array1::zeros(h_n);
            for k in 0..h_n {
                i[k] = sigmoid(pre[k]);
                f[k] = sigmoid(pre[h_n + k]);
                g[k] = pre[2 * h_n + k].tanh();
                o[k] = sigmoid(pre[3 * h_n + k]);
            }
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &o * &tanh_c;
            if want_cache {
                steps.push(StepCache {
                    x: x.clone(),
                    h_prev: h.clone(),
                    c_prev: c.clone(),
                    i,
                    f,
                    g,
                    o,
                    tanh_c: tanh_c.clone(),
                });
            }
            h = h_new.clone();
            c = c_new;
            outputs.push(h_new);
        }
        (outputs, want_cache.then_some(LstmCache { steps }))
    }

    /// Backpropagate through time. `d_outputs[t]` is the loss gradient
    /// on the step-t hidden state. Returns gradients on the inputs and
    /// accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &LstmCache,
        d_outputs: &[Array1<f64>],
        store: &mut ParamStore,
    ) -> Vec<Array1<f64>> {
        let h_n = self.hidden;
        let steps = &cache.steps;
        let len = steps.len();
        assert_eq!(d_outputs.len(), len);

        let w_x_mat = store
            .value(self.w_x)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let w_h_mat = store
            .value(self.w_h)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();

        let mut g_w_x = Array2::<f64>::zeros((4 * h_n, self.input_dim));
        let mut g_w_h = Array2::<f64>::zeros((4 * h_n, h_n));
        let mut g_b = Array1::<f64>::zeros(4 * h_n);
        let mut d_inputs = vec![Array1::zeros(self.input_dim); len];

        let mut dh_next: Array1<f64> = Array1::zeros(h_n);
        let mut dc_next: Array1<f64> = Array1::zeros(h_n);
        for t in (0..len).rev() {
            let s = &steps[t];
            let dh = &d_outputs[t] + &dh_next;
            // h = o * tanh(c)
            let d_o = &dh * &s.tanh_c;
            let dc = &dh * &s.o * &s.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
            // c = f*c_prev + i*g
            let d_f = &dc * &s.c_prev;
            let d_i = &dc * &s.g;
            let d_g = &dc * &s.i;
            dc_next = &dc * &s.f;

            // through the activations into the pre-activation stack
            let mut d_pre = Array1::zeros(4 * h_n);
            for k in 0..h_n {
                d_pre[k] = d_i[k] * s.i[k] * (1.0 - s.i[k]);
                d_pre[h_n + k] = d_f[k] * s.f[k] * (1.0 - s.f[k]);
                d_pre[2 * h_n + k] = d_g[k] * (1.0 - s.g[k] * s.g[k]);
                d_pre[3 * h_n + k] = d_o[k] * s.o[k] * (1.0 - s.o[k]);
            }

            for (r, &dv) in d_pre.iter().enumerate() {
                if dv != 0.0 {
                    g_w_x.row_mut(r).scaled_add(dv, &s.x);
                    g_w_h.row_mut(r).scaled_add(dv, &s.h_prev);
                }
            }
            g_b += &d_pre;
            d_inputs[t] = w_x_mat.t().dot(&d_pre);
            dh_next = w_h_mat.t().dot(&d_pre);
        }

        {
            let (_, g) = store.pair_mut(self.w_x);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            g += &g_w_x;
        }
        {
            let (_, g) = store.pair_mut(self.w_h);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            g += &g_w_h;
        }
        {
            let (_, g) = store.pair_mut(self.b);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += &g_b;
        }
        d_inputs
    }
}

/// Forward and reverse LSTMs whose per-step hidden states are
/// concatenated.
pub struct BiLstm {
    pub forward: Lstm,
    pub reverse: Lstm,
}

pub struct BiLstmCache {
    fwd: LstmCache,
    rev: LstmCache,
}

impl BiLstm {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            forward: Lstm::new("bilstm.fwd", input_dim, hidden, store, rng),
            reverse: Lstm::new("bilstm.rev", input_dim, hidden, store, rng),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.forward.param_ids();
        ids.extend(self.reverse.param_ids());
        ids
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward_seq(
        &self,
        inputs: &[Array1<f64>],
        store: &ParamStore,
        want_cache: bool,
    ) -> (Vec<Array1<f64>>, Option<BiLstmCache>) {
        let (fwd_out, fwd_cache) = self.forward.forward(inputs, store, want_cache);
        let reversed: Vec<Array1<f64>> = inputs.iter().rev().cloned().collect();
        let (rev_out, rev_cache) = self.reverse.forward(&reversed, store, want_cache);

        let len = inputs.len();
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let mut v = Array1::zeros(self.output_dim());
            v.slice_mut(ndarray::s![..self.forward.hidden]).assign(&fwd_out[t]);
            v.slice_mut(ndarray::s![self.forward.hidden..]).assign(&rev_out[len - 1 - t]);
            outputs.push(v);
        }
        let cache = match (fwd_cache, rev_cache) {
            (Some(f), Some(r)) => Some(BiLstmCache { fwd: f, rev: r }),
            _ => None,
        };
        (outputs, cache)
    }

    pub fn backward_seq(
        &self,
        cache: &BiLstmCache,
        d_outputs: &[Array1<f64>],
        store: &mut ParamStore,
    ) -> Vec<Array1<f64>> {
        let h = self.forward.hidden;
        let len = d_outputs.len();
        let d_fwd: Vec<Array1<f64>> =
            d_outputs.iter().map(|d| d.slice(ndarray::s![..h]).to_owned()).collect();
        // reverse-direction grads, in the reversed time order its
        // forward pass ran in
        let d_rev: Vec<Array1<f64>> =
            (0..len).rev().map(|t| d_outputs[t].slice(ndarray::s![h..]).to_owned()).collect();

        let d_in_fwd = self.forward.backward(&cache.fwd, &d_fwd, store);
        let d_in_rev = self.reverse.backward(&cache.rev, &d_rev, store);

        (0..len)
            .map(|t| &d_in_fwd[t] + &d_in_rev[len - 1 - t])
            .collect()
    }
}
