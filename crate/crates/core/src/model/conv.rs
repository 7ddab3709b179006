//! The layout-image ConvNet: 3x3 same-padding convolutions with ReLU,
//! ceiling-mode max pooling, and a fully connected output layer.

use crate::error::{Error, Result};
use crate::model::store::{ParamId, ParamStore};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvLayerSpec {
    Conv { out_channels: usize },
    Pool { kernel: usize, stride: usize },
}

/// Architecture description; convolutions are fixed at 3x3, stride 1,
/// same padding (the spatial size is preserved, pooling does all the
/// downsampling).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvNetSpec {
    pub input: (usize, usize, usize),
    pub layers: Vec<ConvLayerSpec>,
    pub output_dim: usize,
}

/// Ceiling-mode pooling output size.
pub fn pool_out(input: usize, kernel: usize, stride: usize) -> usize {
    if input <= kernel {
        1
    } else {
        (input - kernel + stride - 1) / stride + 1
    }
}

impl ConvNetSpec {
    /// The full-size architecture:
    /// 3x436x373 -> conv8 -> pool2/2 -> conv16 -> pool3/3 -> conv8 ->
    /// pool3/3 -> fc 200.
    pub fn full() -> Self {
        Self {
            input: (3, 436, 373),
            layers: vec![
                ConvLayerSpec::Conv { out_channels: 8 },
                ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                ConvLayerSpec::Conv { out_channels: 16 },
                ConvLayerSpec::Pool { kernel: 3, stride: 3 },
                ConvLayerSpec::Conv { out_channels: 8 },
                ConvLayerSpec::Pool { kernel: 3, stride: 3 },
            ],
            output_dim: 200,
        }
    }

    /// Downscaled profile with the same three conv/pool stages, for
    /// desk-scale runs on resized images.
    pub fn test_profile(height: usize, width: usize) -> Self {
        Self {
            input: (3, height, width),
            layers: vec![
                ConvLayerSpec::Conv { out_channels: 8 },
                ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                ConvLayerSpec::Conv { out_channels: 16 },
                ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                ConvLayerSpec::Conv { out_channels: 8 },
                ConvLayerSpec::Pool { kernel: 2, stride: 2 },
            ],
            output_dim: 200,
        }
    }

    /// Shape progression: the input of every layer plus the final
    /// feature map, channels x height x width.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for layer in &self.layers {
            cur = match *layer {
                ConvLayerSpec::Conv { out_channels } => (out_channels, cur.1, cur.2),
                ConvLayerSpec::Pool { kernel, stride } => {
                    (cur.0, pool_out(cur.1, kernel, stride), pool_out(cur.2, kernel, stride))
                }
            };
            shapes.push(cur);
        }
        shapes
    }

    /// Flattened size feeding the fully connected layer.
    pub fn flat_dim(&self) -> usize {
        let (c, h, w) = *self.shapes().last().unwrap();
        c * h * w
    }
}

/// im2col for 3x3 stride-1 same-padding convolution:
/// (C, H, W) -> (C*9, H*W).
fn im2col3(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * 9, h * w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[(row, y * w + xx)] = x[(ch, sy as usize, sx as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col3`: scatter-add columns back into image space.
fn col2im3(col: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ch * 9 + ky * 3 + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[(ch, sy as usize, sx as usize)] += col[(row, y * w + xx)];
                    }
                }
            }
        }
    }
    x
}

/// Plain 2-D convolution per the architecture's conventions, exposed
/// for direct verification against hand-computed maps.
pub fn conv2d_same(x: &Array3<f64>, weight: &Array2<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let out_c = weight.nrows();
    let col = im2col3(x);
    let y_mat = weight.dot(&col); // (O, H*W)
    let mut y = Array3::zeros((out_c, h, w));
    for o in 0..out_c {
        for yy in 0..h {
            for xx in 0..w {
                y[(o, yy, xx)] = y_mat[(o, yy * w + xx)] + bias[o];
            }
        }
    }
    y
}

#[derive(Debug)]
enum LayerCache {
    /// Input to the convolution and its post-ReLU output.
    Conv { input: Array3<f64>, output: Array3<f64> },
    /// Input shape plus the argmax (flat input index) per output.
    Pool { input_dim: (usize, usize, usize), argmax: Vec<u32> },
}

#[derive(Debug)]
pub struct ConvCache {
    layers: Vec<LayerCache>,
    fc_input: Array1<f64>,
}

pub struct ConvNet {
    pub spec: ConvNetSpec,
    convs: Vec<(ParamId, ParamId)>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ConvNet {
    pub fn new(spec: ConvNetSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut in_c = spec.input.0;
        for (i, layer) in spec.layers.iter().enumerate() {
            if let ConvLayerSpec::Conv { out_channels } = *layer {
                let fan_in = in_c * 9;
                let w = store.add_fan_in(format!("conv{i}.weight"), &[out_channels, fan_in], fan_in, rng);
                let b = store.add_fan_in(format!("conv{i}.bias"), &[out_channels], fan_in, rng);
                convs.push((w, b));
                in_c = out_channels;
            }
        }
        let flat = spec.flat_dim();
        let fc_w = store.add_fan_in("conv.fc.weight", &[spec.output_dim, flat], flat, rng);
        let fc_b = store.add_fan_in("conv.fc.bias", &[spec.output_dim], flat, rng);
        Self { spec, convs, fc_w, fc_b }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(|&(w, b)| [w, b]).collect();
        ids.push(self.fc_w);
        ids.push(self.fc_b);
        ids
    }

    /// Forward pass; `want_cache` controls whether enough state for a
    /// backward pass is retained.
    pub fn forward(
        &self,
        x: &Array3<f64>,
        store: &ParamStore,
        want_cache: bool,
    ) -> Result<(Array1<f64>, Option<ConvCache>)> {
        if x.dim() != self.spec.input {
            return Err(Error::Shape {
                expected: format!("{:?}", self.spec.input),
                actual: format!("{:?}", x.dim()),
            });
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        let mut conv_i = 0;
        for layer in &self.spec.layers {
            match *layer {
                ConvLayerSpec::Conv { out_channels } => {
                    let (w_id, b_id) = self.convs[conv_i];
                    conv_i += 1;
                    let w = store
                        .value(w_id)
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("conv weight is 2-d");
                    let b = store
                        .value(b_id)
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("conv bias is 1-d");
                    let mut y = conv2d_same(&cur, &w.to_owned(), &b.to_owned());
                    y.mapv_inplace(|v| v.max(0.0));
                    debug_assert_eq!(y.dim().0, out_channels);
                    if want_cache {
                        caches.push(LayerCache::Conv { input: cur.clone(), output: y.clone() });
                    }
                    cur = y;
                }
                ConvLayerSpec::Pool { kernel, stride } => {
                    let (c, h, w) = cur.dim();
                    let oh = pool_out(h, kernel, stride);
                    let ow = pool_out(w, kernel, stride);
                    let mut y = Array3::zeros((c, oh, ow));
                    let mut argmax = vec![0u32; c * oh * ow];
                    for ch in 0..c {
                        for oy in 0..oh {
                            let y0 = oy * stride;
                            let y1 = (y0 + kernel).min(h);
                            for ox in 0..ow {
                                let x0 = ox * stride;
                                let x1 = (x0 + kernel).min(w);
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        let v = cur[(ch, yy, xx)];
                                        if v > best {
                                            best = v;
                                            best_idx = ch * h * w + yy * w + xx;
                                        }
                                    }
                                }
                                y[(ch, oy, ox)] = best;
                                argmax[ch * oh * ow + oy * ow + ox] = best_idx as u32;
                            }
                        }
                    }
                    if want_cache {
                        caches.push(LayerCache::Pool { input_dim: (c, h, w), argmax });
                    }
                    cur = y;
                }
            }
        }
        let flat: Array1<f64> = Array1::from_iter(cur.iter().copied());
        let fc_w = store.value(self.fc_w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let fc_b = store.value(self.fc_b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = fc_w.dot(&flat) + &fc_b;
        let cache = want_cache.then_some(ConvCache { layers: caches, fc_input: flat });
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for one image given the gradient
    /// of the 200-dim output. The input image needs no gradient.
    pub fn backward(&self, cache: &ConvCache, d_out: &Array1<f64>, store: &mut ParamStore) {
        // fully connected layer
        {
            let (_, g) = store.pair_mut(self.fc_b);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            g += d_out;
        }
        let fc_w = store
            .value(self.fc_w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        {
            let (_, g) = store.pair_mut(self.fc_w);
            let mut g = g.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for (i, &dv) in d_out.iter().enumerate() {
                if dv != 0.0 {
                    let mut row = g.row_mut(i);
                    row.scaled_add(dv, &cache.fc_input);
                }
            }
        }
        let d_flat = fc_w.t().dot(d_out);

        // reshape flat grad to the last feature-map shape
        let shapes = self.spec.shapes();
        let last = *shapes.last().unwrap();
        let mut d_cur =
            Array3::from_shape_vec(last, d_flat.to_vec()).expect("flat dim matches last shape");

        let mut conv_i = self.convs.len();
        for (layer, lc) in self.spec.layers.iter().zip(cache.layers.iter()).rev() {
            match (*layer, lc) {
                (ConvLayerSpec::Pool { .. }, LayerCache::Pool { input_dim, argmax }) => {
                    let mut d_in = Array3::zeros(*input_dim);
                    let flat_in = d_in.as_slice_mut().unwrap();
                    let flat_out = d_cur.as_slice().unwrap();
                    for (i, &src) in argmax.iter().enumerate() {
                        flat_in[src as usize] += flat_out[i];
                    }
                    d_cur = d_in;
                }
                (ConvLayerSpec::Conv { .. }, LayerCache::Conv { input, output }) => {
                    conv_i -= 1;
                    let (w_id, b_id) = self.convs[conv_i];
                    // ReLU mask from the post-activation output
                    let mut g = d_cur;
                    ndarray::Zip::from(&mut g).and(output).for_each(|gv, &ov| {
                        if ov <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    let (oc, h, w) = g.dim();
                    let g_mat = Array2::from_shape_vec((oc, h * w), g.iter().copied().collect())
                        .expect("contiguous");
                    {
                        let (_, gb) = store.pair_mut(b_id);
                        let mut gb = gb.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                        for o in 0..oc {
                            gb[o] += g_mat.row(o).sum();
                        }
                    }
                    let col = im2col3(input);
                    {
                        let (_, gw) = store.pair_mut(w_id);
                        let mut gw = gw.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        gw += &g_mat.dot(&col.t());
                    }
                    if conv_i > 0 {
                        // propagate into the previous feature map
                        let w_mat = store
                            .value(w_id)
                            .view()
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap()
                            .to_owned();
                        let d_col = w_mat.t().dot(&g_mat);
                        let (ic, ih, iw) = input.dim();
                        d_cur = col2im3(&d_col, ic, ih, iw);
                    } else {
                        break;
                    }
                }
                _ => unreachable!("cache misaligned with spec"),
            }
        }
    }
}
