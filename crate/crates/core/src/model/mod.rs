//! The travel-time network: per-grid image representation gated by
//! direction embeddings, fused with LINE/flow/attribute vectors into a
//! 400-dimension step vector, a Bi-LSTM over the sequence, residual
//! layers, and per-step cumulative-time outputs.

pub mod conv;
pub mod dense;
pub mod lstm;
pub mod store;

use crate::error::{Error, Result};
use crate::features::{AttributeIndices, EmbeddingTableSpec};
use crate::graph::NodeEmbedding;
use crate::grid::GridSpec;
use crate::tiles::{ImageArchive, LayoutImage};
use conv::{ConvCache, ConvNet, ConvNetSpec};
use dense::{ResidualBlock, ResidualCache, ScalarHead};
use lstm::{BiLstm, BiLstmCache};
use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use store::{ParamId, ParamStore};

/// Everything that determines the network's shape and wiring.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub tables: EmbeddingTableSpec,
    pub conv: ConvNetSpec,
    pub lstm_hidden: usize,
    pub residual_blocks: usize,
    pub grid_width: u32,
    pub grid_height: u32,
    /// Replace the image (x) direction block with zeros; the
    /// ablation keeping only grid/flow/attribute channels.
    pub ablate_image: bool,
    pub init_seed: u64,
    /// Fixed output reparameterization: estimates are
    /// `raw * head_scale + head_shift` seconds. Set from the training
    /// labels so the trainable parameters work at unit scale.
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    #[serde(default)]
    pub head_shift: f64,
}

fn default_head_scale() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(grid_width: u32, grid_height: u32) -> Self {
        Self {
            tables: EmbeddingTableSpec::default(),
            conv: ConvNetSpec::full(),
            lstm_hidden: 128,
            residual_blocks: 2,
            grid_width,
            grid_height,
            ablate_image: false,
            init_seed: 1,
            head_scale: 1.0,
            head_shift: 0.0,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.grid_width as usize * self.grid_height as usize
    }
}

/// One step of a model-ready sequence (all lookups resolved to
/// indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepInput {
    pub cell_index: usize,
    pub direction: usize,
    pub flow_bucket: usize,
}

/// A model-ready sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    pub steps: Vec<StepInput>,
    pub attrs: AttributeIndices,
}

/// Per-cell image tensors, resized to the ConvNet input and scaled to
/// [0, 1].
pub struct ImageBank {
    images: Vec<Option<Array3<f64>>>,
    pub input_hw: (usize, usize),
}

impl ImageBank {
    pub fn empty(num_cells: usize, input_hw: (usize, usize)) -> Self {
        Self { images: (0..num_cells).map(|_| None).collect(), input_hw }
    }

    pub fn insert(&mut self, spec: &GridSpec, img: &LayoutImage) {
        let (h, w) = self.input_hw;
        let resized = image::imageops::resize(
            &img.to_rgb_image(),
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut tensor = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = resized.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    tensor[(c, y, x)] = px[c] as f64 / 255.0;
                }
            }
        }
        self.images[spec.cell_index(img.cell)] = Some(tensor);
    }

    pub fn from_archive(
        archive: &mut ImageArchive,
        spec: &GridSpec,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        let mut bank = Self::empty(spec.num_cells(), input_hw);
        let cells = archive.cells.clone();
        for cell in cells {
            let img = archive.get(cell)?;
            bank.insert(spec, &img);
        }
        Ok(bank)
    }

    pub fn get(&self, cell_index: usize) -> Result<&Array3<f64>> {
        self.images
            .get(cell_index)
            .and_then(|o| o.as_ref())
            .ok_or_else(|| Error::Empty(format!("no image for cell index {cell_index}")))
    }
}

/// Memoized ConvNet evaluations for the distinct cells touched by a
/// batch, with gradient accumulation per distinct image.
pub struct ConvBatch {
    outputs: HashMap<usize, Array1<f64>>,
    caches: HashMap<usize, ConvCache>,
    grads: HashMap<usize, Array1<f64>>,
    want_cache: bool,
}

impl ConvBatch {
    pub fn new(want_cache: bool) -> Self {
        Self {
            outputs: HashMap::new(),
            caches: HashMap::new(),
            grads: HashMap::new(),
            want_cache,
        }
    }

    fn get_or_compute(
        &mut self,
        model: &ModelState,
        images: &ImageBank,
        cell_index: usize,
    ) -> Result<Array1<f64>> {
        if let Some(out) = self.outputs.get(&cell_index) {
            return Ok(out.clone());
        }
        let x = images.get(cell_index)?;
        let (out, cache) = model.conv.forward(x, &model.store, self.want_cache)?;
        if let Some(c) = cache {
            self.caches.insert(cell_index, c);
        }
        self.outputs.insert(cell_index, out.clone());
        Ok(out)
    }

    fn add_grad(&mut self, cell_index: usize, d: &Array1<f64>) {
        match self.grads.get_mut(&cell_index) {
            Some(g) => *g += d,
            None => {
                self.grads.insert(cell_index, d.clone());
            }
        }
    }

    /// Run the deferred conv backward passes, one per distinct image,
    /// in deterministic (sorted) cell order.
    pub fn backward_all(&mut self, model: &mut ModelState) {
        let mut cells: Vec<usize> = self.grads.keys().copied().collect();
        cells.sort_unstable();
        for cell in cells {
            let d = &self.grads[&cell];
            let cache = self.caches.get(&cell).expect("cache retained during training");
            model.conv.backward(cache, d, &mut model.store);
        }
        self.grads.clear();
    }
}

struct StepVectorCache {
    conv_out: Option<Array1<f64>>, // None when ablated
}

pub struct SeqCache {
    fused: Vec<Array1<f64>>,
    step_extra: Vec<StepVectorCache>,
    bilstm: BiLstmCache,
    res_caches: Vec<Vec<ResidualCache>>, // [step][block]
    head_inputs: Vec<Array1<f64>>,
    steps: Vec<StepInput>,
    attrs: AttributeIndices,
}

/// Output of a cached forward pass: estimates for l = 2..L.
pub struct SeqForward {
    pub estimates: Vec<f64>,
    pub cache: SeqCache,
}

pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub conv: ConvNet,
    pub direction: ParamId,
    pub line: ParamId,
    pub flow_emb: ParamId,
    pub start_time: ParamId,
    pub driver: ParamId,
    pub weather: ParamId,
    pub bilstm: BiLstm,
    pub residual: Vec<ResidualBlock>,
    pub head: ScalarHead,
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let t = &config.tables;
        assert_eq!(
            config.conv.output_dim, t.direction_dim,
            "direction gating requires matching conv output and direction dims"
        );

        let conv = ConvNet::new(config.conv.clone(), &mut store, &mut rng);
        let emb = 0.05;
        let direction = store.add_uniform("table.direction", &[12, t.direction_dim], emb, &mut rng);
        let line = store.add_uniform("table.line", &[config.num_cells(), t.line_dim], emb, &mut rng);
        let flow_emb = store.add_uniform("table.flow", &[t.flow_rows, t.flow_dim], emb, &mut rng);
        let start_time =
            store.add_uniform("table.start_time", &[t.start_time_rows, t.start_time_dim], emb, &mut rng);
        let driver = store.add_uniform("table.driver", &[t.driver_rows, t.driver_dim], emb, &mut rng);
        let weather =
            store.add_uniform("table.weather", &[t.weather_rows, t.weather_dim], emb, &mut rng);

        let fused = t.fused_dim();
        let bilstm = BiLstm::new(fused, config.lstm_hidden, &mut store, &mut rng);
        let width = bilstm.output_dim();
        let residual = (0..config.residual_blocks)
            .map(|i| ResidualBlock::new(&format!("res{i}"), width, &mut store, &mut rng))
            .collect();
        let head = ScalarHead::new("head", width, &mut store, &mut rng);

        Self {
            config,
            store,
            conv,
            direction,
            line,
            flow_emb,
            start_time,
            driver,
            weather,
            bilstm,
            residual,
            head,
        }
    }

    /// Seed the LINE table from pretrained embeddings; training keeps
    /// updating it end to end.
    pub fn init_line_table(&mut self, emb: &NodeEmbedding) -> Result<()> {
        let table = self.store.value_mut(self.line);
        if table.shape() != emb.vectors.shape() {
            return Err(Error::Shape {
                expected: format!("{:?}", table.shape()),
                actual: format!("{:?}", emb.vectors.shape()),
            });
        }
        table.assign(&emb.vectors);
        Ok(())
    }

    pub fn set_ablated(&mut self, ablate: bool) {
        self.config.ablate_image = ablate;
    }

    /// Fix the output units from the training labels: raw head
    /// outputs are standardized, so optimization runs at unit scale
    /// while estimates stay in seconds.
    pub fn set_output_scaling(&mut self, mean_label: f64, std_label: f64) {
        self.config.head_shift = mean_label;
        self.config.head_scale = std_label.max(1.0);
    }

    fn table_row(&self, id: ParamId, row: usize) -> Array1<f64> {
        self.store
            .value(id)
            .index_axis(ndarray::Axis(0), row)
            .to_owned()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    }

    fn add_row_grad(&mut self, id: ParamId, row: usize, d: ndarray::ArrayView1<f64>) {
        let (_, g) = self.store.pair_mut(id);
        let mut row = g.index_axis_mut(ndarray::Axis(0), row);
        let mut row = row.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        row += &d;
    }

    /// The fused step vector: (conv (x) direction) ++ line ++ flow ++
    /// attributes.
    fn fuse_step(
        &self,
        step: &StepInput,
        attrs: &AttributeIndices,
        conv_batch: &mut ConvBatch,
        images: &ImageBank,
    ) -> Result<(Array1<f64>, StepVectorCache)> {
        let t = &self.config.tables;
        if step.cell_index >= self.config.num_cells() {
            return Err(Error::UnknownCell(crate::grid::CellId::new(
                (step.cell_index % self.config.grid_width as usize) as u32,
                (step.cell_index / self.config.grid_width as usize) as u32,
            )));
        }
        if step.direction >= 12 {
            return Err(Error::Config {
                key: "direction".into(),
                reason: format!("index {} out of range", step.direction),
            });
        }
        let mut fused = Array1::zeros(t.fused_dim());
        let mut offset = 0;

        let conv_out = if self.config.ablate_image {
            None
        } else {
            let out = conv_batch.get_or_compute(self, images, step.cell_index)?;
            let dir_row = self.table_row(self.direction, step.direction);
            let gated = &out * &dir_row;
            fused.slice_mut(ndarray::s![..t.direction_dim]).assign(&gated);
            Some(out)
        };
        offset += t.direction_dim;

        fused
            .slice_mut(ndarray::s![offset..offset + t.line_dim])
            .assign(&self.table_row(self.line, step.cell_index));
        offset += t.line_dim;

        fused
            .slice_mut(ndarray::s![offset..offset + t.flow_dim])
            .assign(&self.table_row(self.flow_emb, step.flow_bucket.min(t.flow_rows - 1)));
        offset += t.flow_dim;

        fused
            .slice_mut(ndarray::s![offset..offset + t.start_time_dim])
            .assign(&self.table_row(self.start_time, attrs.start_time_idx as usize));
        offset += t.start_time_dim;
        fused
            .slice_mut(ndarray::s![offset..offset + t.driver_dim])
            .assign(&self.table_row(self.driver, attrs.driver_idx as usize));
        offset += t.driver_dim;
        fused
            .slice_mut(ndarray::s![offset..offset + t.weather_dim])
            .assign(&self.table_row(self.weather, attrs.weather_idx as usize));

        Ok((fused, StepVectorCache { conv_out }))
    }

    /// Forward over one sequence; estimates cover l = 2..L (the first
    /// step's label is zero by definition and gets no output).
    pub fn forward_seq(
        &self,
        seq: &SeqInput,
        conv_batch: &mut ConvBatch,
        images: &ImageBank,
        want_cache: bool,
    ) -> Result<SeqForward> {
        let len = seq.steps.len();
        if len < 2 {
            return Err(Error::SequenceTooShort(len));
        }
        let mut fused = Vec::with_capacity(len);
        let mut extras = Vec::with_capacity(len);
        for step in &seq.steps {
            let (v, e) = self.fuse_step(step, &seq.attrs, conv_batch, images)?;
            fused.push(v);
            extras.push(e);
        }

        let (hidden, bilstm_cache) = self.bilstm.forward_seq(&fused, &self.store, want_cache);

        let mut head_inputs = Vec::with_capacity(len);
        let mut res_caches = Vec::with_capacity(len);
        for h in &hidden {
            let mut cur = h.clone();
            let mut caches = Vec::with_capacity(self.residual.len());
            for block in &self.residual {
                let (next, cache) = block.forward(&cur, &self.store, want_cache);
                if let Some(c) = cache {
                    caches.push(c);
                }
                cur = next;
            }
            res_caches.push(caches);
            head_inputs.push(cur);
        }

        let mut estimates = Vec::with_capacity(len - 1);
        for item in head_inputs.iter().skip(1) {
            let y = self.head.forward(item, &self.store) * self.config.head_scale
                + self.config.head_shift;
            if !y.is_finite() {
                return Err(Error::NonFinite { context: format!("estimate {}", estimates.len() + 2) });
            }
            estimates.push(y);
        }

        Ok(SeqForward {
            estimates,
            cache: SeqCache {
                fused,
                step_extra: extras,
                bilstm: bilstm_cache.expect("bilstm cache requested"),
                res_caches,
                head_inputs,
                steps: seq.steps.clone(),
                attrs: seq.attrs,
            },
        })
    }

    /// Inference-only forward (no caches retained).
    pub fn predict_seq(
        &self,
        seq: &SeqInput,
        conv_batch: &mut ConvBatch,
        images: &ImageBank,
    ) -> Result<Vec<f64>> {
        let len = seq.steps.len();
        if len < 2 {
            return Err(Error::SequenceTooShort(len));
        }
        let mut fused = Vec::with_capacity(len);
        for step in &seq.steps {
            let (v, _) = self.fuse_step(step, &seq.attrs, conv_batch, images)?;
            fused.push(v);
        }
        let (hidden, _) = self.bilstm.forward_seq(&fused, &self.store, false);
        let mut estimates = Vec::with_capacity(len - 1);
        for h in hidden.iter().skip(1) {
            let mut cur = h.clone();
            for block in &self.residual {
                let (next, _) = block.forward(&cur, &self.store, false);
                cur = next;
            }
            let y = self.head.forward(&cur, &self.store) * self.config.head_scale
                + self.config.head_shift;
            if !y.is_finite() {
                return Err(Error::NonFinite { context: format!("estimate {}", estimates.len() + 2) });
            }
            estimates.push(y);
        }
        Ok(estimates)
    }

    /// Backward for one sequence given loss gradients on the
    /// estimates (l = 2..L). Conv gradients are deferred into the
    /// batch accumulator.
    pub fn backward_seq(
        &mut self,
        fw: &SeqForward,
        d_estimates: &[f64],
        conv_batch: &mut ConvBatch,
    ) {
        let cache = &fw.cache;
        let len = cache.fused.len();
        assert_eq!(d_estimates.len(), len - 1);
        let t = self.config.tables.clone();

        // head and residual stack, per step
        let mut d_hidden: Vec<Array1<f64>> = Vec::with_capacity(len);
        for step_idx in 0..len {
            let mut d = if step_idx == 0 {
                Array1::zeros(self.bilstm.output_dim())
            } else {
                self.head.backward(
                    &cache.head_inputs[step_idx],
                    d_estimates[step_idx - 1] * self.config.head_scale,
                    &mut self.store,
                )
            };
            for (block, bc) in self.residual.iter().zip(cache.res_caches[step_idx].iter()).rev() {
                d = block.backward(bc, &d, &mut self.store);
            }
            d_hidden.push(d);
        }

        let d_fused = self.bilstm.backward_seq(&cache.bilstm, &d_hidden, &mut self.store);

        for (step_idx, step) in cache.steps.iter().enumerate() {
            let d = &d_fused[step_idx];
            let mut offset = 0;

            if !self.config.ablate_image {
                let d_gated = d.slice(ndarray::s![..t.direction_dim]);
                let conv_out = cache.step_extra[step_idx]
                    .conv_out
                    .as_ref()
                    .expect("conv output cached when not ablated");
                let dir_row = self.table_row(self.direction, step.direction);
                // gating: d_conv = d (x) dir, d_dir = d (x) conv
                let d_conv = &d_gated.to_owned() * &dir_row;
                conv_batch.add_grad(step.cell_index, &d_conv);
                let d_dir = &d_gated.to_owned() * conv_out;
                self.add_row_grad(self.direction, step.direction, d_dir.view());
            }
            offset += t.direction_dim;

            self.add_row_grad(
                self.line,
                step.cell_index,
                d.slice(ndarray::s![offset..offset + t.line_dim]),
            );
            offset += t.line_dim;
            self.add_row_grad(
                self.flow_emb,
                step.flow_bucket.min(t.flow_rows - 1),
                d.slice(ndarray::s![offset..offset + t.flow_dim]),
            );
            offset += t.flow_dim;
            self.add_row_grad(
                self.start_time,
                cache.attrs.start_time_idx as usize,
                d.slice(ndarray::s![offset..offset + t.start_time_dim]),
            );
            offset += t.start_time_dim;
            self.add_row_grad(
                self.driver,
                cache.attrs.driver_idx as usize,
                d.slice(ndarray::s![offset..offset + t.driver_dim]),
            );
            offset += t.driver_dim;
            self.add_row_grad(
                self.weather,
                cache.attrs.weather_idx as usize,
                d.slice(ndarray::s![offset..offset + t.weather_dim]),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CellId;
    use crate::synth::{generate_city, SynthCityConfig};
    use crate::tiles::render_synthetic_image;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            tables: EmbeddingTableSpec::default(),
            conv: ConvNetSpec {
                input: (3, 8, 8),
                layers: vec![
                    conv::ConvLayerSpec::Conv { out_channels: 4 },
                    conv::ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                    conv::ConvLayerSpec::Conv { out_channels: 4 },
                    conv::ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                ],
                output_dim: 200,
            },
            lstm_hidden: 8,
            residual_blocks: 2,
            grid_width: 5,
            grid_height: 5,
            ablate_image: false,
            init_seed: 42,
            head_scale: 1.0,
            head_shift: 0.0,
        }
    }

    fn spec5() -> GridSpec {
        GridSpec { min_lon: 0.0, min_lat: 0.0, cell_size_m: 200.0, width: 5, height: 5, ref_lat: 0.0 }
    }

    fn tiny_bank(spec: &GridSpec, hw: (usize, usize)) -> ImageBank {
        let city = generate_city(5, spec, &SynthCityConfig::default()).unwrap();
        let mut bank = ImageBank::empty(spec.num_cells(), hw);
        for idx in 0..spec.num_cells() {
            let img = render_synthetic_image(&city, spec.cell_from_index(idx)).unwrap();
            bank.insert(spec, &img);
        }
        bank
    }

    fn seq3() -> SeqInput {
        SeqInput {
            steps: vec![
                StepInput { cell_index: 0, direction: 3, flow_bucket: 0 },
                StepInput { cell_index: 1, direction: 3, flow_bucket: 1 },
                StepInput { cell_index: 2, direction: 4, flow_bucket: 0 },
            ],
            attrs: AttributeIndices { start_time_idx: 480, driver_idx: 3, weather_idx: 0 },
        }
    }

    #[test]
    fn fused_vector_is_400_dims() {
        assert_eq!(EmbeddingTableSpec::default().fused_dim(), 400);
    }

    #[test]
    fn l2_sequence_yields_one_estimate() {
        let model = ModelState::new(tiny_config());
        let bank = tiny_bank(&spec5(), (8, 8));
        let seq = SeqInput { steps: seq3().steps[..2].to_vec(), attrs: seq3().attrs };
        let mut cb = ConvBatch::new(false);
        let est = model.predict_seq(&seq, &mut cb, &bank).unwrap();
        assert_eq!(est.len(), 1);
    }

    #[test]
    fn sequence_shorter_than_two_rejected() {
        let model = ModelState::new(tiny_config());
        let bank = tiny_bank(&spec5(), (8, 8));
        let seq = SeqInput { steps: seq3().steps[..1].to_vec(), attrs: seq3().attrs };
        let mut cb = ConvBatch::new(false);
        assert!(matches!(
            model.predict_seq(&seq, &mut cb, &bank),
            Err(Error::SequenceTooShort(1))
        ));
    }

    #[test]
    fn forward_is_deterministic_and_batch_invariant() {
        let model = ModelState::new(tiny_config());
        let bank = tiny_bank(&spec5(), (8, 8));
        let seq = seq3();
        let mut cb1 = ConvBatch::new(false);
        let a = model.predict_seq(&seq, &mut cb1, &bank).unwrap();
        // same conv batch reused (memoized) and a fresh one
        let b = model.predict_seq(&seq, &mut cb1, &bank).unwrap();
        let mut cb2 = ConvBatch::new(false);
        let c = model.predict_seq(&seq, &mut cb2, &bank).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn direction_gating_changes_output() {
        let model = ModelState::new(tiny_config());
        let bank = tiny_bank(&spec5(), (8, 8));
        let mut seq = seq3();
        let mut cb = ConvBatch::new(false);
        let base = model.predict_seq(&seq, &mut cb, &bank).unwrap();
        seq.steps[1].direction = 9;
        let turned = model.predict_seq(&seq, &mut cb, &bank).unwrap();
        assert_ne!(base, turned);
    }

    #[test]
    fn all_ones_direction_passes_conv_output_through() {
        let mut model = ModelState::new(tiny_config());
        model.store.value_mut(model.direction).fill(1.0);
        let bank = tiny_bank(&spec5(), (8, 8));
        let seq = seq3();
        let mut cb = ConvBatch::new(false);
        let (fused, _) = model.fuse_step(&seq.steps[0], &seq.attrs, &mut cb, &bank).unwrap();
        let conv_out = cb.get_or_compute(&model, &bank, 0).unwrap();
        for k in 0..200 {
            assert_eq!(fused[k], conv_out[k]);
        }
    }

    #[test]
    fn all_zero_direction_annihilates_image() {
        let mut model = ModelState::new(tiny_config());
        model.store.value_mut(model.direction).fill(0.0);
        let bank = tiny_bank(&spec5(), (8, 8));
        let seq = seq3();
        let mut cb = ConvBatch::new(false);
        let (fused, _) = model.fuse_step(&seq.steps[0], &seq.attrs, &mut cb, &bank).unwrap();
        for k in 0..200 {
            assert_eq!(fused[k], 0.0);
        }
    }

    #[test]
    fn ablated_model_ignores_images() {
        let mut model = ModelState::new(tiny_config());
        model.set_ablated(true);
        let spec = spec5();
        let bank1 = tiny_bank(&spec, (8, 8));
        // a bank rendered from a different city: different pixels
        let city2 = generate_city(77, &spec, &SynthCityConfig::default()).unwrap();
        let mut bank2 = ImageBank::empty(spec.num_cells(), (8, 8));
        for idx in 0..spec.num_cells() {
            let img = render_synthetic_image(&city2, spec.cell_from_index(idx)).unwrap();
            bank2.insert(&spec, &img);
        }
        let seq = seq3();
        let mut cb1 = ConvBatch::new(false);
        let mut cb2 = ConvBatch::new(false);
        let a = model.predict_seq(&seq, &mut cb1, &bank1).unwrap();
        let b = model.predict_seq(&seq, &mut cb2, &bank2).unwrap();
        assert_eq!(a, b);

        // but it still reacts to the flow channel
        let mut seq2 = seq.clone();
        seq2.steps[1].flow_bucket = 7;
        let c = model.predict_seq(&seq2, &mut cb1, &bank1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_cell_is_an_error() {
        let model = ModelState::new(tiny_config());
        let bank = tiny_bank(&spec5(), (8, 8));
        let mut seq = seq3();
        seq.steps[0].cell_index = 999;
        let mut cb = ConvBatch::new(false);
        assert!(matches!(
            model.predict_seq(&seq, &mut cb, &bank),
            Err(Error::UnknownCell(_))
        ));
        let _ = CellId::new(0, 0);
    }
}
