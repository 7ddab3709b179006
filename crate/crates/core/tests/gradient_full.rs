//! Finite-difference validation of the complete backward pass: tiny
//! ConvNet, full embedding path, Bi-LSTM, residual stack, head, and
//! the multitask loss, over an L=3 sequence with one padded step.

use deepi2t_core::features::AttributeIndices;
use deepi2t_core::grid::GridSpec;
use deepi2t_core::model::conv::{ConvLayerSpec, ConvNetSpec};
use deepi2t_core::model::{ConvBatch, ImageBank, ModelConfig, ModelState, SeqInput, StepInput};
use deepi2t_core::synth::{generate_city, SynthCityConfig};
use deepi2t_core::tiles::render_synthetic_image;
use deepi2t_core::training::multitask_loss_grad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelState {
    ModelState::new(ModelConfig {
        tables: Default::default(),
        conv: ConvNetSpec {
            input: (3, 8, 8),
            layers: vec![
                ConvLayerSpec::Conv { out_channels: 4 },
                ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                ConvLayerSpec::Conv { out_channels: 4 },
                ConvLayerSpec::Pool { kernel: 2, stride: 2 },
            ],
            output_dim: 200,
        },
        lstm_hidden: 8,
        residual_blocks: 2,
        grid_width: 5,
        grid_height: 5,
        ablate_image: false,
        init_seed: 20240,
        head_scale: 1.0,
        head_shift: 0.0,
    })
}

fn setup() -> (ModelState, ImageBank, SeqInput, Vec<f64>, Vec<bool>) {
    let spec = GridSpec {
        min_lon: 0.0,
        min_lat: 0.0,
        cell_size_m: 200.0,
        width: 5,
        height: 5,
        ref_lat: 0.0,
    };
    let model = tiny_model();
    let city = generate_city(3, &spec, &SynthCityConfig::default()).unwrap();
    let mut bank = ImageBank::empty(spec.num_cells(), (8, 8));
    for idx in 0..spec.num_cells() {
        bank.insert(&spec, &render_synthetic_image(&city, spec.cell_from_index(idx)).unwrap());
    }
    let seq = SeqInput {
        steps: vec![
            StepInput { cell_index: 6, direction: 3, flow_bucket: 0 },
            StepInput { cell_index: 7, direction: 4, flow_bucket: 2 },
            StepInput { cell_index: 12, direction: 1, flow_bucket: 0 },
        ],
        attrs: AttributeIndices { start_time_idx: 4821, driver_idx: 9, weather_idx: 2 },
    };
    // one padded (masked) step among the supervised ones
    let labels = vec![45.0, 130.0];
    let mask = vec![false, true];
    (model, bank, seq, labels, mask)
}

fn loss_of(model: &ModelState, bank: &ImageBank, seq: &SeqInput, labels: &[f64], mask: &[bool]) -> f64 {
    let mut cb = ConvBatch::new(false);
    let est = model.predict_seq(seq, &mut cb, bank).unwrap();
    multitask_loss_grad(&est, labels, mask).unwrap().0
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (mut model, bank, seq, labels, mask) = setup();

    // analytic gradients
    model.store.zero_grads();
    let mut conv_batch = ConvBatch::new(true);
    let fw = model.forward_seq(&seq, &mut conv_batch, &bank, true).unwrap();
    let (_, d_est) = multitask_loss_grad(&fw.estimates, &labels, &mask).unwrap();
    model.backward_seq(&fw, &d_est, &mut conv_batch);
    conv_batch.backward_all(&mut model);

    // 100 random coordinates across every parameter group, biased so
    // embedding rows that actually participate get probed
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    while checked < 100 {
        let id = ids[rng.gen_range(0..ids.len())];
        let n = model.store.value(id).len();
        let k = rng.gen_range(0..n);
        let an = model.store.grad(id).as_slice().unwrap()[k];
        // skip coordinates the loss genuinely does not touch (unused
        // embedding rows): both sides are zero by construction
        if an == 0.0 {
            continue;
        }
        let orig = model.store.value(id).as_slice().unwrap()[k];
        let h = 1e-5 * orig.abs().max(1.0);
        model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
        let up = loss_of(&model, &bank, &seq, &labels, &mask);
        model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
        let down = loss_of(&model, &bank, &seq, &labels, &mask);
        model.store.value_mut(id).as_slice_mut().unwrap()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        // the floor keeps the comparison meaningful where the gradient
        // magnitude sits below central-difference noise
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-7);
        assert!(
            rel <= 1e-4,
            "{} coord {k}: analytic {an:.3e} vs fd {fd:.3e} (rel {rel:.3e})",
            model.store.tensor(id).name
        );
        worst = worst.max(rel);
        checked += 1;
    }
    eprintln!("checked {checked} coordinates, worst relative error {worst:.3e}");
}
