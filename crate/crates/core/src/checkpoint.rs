//! Bit-exact checkpointing of the model, its optimizer state and the
//! driver registry.

use crate::error::{Error, Result};
use crate::features::DriverRegistry;
use crate::model::{ModelConfig, ModelState};
use crate::training::{Adam, TrainConfig, Trainer};
use ndarray::{ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"I2TCKPT\x01";

fn write_bytes(out: &mut impl Write, bytes: &[u8]) -> Result<()> {
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_bytes(input: &mut impl Read) -> Result<Vec<u8>> {
    let mut len8 = [0u8; 8];
    input.read_exact(&mut len8)?;
    let mut bytes = vec![0u8; u64::from_le_bytes(len8) as usize];
    input.read_exact(&mut bytes)?;
    Ok(bytes)
}

fn write_array(out: &mut impl Write, array: &ArrayD<f64>) -> Result<()> {
    out.write_all(&(array.ndim() as u32).to_le_bytes())?;
    for d in array.shape() {
        out.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in array.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(input: &mut impl Read) -> Result<ArrayD<f64>> {
    let mut len4 = [0u8; 4];
    input.read_exact(&mut len4)?;
    let ndim = u32::from_le_bytes(len4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut len8 = [0u8; 8];
    for _ in 0..ndim {
        input.read_exact(&mut len8)?;
        shape.push(u64::from_le_bytes(len8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Format { path: "<checkpoint>".into(), reason: e.to_string() })
}

/// Optimizer and loop progress stored alongside the parameters so a
/// resumed run replays the uninterrupted trajectory.
pub struct TrainerCheckpoint {
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub best_eval: f64,
    pub epochs_since_best: usize,
    pub adam_t: u64,
    pub adam_m: Vec<ArrayD<f64>>,
    pub adam_v: Vec<ArrayD<f64>>,
}

impl TrainerCheckpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        Self {
            train_config: trainer.config,
            epoch: trainer.epoch,
            best_eval: trainer.best_eval,
            epochs_since_best: trainer.epochs_since_best,
            adam_t: trainer.adam.t,
            adam_m: trainer.adam.m.clone(),
            adam_v: trainer.adam.v.clone(),
        }
    }

    pub fn restore(self, model: &ModelState) -> Trainer {
        let mut adam = Adam::new(
            &model.store,
            self.train_config.learning_rate,
            self.train_config.clip_norm,
        );
        adam.t = self.adam_t;
        adam.m = self.adam_m;
        adam.v = self.adam_v;
        Trainer {
            config: self.train_config,
            adam,
            epoch: self.epoch,
            best_eval: self.best_eval,
            epochs_since_best: self.epochs_since_best,
            history: Vec::new(),
            best_store: None,
        }
    }
}

pub struct Checkpoint {
    pub model: ModelState,
    pub registry: DriverRegistry,
    pub trainer: Option<TrainerCheckpoint>,
    pub config_hash: String,
}

/// Save parameters, registry and (optionally) trainer state. Every
/// float round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelState,
    registry: &DriverRegistry,
    trainer: Option<&Trainer>,
    config_hash: &str,
) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    write_bytes(&mut out, config_hash.as_bytes())?;
    write_bytes(&mut out, serde_json::to_string(&model.config)?.as_bytes())?;

    // parameters, in registration order, names included as a guard
    out.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (_, tensor) in model.store.iter() {
        write_bytes(&mut out, tensor.name.as_bytes())?;
        write_array(&mut out, &tensor.value)?;
    }

    // driver registry, reusing its text form
    write_bytes(&mut out, &registry.to_bytes())?;

    match trainer {
        None => out.write_all(&[0u8])?,
        Some(t) => {
            out.write_all(&[1u8])?;
            write_bytes(&mut out, serde_json::to_string(&t.config)?.as_bytes())?;
            out.write_all(&(t.epoch as u64).to_le_bytes())?;
            out.write_all(&t.best_eval.to_le_bytes())?;
            out.write_all(&(t.epochs_since_best as u64).to_le_bytes())?;
            out.write_all(&t.adam.t.to_le_bytes())?;
            for m in &t.adam.m {
                write_array(&mut out, m)?;
            }
            for v in &t.adam.v {
                write_array(&mut out, v)?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let config_hash = String::from_utf8(read_bytes(&mut input)?)
        .map_err(|_| bad("bad hash encoding".into()))?;
    let model_config: ModelConfig = serde_json::from_slice(&read_bytes(&mut input)?)?;
    let mut model = ModelState::new(model_config);

    let mut len4 = [0u8; 4];
    input.read_exact(&mut len4)?;
    let count = u32::from_le_bytes(len4) as usize;
    if count != model.store.len() {
        return Err(bad(format!(
            "parameter group count {count} does not match the architecture ({})",
            model.store.len()
        )));
    }
    for (_, tensor) in model.store.iter_mut() {
        let name = String::from_utf8(read_bytes(&mut input)?)
            .map_err(|_| Error::Format { path: path.to_path_buf(), reason: "bad name".into() })?;
        if name != tensor.name {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("parameter order mismatch: file {name}, expected {}", tensor.name),
            });
        }
        let value = read_array(&mut input)?;
        if value.shape() != tensor.value.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("shape mismatch for {name}"),
            });
        }
        tensor.value = value;
    }

    let registry = DriverRegistry::from_bytes(&read_bytes(&mut input)?)?;

    let mut flag = [0u8; 1];
    input.read_exact(&mut flag)?;
    let trainer = if flag[0] == 1 {
        let train_config: TrainConfig = serde_json::from_slice(&read_bytes(&mut input)?)?;
        let mut len8 = [0u8; 8];
        input.read_exact(&mut len8)?;
        let epoch = u64::from_le_bytes(len8) as usize;
        input.read_exact(&mut len8)?;
        let best_eval = f64::from_le_bytes(len8);
        input.read_exact(&mut len8)?;
        let epochs_since_best = u64::from_le_bytes(len8) as usize;
        input.read_exact(&mut len8)?;
        let adam_t = u64::from_le_bytes(len8);
        let n = model.store.len();
        let mut adam_m = Vec::with_capacity(n);
        for _ in 0..n {
            adam_m.push(read_array(&mut input)?);
        }
        let mut adam_v = Vec::with_capacity(n);
        for _ in 0..n {
            adam_v.push(read_array(&mut input)?);
        }
        Some(TrainerCheckpoint {
            train_config,
            epoch,
            best_eval,
            epochs_since_best,
            adam_t,
            adam_m,
            adam_v,
        })
    } else {
        None
    };

    Ok(Checkpoint { model, registry, trainer, config_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::conv::{ConvLayerSpec, ConvNetSpec};

    fn small_model(ablate: bool) -> ModelState {
        let config = ModelConfig {
            tables: Default::default(),
            conv: ConvNetSpec {
                input: (3, 8, 8),
                layers: vec![
                    ConvLayerSpec::Conv { out_channels: 4 },
                    ConvLayerSpec::Pool { kernel: 2, stride: 2 },
                ],
                output_dim: 200,
            },
            lstm_hidden: 8,
            residual_blocks: 1,
            grid_width: 4,
            grid_height: 4,
            ablate_image: ablate,
            init_seed: 99,
            head_scale: 1.0,
            head_shift: 0.0,
        };
        ModelState::new(config)
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let model = small_model(false);
        let mut registry = DriverRegistry::new(100);
        registry.assign("cab-7");
        registry.assign("cab-9");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &registry, None, "aabbcc").unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.config_hash, "aabbcc");
        assert_eq!(loaded.model.config, model.config);
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "parameter {} changed", a.name);
            // bit-exact, not just numerically equal
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(loaded.registry.lookup("cab-7"), 1);
        assert_eq!(loaded.registry.lookup("cab-9"), 2);
        assert!(loaded.trainer.is_none());
    }

    #[test]
    fn ablation_flag_round_trips() {
        let model = small_model(true);
        let registry = DriverRegistry::new(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &registry, None, "x").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.model.config.ablate_image);
    }

    #[test]
    fn trainer_state_round_trips() {
        let mut model = small_model(false);
        let registry = DriverRegistry::new(10);
        let mut trainer = Trainer::new(&model, TrainConfig::default());
        // make the optimizer state non-trivial
        for (_, t) in model.store.iter_mut() {
            t.grad.fill(0.123);
        }
        trainer.adam.step(&mut model.store);
        trainer.epoch = 3;
        trainer.best_eval = 12.5;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &registry, Some(&trainer), "h").unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let restored = loaded.trainer.unwrap().restore(&loaded.model);
        assert_eq!(restored.epoch, 3);
        assert_eq!(restored.best_eval, 12.5);
        assert_eq!(restored.adam.t, trainer.adam.t);
        for (a, b) in restored.adam.m.iter().zip(trainer.adam.m.iter()) {
            assert_eq!(a, b);
        }
    }
}
