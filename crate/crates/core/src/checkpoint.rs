//! Training checkpoints on top of [`Archive`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{named_params, named_params_mut, Layer};
use crate::scalar::{DType, Scalar};
use crate::trainer::{TrainConfig, TrainState};

/// Layout version of the checkpoint metadata.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub checkpoint_version: u32,
    pub step: u64,
    pub dtype: DType,
    pub config: TrainConfig,
    pub generator: GeneratorConfig,
}

fn write_layer<T: Scalar, L: Layer<T> + ?Sized>(archive: &mut Archive, prefix: &str, layer: &L) {
    for (name, p) in named_params(layer) {
        archive.insert(&format!("{prefix}.{name}"), &p.shape, &p.data);
    }
}

fn read_layer<T: Scalar, L: Layer<T> + ?Sized>(archive: &Archive, prefix: &str, layer: &mut L) -> Result<()> {
    for (name, p) in named_params_mut(layer) {
        let key = format!("{prefix}.{name}");
        let (shape, data) = archive
            .get::<T>(&key)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {key}")))?;
        if shape != p.shape {
            return Err(Error::Shape(format!("tensor {key} has shape {shape:?}, expected {:?}", p.shape)));
        }
        p.data = data;
    }
    Ok(())
}

fn meta_of(archive: &Archive, path: &Path) -> Result<CheckpointMeta> {
    let version = archive.meta.get("checkpoint_version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(Error::CheckpointVersion { found: v as u32, expected: CHECKPOINT_VERSION }),
        None => return Err(Error::format(path, "not a training checkpoint")),
    }
    serde_json::from_value(archive.meta.clone()).map_err(|e| Error::format(path, e))
}

/// Writes weights, optimizer moments and the config snapshot.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        checkpoint_version: CHECKPOINT_VERSION,
        step: state.step,
        dtype: T::DTYPE,
        config: state.config.clone(),
        generator: state.generator.config().clone(),
    };
    let meta = serde_json::to_value(&meta).map_err(|e| Error::Config(e.to_string()))?;
    let mut archive = Archive::new(meta);
    write_layer(&mut archive, "generator", &state.generator);
    state.opt_g.write(&mut archive, "adam.generator");
    if let (Some(d), Some(opt)) = (&state.discriminator, &state.opt_d) {
        write_layer(&mut archive, "discriminator", d);
        opt.write(&mut archive, "adam.discriminator");
    }
    archive.save(path)
}

/// Restores a full training state; training continues exactly where it stopped.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let archive = Archive::load(path)?;
    let meta = meta_of(&archive, path)?;
    let mut state = TrainState::<T>::new(meta.config.clone())?;
    read_layer(&archive, "generator", &mut state.generator)?;
    state.opt_g.read(&archive, "adam.generator", meta.step)?;
    if let (Some(d), Some(opt)) = (state.discriminator.as_mut(), state.opt_d.as_mut()) {
        read_layer(&archive, "discriminator", d)?;
        opt.read(&archive, "adam.discriminator", meta.step)?;
    }
    state.step = meta.step;
    Ok(state)
}

/// Loads only the generator, for inference.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    let archive = Archive::load(path)?;
    let meta = meta_of(&archive, path)?;
    let mut generator = Generator::new(meta.generator, 0)?;
    read_layer(&archive, "generator", &mut generator)?;
    Ok(generator)
}

/// Reads the metadata without building any network.
pub fn checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    meta_of(&Archive::load(path)?, path)
}
