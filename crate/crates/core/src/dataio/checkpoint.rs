//! Checkpoints: configs, parameters, optimizer moments and RNG state.

use std::path::Path;

use holovox_tensor::{Adam, AdamConfig, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::container::{Container, RecordData};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{PlateauDecay, TrainConfig, TrainState};
use crate::Rng;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    /// Free-form run settings, kept verbatim.
    pub run: String,
}

#[derive(Serialize, Deserialize)]
struct ScalarState {
    step: u64,
    lr: f64,
    adam_steps: u64,
    plateau: PlateauDecay,
}

pub fn rng_bytes(rng: &Rng) -> Vec<u8> {
    let mut out = rng.get_seed().to_vec();
    out.extend(rng.get_stream().to_le_bytes());
    out.extend(rng.get_word_pos().to_le_bytes());
    out
}

pub fn rng_from_bytes(b: &[u8]) -> Result<Rng> {
    if b.len() != 56 {
        return Err(Error::Malformed(format!("rng state is {} bytes, expected 56", b.len())));
    }
    let seed: [u8; 32] = b[..32].try_into().unwrap();
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().unwrap()));
    Ok(rng)
}

fn json<T: Serialize>(v: &T) -> RecordData {
    RecordData::Bytes(serde_json::to_vec(v).expect("serializable"))
}

fn parse<T: for<'de> Deserialize<'de>>(c: &Container, name: &str) -> Result<T> {
    serde_json::from_slice(c.bytes(name)?).map_err(|e| Error::Malformed(format!("record {name}: {e}")))
}

fn f32_tensor(shape: &[usize], data: &[f32]) -> RecordData {
    RecordData::F32(Tensor::new(shape.to_vec(), data.to_vec()).expect("shape matches"))
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push("config.model", json(&self.model));
        c.push("config.train", json(&self.train));
        c.push("config.run", RecordData::Bytes(self.run.as_bytes().to_vec()));
        let s = &self.state;
        c.push(
            "state",
            json(&ScalarState {
                step: s.step,
                lr: s.lr,
                adam_steps: s.adam.steps,
                plateau: s.plateau.clone(),
            }),
        );
        c.push("rng", RecordData::Bytes(rng_bytes(&s.rng)));
        for (_, name, t) in s.store.iter() {
            c.push(format!("param.{name}"), f32_tensor(t.shape(), t.data()));
        }
        for (id, name, t) in s.store.iter() {
            c.push(format!("adam.m.{name}"), f32_tensor(t.shape(), &s.adam.first[id.0]));
            c.push(format!("adam.v.{name}"), f32_tensor(t.shape(), &s.adam.second[id.0]));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<(Model, Self)> {
        let model_cfg: ModelConfig = parse(c, "config.model")?;
        let train: TrainConfig = parse(c, "config.train")?;
        let run = String::from_utf8(c.bytes("config.run")?.to_vec())
            .map_err(|_| Error::Malformed("config.run is not UTF-8".into()))?;
        let scalars: ScalarState = parse(c, "state")?;
        let rng = rng_from_bytes(c.bytes("rng")?)?;
        let (model, mut store) = Model::layout::<f32>(model_cfg)?;
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.steps = scalars.adam_steps;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let expected = store.get(id).shape().to_vec();
            let load = |key: String| -> Result<Vec<f32>> {
                let t = c.f32(&key)?;
                if t.shape() != expected.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        found: t.shape().to_vec(),
                        expected: expected.clone(),
                    });
                }
                Ok(t.data().to_vec())
            };
            let value = load(format!("param.{name}"))?;
            adam.first[id.0] = load(format!("adam.m.{name}"))?;
            adam.second[id.0] = load(format!("adam.v.{name}"))?;
            store.get_mut(id).data_mut().copy_from_slice(&value);
        }
        let expected_records = 5 + 3 * store.len();
        if c.records.len() != expected_records {
            return Err(Error::Malformed(format!(
                "{} records, layout expects {expected_records}",
                c.records.len()
            )));
        }
        let state = TrainState {
            store,
            adam,
            step: scalars.step,
            rng,
            lr: scalars.lr,
            plateau: scalars.plateau,
        };
        Ok((
            model,
            Self {
                model: model_cfg,
                train,
                state,
                run,
            },
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<(Model, Self)> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Sampled grids: one f32 record `grid` of shape `[C, S, S, S]`.
pub fn save_grid(path: &Path, grid: &Tensor<f32>) -> Result<()> {
    let mut c = Container::new();
    c.push("grid", RecordData::F32(grid.clone()));
    c.save(path)
}

pub fn load_grid(path: &Path) -> Result<Tensor<f32>> {
    let c = Container::load(path)?;
    let g = c.f32("grid")?;
    if g.shape().len() != 4 {
        return Err(Error::Malformed(format!("grid has shape {:?}", g.shape())));
    }
    Ok(g.clone())
}

