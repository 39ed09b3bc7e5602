//! Single-file training state archive.
//!
//! One safetensors file holds everything needed to resume a run exactly:
//! parameters (`param.<name>`), EMA shadow weights (`ema.<name>`), optimizer
//! moments (`adam.m.<name>`, `adam.v.<name>`), and a metadata header with the
//! format version, the global step, the run seed, the optimizer step count,
//! the EMA decay, and the full config echoed as JSON.
//!
//! No RNG blob is stored: every random draw in training is derived from
//! `(seed, stream, step)`, so the seed and step in the header reconstruct the
//! exact noise sequence on resume.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, Ema};
use crate::nn::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

const META_VERSION: &str = "format_version";
const META_STEP: &str = "step";
const META_SEED: &str = "seed";
const META_ADAM_STEP: &str = "adam_step";
const META_EMA_DECAY: &str = "ema_decay";
const META_CONFIG: &str = "config_json";

const PARAM_PREFIX: &str = "param.";
const EMA_PREFIX: &str = "ema.";
const ADAM_PREFIX: &str = "adam.";

/// A fully parsed archive, ready to restore into a live model.
#[derive(Debug)]
pub struct TrainingCheckpoint {
    pub step: usize,
    pub seed: u64,
    pub adam_step: usize,
    pub ema_decay: f64,
    pub config_json: String,
    pub params: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
    /// Optimizer moments keyed `m.<name>` / `v.<name>`.
    pub adam: BTreeMap<String, Tensor>,
}

impl TrainingCheckpoint {
    /// The config the checkpointed run was trained with.
    pub fn parsed_config(&self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))?;
        Ok(cfg)
    }

    /// Loads parameters, optimizer moments, and EMA shadow into live state.
    /// The store must expose exactly the parameter names in the archive.
    pub fn restore(&self, ps: &ParamStore, adam: &mut Adam, ema: &mut Ema) -> Result<()> {
        ps.load_tensors(&self.params)?;
        adam.load_state(self.adam_step, &self.adam);
        ema.load_state(self.ema.clone());
        Ok(())
    }
}

fn write_archive(
    path: &Path,
    metadata: HashMap<String, String>,
    entries: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let it = entries.iter().map(|(k, t)| (k.as_str(), t));
    safetensors::serialize_to_file(it, Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))
}

/// Writes the complete training state for `step` to `path`, overwriting any
/// existing file.
pub fn save_checkpoint(
    path: &Path,
    ps: &ParamStore,
    adam: &Adam,
    ema: &Ema,
    cfg: &RunConfig,
    step: usize,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (name, t) in ps.to_tensors()? {
        entries.insert(format!("{PARAM_PREFIX}{name}"), t);
    }
    for (name, t) in ema.shadow() {
        entries.insert(format!("{EMA_PREFIX}{name}"), t.detach());
    }
    for (key, t) in adam.state_tensors() {
        entries.insert(format!("{ADAM_PREFIX}{key}"), t.detach());
    }
    let config_json = serde_json::to_string(cfg)
        .map_err(|e| Error::Checkpoint(format!("config does not serialize: {e}")))?;
    let metadata = HashMap::from([
        (META_VERSION.to_string(), CHECKPOINT_VERSION.to_string()),
        (META_STEP.to_string(), step.to_string()),
        (META_SEED.to_string(), ps.seed().to_string()),
        (META_ADAM_STEP.to_string(), adam.step_count().to_string()),
        (META_EMA_DECAY.to_string(), ema.decay().to_string()),
        (META_CONFIG.to_string(), config_json),
    ]);
    write_archive(path, metadata, &entries)
}

fn parse_meta<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata field {key} missing")))?;
    raw.parse()
        .map_err(|e| Error::Checkpoint(format!("metadata field {key}={raw} does not parse: {e}")))
}

/// Reads and validates an archive written by [`save_checkpoint`].
///
/// Rejects unknown format versions, tensors outside the three known
/// prefixes, an EMA set that does not mirror the parameter set, and
/// optimizer moments that refer to unknown parameters.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<TrainingCheckpoint> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("archive has no metadata header".into()))?
        .clone();

    let version: u32 = parse_meta(&meta, META_VERSION)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let step = parse_meta(&meta, META_STEP)?;
    let seed = parse_meta(&meta, META_SEED)?;
    let adam_step = parse_meta(&meta, META_ADAM_STEP)?;
    let ema_decay = parse_meta(&meta, META_EMA_DECAY)?;
    let config_json = meta
        .get(META_CONFIG)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("metadata field {META_CONFIG} missing")))?;

    let all = candle_core::safetensors::load_buffer(&bytes, device)?;
    let mut params = BTreeMap::new();
    let mut ema = BTreeMap::new();
    let mut adam = BTreeMap::new();
    for (key, t) in all {
        if let Some(name) = key.strip_prefix(PARAM_PREFIX) {
            params.insert(name.to_string(), t);
        } else if let Some(name) = key.strip_prefix(EMA_PREFIX) {
            ema.insert(name.to_string(), t);
        } else if let Some(name) = key.strip_prefix(ADAM_PREFIX) {
            adam.insert(name.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unrecognized tensor entry {key}")));
        }
    }
    if params.is_empty() {
        return Err(Error::Checkpoint("archive holds no parameters".into()));
    }
    if !ema.keys().eq(params.keys()) {
        return Err(Error::Checkpoint(
            "EMA shadow names do not mirror the parameter names".into(),
        ));
    }
    for key in adam.keys() {
        let name = key
            .strip_prefix("m.")
            .or_else(|| key.strip_prefix("v."))
            .ok_or_else(|| Error::Checkpoint(format!("unrecognized optimizer entry {key}")))?;
        if !params.contains_key(name) {
            return Err(Error::Checkpoint(format!(
                "optimizer moment for unknown parameter {name}"
            )));
        }
    }

    Ok(TrainingCheckpoint {
        step,
        seed,
        adam_step,
        ema_decay,
        config_json,
        params,
        ema,
        adam,
    })
}
