//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.toml     experiment configuration the model was built from
//! <dir>/manifest.tsv    name, role and file of every parameter
//! <dir>/frozen.sha256   hash of the frozen parameters
//! <dir>/tensors/*.bin   one binary tensor per parameter
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Manifest, ManifestEntry};

use super::MoMaModel;

const CONFIG_FILE: &str = "config.toml";
const MANIFEST_FILE: &str = "manifest.tsv";
const HASH_FILE: &str = "frozen.sha256";
const TENSOR_DIR: &str = "tensors";

fn role(trainable: bool) -> &'static str {
    if trainable {
        "trainable"
    } else {
        "frozen"
    }
}

/// Writes `model` and the configuration that built it into `dir`.
pub fn save_checkpoint(dir: &Path, model: &MoMaModel, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir.join(TENSOR_DIR))?;
    let store = model.store();
    let mut manifest = Manifest::default();
    for id in store.ids() {
        let p = store.param(id);
        let file = format!("{TENSOR_DIR}/{}.bin", p.name);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        write_tensor(&mut w, &p.value)?;
        manifest.entries.push(ManifestEntry { name: p.name.clone(), role: role(p.trainable).into(), file });
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    fs::write(dir.join(CONFIG_FILE), config.render())?;
    fs::write(dir.join(HASH_FILE), format!("{}\n", store.frozen_hash()))?;
    Ok(())
}

/// Rebuilds the model from `dir` and restores every parameter.
///
/// The manifest must name exactly the parameters the configuration builds,
/// with matching roles, and the restored frozen parameters must hash to the
/// recorded value.
pub fn load_checkpoint(dir: &Path) -> Result<(MoMaModel, ExperimentConfig)> {
    let config_path = dir.join(CONFIG_FILE);
    if !config_path.exists() {
        return Err(Error::Format(format!("{} is not a checkpoint (no {CONFIG_FILE})", dir.display())));
    }
    let config = ExperimentConfig::load(&config_path)?;
    let mut model = MoMaModel::new(&config.model, config.train.seed)?;
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    if manifest.entries.len() != model.store().len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, the configuration builds {}",
            manifest.entries.len(),
            model.store().len()
        )));
    }
    for entry in &manifest.entries {
        let id = model
            .store()
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {} in manifest", entry.name)))?;
        let expected = role(model.store().param(id).trainable);
        if entry.role != expected {
            return Err(Error::Format(format!("parameter {} is {expected}, manifest says {}", entry.name, entry.role)));
        }
        let tensor = read_tensor(BufReader::new(File::open(dir.join(&entry.file))?))?;
        model.store_mut().set(id, tensor)?;
    }
    let recorded = fs::read_to_string(dir.join(HASH_FILE))?;
    let actual = model.store().frozen_hash();
    if recorded.trim() != actual {
        return Err(Error::Format(format!("frozen parameters hash to {actual}, checkpoint records {}", recorded.trim())));
    }
    Ok((model, config))
}
