//! Versioned JSON checkpoints.
//!
//! Reals are written as shortest round-trip decimals and parsed with a
//! correctly rounded parser, so save/load is bitwise exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{Model, ShiftedEnsemble};
use crate::error::{Error, Result};
use crate::nn::{NetSpec, ParamVector};

pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(Model),
    Ensemble(ShiftedEnsemble),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    Model {
        encoder: ParamVector,
        head: ParamVector,
    },
    Ensemble {
        base_encoders: Vec<ParamVector>,
        shift: ParamVector,
        heads: Vec<ParamVector>,
    },
}

#[derive(Serialize, Deserialize)]
struct File {
    format_version: u32,
    layer_sizes: Vec<usize>,
    /// Number of encoder parameters; the head starts here.
    encoder_len: usize,
    #[serde(flatten)]
    body: Body,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn check_finite<'a>(vs: impl IntoIterator<Item = &'a ParamVector>) -> Result<()> {
    if vs.into_iter().all(ParamVector::is_finite) {
        Ok(())
    } else {
        Err(Error::Input("cannot checkpoint non-finite parameters".into()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let (spec, body) = match ckpt {
        Checkpoint::Model(m) => {
            check_finite([m.encoder(), m.head()])?;
            (
                m.spec(),
                Body::Model {
                    encoder: m.encoder().clone(),
                    head: m.head().clone(),
                },
            )
        }
        Checkpoint::Ensemble(e) => {
            check_finite(e.base_encoders().iter().chain(e.heads()).chain([e.shift()]))?;
            (
                e.spec(),
                Body::Ensemble {
                    base_encoders: e.base_encoders().to_vec(),
                    shift: e.shift().clone(),
                    heads: e.heads().to_vec(),
                },
            )
        }
    };
    let file = File {
        format_version: CHECKPOINT_VERSION,
        layer_sizes: spec.layer_sizes().to_vec(),
        encoder_len: spec.encoder_len(),
        body,
    };
    let text = serde_json::to_string(&file).expect("checkpoint serializes");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if probe.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: File = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let spec = NetSpec::new(file.layer_sizes).map_err(|e| corrupt(e.to_string()))?;
    if spec.encoder_len() != file.encoder_len {
        return Err(corrupt(format!(
            "encoder_len {} does not match layers (expected {})",
            file.encoder_len,
            spec.encoder_len()
        )));
    }
    match file.body {
        Body::Model { encoder, head } => Model::new(spec, encoder, head).map(Checkpoint::Model),
        Body::Ensemble {
            base_encoders,
            shift,
            heads,
        } => ShiftedEnsemble::new(spec, base_encoders, shift, heads).map(Checkpoint::Ensemble),
    }
    .map_err(|e| corrupt(e.to_string()))
}

/// Loads a single-model checkpoint and checks its layer list.
pub fn load_model(path: &Path, expected: Option<&NetSpec>) -> Result<Model> {
    match load_checkpoint(path)? {
        Checkpoint::Model(m) => {
            if let Some(spec) = expected {
                if m.spec() != spec {
                    return Err(Error::SpecMismatch {
                        expected: spec.layer_sizes().to_vec(),
                        found: m.spec().layer_sizes().to_vec(),
                    });
                }
            }
            Ok(m)
        }
        Checkpoint::Ensemble(_) => Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: "expected a model checkpoint, found an ensemble".into(),
        }),
    }
}
