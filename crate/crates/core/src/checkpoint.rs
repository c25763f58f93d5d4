//! Versioned JSON checkpoints of fitted models.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NpviError, Result};
use crate::scalar::Scalar;
use crate::trainer::FittedModel;

pub const CHECKPOINT_FORMAT: &str = "npvi-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
#[serde(bound = "T: Scalar")]
struct EnvelopeOut<'a, T: Scalar> {
    format: &'a str,
    version: u32,
    scalar: &'a str,
    model: &'a FittedModel<T>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct EnvelopeIn<T: Scalar> {
    model: FittedModel<T>,
}

fn scalar_name<T: Scalar>() -> &'static str {
    std::any::type_name::<T>()
}

pub fn to_json<T: Scalar>(model: &FittedModel<T>) -> Result<String> {
    serde_json::to_string(&EnvelopeOut {
        format: CHECKPOINT_FORMAT,
        version: CHECKPOINT_VERSION,
        scalar: scalar_name::<T>(),
        model,
    })
    .map_err(|e| NpviError::input(format!("checkpoint serialization: {e}")))
}

pub fn from_json<T: Scalar>(text: &str) -> Result<FittedModel<T>> {
    let corrupt = |e: serde_json::Error| NpviError::input(format!("corrupt checkpoint: {e}"));
    let header: Header = serde_json::from_str(text).map_err(corrupt)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(NpviError::input(format!(
            "not a checkpoint (format '{}')",
            header.format
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(NpviError::input(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.scalar != scalar_name::<T>() {
        return Err(NpviError::input(format!(
            "checkpoint stores {} values, expected {}",
            header.scalar,
            scalar_name::<T>()
        )));
    }
    let env: EnvelopeIn<T> = serde_json::from_str(text).map_err(corrupt)?;
    env.model
        .validate()
        .map_err(|e| NpviError::input(format!("inconsistent checkpoint: {e}")))?;
    Ok(env.model)
}

/// Writes to a sibling temporary file and renames it into place, so a
/// failed write never leaves a partial checkpoint at `path`.
pub fn save_checkpoint<T: Scalar>(model: &FittedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = to_json(model)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(json.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<FittedModel<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| NpviError::input(format!("{}: {e}", path.display())))?;
    from_json(&text)
}
