use std::fs;
use std::path::Path;

use vault_core::checkpoint;
use vault_core::param::ParamStore;
use vault_core::Real;

use crate::{Error, Result};

pub fn save_checkpoint<F: Real>(path: &Path, store: &ParamStore<F>) -> Result<()> {
    fs::write(path, checkpoint::encode(store)).map_err(Error::io(path))
}

/// Replaces every parameter of `store` with the file's values.
pub fn load_checkpoint<F: Real>(path: &Path, store: &mut ParamStore<F>) -> Result<()> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(checkpoint::load_into(store, &bytes)?)
}
