//! Binary checkpoint files (`ACMP` container, see
//! [`compalign_core::models::encode_checkpoint`]).

use std::fs;
use std::path::Path;

use compalign_core::models::{decode_checkpoint, encode_checkpoint};
use compalign_core::Network;

use crate::error::{io_err, Result};

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, encode_checkpoint(net)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_checkpoint(&bytes)?)
}
