//! Files in and out: point clouds, meshes, dataset manifests, run
//! configuration, checkpoints and synthetic test shapes.

mod checkpoint;
mod cloud;
mod config;
mod manifest;
mod synthetic;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cloud::{load_cloud, load_mesh_ply, save_mesh_ply, save_ply, save_xyz, PlyFormat};
pub use config::{preset, Config, PRESETS};
pub use manifest::{DatasetManifest, ManifestRecord, Split};
pub use synthetic::{generate_synthetic, ShapeKind, SyntheticShape, SyntheticShapeSpec};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
