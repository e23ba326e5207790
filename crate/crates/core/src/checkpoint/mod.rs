//! Binary checkpoints of trained bundles. A single model is stored as a
//! one-model bundle.

mod format;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use format::{decode, encode, parse, AdapterEntry, Dtype, RawCheckpoint, TensorEntry, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::training::{Stage, TrainedBundle};

/// Writes `bytes` next to `path` and renames over it, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save(bundle: &TrainedBundle, path: &Path) -> Result<()> {
    save_with(bundle, path, Dtype::F64)
}

/// `Dtype::F32` rounds every value to single precision on disk.
pub fn save_with(bundle: &TrainedBundle, path: &Path, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode(bundle, dtype)?)
}

pub fn load(path: &Path) -> Result<TrainedBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Adapters folded into their base weights; the result carries no adapters
/// and nothing frozen.
pub fn merged_bundle(bundle: &TrainedBundle) -> Result<TrainedBundle> {
    bundle.expect_stage(Stage::Mmlora)?;
    if !bundle.models.iter().any(|m| m.has_adapters()) {
        return Err(Error::config("export_merged", "bundle has no adapters to merge"));
    }
    let mut out = bundle.clone();
    for m in &mut out.models {
        *m = m.merged()?;
        m.set_frozen(false);
    }
    Ok(out)
}

pub fn export_merged(bundle: &TrainedBundle, path: &Path) -> Result<()> {
    save(&merged_bundle(bundle)?, path)
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Human-readable dump: header fields, then one line per tensor and adapter.
pub fn inspect(bytes: &[u8]) -> Result<String> {
    let raw = parse(bytes)?;
    let mut out = String::new();
    let p = &raw.provenance;
    writeln!(out, "format    MMLF v{}", raw.version).ok();
    writeln!(out, "stage     {}", raw.stage).ok();
    writeln!(out, "config    {:016x}", p.config_hash).ok();
    writeln!(out, "seeds     {:?}", p.seeds).ok();
    writeln!(out, "note      {}", p.note).ok();
    if let Some(h) = &raw.umft_hash {
        writeln!(out, "umft_hash {h}").ok();
    }
    for (id, arch) in &raw.models {
        writeln!(out, "model     m{id} {}", serde_json::to_string(arch).unwrap_or_default()).ok();
    }
    writeln!(out, "tensors   {}", raw.tensors.len()).ok();
    for t in &raw.tensors {
        writeln!(
            out,
            "  {:<28} {:>4}x{:<4} {} {:<6} {}",
            t.name,
            t.value.rows(),
            t.value.cols(),
            t.dtype.as_str(),
            if t.frozen { "frozen" } else { "train" },
            checksum(&t.value.to_le_bytes()),
        )
        .ok();
    }
    writeln!(out, "adapters  {}", raw.adapters.len()).ok();
    for a in &raw.adapters {
        let ad = &a.adapter;
        let (d, k) = ad.base_shape();
        let mut bytes = ad.a.value.to_le_bytes();
        bytes.extend(ad.b.value.to_le_bytes());
        writeln!(
            out,
            "  {:<28} r={} {}x{} scale={} {} {}",
            ad.base_name,
            ad.rank,
            d,
            k,
            ad.scale,
            a.dtype.as_str(),
            checksum(&bytes),
        )
        .ok();
    }
    Ok(out)
}

pub fn inspect_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    inspect(&bytes)
}
