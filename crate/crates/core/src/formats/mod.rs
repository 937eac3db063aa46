//! On-disk formats: PPM/PGM images, drag-point text files, correspondence
//! and checkpoint binaries, the key/value config, and the dataset layout.
//! Every writer goes through [`write_atomic`].

mod checkpoint;
mod config;
mod corr;
mod dataset;
mod drag;
mod pnm;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{load_checkpoint, load_model, model_checkpoint, model_from_checkpoint, save_checkpoint, save_model, Checkpoint, CHECKPOINT_VERSION};
pub use config::{Config, ConfigKey, CONFIG_KEYS};
pub use corr::{decode_correspondence, encode_correspondence, read_correspondence, write_correspondence};
pub use dataset::{load_dataset, pair_dir_name, read_pair, write_pair, DatasetPair, PairFiles};
pub use drag::{format_drag_points, parse_drag_points, read_drag_points};
pub use pnm::{decode_pnm, encode_pgm, encode_pgm_bytes, encode_ppm, read_image, write_image};

use crate::Result;

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub(crate) fn read_u32(bytes: &[u8], at: &mut usize, context: &str) -> Result<u32> {
    let b = bytes.get(*at..*at + 4).ok_or_else(|| crate::Error::format(context, format!("truncated at byte {}", *at)))?;
    *at += 4;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}
