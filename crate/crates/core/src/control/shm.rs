//! On-disk layout of the control block (little-endian):
//!
//! ```text
//! 0..4    magic "HIQC"
//! 4..8    format version (u32)
//! 8..16   seq (u64)
//! 16..20  payload length (u32)
//! 20..    UTF-8 JSON payload (the full block, seq included)
//! ```
//!
//! Writers serialize on a sibling `.lock` file, write a complete image to a
//! temporary file and rename it over the block, so a reader's open file
//! handle always sees one whole image. Readers still check header seq against
//! payload seq and re-read the header, which catches writers that rewrite the
//! file in place.

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::{ControlBlock, ControlError, FORMAT_VERSION};

pub const MAGIC: &[u8; 4] = b"HIQC";
pub const HEADER_LEN: usize = 16;
const LEN_FIELD: usize = 4;
const MAX_READ_ATTEMPTS: usize = 5;

pub fn encode_control(block: &ControlBlock) -> Vec<u8> {
    let payload = serde_json::to_vec(block).expect("control block serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + LEN_FIELD + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&block.version.to_le_bytes());
    out.extend_from_slice(&block.seq.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn header_seq(bytes: &[u8]) -> Option<u64> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return None;
    }
    Some(u64::from_le_bytes(bytes[8..16].try_into().unwrap()))
}

pub fn decode_control(bytes: &[u8]) -> Result<ControlBlock, ControlError> {
    let corrupt = |m: &str| ControlError::Decode(m.to_string());
    if bytes.len() < HEADER_LEN + LEN_FIELD {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ControlError::Decode(format!("unsupported version {version}")));
    }
    let seq = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN + LEN_FIELD..];
    if payload.len() != len {
        return Err(ControlError::Decode(format!(
            "payload length {} does not match header {}",
            payload.len(),
            len
        )));
    }
    let block: ControlBlock = serde_json::from_slice(payload).map_err(|e| ControlError::Decode(e.to_string()))?;
    if block.seq != seq {
        return Err(ControlError::Decode(format!(
            "header seq {seq} does not match payload seq {}",
            block.seq
        )));
    }
    Ok(block)
}

fn io_err(path: &Path, source: std::io::Error) -> ControlError {
    if source.kind() == ErrorKind::NotFound {
        ControlError::NotFound(path.to_path_buf())
    } else {
        ControlError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn read_image(path: &Path) -> Result<(Vec<u8>, File), ControlError> {
    let mut file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    Ok((bytes, file))
}

fn reread_seq(file: &File, path: &Path) -> Result<Option<u64>, ControlError> {
    let mut buf = [0u8; HEADER_LEN];
    match file.read_exact_at(&mut buf, 0) {
        Ok(()) => Ok(header_seq(&buf)),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

/// Reads a consistent snapshot. The header is re-read through the same handle
/// after decoding; a mismatch means the image changed underneath and the read
/// is retried.
pub fn read_control(path: &Path) -> Result<ControlBlock, ControlError> {
    let mut last = None;
    for _ in 0..MAX_READ_ATTEMPTS {
        let (bytes, file) = read_image(path)?;
        match decode_control(&bytes) {
            Ok(block) => {
                if reread_seq(&file, path)? == Some(block.seq) {
                    return Ok(block);
                }
                last = None;
            }
            Err(e) => last = Some(e),
        }
        std::thread::yield_now();
    }
    Err(last.unwrap_or(ControlError::Unstable(MAX_READ_ATTEMPTS)))
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".lock");
    path.with_file_name(name)
}

/// Publishes `block` with the next seq and returns that seq.
pub fn write_control(path: &Path, block: &ControlBlock) -> Result<u64, ControlError> {
    block.validate().map_err(ControlError::Invalid)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(lock_path(path))
        .map_err(|e| io_err(path, e))?;
    lock.lock().map_err(|e| io_err(path, e))?;

    let current = match fs::read(path) {
        Ok(bytes) => header_seq(&bytes).unwrap_or(0),
        Err(e) if e.kind() == ErrorKind::NotFound => 0,
        Err(e) => return Err(io_err(path, e)),
    };
    let mut next = block.clone();
    next.seq = current + 1;
    let image = encode_control(&next);

    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(&image)?;
        f.flush()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(next.seq)
}
