//! Binary log-mel file: magic `LCMEL1`, `u32` frame count, `u32` band count,
//! then row-major little-endian `f32` values.

use std::path::Path;

use super::{MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 6] = b"LCMEL1";

pub fn write_mel(path: &Path, spec: &MelSpectrogram) -> Result<()> {
    let t = spec.num_frames();
    let mut bytes = Vec::with_capacity(14 + t * N_MELS * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    for &v in spec.frames().data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err(Error::format(path, "not a log-mel file"));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let bands = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if bands != N_MELS {
        return Err(Error::format(path, format!("expected {N_MELS} bands, found {bands}")));
    }
    let body = &bytes[14..];
    if body.len() != t * bands * 4 {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    MelSpectrogram::from_frames(Tensor::new(vec![t, bands], data)?)
}
