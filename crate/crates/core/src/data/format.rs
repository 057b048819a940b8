//! The EEGX binary dataset format.
//!
//! ```text
//! "EEGX"  u32 version = 1
//! u32 N, C, T, K, sample_rate
//! N × (u32 label, u32 subject_id, u32 session_id, u32 recording_order)
//! N·C·T × f32 samples, trial-major, then channel, then time
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::TrialDataset;
use crate::bytes::{ByteReader, ByteWriter};
use crate::{Error, Result, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"EEGX";
pub const DATASET_VERSION: u32 = 1;

pub fn dataset_to_bytes(d: &TrialDataset) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    for v in [d.len(), d.n_channels(), d.n_times(), d.n_classes] {
        w.u32(v as u32);
    }
    w.u32(d.sample_rate);
    for i in 0..d.len() {
        w.u32(d.labels[i]);
        w.u32(d.subject_ids[i]);
        w.u32(d.session_ids[i]);
        w.u32(d.recording_order[i]);
    }
    for &v in d.trials.data() {
        w.f32(v as f32);
    }
    w.buf
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<TrialDataset> {
    let mut r = ByteReader::new(buf);
    let magic = r.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(r.error_at(0, format!("bad magic {magic:?}, expected \"EEGX\"")));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let header_at = r.offset();
    let n = r.usize("trial count")?;
    let c = r.usize("channel count")?;
    let t = r.usize("sample count")?;
    let k = r.usize("class count")?;
    let sample_rate = r.u32("sample rate")?;
    if n == 0 || c == 0 || t == 0 {
        return Err(r.error_at(header_at, format!("empty dataset shape {n}×{c}×{t}")));
    }
    let total = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| r.error_at(header_at, format!("shape {n}×{c}×{t} overflows")))?;
    let records_at = r.offset();
    let mut labels = Vec::with_capacity(n.min(r.remaining() / 16));
    let mut subjects = Vec::with_capacity(labels.capacity());
    let mut sessions = Vec::with_capacity(labels.capacity());
    let mut order = Vec::with_capacity(labels.capacity());
    for _ in 0..n {
        labels.push(r.u32("trial record")?);
        subjects.push(r.u32("trial record")?);
        sessions.push(r.u32("trial record")?);
        order.push(r.u32("trial record")?);
    }
    let samples_at = r.offset();
    let data = r.f32_vec(total, "trial samples")?;
    if let Some(j) = data.iter().position(|v| !v.is_finite()) {
        return Err(r.error_at(
            samples_at + 4 * j as u64,
            format!("non-finite sample {}", data[j]),
        ));
    }
    r.expect_end()?;
    TrialDataset::new(
        Tensor::new(vec![n, c, t], data)?,
        labels,
        k,
        sample_rate,
        subjects,
        sessions,
        order,
    )
    .map_err(|e| r.error_at(records_at, e.to_string()))
}

pub fn write_dataset(d: &TrialDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_bytes(d)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TrialDataset> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&buf)
}
