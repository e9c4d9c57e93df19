//! Binary dataset file.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   "SHIM" | u16 version | u16 flags | u32 record_count
//!          [u64 rng_seed]                              (flags & METADATA)
//! record   u32 N | u32 C | u32 id_len | id_len bytes UTF-8 slice_id
//!          f32 voxel_size_mm
//!          C·N·N × (f32 re, f32 im)                    channel-major, row-major
//!          N·N × u8 mask
//!          N·N × f32 target
//!          u8 has_ref [2C × f32 weights (Re…, Im…) | f32 ref_rmse]
//!          [u8 split | u64 seed | 10 × f32 provenance] (flags & METADATA)
//! trailer  u32 CRC32 of every preceding byte
//! ```
//!
//! The reference RMSE is stored as `f32` for inspection only; on load it is
//! recomputed in `f64` from the stored weights, which reproduces the
//! in-memory value exactly.

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Result, ShimError};
use crate::field::{Dataset, Mask, MultiChannelField, Provenance, SliceRecord, Split, TargetMap};
use crate::objective::ShimWeights;

pub const MAGIC: &[u8; 4] = b"SHIM";
pub const VERSION: u16 = 1;
/// Header carries the split seed; records carry split tag and provenance.
pub const FLAG_METADATA: u16 = 1;

const HEADER_BYTES: usize = 12;
const SEED_BYTES: usize = 8;
const METADATA_BYTES: usize = 1 + 8 + Provenance::N_PARAMS * 4;
const TRAILER_BYTES: usize = 4;

/// Size in bytes of one record's payload.
pub fn record_size(n: usize, c: usize, id_len: usize, has_ref: bool, metadata: bool) -> usize {
    let mut size = 4 + 4 + 4 + id_len + 4;
    size += c * n * n * 8;
    size += n * n;
    size += n * n * 4;
    size += 1;
    if has_ref {
        size += 2 * c * 4 + 4;
    }
    if metadata {
        size += METADATA_BYTES;
    }
    size
}

/// Expected file size for a dataset written by [`save_dataset`].
pub fn file_size(dataset: &Dataset) -> usize {
    HEADER_BYTES
        + SEED_BYTES
        + dataset
            .records
            .iter()
            .map(|r| {
                record_size(
                    r.n(),
                    r.n_coils(),
                    r.slice_id.len(),
                    r.reference().is_some(),
                    true,
                )
            })
            .sum::<usize>()
        + TRAILER_BYTES
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut buf = Vec::with_capacity(file_size(dataset));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&FLAG_METADATA.to_le_bytes());
    buf.extend_from_slice(&(dataset.records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&dataset.rng_seed.to_le_bytes());
    for (record, split) in dataset.records.iter().zip(&dataset.splits) {
        encode_record(&mut buf, record, *split);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

fn encode_record(buf: &mut Vec<u8>, r: &SliceRecord, split: Split) {
    let n = r.n();
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(r.n_coils() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.slice_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(r.slice_id.as_bytes());
    put_f32(buf, r.field.voxel_size_mm());
    for s in r.field.samples() {
        put_f32(buf, s.re);
        put_f32(buf, s.im);
    }
    buf.extend(r.mask.as_slice().iter().map(|&b| b as u8));
    for &t in r.target.as_slice() {
        put_f32(buf, t);
    }
    match r.reference() {
        Some(reference) => {
            buf.push(1);
            for w in reference.weights.to_real() {
                put_f32(buf, w);
            }
            put_f32(buf, reference.rmse_percent);
        }
        None => buf.push(0),
    }
    buf.push(split.tag());
    let p = &r.provenance;
    buf.extend_from_slice(&p.seed.to_le_bytes());
    for v in p.params() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(data: &'a [u8], pos: usize) -> Self {
        Self { data, pos }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < len {
            return Err(ShimError::Truncated(format!(
                "needed {len} bytes for {what} at offset {}, {} left",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count * 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_dataset(data: &[u8]) -> Result<Dataset> {
    if data.len() < 4 {
        return Err(ShimError::Truncated("file shorter than magic".into()));
    }
    if &data[..4] != MAGIC {
        return Err(ShimError::Format(format!(
            "bad magic {:?}, expected {:?}",
            &data[..4],
            MAGIC
        )));
    }
    let parsed = decode_body(data);
    match parsed {
        Err(ShimError::Truncated(_) | ShimError::Version { .. } | ShimError::Format(_)) => parsed,
        _ => {
            // a checksum failure explains any content error found above
            let body_end = data.len() - TRAILER_BYTES;
            let stored = u32::from_le_bytes(data[body_end..].try_into().unwrap());
            let computed = crc32fast::hash(&data[..body_end]);
            if stored != computed {
                return Err(ShimError::Checksum { stored, computed });
            }
            parsed
        }
    }
}

fn decode_body(data: &[u8]) -> Result<Dataset> {
    let mut rd = Reader::new(data, 4);
    let version = rd.u16("version")?;
    if version != VERSION {
        return Err(ShimError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let flags = rd.u16("flags")?;
    if flags & !FLAG_METADATA != 0 {
        return Err(ShimError::Format(format!("unknown flags {flags:#06x}")));
    }
    let metadata = flags & FLAG_METADATA != 0;
    let count = rd.u32("record count")? as usize;
    let rng_seed = if metadata { rd.u64("rng seed")? } else { 0 };

    let mut records = Vec::with_capacity(count.min(1 << 16));
    let mut splits = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let (record, split) = decode_record(&mut rd, metadata).map_err(|e| annotate(e, i))?;
        records.push(record);
        splits.push(split.unwrap_or(Split::Train));
    }
    let left = data.len() - rd.pos;
    if left < TRAILER_BYTES {
        return Err(ShimError::Truncated("missing checksum trailer".into()));
    }
    if left > TRAILER_BYTES {
        return Err(ShimError::Corrupt(format!(
            "{} unexpected bytes after the last record",
            left - TRAILER_BYTES
        )));
    }
    Dataset::new(records, splits, rng_seed).map_err(|e| ShimError::Corrupt(e.to_string()))
}

fn annotate(e: ShimError, index: usize) -> ShimError {
    match e {
        ShimError::Truncated(m) => ShimError::Truncated(format!("record {index}: {m}")),
        ShimError::Corrupt(m) => ShimError::Corrupt(format!("record {index}: {m}")),
        other => other,
    }
}

fn decode_record(rd: &mut Reader<'_>, metadata: bool) -> Result<(SliceRecord, Option<Split>)> {
    let n = rd.u32("grid size")? as usize;
    let c = rd.u32("channel count")? as usize;
    if n < 2 || c == 0 || n > 1 << 14 || c > 1 << 10 {
        return Err(ShimError::Corrupt(format!("implausible dimensions N={n}, C={c}")));
    }
    let id_len = rd.u32("id length")? as usize;
    let id = std::str::from_utf8(rd.take(id_len, "slice id")?)
        .map_err(|_| ShimError::Corrupt("slice id is not UTF-8".into()))?
        .to_owned();
    let voxel = rd.f32("voxel size")? as f64;
    let raw = rd.f32s(2 * c * n * n, "field samples")?;
    let samples = raw
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect();
    let mask_bytes = rd.take(n * n, "mask")?;
    if mask_bytes.iter().any(|&b| b > 1) {
        return Err(ShimError::Corrupt("mask byte other than 0/1".into()));
    }
    let inside = mask_bytes.iter().map(|&b| b == 1).collect();
    let target = rd.f32s(n * n, "target")?;
    let has_ref = rd.u8("reference flag")?;
    let reference = match has_ref {
        0 => None,
        1 => {
            let w = rd.f32s(2 * c, "reference weights")?;
            let stored_rmse = rd.f32("reference rmse")? as f64;
            Some((w, stored_rmse))
        }
        other => return Err(ShimError::Corrupt(format!("reference flag {other}"))),
    };
    let (split, provenance) = if metadata {
        let tag = rd.u8("split tag")?;
        let split = Split::from_tag(tag)
            .ok_or_else(|| ShimError::Corrupt(format!("split tag {tag}")))?;
        let seed = rd.u64("provenance seed")?;
        let mut p = [0f32; Provenance::N_PARAMS];
        for v in p.iter_mut() {
            *v = rd.f32("provenance")?;
        }
        let prov = Provenance::from_params(seed, p);
        (Some(split), prov)
    } else {
        (None, Provenance::default())
    };

    let corrupt = |e: ShimError| ShimError::Corrupt(e.to_string());
    let field = MultiChannelField::new(n, c, samples, voxel).map_err(corrupt)?;
    let mask = Mask::new(n, inside).map_err(corrupt)?;
    let target = TargetMap::new(n, target).map_err(corrupt)?;
    let mut record = SliceRecord::new(id, field, mask, target, provenance).map_err(corrupt)?;
    if let Some((w, stored_rmse)) = reference {
        let weights = ShimWeights::from_real(&w).map_err(corrupt)?;
        record.set_reference(&weights).map_err(corrupt)?;
        let rmse = record.reference().unwrap().rmse_percent;
        if (rmse as f32 as f64 - stored_rmse).abs() > 1e-5 * rmse.abs().max(1e-3) {
            return Err(ShimError::Corrupt(format!(
                "stored reference rmse {stored_rmse} disagrees with weights ({rmse})"
            )));
        }
    }
    Ok((record, split))
}
