//! Binary container shared by predictor and detector model files.
//!
//! ```text
//! "SHNN" | u16 version | u32 arch_tag | u32 descriptor_len
//! descriptor_len × u32 architecture descriptor
//! u64 param_count | param_count × f64
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::dataset_io::Reader;
use crate::error::{Result, ShimError};

pub const MAGIC: &[u8; 4] = b"SHNN";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum ArchTag {
    Predictor = 1,
    Detector = 2,
}

impl ArchTag {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(ArchTag::Predictor),
            2 => Some(ArchTag::Detector),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub tag: ArchTag,
    pub descriptor: Vec<u32>,
    pub params: Vec<f64>,
}

pub fn encode_model(file: &ModelFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(26 + 4 * file.descriptor.len() + 8 * file.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(file.tag as u32).to_le_bytes());
    out.extend_from_slice(&(file.descriptor.len() as u32).to_le_bytes());
    for d in &file.descriptor {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(file.params.len() as u64).to_le_bytes());
    for p in &file.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(data: &[u8], expected: ArchTag) -> Result<ModelFile> {
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
    let mut rd = Reader::new(data, 4);
    let version = rd.u16("version")?;
    if version != VERSION {
        return Err(ShimError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let raw_tag = rd.u32("architecture tag")?;
    let desc_len = rd.u32("descriptor length")? as usize;
    if desc_len > rd.remaining() / 4 {
        return Err(ShimError::Truncated(format!(
            "descriptor of {desc_len} entries exceeds file"
        )));
    }
    let descriptor = (0..desc_len)
        .map(|_| rd.u32("descriptor"))
        .collect::<Result<Vec<_>>>()?;
    let count = rd.u64("parameter count")?;
    if count > (rd.remaining() / 8) as u64 {
        return Err(ShimError::Truncated(format!(
            "header declares {count} parameters, file holds at most {}",
            rd.remaining() / 8
        )));
    }
    let params = rd.f64s(count as usize, "parameters")?;
    if rd.remaining() < 4 {
        return Err(ShimError::Truncated("missing checksum trailer".into()));
    }
    if rd.remaining() > 4 {
        return Err(ShimError::Corrupt(format!(
            "{} unexpected bytes before the checksum",
            rd.remaining() - 4
        )));
    }
    let body_end = data.len() - 4;
    let stored = u32::from_le_bytes(data[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&data[..body_end]);
    if stored != computed {
        return Err(ShimError::Checksum { stored, computed });
    }
    let tag = ArchTag::from_u32(raw_tag)
        .ok_or_else(|| ShimError::Format(format!("unknown architecture tag {raw_tag}")))?;
    if tag != expected {
        return Err(ShimError::Format(format!(
            "model file holds a {tag:?} network, expected {expected:?}"
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(ShimError::Corrupt("non-finite parameter".into()));
    }
    Ok(ModelFile {
        tag,
        descriptor,
        params,
    })
}

pub fn save_model_file(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(file))?;
    Ok(())
}

pub fn load_model_file(path: impl AsRef<Path>, expected: ArchTag) -> Result<ModelFile> {
    decode_model(&fs::read(path)?, expected)
}
