//! "CKP1" parameter checkpoints.
//!
//! Little-endian layout: magic `CKPT`, u32 version (1), u8 role (0 student,
//! 1 averaged; an averaged checkpoint follows with f64 alpha and u64 step), the
//! architecture fingerprint as u16-length-prefixed UTF-8, u32 parameter count,
//! then per parameter a u16-length-prefixed name, u8 ndim, u32 dims and the f32
//! payload in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{FormatError, Result};
use crate::phantom::format::{check_magic, Cursor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckpointRole {
    Student,
    Averaged(EmaHeader),
}

/// Smoothing state stored alongside averaged parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaHeader {
    pub alpha: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: CheckpointRole,
    pub params: ModelParams,
}

pub fn write_checkpoint(
    params: &ModelParams,
    role: CheckpointRole,
    out: &mut impl Write,
) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    match role {
        CheckpointRole::Student => out.write_all(&[0])?,
        CheckpointRole::Averaged(h) => {
            out.write_all(&[1])?;
            out.write_all(&h.alpha.to_le_bytes())?;
            out.write_all(&h.step.to_le_bytes())?;
        }
    }
    write_str(out, &params.fingerprint())?;
    let count = params.iter().count();
    out.write_all(&(count as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_str(out, name)?;
        out.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_str(out: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| FormatError::Invalid(format!("string of {} bytes is too long", s.len())))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

pub fn save_checkpoint(
    params: &ModelParams,
    role: CheckpointRole,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(params, role, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}

fn truncated(section: &str) -> FormatError {
    FormatError::Truncated {
        section: section.into(),
    }
}

fn read_str(cur: &mut Cursor<'_>, section: &str) -> Result<String, FormatError> {
    let len = cur.u16().ok_or_else(|| truncated(section))? as usize;
    let bytes = cur.take(len).ok_or_else(|| truncated(section))?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| FormatError::Invalid(format!("{section} is not UTF-8")))
}

/// Parses a checkpoint; the stored fingerprint must match the one implied by
/// the parameter shapes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, CHECKPOINT_MAGIC)?;
    let version = cur.u32().ok_or_else(|| truncated("version"))?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let role = match cur.u8().ok_or_else(|| truncated("role"))? {
        0 => CheckpointRole::Student,
        1 => {
            let alpha = f64::from_bits(cur.u64().ok_or_else(|| truncated("alpha"))?);
            let step = cur.u64().ok_or_else(|| truncated("step"))?;
            CheckpointRole::Averaged(EmaHeader { alpha, step })
        }
        other => return Err(FormatError::Invalid(format!("unknown role flag {other}")).into()),
    };
    let fingerprint = read_str(&mut cur, "fingerprint")?;
    let count = cur.u32().ok_or_else(|| truncated("parameter count"))? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let section = format!("parameter {i}");
        let name = read_str(&mut cur, &section)?;
        let ndim = cur.u8().ok_or_else(|| truncated(&section))? as usize;
        let dims = (0..ndim)
            .map(|_| {
                cur.u32()
                    .map(|d| d as usize)
                    .ok_or_else(|| truncated(&section))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid(format!("{section} extents overflow")))?;
        let data = cur.f32s(n).ok_or_else(|| truncated(&section))?;
        tensors.push((name, Tensor::new(&dims, data)?));
    }
    if !cur.is_at_end() {
        return Err(FormatError::Invalid("trailing bytes after the last parameter".into()).into());
    }
    let arch = arch_from_tensors(&tensors)?;
    if arch.fingerprint() != fingerprint {
        return Err(FormatError::Invalid(format!(
            "stored fingerprint {fingerprint:?} does not match the parameter shapes"
        ))
        .into());
    }
    Ok(Checkpoint {
        role,
        params: ModelParams::from_tensors(arch, tensors)?,
    })
}

/// Recovers `(K, base_channels)` from the first and last kernels.
fn arch_from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Architecture, FormatError> {
    let shape_of = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| FormatError::Invalid(format!("missing parameter {name}")))
    };
    let first = shape_of("enc1.conv1.weight")?;
    let head = shape_of("head.weight")?;
    if first.len() != 4 || head.len() != 4 {
        return Err(FormatError::Invalid("kernels must be rank 4".into()));
    }
    Architecture::new(head[0].saturating_sub(1), first[0])
        .map_err(|e| FormatError::Invalid(e.to_string()))
}
