//! "PHV1" dataset files.
//!
//! Little-endian layout: magic `PHTM`, u32 version (1), u8 organ count `K`, one u32
//! sample count per partition (train 1..K, validation, test), then every sample in
//! partition order as u16 H, u16 W, u8 annotated organ, `H·W` f32 intensities and
//! `H·W` u8 class ids, both row-major.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{DatasetSplit, LabelMap, Sample};
use crate::autodiff::Tensor;
use crate::error::{FormatError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"PHTM";
const VERSION: u32 = 1;

pub fn write_dataset(split: &DatasetSplit, out: &mut impl Write) -> Result<()> {
    out.write_all(&DATASET_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let k = u8::try_from(split.organs)
        .map_err(|_| FormatError::Invalid(format!("{} organs do not fit in u8", split.organs)))?;
    out.write_all(&[k])?;
    let partitions = partitions(split);
    for p in &partitions {
        out.write_all(&(p.len() as u32).to_le_bytes())?;
    }
    for s in partitions.into_iter().flatten() {
        let (h, w) = (s.height(), s.width());
        out.write_all(&(h as u16).to_le_bytes())?;
        out.write_all(&(w as u16).to_le_bytes())?;
        out.write_all(&[s.annotated_organ])?;
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(s.mask.labels())?;
    }
    Ok(())
}

fn partitions(split: &DatasetSplit) -> Vec<&Vec<Sample>> {
    let mut parts: Vec<&Vec<Sample>> = split.train.iter().collect();
    parts.push(&split.validation);
    parts.push(&split.test);
    parts
}

pub fn save_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_dataset(split, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    read_dataset(&fs::read(path)?)
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4)?)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn check_magic(cur: &mut Cursor<'_>, expected: [u8; 4]) -> Result<(), FormatError> {
    let found = cur.take(4).ok_or_else(|| FormatError::Truncated {
        section: "magic".into(),
    })?;
    let found: [u8; 4] = found.try_into().expect("four bytes");
    if found != expected {
        return Err(FormatError::BadMagic { expected, found });
    }
    Ok(())
}

pub fn read_dataset(bytes: &[u8]) -> Result<DatasetSplit> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, DATASET_MAGIC)?;
    let header = |section: &str| FormatError::Truncated {
        section: section.into(),
    };
    let version = cur.u32().ok_or_else(|| header("version"))?;
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        }
        .into());
    }
    let k = cur.u8().ok_or_else(|| header("organ count"))? as usize;
    if k == 0 {
        return Err(FormatError::Invalid("organ count is zero".into()).into());
    }
    let counts = (0..k + 2)
        .map(|_| {
            cur.u32()
                .map(|c| c as usize)
                .ok_or_else(|| header("partition counts"))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut index = 0usize;
    let mut parts = Vec::with_capacity(k + 2);
    for &count in &counts {
        let mut part = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            part.push(read_sample(&mut cur, k, index)?);
            index += 1;
        }
        parts.push(part);
    }
    if !cur.is_at_end() {
        return Err(FormatError::Invalid("trailing bytes after the last sample".into()).into());
    }
    let test = parts.pop().expect("k + 2 partitions");
    let validation = parts.pop().expect("k + 2 partitions");
    Ok(DatasetSplit {
        organs: k,
        train: parts,
        validation,
        test,
    })
}

fn read_sample(cur: &mut Cursor<'_>, k: usize, index: usize) -> Result<Sample> {
    let truncated = || FormatError::TruncatedSample { sample: index };
    let h = cur.u16().ok_or_else(truncated)? as usize;
    let w = cur.u16().ok_or_else(truncated)? as usize;
    let organ = cur.u8().ok_or_else(truncated)?;
    if h == 0 || w == 0 {
        return Err(FormatError::Invalid(format!("sample {index} has an empty image")).into());
    }
    let pixels = cur.f32s(h * w).ok_or_else(truncated)?;
    let labels = cur.take(h * w).ok_or_else(truncated)?.to_vec();
    if organ as usize > k || labels.iter().any(|&l| l as usize > k) {
        return Err(
            FormatError::Invalid(format!("sample {index} uses a class id above {k}")).into(),
        );
    }
    Ok(Sample {
        image: Tensor::new(&[h, w], pixels)?,
        mask: LabelMap::new(h, w, labels)?,
        annotated_organ: organ,
    })
}
