//! On-disk format for marked images.
//!
//! ```text
//! "RRBE1"  u32le width  u32le height  u8 kind  u8 q  u8 w  u8 flags  [12] nonce
//! [AL table: u16le grid size (0 = global), then 4 × 16-bit codes per cell,
//!  MSB-first, zero-padded to a byte]
//! width × height pixel bytes, row-major
//! ```
//!
//! Flag bit 0 marks a K_s-sealed header and label stream, bit 1 the
//! presence of the AL table.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::bits::{self, Bits};
use crate::cipher::NONCE_BYTES;
use crate::codec::MarkedImage;
use crate::image::GrayImage;
use crate::predict::{AlGrid, CoefTable, CoefVector, PredictorKind, COEF_CODE_BITS};

pub const MAGIC: &[u8; 5] = b"RRBE1";
const FLAG_KS: u8 = 1;
const FLAG_AL: u8 = 2;
const FIXED_HEADER: usize = 5 + 4 + 4 + 4 + NONCE_BYTES;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a marked-image container (bad magic)")]
    BadMagic,
    #[error("container truncated: {0}")]
    Truncated(&'static str),
    #[error("unknown predictor tag {0}")]
    UnknownPredictor(u8),
    #[error("invalid container field: {0}")]
    Invalid(&'static str),
    #[error("block size {q}x{w} does not fit in one byte each")]
    BlockTooLarge { q: usize, w: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_bytes(m: &MarkedImage) -> Result<Vec<u8>, ContainerError> {
    let (q, w) = match (u8::try_from(m.q), u8::try_from(m.w)) {
        (Ok(q), Ok(w)) => (q, w),
        _ => return Err(ContainerError::BlockTooLarge { q: m.q, w: m.w }),
    };
    let width = u32::try_from(m.image.width()).map_err(|_| ContainerError::Invalid("width"))?;
    let height = u32::try_from(m.image.height()).map_err(|_| ContainerError::Invalid("height"))?;
    let mut out = Vec::with_capacity(FIXED_HEADER + m.image.pixel_count() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.push(m.kind.tag());
    out.push(q);
    out.push(w);
    let mut flags = 0;
    if m.ks_used {
        flags |= FLAG_KS;
    }
    if m.coefs.is_some() {
        flags |= FLAG_AL;
    }
    out.push(flags);
    out.extend_from_slice(&m.nonce);
    if let Some(t) = &m.coefs {
        let size = t.grid().map_or(0, AlGrid::size) as u16;
        out.extend_from_slice(&size.to_le_bytes());
        let mut packed = Bits::with_capacity(t.coefs().len() * 4 * COEF_CODE_BITS);
        for v in t.coefs() {
            for code in v.codes() {
                bits::push_uint(&mut packed, u64::from(code), COEF_CODE_BITS);
            }
        }
        out.extend_from_slice(&bits::to_bytes(&packed));
    }
    out.extend_from_slice(m.image.data());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated(what))?;
        let s = self.bytes.get(self.pos..end).ok_or(ContainerError::Truncated(what))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MarkedImage, ContainerError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut rd = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let width = rd.u32("width")? as usize;
    let height = rd.u32("height")? as usize;
    let tag = rd.u8("predictor tag")?;
    let kind = PredictorKind::from_tag(tag).ok_or(ContainerError::UnknownPredictor(tag))?;
    let q = rd.u8("block rows")? as usize;
    let w = rd.u8("block cols")? as usize;
    let flags = rd.u8("flags")?;
    if flags & !(FLAG_KS | FLAG_AL) != 0 {
        return Err(ContainerError::Invalid("unknown flag bits"));
    }
    let nonce: [u8; NONCE_BYTES] = rd.take(NONCE_BYTES, "nonce")?.try_into().unwrap();
    if width == 0 || height == 0 {
        return Err(ContainerError::Invalid("zero image dimension"));
    }
    if q == 0 || w == 0 {
        return Err(ContainerError::Invalid("zero block dimension"));
    }

    let has_al = flags & FLAG_AL != 0;
    if has_al != kind.is_adaptive() {
        return Err(ContainerError::Invalid("AL table flag disagrees with predictor"));
    }
    let coefs = if has_al {
        let size = u16::from_le_bytes(rd.take(2, "AL grid size")?.try_into().unwrap()) as usize;
        let stored = if size == 0 {
            PredictorKind::AlGlobal
        } else {
            PredictorKind::AlBlocked(AlGrid::from_size(size).ok_or(ContainerError::Invalid("AL grid size"))?)
        };
        if stored != kind {
            return Err(ContainerError::Invalid("AL grid size disagrees with predictor"));
        }
        let cells = CoefTable::cell_count(kind, width, height);
        let nbytes = (cells * 4 * COEF_CODE_BITS).div_ceil(8);
        let packed = bits::from_bytes(rd.take(nbytes, "AL table")?);
        let vectors = (0..cells)
            .map(|i| {
                let mut codes = [0u16; 4];
                for (j, code) in codes.iter_mut().enumerate() {
                    let at = (i * 4 + j) * COEF_CODE_BITS;
                    *code = bits::read_uint(&packed[at..at + COEF_CODE_BITS]) as u16;
                }
                CoefVector::from_codes(codes)
            })
            .collect();
        Some(CoefTable::from_parts(kind, width, height, vectors).ok_or(ContainerError::Invalid("AL table size"))?)
    } else {
        None
    };

    let npix = width.checked_mul(height).ok_or(ContainerError::Invalid("image dimensions overflow"))?;
    let data = rd.take(npix, "pixel data")?.to_vec();
    if rd.pos != bytes.len() {
        return Err(ContainerError::Invalid("trailing bytes after pixel data"));
    }
    let image = GrayImage::new(width, height, data).map_err(|_| ContainerError::Invalid("pixel data"))?;
    Ok(MarkedImage {
        image,
        nonce,
        kind,
        q,
        w,
        ks_used: flags & FLAG_KS != 0,
        coefs,
    })
}

pub fn save(m: &MarkedImage, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    fs::write(path, to_bytes(m)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<MarkedImage, ContainerError> {
    from_bytes(&fs::read(path)?)
}
