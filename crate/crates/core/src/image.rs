//! 8-bit grayscale rasters, binary PGM I/O and MSB bit-field access.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Errors produced while decoding or writing PGM files.
#[derive(Debug, Error)]
pub enum PgmError {
    #[error("not a binary PGM file (expected magic P5)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported PGM maxval {0}, only 8-bit (255) images are accepted")]
    UnsupportedDepth(u32),
    #[error("truncated PGM pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("pixel buffer holds {found} bytes but {width}x{height} needs {expected}")]
    SizeMismatch {
        width: usize,
        height: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A row-major 8-bit grayscale image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PgmError> {
        let expected = width
            .checked_mul(height)
            .ok_or(PgmError::MalformedHeader("image dimensions overflow"))?;
        if data.len() != expected {
            return Err(PgmError::SizeMismatch {
                width,
                height,
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    /// Decodes a binary (P5) PGM with maxval 255.
    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, PgmError> {
        let mut header = HeaderReader { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(PgmError::BadMagic);
        }
        header.pos = 2;
        let width = header.number("missing width")?;
        let height = header.number("missing height")?;
        let maxval = header.number("missing maxval")?;
        if width == 0 || height == 0 {
            return Err(PgmError::MalformedHeader("zero image dimension"));
        }
        if maxval != 255 {
            return Err(PgmError::UnsupportedDepth(maxval));
        }
        // Exactly one whitespace byte separates maxval from the raster.
        match bytes.get(header.pos) {
            Some(b) if b.is_ascii_whitespace() => header.pos += 1,
            _ => return Err(PgmError::MalformedHeader("no whitespace after maxval")),
        }
        let (width, height) = (width as usize, height as usize);
        let expected = width
            .checked_mul(height)
            .ok_or(PgmError::MalformedHeader("image dimensions overflow"))?;
        let raster = &bytes[header.pos..];
        if raster.len() < expected {
            return Err(PgmError::Truncated {
                expected,
                found: raster.len(),
            });
        }
        Self::new(width, height, raster[..expected].to_vec())
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, PgmError> {
        Self::decode_pgm(&fs::read(path)?)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), PgmError> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, missing: &'static str) -> Result<u32, PgmError> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(PgmError::MalformedHeader("expected whitespace between fields"));
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError::MalformedHeader(missing));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PgmError::MalformedHeader("header number out of range"))
    }
}

/// Overwrites the top `nbits` bits of `pixel` with `databits` (MSB-first),
/// keeping the low `8 - nbits` bits.
///
/// Panics if `nbits > 8` or `databits` does not fit in `nbits` bits.
#[inline]
pub fn replace_msbs(pixel: u8, nbits: u32, databits: u8) -> u8 {
    assert!(nbits <= 8, "nbits must be in 0..=8");
    assert!(
        u32::from(databits) < 1u32 << nbits,
        "databits {databits} does not fit in {nbits} bits"
    );
    if nbits == 0 {
        return pixel;
    }
    let low = 8 - nbits;
    let keep = ((1u32 << low) - 1) as u8;
    (((databits as u32) << low) as u8) | (pixel & keep)
}

/// Reads the top `nbits` bits of `pixel`, MSB-first.
#[inline]
pub fn read_msbs(pixel: u8, nbits: u32) -> u8 {
    assert!(nbits <= 8, "nbits must be in 0..=8");
    if nbits == 0 {
        0
    } else {
        ((pixel as u32) >> (8 - nbits)) as u8
    }
}
