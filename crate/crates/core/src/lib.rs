//! Reversible data hiding in encrypted grayscale images.
//!
//! The content owner computes prediction errors for every target pixel,
//! groups them into `q × w` blocks and derives a 3-bit label per block that
//! says how many most-significant bits of each pixel in the block can be
//! overwritten and later restored from a causal prediction. The image is
//! then encrypted with an AES-128-CTR keystream. A data hider, who never
//! sees the plaintext, writes the labels and a payload into the MSBs of the
//! encrypted pixels. On the receiving side the payload is extracted with the
//! data-hider key alone, and the original image is rebuilt bit-exactly with
//! the content-owner key alone.
//!
//! ```no_run
//! use rrbe::{codec, cipher::Key, image::GrayImage, predict::PredictorKind};
//!
//! # fn main() -> Result<(), rrbe::Error> {
//! let img = GrayImage::load_pgm("lena.pgm")?;
//! let ke = Key::from_hex("000102030405060708090a0b0c0d0e0f")?;
//! let kd = Key::from_hex("f0e0d0c0b0a090807060504030201000")?;
//! let nonce = [7u8; 12];
//!
//! let encrypted = codec::encrypt(&img, PredictorKind::Gap, 2, 4, &ke, nonce)?;
//! let payload = rrbe::bits::from_bytes(b"hello");
//! let marked = codec::embed(&encrypted, &payload, Some(&kd), None)?;
//!
//! assert_eq!(codec::extract(&marked, Some(&kd), None)?, payload);
//! assert_eq!(codec::recover_image(&marked, &ke, None)?, img);
//! # Ok(())
//! # }
//! ```

pub mod bits;
pub mod cipher;
pub mod codec;
pub mod container;
mod error;
pub mod experiment;
pub mod image;
mod par;
pub mod predict;
pub mod room;

pub use error::Error;
