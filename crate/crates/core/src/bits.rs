//! Bit strings used for payloads, label streams and the embedded container.
//!
//! Bits are stored MSB-first within each byte, matching the pixel bit
//! convention (the first bit of a stream lands in a pixel's bit 7).

use bitvec::prelude::*;

pub type Bits = BitVec<u8, Msb0>;

pub fn from_bytes(bytes: &[u8]) -> Bits {
    Bits::from_slice(bytes)
}

/// Packs bits into bytes, zero-padding the final byte.
pub fn to_bytes(bits: &BitSlice<u8, Msb0>) -> Vec<u8> {
    let mut owned = bits.to_bitvec();
    owned.set_uninitialized(false);
    owned.into_vec()
}

/// Appends the low `width` bits of `value`, most significant first.
pub fn push_uint(bits: &mut Bits, value: u64, width: usize) {
    for i in (0..width).rev() {
        bits.push((value >> i) & 1 == 1);
    }
}

/// Reads `bits` as an unsigned big-endian integer.
pub fn read_uint(bits: &BitSlice<u8, Msb0>) -> u64 {
    bits.iter().fold(0u64, |acc, b| (acc << 1) | u64::from(*b))
}
