//! Header, label chaining schedule, payload container, extraction and
//! lossless recovery.
//!
//! Stream layout written into the MSB slots of the target pixels:
//!
//! ```text
//! [3-bit label code per block, block-index order]           3K bits
//! [saved encrypted header pixels (0,0) (0,1) (0,2)]          24 bits
//! [payload length]                                           32 bits
//! [payload, XORed with the K_d keystream when K_d is given]
//! [zero fill up to C]
//! ```
//!
//! Slots are visited starting with the best block B0, named in the
//! 24-bit header, then every other block in index order, skipping blocks
//! whose label is zero.

use thiserror::Error;

use crate::bits::{self, Bits};
use crate::cipher::{self, Key, KeyMaterial, KeyRole, Nonce};
use crate::image::{read_msbs, replace_msbs, GrayImage};
use crate::predict::{CoefTable, Predictor, PredictorKind};
use crate::room::{self, BlockGrid, Label, LabelMap, RoomError, LABEL_BITS};

pub const HEADER_BITS: usize = 24;
pub const HEADER_INDEX_BITS: usize = 21;
pub const SAVED_PIXEL_BITS: usize = 24;
pub const LENGTH_BITS: usize = 32;
/// Container framing before the payload.
pub const CONTAINER_OVERHEAD_BITS: usize = SAVED_PIXEL_BITS + LENGTH_BITS;
/// Largest K the header can address.
pub const MAX_BLOCKS: usize = 1 << HEADER_INDEX_BITS;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("every block has label 0, nothing can be embedded")]
    NoCapacity,
    #[error("label chain stalls before block {block}: {needed} label bits needed, {available} readable")]
    InfeasibleLabelChain {
        block: usize,
        needed: usize,
        available: usize,
    },
    #[error("payload of {requested} bits exceeds the maximum of {max} bits")]
    PayloadTooLarge { requested: usize, max: usize },
    #[error("corrupt header: {0}")]
    CorruptHeader(&'static str),
    #[error("corrupt embedded stream: {0}")]
    CorruptStream(&'static str),
    #[error("predictor {0} is not causal and cannot be used for recovery")]
    NonCausalPredictor(PredictorKind),
    #[error("{blocks} blocks exceed the header's 21-bit index")]
    TooManyBlocks { blocks: usize },
    #[error("image was marked with a shared key K_s but none was supplied")]
    MissingSharedKey,
    #[error("image is too small for the 3-pixel header")]
    ImageTooSmall,
    #[error(transparent)]
    Room(#[from] RoomError),
}

/// Location of the first block in the chain and its label code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    /// 0-based block index.
    pub start_block: usize,
    pub start_code: u8,
}

impl Header {
    pub fn to_bits(self) -> Bits {
        let mut b = Bits::with_capacity(HEADER_BITS);
        bits::push_uint(&mut b, self.start_block as u64, HEADER_INDEX_BITS);
        bits::push_uint(&mut b, u64::from(self.start_code), LABEL_BITS);
        b
    }

    pub fn from_bits(b: &Bits) -> Self {
        assert_eq!(b.len(), HEADER_BITS);
        Self {
            start_block: bits::read_uint(&b[..HEADER_INDEX_BITS]) as usize,
            start_code: bits::read_uint(&b[HEADER_INDEX_BITS..]) as u8,
        }
    }

    fn validate(self, block_count: usize) -> Result<Self, CodecError> {
        if self.start_block >= block_count {
            return Err(CodecError::CorruptHeader("start block index out of range"));
        }
        if self.start_code == 0 {
            return Err(CodecError::CorruptHeader("start block has label 0"));
        }
        Ok(self)
    }
}

/// Block visiting order shared by embedder and extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedSchedule {
    pub header: Header,
    /// Blocks in slot order: B0, then ascending index, ℓ = 0 skipped.
    pub order: Vec<usize>,
    /// ℓ per entry of `order`.
    pub bits_per_pixel: Vec<u32>,
    pub block_pixels: usize,
}

impl EmbedSchedule {
    /// C, the total number of MSB slots.
    pub fn capacity_bits(&self) -> usize {
        self.bits_per_pixel.iter().map(|&l| l as usize).sum::<usize>() * self.block_pixels
    }

    /// Every slot as (block, pixel-in-block, bit-in-pixel), MSB first.
    pub fn slots(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        let pixels = self.block_pixels;
        self.order
            .iter()
            .zip(&self.bits_per_pixel)
            .flat_map(move |(&k, &l)| (0..pixels).flat_map(move |i| (0..l).map(move |b| (k, i, b))))
    }
}

/// Picks B0 and orders the blocks, checking that a decoder holding only
/// the header can read every label before it needs it.
pub fn build_schedule(labels: &LabelMap, grid: &BlockGrid) -> Result<EmbedSchedule, CodecError> {
    let k_total = labels.len();
    assert_eq!(k_total, grid.block_count(), "label map does not match grid");
    if k_total > MAX_BLOCKS {
        return Err(CodecError::TooManyBlocks { blocks: k_total });
    }
    let pixels = grid.block_pixels();
    // strict comparison keeps the lowest index on ties
    let (b0, best) = labels
        .labels()
        .enumerate()
        .fold((0, Label::ZERO), |acc, (k, l)| if l > acc.1 { (k, l) } else { acc });
    if best == Label::ZERO {
        return Err(CodecError::NoCapacity);
    }

    let mut order = vec![b0];
    let mut bits_per_pixel = vec![u32::from(best.bits())];
    let mut readable = best.bits() as usize * pixels;
    for (j, l) in labels.labels().enumerate() {
        if j == b0 {
            continue;
        }
        let needed = LABEL_BITS * (j + 1);
        if needed > readable {
            return Err(CodecError::InfeasibleLabelChain {
                block: j,
                needed,
                available: readable,
            });
        }
        if l.bits() > 0 {
            order.push(j);
            bits_per_pixel.push(u32::from(l.bits()));
            readable += l.bits() as usize * pixels;
        }
    }
    if readable < LABEL_BITS * k_total {
        return Err(CodecError::InfeasibleLabelChain {
            block: k_total,
            needed: LABEL_BITS * k_total,
            available: readable,
        });
    }
    Ok(EmbedSchedule {
        header: Header {
            start_block: b0,
            start_code: best.code(),
        },
        order,
        bits_per_pixel,
        block_pixels: pixels,
    })
}

/// Largest payload that fits: C − 3K − 56, or `None` if even the framing
/// does not fit.
pub fn max_payload_bits(schedule: &EmbedSchedule, block_count: usize) -> Option<usize> {
    schedule
        .capacity_bits()
        .checked_sub(LABEL_BITS * block_count + CONTAINER_OVERHEAD_BITS)
}

/// What the content owner hands to the data hider: the encrypted pixels
/// and the public sidecar.
#[derive(Clone, Debug)]
pub struct EncryptedImage {
    pub image: GrayImage,
    pub nonce: Nonce,
    pub kind: PredictorKind,
    pub grid: BlockGrid,
    pub labels: LabelMap,
    pub coefs: Option<CoefTable>,
}

/// The encrypted image after embedding, plus the sidecar needed to undo it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarkedImage {
    pub image: GrayImage,
    pub nonce: Nonce,
    pub kind: PredictorKind,
    pub q: usize,
    pub w: usize,
    pub ks_used: bool,
    pub coefs: Option<CoefTable>,
}

impl MarkedImage {
    pub fn grid(&self) -> Result<BlockGrid, CodecError> {
        Ok(BlockGrid::for_image(self.image.width(), self.image.height(), self.q, self.w)?)
    }
}

/// Bit accounting of one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbedStats {
    /// C
    pub capacity_bits: usize,
    /// 3K
    pub label_bits: usize,
    /// Saved pixels, length field and payload.
    pub container_bits: usize,
    /// Zero fill after the container.
    pub fill_bits: usize,
}

impl EmbedStats {
    pub fn written_bits(&self) -> usize {
        self.label_bits + self.container_bits
    }
}

/// Content owner side: labels the plaintext and encrypts it under `ke`.
pub fn encrypt(
    img: &GrayImage,
    kind: PredictorKind,
    q: usize,
    w: usize,
    ke: &Key,
    nonce: Nonce,
) -> Result<EncryptedImage, CodecError> {
    if !kind.is_causal() {
        return Err(CodecError::NonCausalPredictor(kind));
    }
    let pre = room::preprocess(img, kind, q, w)?;
    if pre.grid.block_count() > MAX_BLOCKS {
        return Err(CodecError::TooManyBlocks {
            blocks: pre.grid.block_count(),
        });
    }
    let key = KeyMaterial::new(KeyRole::ContentOwner, ke.clone(), nonce);
    Ok(EncryptedImage {
        image: cipher::xor_image(img, &key),
        nonce,
        kind,
        grid: pre.grid,
        labels: pre.labels,
        coefs: pre.coefs,
    })
}

pub fn embed(
    enc: &EncryptedImage,
    payload: &Bits,
    kd: Option<&Key>,
    ks: Option<&Key>,
) -> Result<MarkedImage, CodecError> {
    embed_with_stats(enc, payload, kd, ks).map(|(m, _)| m)
}

/// Data hider side: writes header, labels and container into the MSBs.
pub fn embed_with_stats(
    enc: &EncryptedImage,
    payload: &Bits,
    kd: Option<&Key>,
    ks: Option<&Key>,
) -> Result<(MarkedImage, EmbedStats), CodecError> {
    let grid = &enc.grid;
    let k_total = grid.block_count();
    let schedule = build_schedule(&enc.labels, grid)?;
    let max = max_payload_bits(&schedule, k_total).unwrap_or(0);
    if payload.len() > max || max_payload_bits(&schedule, k_total).is_none() {
        return Err(CodecError::PayloadTooLarge {
            requested: payload.len(),
            max,
        });
    }
    let mut img = enc.image.clone();
    let ks = ks.map(|k| KeyMaterial::new(KeyRole::Shared, k.clone(), enc.nonce));

    let mut stream = Bits::with_capacity(schedule.capacity_bits());
    let mut label_bits = Bits::with_capacity(LABEL_BITS * k_total);
    for &code in enc.labels.codes() {
        bits::push_uint(&mut label_bits, u64::from(code), LABEL_BITS);
    }
    match &ks {
        Some(k) => stream.extend_from_bitslice(&cipher::xor_bits_at(&label_bits, k, HEADER_BITS as u64)),
        None => stream.extend_from_bitslice(&label_bits),
    }
    for c in 0..3 {
        bits::push_uint(&mut stream, u64::from(img.get(0, c)), 8);
    }
    bits::push_uint(&mut stream, payload.len() as u64, LENGTH_BITS);
    match kd {
        Some(k) => {
            let k = KeyMaterial::new(KeyRole::DataHider, k.clone(), enc.nonce);
            stream.extend_from_bitslice(&cipher::xor_bits(payload, &k));
        }
        None => stream.extend_from_bitslice(payload),
    }
    let stats = EmbedStats {
        capacity_bits: schedule.capacity_bits(),
        label_bits: label_bits.len(),
        container_bits: stream.len() - label_bits.len(),
        fill_bits: schedule.capacity_bits() - stream.len(),
    };
    stream.resize(schedule.capacity_bits(), false);

    let mut pos = 0;
    for (&k, &l) in schedule.order.iter().zip(&schedule.bits_per_pixel) {
        let l_usize = l as usize;
        for (r, c) in grid.block_pixel_coords(k) {
            let data = bits::read_uint(&stream[pos..pos + l_usize]) as u8;
            img.set(r, c, replace_msbs(img.get(r, c), l, data));
            pos += l_usize;
        }
    }

    let mut header = schedule.header.to_bits();
    if let Some(k) = &ks {
        header = cipher::xor_bits(&header, k);
    }
    for c in 0..3 {
        img.set(0, c, bits::read_uint(&header[8 * c..8 * c + 8]) as u8);
    }

    Ok((
        MarkedImage {
            image: img,
            nonce: enc.nonce,
            kind: enc.kind,
            q: grid.block_rows(),
            w: grid.block_cols(),
            ks_used: ks.is_some(),
            coefs: enc.coefs.clone(),
        },
        stats,
    ))
}

/// Everything the decoder walk produces.
#[derive(Clone, Debug)]
pub struct DecodedStream {
    pub header: Header,
    pub labels: LabelMap,
    /// All C slot bits in slot order, label part already un-XORed.
    pub bits: Bits,
}

/// Walks the chain the way a receiver must: header first, then labels as
/// they become readable.
pub fn decode_stream(marked: &MarkedImage, ks: Option<&Key>) -> Result<DecodedStream, CodecError> {
    if marked.ks_used && ks.is_none() {
        return Err(CodecError::MissingSharedKey);
    }
    let img = &marked.image;
    if img.width() < 3 {
        return Err(CodecError::ImageTooSmall);
    }
    let grid = marked.grid()?;
    let k_total = grid.block_count();
    let ks = ks.map(|k| KeyMaterial::new(KeyRole::Shared, k.clone(), marked.nonce));

    let mut raw_header = Bits::with_capacity(HEADER_BITS);
    for c in 0..3 {
        bits::push_uint(&mut raw_header, u64::from(img.get(0, c)), 8);
    }
    if let Some(k) = &ks {
        raw_header = cipher::xor_bits(&raw_header, k);
    }
    let header = Header::from_bits(&raw_header).validate(k_total)?;
    let label_pad = match &ks {
        Some(k) => cipher::xor_bits_at(
            &Bits::repeat(false, LABEL_BITS * k_total),
            k,
            HEADER_BITS as u64,
        ),
        None => Bits::repeat(false, LABEL_BITS * k_total),
    };

    let read_block = |k: usize, l: u32, out: &mut Bits| {
        for (r, c) in grid.block_pixel_coords(k) {
            bits::push_uint(out, u64::from(read_msbs(img.get(r, c), l)), l as usize);
        }
    };
    let code_at = |stream: &Bits, j: usize| -> u8 {
        let range = LABEL_BITS * j..LABEL_BITS * (j + 1);
        let mut v = 0u8;
        for i in range {
            v = (v << 1) | u8::from(stream[i] ^ label_pad[i]);
        }
        v
    };

    let mut stream = Bits::new();
    read_block(header.start_block, u32::from(Label::from_code(header.start_code).bits()), &mut stream);
    let mut codes = vec![0u8; k_total];
    for j in 0..k_total {
        if j == header.start_block {
            continue;
        }
        if stream.len() < LABEL_BITS * (j + 1) {
            return Err(CodecError::CorruptStream("label chain ran out of readable bits"));
        }
        codes[j] = code_at(&stream, j);
        let l = u32::from(Label::from_code(codes[j]).bits());
        if l > 0 {
            read_block(j, l, &mut stream);
        }
    }
    if stream.len() < LABEL_BITS * k_total {
        return Err(CodecError::CorruptStream("label stream shorter than 3K bits"));
    }
    codes[header.start_block] = code_at(&stream, header.start_block);
    if codes[header.start_block] != header.start_code {
        return Err(CodecError::CorruptHeader("start block label disagrees with header"));
    }
    for i in 0..LABEL_BITS * k_total {
        let v = stream[i] ^ label_pad[i];
        stream.set(i, v);
    }
    Ok(DecodedStream {
        header,
        labels: LabelMap::from_codes(codes),
        bits: stream,
    })
}

pub fn recover_labels(marked: &MarkedImage, ks: Option<&Key>) -> Result<(LabelMap, Header), CodecError> {
    let d = decode_stream(marked, ks)?;
    Ok((d.labels, d.header))
}

/// Container start within the decoded stream, after the saved pixels.
fn container_fields(d: &DecodedStream) -> Result<(usize, usize), CodecError> {
    let start = d.labels.len() * LABEL_BITS;
    if d.bits.len() < start + CONTAINER_OVERHEAD_BITS {
        return Err(CodecError::CorruptStream("no room for container framing"));
    }
    let len_at = start + SAVED_PIXEL_BITS;
    let len = bits::read_uint(&d.bits[len_at..len_at + LENGTH_BITS]) as usize;
    let payload_at = len_at + LENGTH_BITS;
    if len > d.bits.len() - payload_at {
        return Err(CodecError::CorruptStream("declared payload length exceeds capacity"));
    }
    Ok((payload_at, len))
}

/// Reads the payload without the content-owner key.
pub fn extract(marked: &MarkedImage, kd: Option<&Key>, ks: Option<&Key>) -> Result<Bits, CodecError> {
    let d = decode_stream(marked, ks)?;
    let (at, len) = container_fields(&d)?;
    let payload = &d.bits[at..at + len];
    Ok(match kd {
        Some(k) => cipher::xor_bits(payload, &KeyMaterial::new(KeyRole::DataHider, k.clone(), marked.nonce)),
        None => payload.to_bitvec(),
    })
}

/// Rebuilds one pixel: top ℓ bits from the prediction, low bits from the
/// decrypted pixel, then a ±2^(8−ℓ) correction when the joined value
/// lands on the wrong side of a bit-plane boundary.
#[inline]
pub fn recover_pixel(decrypted: u8, predicted: u8, label: u32) -> u8 {
    match label {
        0 => decrypted,
        8 => predicted,
        l => {
            assert!(l < 8, "label out of range");
            let low_mask = (1u16 << (8 - l)) - 1;
            let joined = (u16::from(predicted) & !low_mask & 0xff) | (u16::from(decrypted) & low_mask);
            let e = i32::from(joined) - i32::from(predicted);
            let half = 1i32 << (7 - l);
            let step = 1i32 << (8 - l);
            let h = if e.abs() < half {
                i32::from(joined)
            } else if e < 0 {
                i32::from(joined) + step
            } else {
                i32::from(joined) - step
            };
            h as u8
        }
    }
}

/// Content owner side: restores the exact plaintext without K_d.
pub fn recover_image(marked: &MarkedImage, ke: &Key, ks: Option<&Key>) -> Result<GrayImage, CodecError> {
    if !marked.kind.is_causal() {
        return Err(CodecError::NonCausalPredictor(marked.kind));
    }
    if marked.kind.is_adaptive() && marked.coefs.is_none() {
        return Err(CodecError::CorruptStream("adaptive predictor without coefficient table"));
    }
    let d = decode_stream(marked, ks)?;
    let grid = marked.grid()?;
    let saved_at = d.labels.len() * LABEL_BITS;
    if d.bits.len() < saved_at + SAVED_PIXEL_BITS {
        return Err(CodecError::CorruptStream("saved header pixels missing"));
    }
    let mut img = marked.image.clone();
    for c in 0..3 {
        let at = saved_at + 8 * c;
        img.set(0, c, bits::read_uint(&d.bits[at..at + 8]) as u8);
    }
    let key = KeyMaterial::new(KeyRole::ContentOwner, ke.clone(), marked.nonce);
    cipher::xor_image_in_place(&mut img, &key);

    let predictor = Predictor::new(marked.kind, marked.coefs.as_ref());
    let region = *grid.region();
    let labels: Vec<u32> = d.labels.labels().map(|l| u32::from(l.bits())).collect();
    for r in region.row_range() {
        for c in region.col_range() {
            let k = grid.block_of(r, c).expect("target pixel lies in a block");
            let l = labels[k];
            if l == 0 {
                continue;
            }
            let pred = predictor.predict_at(&img, r, c);
            img.set(r, c, recover_pixel(img.get(r, c), pred, l));
        }
    }
    Ok(img)
}
