//! Room reservation before encryption: prediction errors, block tiling,
//! per-block capacity labels and the capacity bookkeeping built on them.

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::image::GrayImage;
use crate::par;
use crate::predict::{CoefTable, Predictor, PredictorKind, COEF_VECTOR_BITS};

/// First row and column that may carry embedded bits. The two rows and
/// columns before them seed the NN and WW neighbors during recovery.
pub const RESERVED_EDGE: usize = 2;

/// Bits per stored label.
pub const LABEL_BITS: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RoomError {
    #[error("block size must be at least 1x1, got {q}x{w}")]
    InvalidBlockSize { q: usize, w: usize },
    #[error("target region {rows}x{cols} is smaller than one {q}x{w} block")]
    RegionTooSmall {
        rows: usize,
        cols: usize,
        q: usize,
        w: usize,
    },
}

/// The rectangle of pixels eligible for embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TargetRegion {
    pub image_width: usize,
    pub image_height: usize,
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TargetRegion {
    /// Everything from row 2 and column 2 onwards, before any cropping.
    pub fn standard(image_width: usize, image_height: usize) -> Self {
        Self {
            image_width,
            image_height,
            top: RESERVED_EDGE.min(image_height),
            left: RESERVED_EDGE.min(image_width),
            rows: image_height.saturating_sub(RESERVED_EDGE),
            cols: image_width.saturating_sub(RESERVED_EDGE),
        }
    }

    pub fn row_range(&self) -> Range<usize> {
        self.top..self.top + self.rows
    }

    pub fn col_range(&self) -> Range<usize> {
        self.left..self.left + self.cols
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.row_range().contains(&row) && self.col_range().contains(&col)
    }

    /// Drops bottom rows and right columns until the region tiles into
    /// `q × w` blocks.
    pub fn cropped(&self, q: usize, w: usize) -> Self {
        Self {
            rows: self.rows - self.rows % q.max(1),
            cols: self.cols - self.cols % w.max(1),
            ..*self
        }
    }
}

/// Spatial tiling of the (cropped) target region into `q × w` blocks,
/// numbered in row-major tile order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BlockGrid {
    region: TargetRegion,
    q: usize,
    w: usize,
    across: usize,
    down: usize,
}

/// Tiles `region` into `q × w` blocks after cropping it to a whole number
/// of blocks.
pub fn partition_blocks(region: TargetRegion, q: usize, w: usize) -> Result<BlockGrid, RoomError> {
    if q == 0 || w == 0 {
        return Err(RoomError::InvalidBlockSize { q, w });
    }
    if region.rows < q || region.cols < w {
        return Err(RoomError::RegionTooSmall {
            rows: region.rows,
            cols: region.cols,
            q,
            w,
        });
    }
    let region = region.cropped(q, w);
    Ok(BlockGrid {
        region,
        q,
        w,
        across: region.cols / w,
        down: region.rows / q,
    })
}

impl BlockGrid {
    /// Grid over the standard region of a `width × height` image.
    pub fn for_image(width: usize, height: usize, q: usize, w: usize) -> Result<Self, RoomError> {
        partition_blocks(TargetRegion::standard(width, height), q, w)
    }

    pub fn region(&self) -> &TargetRegion {
        &self.region
    }

    pub fn block_rows(&self) -> usize {
        self.q
    }

    pub fn block_cols(&self) -> usize {
        self.w
    }

    /// K
    pub fn block_count(&self) -> usize {
        self.across * self.down
    }

    /// I = q × w
    pub fn block_pixels(&self) -> usize {
        self.q * self.w
    }

    pub fn blocks_across(&self) -> usize {
        self.across
    }

    /// Top-left pixel of block `k` (0-based).
    pub fn block_origin(&self, k: usize) -> (usize, usize) {
        let (br, bc) = (k / self.across, k % self.across);
        (self.region.top + br * self.q, self.region.left + bc * self.w)
    }

    /// The block holding pixel `(row, col)`, if it is a target pixel.
    pub fn block_of(&self, row: usize, col: usize) -> Option<usize> {
        if !self.region.contains(row, col) {
            return None;
        }
        let br = (row - self.region.top) / self.q;
        let bc = (col - self.region.left) / self.w;
        Some(br * self.across + bc)
    }

    /// Pixels of block `k` in raster order; the i-th item is pixel
    /// `t = k·I + i` of the compact block-major numbering.
    pub fn block_pixel_coords(&self, k: usize) -> impl Iterator<Item = (usize, usize)> {
        let (r0, c0) = self.block_origin(k);
        let w = self.w;
        (0..self.q * w).map(move |i| (r0 + i / w, c0 + i % w))
    }
}

/// Prediction errors `e = h - ĥ` over a target region, in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeMap {
    region: TargetRegion,
    errors: Vec<i16>,
}

impl PeMap {
    pub fn region(&self) -> &TargetRegion {
        &self.region
    }

    pub fn errors(&self) -> &[i16] {
        &self.errors
    }

    /// Error of image pixel `(row, col)`; panics outside the region.
    pub fn at(&self, row: usize, col: usize) -> i16 {
        assert!(self.region.contains(row, col));
        self.errors[(row - self.region.top) * self.region.cols + (col - self.region.left)]
    }

    /// Errors of one block row-slice at a time.
    fn block_rows<'a>(&'a self, grid: &'a BlockGrid, k: usize) -> impl Iterator<Item = &'a [i16]> {
        let (r0, c0) = grid.block_origin(k);
        let stride = self.region.cols;
        let base_c = c0 - self.region.left;
        (r0..r0 + grid.q).map(move |r| {
            let start = (r - self.region.top) * stride + base_c;
            &self.errors[start..start + grid.w]
        })
    }

    /// Errors of block `k`, in block-internal raster order.
    pub fn block_errors(&self, grid: &BlockGrid, k: usize) -> Vec<i16> {
        self.block_rows(grid, k).flatten().copied().collect()
    }
}

/// Computes the prediction error of every pixel in `region`.
///
/// `coefs` must hold the quantized weights when `kind` is adaptive.
pub fn compute_pe_map(
    img: &GrayImage,
    kind: PredictorKind,
    region: &TargetRegion,
    coefs: Option<&CoefTable>,
) -> PeMap {
    let predictor = Predictor::new(kind, coefs);
    let mut errors = vec![0i16; region.pixel_count()];
    let (top, left) = (region.top, region.left);
    par::for_each_chunk_mut(&mut errors, region.cols, |i, row_out| {
        let r = top + i;
        for (j, out) in row_out.iter_mut().enumerate() {
            let c = left + j;
            *out = i16::from(img.get(r, c)) - i16::from(predictor.predict_at(img, r, c));
        }
    });
    PeMap {
        region: *region,
        errors,
    }
}

/// A block label ℓ ∈ {0, …, 6, 8}: the number of MSBs every pixel of the
/// block can give up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(u8);

impl Label {
    pub const ZERO: Label = Label(0);
    pub const FULL: Label = Label(8);

    pub fn new(bits: u8) -> Option<Self> {
        matches!(bits, 0..=6 | 8).then_some(Label(bits))
    }

    /// Label for a block whose largest absolute error is `e_max`.
    pub fn for_max_error(e_max: u16) -> Self {
        // least n with e_max < 2^n
        let n = 16 - e_max.leading_zeros();
        match n {
            0 => Label(8),
            1..=7 => Label((7 - n) as u8),
            _ => Label(0),
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// 3-bit code; ℓ = 8 is stored as 7 since ℓ = 7 never occurs.
    pub fn code(self) -> u8 {
        if self.0 == 8 {
            7
        } else {
            self.0
        }
    }

    pub fn from_code(code: u8) -> Self {
        assert!(code < 8, "label codes are 3 bits");
        if code == 7 {
            Label(8)
        } else {
            Label(code)
        }
    }
}

/// Label code for one block of prediction errors.
pub fn label_block(block_errors: &[i16]) -> u8 {
    assert!(!block_errors.is_empty(), "empty block");
    let e_max = block_errors.iter().map(|e| e.unsigned_abs()).max().unwrap_or(0);
    Label::for_max_error(e_max).code()
}

/// The K per-block label codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    codes: Vec<u8>,
}

impl LabelMap {
    pub fn from_codes(codes: Vec<u8>) -> Self {
        assert!(codes.iter().all(|&c| c < 8), "label codes are 3 bits");
        Self { codes }
    }

    pub fn from_labels(labels: impl IntoIterator<Item = Label>) -> Self {
        Self {
            codes: labels.into_iter().map(Label::code).collect(),
        }
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn label(&self, k: usize) -> Label {
        Label::from_code(self.codes[k])
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.codes.iter().map(|&c| Label::from_code(c))
    }
}

/// Labels every block of `grid` from the error map.
pub fn label_blocks(pe: &PeMap, grid: &BlockGrid) -> LabelMap {
    let codes = par::map_range(grid.block_count(), |k| {
        let e_max = pe
            .block_rows(grid, k)
            .flat_map(|row| row.iter())
            .map(|e| e.unsigned_abs())
            .max()
            .unwrap_or(0);
        Label::for_max_error(e_max).code()
    });
    LabelMap { codes }
}

/// Capacity bookkeeping for one labeled image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CapacityReport {
    pub image_width: usize,
    pub image_height: usize,
    pub q: usize,
    pub w: usize,
    /// K
    pub blocks: usize,
    /// C, the sum of ℓ_k · q · w
    pub total_bits: u64,
    /// 3K
    pub label_bits: u64,
    /// Adaptive-L coefficient storage.
    pub coefficient_bits: u64,
    /// C_p = C - 3K - coefficient bits, clamped at zero.
    pub pure_bits: u64,
    /// Set when C_p would have been negative.
    pub pure_clamped: bool,
    /// C_p divided by the full image pixel count.
    pub embedding_rate: f64,
}

impl CapacityReport {
    pub fn overhead_bits(&self) -> u64 {
        self.label_bits + self.coefficient_bits
    }
}

/// C_bk = ℓ_k · q · w for every block.
pub fn block_capacities(labels: &LabelMap, grid: &BlockGrid) -> Vec<u64> {
    let pixels = grid.block_pixels() as u64;
    labels.labels().map(|l| u64::from(l.bits()) * pixels).collect()
}

pub fn capacity_report(labels: &LabelMap, grid: &BlockGrid, kind: PredictorKind) -> CapacityReport {
    assert_eq!(labels.len(), grid.block_count(), "label map does not match grid");
    let region = grid.region();
    let total_bits: u64 = block_capacities(labels, grid).iter().sum();
    let label_bits = (LABEL_BITS * grid.block_count()) as u64;
    let coefficient_bits =
        (CoefTable::cell_count(kind, region.image_width, region.image_height) * COEF_VECTOR_BITS) as u64;
    let raw = total_bits as i64 - label_bits as i64 - coefficient_bits as i64;
    let pure_bits = raw.max(0) as u64;
    CapacityReport {
        image_width: region.image_width,
        image_height: region.image_height,
        q: grid.q,
        w: grid.w,
        blocks: grid.block_count(),
        total_bits,
        label_bits,
        coefficient_bits,
        pure_bits,
        pure_clamped: raw < 0,
        embedding_rate: pure_bits as f64 / (region.image_width * region.image_height) as f64,
    }
}

/// Everything the content owner derives from the plaintext before encryption.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub kind: PredictorKind,
    pub grid: BlockGrid,
    pub coefs: Option<CoefTable>,
    pub pe: PeMap,
    pub labels: LabelMap,
}

impl Preprocessed {
    pub fn report(&self) -> CapacityReport {
        capacity_report(&self.labels, &self.grid, self.kind)
    }
}

/// Fits coefficients (adaptive kinds), computes errors over the cropped
/// target region and labels every block.
pub fn preprocess(
    img: &GrayImage,
    kind: PredictorKind,
    q: usize,
    w: usize,
) -> Result<Preprocessed, RoomError> {
    let grid = BlockGrid::for_image(img.width(), img.height(), q, w)?;
    let region = *grid.region();
    let coefs = CoefTable::fit(img, kind, region.row_range(), region.col_range());
    let pe = compute_pe_map(img, kind, &region, coefs.as_ref());
    let labels = label_blocks(&pe, &grid);
    Ok(Preprocessed {
        kind,
        grid,
        coefs,
        pe,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::gather_neighborhood;
    use proptest::prelude::*;

    #[test]
    fn cropping_for_512_at_2x4() {
        let grid = BlockGrid::for_image(512, 512, 2, 4).unwrap();
        assert_eq!((grid.region().rows, grid.region().cols), (510, 508));
        assert_eq!(grid.block_count(), 255 * 127);
        assert_eq!(grid.block_count(), 32385);
    }

    fn region(rows: usize, cols: usize) -> TargetRegion {
        TargetRegion {
            image_width: cols + 2,
            image_height: rows + 2,
            top: 2,
            left: 2,
            rows,
            cols,
        }
    }

    #[test]
    fn exact_and_cropped_tilings() {
        let g = partition_blocks(region(8, 8), 4, 4).unwrap();
        assert_eq!(g.block_count(), 4);
        let g = partition_blocks(region(9, 9), 4, 4).unwrap();
        assert_eq!(g.block_count(), 4);
        assert_eq!(81 - g.region().pixel_count(), 17);
        assert_eq!(
            partition_blocks(region(3, 9), 4, 4),
            Err(RoomError::RegionTooSmall {
                rows: 3,
                cols: 9,
                q: 4,
                w: 4
            })
        );
        assert!(partition_blocks(region(8, 8), 0, 4).is_err());
    }

    #[test]
    fn blocks_cover_region_disjointly() {
        let g = partition_blocks(region(9, 13), 3, 4).unwrap();
        let mut seen = std::collections::HashSet::new();
        for k in 0..g.block_count() {
            for (i, (r, c)) in g.block_pixel_coords(k).enumerate() {
                assert_eq!(g.block_of(r, c), Some(k));
                assert!(seen.insert((r, c)));
                let t = k * g.block_pixels() + i;
                assert_eq!(t / g.block_pixels(), k);
            }
        }
        assert_eq!(seen.len(), g.region().pixel_count());
        assert_eq!(g.block_of(0, 0), None);
    }

    #[test]
    fn label_examples() {
        assert_eq!(label_block(&[0, 0, 0]), 7);
        assert_eq!(Label::from_code(7), Label::FULL);
        assert_eq!(label_block(&[1, -5, 2]), 4);
        assert_eq!(label_block(&[200]), 0);
        assert_eq!(label_block(&[-100, 3]), 0);
        assert_eq!(label_block(&[1]), 6);
        assert_eq!(label_block(&[-127]), 0);
        assert_eq!(label_block(&[63]), 1);
        assert_eq!(label_block(&[64]), 0);
    }

    #[test]
    fn label_never_seven() {
        for e in 0..=255u16 {
            let l = Label::for_max_error(e);
            assert_ne!(l.bits(), 7);
            assert_eq!(Label::from_code(l.code()), l);
        }
    }

    #[test]
    fn code_round_trip() {
        for bits in [0, 1, 2, 3, 4, 5, 6, 8] {
            let l = Label::new(bits).unwrap();
            assert_eq!(Label::from_code(l.code()), l);
        }
        assert_eq!(Label::new(7), None);
    }

    #[test]
    fn flat_images_have_zero_errors() {
        let img = GrayImage::filled(20, 20, 93);
        let region = TargetRegion::standard(20, 20);
        for kind in PredictorKind::ALL {
            let t = CoefTable::fit(&img, kind, region.row_range(), region.col_range());
            let pe = compute_pe_map(&img, kind, &region, t.as_ref());
            assert!(pe.errors().iter().all(|&e| e == 0), "{kind}");
        }
    }

    /// Independent MED written straight from the definition, no shared helpers.
    fn reference_med_errors(img: &GrayImage) -> Vec<i32> {
        let mut out = Vec::new();
        for r in 2..img.height() {
            for c in 2..img.width() {
                let a = img.get(r, c - 1) as i32;
                let b = img.get(r - 1, c) as i32;
                let cc = img.get(r - 1, c - 1) as i32;
                let pred = if cc >= a.max(b) {
                    a.min(b)
                } else if cc <= a.min(b) {
                    a.max(b)
                } else {
                    a + b - cc
                };
                out.push(img.get(r, c) as i32 - pred);
            }
        }
        out
    }

    #[test]
    fn med_matches_independent_reference() {
        let img = GrayImage::from_fn(37, 29, |r, c| ((r * r * 7 + c * 13 + r * c) % 256) as u8);
        let region = TargetRegion::standard(37, 29);
        let pe = compute_pe_map(&img, PredictorKind::Med, &region, None);
        let ours: Vec<i32> = pe.errors().iter().map(|&e| e as i32).collect();
        assert_eq!(ours, reference_med_errors(&img));
    }

    #[test]
    fn pe_uses_quantized_coefficients() {
        let img = GrayImage::from_fn(32, 32, |r, c| ((r * 5 + c * 11 + (r * c) % 7) % 256) as u8);
        let region = TargetRegion::standard(32, 32);
        let kind = PredictorKind::AlGlobal;
        let t = CoefTable::fit(&img, kind, region.row_range(), region.col_range()).unwrap();
        let pe = compute_pe_map(&img, kind, &region, Some(&t));
        let (r, c) = (10, 17);
        let pred = crate::predict::predict(kind, &gather_neighborhood(&img, r, c), Some(&t.coefs()[0]));
        assert_eq!(pe.at(r, c), img.get(r, c) as i16 - pred as i16);
    }

    #[test]
    fn capacity_examples() {
        // one 2x4 block with ℓ = 4
        let img = GrayImage::filled(6, 4, 0);
        let grid = BlockGrid::for_image(img.width(), img.height(), 2, 4).unwrap();
        assert_eq!(grid.block_count(), 1);
        let labels = LabelMap::from_labels([Label::new(4).unwrap()]);
        assert_eq!(block_capacities(&labels, &grid), vec![32]);

        // K = 10 blocks of 5x5 with ℓ = 4: C = 10 · 4 · 25 = 1000
        let grid = BlockGrid::for_image(52, 7, 5, 5).unwrap();
        assert_eq!(grid.block_count(), 10);
        let labels = LabelMap::from_codes(vec![4; 10]);
        let rep = capacity_report(&labels, &grid, PredictorKind::Gap);
        assert_eq!(rep.total_bits, 1000);
        assert_eq!(rep.pure_bits, 970);
        assert_eq!(rep.overhead_bits(), 30);
    }

    #[test]
    fn flat_512_capacity() {
        let img = GrayImage::filled(512, 512, 200);
        let pre = preprocess(&img, PredictorKind::Med, 2, 4).unwrap();
        assert!(pre.labels.labels().all(|l| l == Label::FULL));
        let rep = pre.report();
        let region_pixels = (510 * 508) as u64;
        assert_eq!(rep.total_bits, 8 * region_pixels);
        assert_eq!(rep.pure_bits, rep.total_bits - 3 * 32385);
        assert!((rep.embedding_rate - rep.pure_bits as f64 / 262144.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_overhead_counts_cells() {
        let img = GrayImage::filled(512, 512, 10);
        for (kind, cells) in [
            (PredictorKind::AlGlobal, 1u64),
            (PredictorKind::AlBlocked(crate::predict::AlGrid::G16), 1024),
            (PredictorKind::AlBlocked(crate::predict::AlGrid::G32), 256),
            (PredictorKind::AlBlocked(crate::predict::AlGrid::G64), 64),
        ] {
            let rep = preprocess(&img, kind, 4, 4).unwrap().report();
            assert_eq!(rep.coefficient_bits, cells * 64);
            assert_eq!(rep.pure_bits, rep.total_bits - rep.label_bits - cells * 64);
        }
    }

    #[test]
    fn negative_pure_capacity_is_flagged() {
        let img = GrayImage::filled(12, 12, 0);
        let grid = BlockGrid::for_image(12, 12, 1, 1).unwrap();
        let labels = LabelMap::from_codes(vec![0; grid.block_count()]);
        let rep = capacity_report(&labels, &grid, PredictorKind::Med);
        assert_eq!(rep.pure_bits, 0);
        assert!(rep.pure_clamped);
        let _ = img;
    }

    proptest! {
        #[test]
        fn labels_bound_their_errors(errors in proptest::collection::vec(-255i16..=255, 1..40)) {
            let l = Label::from_code(label_block(&errors));
            match l.bits() {
                0 => {}
                8 => prop_assert!(errors.iter().all(|&e| e == 0)),
                b => {
                    let bound = 1i16 << (8 - b - 1);
                    prop_assert!(errors.iter().all(|e| e.abs() < bound));
                }
            }
        }

        #[test]
        fn adding_a_pixel_never_raises_the_label(
            errors in proptest::collection::vec(-255i16..=255, 1..40),
            extra in -255i16..=255,
        ) {
            let before = Label::from_code(label_block(&errors));
            let mut more = errors.clone();
            more.push(extra);
            prop_assert!(Label::from_code(label_block(&more)) <= before);
        }
    }
}
