//! Pixel predictors: CB, MED, GAP, simple GAP, L and the least-squares
//! adaptive-L family, plus fixed-point storage of the adaptive coefficients.
//!
//! Every predictor returns its real-valued output rounded half away from
//! zero and clamped to `[0, 255]`. The rounding is done on exact rationals
//! (all weights are multiples of 1/10, 1/64 or 2^-13), so predictions are
//! bit-identical on every platform; encoder and decoder must agree exactly.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use thiserror::Error;

use crate::image::GrayImage;
use crate::par;

/// Neighbors of a target pixel.
///
/// ```text
///            nn   nne
///       nw   n    ne
///  ww   w    X    e
///            s
/// ```
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Neighborhood {
    pub ww: u8,
    pub w: u8,
    pub nw: u8,
    pub n: u8,
    pub ne: u8,
    pub nn: u8,
    pub nne: u8,
    pub e: u8,
    pub s: u8,
}

impl Neighborhood {
    pub fn constant(v: u8) -> Self {
        Self {
            ww: v,
            w: v,
            nw: v,
            n: v,
            ne: v,
            nn: v,
            nne: v,
            e: v,
            s: v,
        }
    }

    /// The four regression inputs, in coefficient order `[w, nw, n, ne]`.
    #[inline]
    pub fn linear_inputs(&self) -> [u8; 4] {
        [self.w, self.nw, self.n, self.ne]
    }
}

/// Collects the neighborhood of `(row, col)`. Coordinates that fall outside
/// the image are clamped to the nearest valid row and column.
#[inline]
pub fn gather_neighborhood(img: &GrayImage, row: usize, col: usize) -> Neighborhood {
    let (w, h) = (img.width(), img.height());
    debug_assert!(row < h && col < w);
    let up1 = row.saturating_sub(1);
    let up2 = row.saturating_sub(2);
    let down1 = (row + 1).min(h - 1);
    let left1 = col.saturating_sub(1);
    let left2 = col.saturating_sub(2);
    let right1 = (col + 1).min(w - 1);
    let data = img.data();
    let at = |r: usize, c: usize| data[r * w + c];
    Neighborhood {
        ww: at(row, left2),
        w: at(row, left1),
        nw: at(up1, left1),
        n: at(up1, col),
        ne: at(up1, right1),
        nn: at(up2, col),
        nne: at(up2, right1),
        e: at(row, right1),
        s: at(down1, col),
    }
}

/// Cell size of a blocked adaptive-L fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlGrid {
    G16,
    G32,
    G64,
}

impl AlGrid {
    pub fn size(self) -> usize {
        match self {
            AlGrid::G16 => 16,
            AlGrid::G32 => 32,
            AlGrid::G64 => 64,
        }
    }

    pub fn from_size(size: usize) -> Option<Self> {
        match size {
            16 => Some(AlGrid::G16),
            32 => Some(AlGrid::G32),
            64 => Some(AlGrid::G64),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PredictorKind {
    /// Chessboard average of W, N, E, S. Non-causal.
    Cb,
    /// Median edge detector.
    Med,
    /// Gradient-adjusted prediction.
    Gap,
    /// GAP without the gradient switch: `0.5w - 0.25nw + 0.5n + 0.25ne`.
    Sgap,
    /// `0.7w - 0.3nw + 0.5n + 0.1ne`.
    L,
    /// Least-squares weights fit once over the whole image.
    AlGlobal,
    /// Least-squares weights fit per square cell.
    AlBlocked(AlGrid),
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 9] = [
        PredictorKind::Cb,
        PredictorKind::Med,
        PredictorKind::Gap,
        PredictorKind::Sgap,
        PredictorKind::L,
        PredictorKind::AlGlobal,
        PredictorKind::AlBlocked(AlGrid::G16),
        PredictorKind::AlBlocked(AlGrid::G32),
        PredictorKind::AlBlocked(AlGrid::G64),
    ];

    /// Everything except CB.
    pub const CAUSAL: [PredictorKind; 8] = [
        PredictorKind::Med,
        PredictorKind::Gap,
        PredictorKind::Sgap,
        PredictorKind::L,
        PredictorKind::AlGlobal,
        PredictorKind::AlBlocked(AlGrid::G16),
        PredictorKind::AlBlocked(AlGrid::G32),
        PredictorKind::AlBlocked(AlGrid::G64),
    ];

    pub fn is_causal(self) -> bool {
        self != PredictorKind::Cb
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, PredictorKind::AlGlobal | PredictorKind::AlBlocked(_))
    }

    /// Stable one-byte identifier used by the marked-image container.
    pub fn tag(self) -> u8 {
        match self {
            PredictorKind::Cb => 0,
            PredictorKind::Med => 1,
            PredictorKind::Gap => 2,
            PredictorKind::Sgap => 3,
            PredictorKind::L => 4,
            PredictorKind::AlGlobal => 5,
            PredictorKind::AlBlocked(AlGrid::G16) => 6,
            PredictorKind::AlBlocked(AlGrid::G32) => 7,
            PredictorKind::AlBlocked(AlGrid::G64) => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Cb => "cb",
            PredictorKind::Med => "med",
            PredictorKind::Gap => "gap",
            PredictorKind::Sgap => "sgap",
            PredictorKind::L => "l",
            PredictorKind::AlGlobal => "al",
            PredictorKind::AlBlocked(AlGrid::G16) => "al16",
            PredictorKind::AlBlocked(AlGrid::G32) => "al32",
            PredictorKind::AlBlocked(AlGrid::G64) => "al64",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown predictor {0:?} (expected cb, med, gap, sgap, l, al, al16, al32 or al64)")]
pub struct UnknownPredictor(pub String);

impl FromStr for PredictorKind {
    type Err = UnknownPredictor;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| UnknownPredictor(s.to_string()))
    }
}

/// Fraction bits of the stored coefficients.
pub const COEF_FRAC_BITS: u32 = 13;
/// Largest stored magnitude, in units of 2^-13 (just under 4.0).
pub const COEF_MAX_MAGNITUDE: i32 = (1 << 15) - 1;
/// Bits needed to store one coefficient (sign + 15-bit magnitude).
pub const COEF_CODE_BITS: usize = 16;
/// Bits needed to store one coefficient vector.
pub const COEF_VECTOR_BITS: usize = 4 * COEF_CODE_BITS;

const COEF_SCALE: f64 = (1u32 << COEF_FRAC_BITS) as f64;

/// Four linear weights `[a_w, a_nw, a_n, a_ne]` on the 2^-13 grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CoefVector {
    fixed: [i32; 4],
}

pub const L_COEFFICIENTS: [f64; 4] = [0.7, -0.3, 0.5, 0.1];
pub const SGAP_COEFFICIENTS: [f64; 4] = [0.5, -0.25, 0.5, 0.25];

impl CoefVector {
    /// Fixed-point values in units of 2^-13.
    pub fn fixed(&self) -> [i32; 4] {
        self.fixed
    }

    /// The fixed L weights, quantized.
    pub fn l_fallback() -> Self {
        quantize(L_COEFFICIENTS)
    }

    /// 16-bit sign-magnitude codes: bit 15 is the sign, bits 0..15 the magnitude.
    pub fn codes(&self) -> [u16; 4] {
        self.fixed.map(|v| {
            let mag = v.unsigned_abs() as u16;
            if v < 0 {
                0x8000 | mag
            } else {
                mag
            }
        })
    }

    pub fn from_codes(codes: [u16; 4]) -> Self {
        Self {
            fixed: codes.map(|c| {
                let mag = i32::from(c & 0x7fff);
                if c & 0x8000 != 0 {
                    -mag
                } else {
                    mag
                }
            }),
        }
    }
}

/// Rounds each weight to the nearest multiple of 2^-13, saturating at
/// `±(4 - 2^-13)`. Also returns how many weights were saturated.
pub fn quantize_with_stats(coefs: [f64; 4]) -> (CoefVector, usize) {
    let mut clamped = 0;
    let fixed = coefs.map(|a| {
        let scaled = if a.is_finite() { (a * COEF_SCALE).round() } else { 0.0 };
        if scaled.abs() > COEF_MAX_MAGNITUDE as f64 {
            clamped += 1;
            COEF_MAX_MAGNITUDE * scaled.signum() as i32
        } else {
            scaled as i32
        }
    });
    (CoefVector { fixed }, clamped)
}

pub fn quantize(coefs: [f64; 4]) -> CoefVector {
    quantize_with_stats(coefs).0
}

pub fn dequantize(coefs: &CoefVector) -> [f64; 4] {
    coefs.fixed.map(|v| v as f64 / COEF_SCALE)
}

/// `num / den` rounded half away from zero. `den` must be positive.
#[inline]
fn round_ratio(num: i64, den: i64) -> i64 {
    let q = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -q
    } else {
        q
    }
}

#[inline]
fn clamp_u8(v: i64) -> u8 {
    v.clamp(0, 255) as u8
}

#[inline]
fn linear(weights: [i64; 4], den: i64, nb: &Neighborhood) -> u8 {
    let x = nb.linear_inputs();
    let num: i64 = weights
        .iter()
        .zip(x)
        .map(|(a, h)| a * i64::from(h))
        .sum();
    clamp_u8(round_ratio(num, den))
}

fn predict_med(nb: &Neighborhood) -> u8 {
    let (w, nw, n) = (nb.w, nb.nw, nb.n);
    let (lo, hi) = (w.min(n), w.max(n));
    if nw <= lo {
        hi
    } else if nw >= hi {
        lo
    } else {
        (i16::from(w) + i16::from(n) - i16::from(nw)) as u8
    }
}

fn predict_gap(nb: &Neighborhood) -> u8 {
    let [ww, w, nw, n, ne, nn, nne] =
        [nb.ww, nb.w, nb.nw, nb.n, nb.ne, nb.nn, nb.nne].map(i64::from);
    let dv = (w - nw).abs() + (ne - nne).abs() + (n - nn).abs();
    let dh = (w - ww).abs() + (ne - n).abs() + (n - nw).abs();
    let d = dv - dh;
    // 16u, where u = (w + n)/2 + (ne - nw)/4.
    let u16 = 8 * w + 8 * n + 4 * ne - 4 * nw;
    let value = if d > 80 {
        w
    } else if d > 32 {
        round_ratio(16 * w + u16, 32)
    } else if d > 8 {
        round_ratio(16 * w + 3 * u16, 64)
    } else if d >= -8 {
        round_ratio(u16, 16)
    } else if d >= -32 {
        round_ratio(16 * n + 3 * u16, 64)
    } else if d >= -80 {
        round_ratio(16 * n + u16, 32)
    } else {
        n
    };
    clamp_u8(value)
}

/// Predicts the target pixel from its neighborhood.
///
/// `coefs` must be supplied for the adaptive kinds and is ignored otherwise.
/// Panics if an adaptive kind is called without coefficients.
#[inline]
pub fn predict(kind: PredictorKind, nb: &Neighborhood, coefs: Option<&CoefVector>) -> u8 {
    match kind {
        PredictorKind::Cb => {
            let sum = i64::from(nb.w) + i64::from(nb.n) + i64::from(nb.e) + i64::from(nb.s);
            clamp_u8(round_ratio(sum, 4))
        }
        PredictorKind::Med => predict_med(nb),
        PredictorKind::Gap => predict_gap(nb),
        PredictorKind::Sgap => linear([8, -4, 8, 4], 16, nb),
        PredictorKind::L => linear([7, -3, 5, 1], 10, nb),
        PredictorKind::AlGlobal | PredictorKind::AlBlocked(_) => {
            let coefs = coefs.expect("adaptive predictor requires coefficients");
            linear(coefs.fixed.map(i64::from), 1 << COEF_FRAC_BITS, nb)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FitError {
    #[error("least-squares fit needs at least 4 samples, got {0}")]
    InsufficientSamples(usize),
}

/// Condition-number ceiling above which the normal matrix counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;
/// Smallest usable pivot magnitude during elimination.
pub const SINGULAR_PIVOT: f64 = 1e-9;

/// Sufficient statistics `X'X`, `X'Y` of a 4-input regression.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalEquations {
    pub xtx: [[f64; 4]; 4],
    pub xty: [f64; 4],
    pub samples: usize,
}

impl NormalEquations {
    #[inline]
    pub fn add(&mut self, x: [f64; 4], y: f64) {
        for i in 0..4 {
            for j in 0..4 {
                self.xtx[i][j] += x[i] * x[j];
            }
            self.xty[i] += x[i] * y;
        }
        self.samples += 1;
    }

    /// Accumulates every pixel of `rows × cols` as a sample, using the causal
    /// inputs `[w, nw, n, ne]` and the pixel itself as target.
    pub fn from_image(img: &GrayImage, rows: Range<usize>, cols: Range<usize>) -> Self {
        // Integer accumulation is exact; conversion happens once at the end.
        let mut xtx = [[0u64; 4]; 4];
        let mut xty = [0u64; 4];
        let mut samples = 0;
        for r in rows {
            for c in cols.clone() {
                let x = gather_neighborhood(img, r, c).linear_inputs().map(u64::from);
                let y = u64::from(img.get(r, c));
                for i in 0..4 {
                    for j in i..4 {
                        xtx[i][j] += x[i] * x[j];
                    }
                    xty[i] += x[i] * y;
                }
                samples += 1;
            }
        }
        let mut out = NormalEquations {
            samples,
            ..Default::default()
        };
        for i in 0..4 {
            for j in i..4 {
                out.xtx[i][j] = xtx[i][j] as f64;
                out.xtx[j][i] = xtx[i][j] as f64;
            }
            out.xty[i] = xty[i] as f64;
        }
        out
    }

    /// Solves `X'X a = X'Y`. Returns `None` when the system is numerically
    /// singular: a pivot below [`SINGULAR_PIVOT`] or a 1-norm condition
    /// estimate above [`SINGULAR_CONDITION`].
    pub fn solve(&self) -> Option<[f64; 4]> {
        let inv = invert4(&self.xtx)?;
        let cond = norm1(&self.xtx) * norm1(&inv);
        if !cond.is_finite() || cond > SINGULAR_CONDITION {
            return None;
        }
        let mut a = [0.0; 4];
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = (0..4).map(|j| inv[i][j] * self.xty[j]).sum();
        }
        // One step of iterative refinement on the normal equations.
        let mut resid = self.xty;
        for (i, ri) in resid.iter_mut().enumerate() {
            *ri -= (0..4).map(|j| self.xtx[i][j] * a[j]).sum::<f64>();
        }
        for (i, ai) in a.iter_mut().enumerate() {
            *ai += (0..4).map(|j| inv[i][j] * resid[j]).sum::<f64>();
        }
        Some(a)
    }
}

fn norm1(m: &[[f64; 4]; 4]) -> f64 {
    (0..4)
        .map(|j| (0..4).map(|i| m[i][j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert4(m: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let mut a = *m;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let pivot_row = (col..4).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        let pivot = a[pivot_row][col];
        if !(pivot.abs() >= SINGULAR_PIVOT) {
            return None;
        }
        a.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        for j in 0..4 {
            a[col][j] /= pivot;
            inv[col][j] /= pivot;
        }
        for r in 0..4 {
            if r != col {
                let factor = a[r][col];
                if factor != 0.0 {
                    for j in 0..4 {
                        a[r][j] -= factor * a[col][j];
                        inv[r][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// A least-squares problem `min ||Y - X a||^2` with four inputs per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegressionSystem {
    pub rows: Vec<[f64; 4]>,
    pub targets: Vec<f64>,
}

impl RegressionSystem {
    pub fn push(&mut self, x: [f64; 4], y: f64) {
        self.rows.push(x);
        self.targets.push(y);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn normal_equations(&self) -> NormalEquations {
        let mut ne = NormalEquations::default();
        for (x, &y) in self.rows.iter().zip(&self.targets) {
            ne.add(*x, y);
        }
        ne
    }

    pub fn sse(&self, a: [f64; 4]) -> f64 {
        self.rows
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| {
                let r = y - (0..4).map(|j| x[j] * a[j]).sum::<f64>();
                r * r
            })
            .sum()
    }
}

/// The unquantized least-squares weights, or `None` for a singular system.
pub fn least_squares(sys: &RegressionSystem) -> Result<Option<[f64; 4]>, FitError> {
    if sys.len() < 4 {
        return Err(FitError::InsufficientSamples(sys.len()));
    }
    Ok(sys.normal_equations().solve())
}

/// Fits and quantizes the weights; singular systems fall back to L.
pub fn fit_coefficients(sys: &RegressionSystem) -> Result<CoefVector, FitError> {
    Ok(least_squares(sys)?.map_or_else(CoefVector::l_fallback, quantize))
}

/// Quantized adaptive-L weights for every cell of an image.
///
/// Equality compares the stored weights only; the fit statistics are not
/// part of what a receiver gets.
#[derive(Clone, Debug)]
pub struct CoefTable {
    /// Cell edge length; `None` for a single global fit.
    grid: Option<AlGrid>,
    cells_across: usize,
    cells_down: usize,
    coefs: Vec<CoefVector>,
    clamped: usize,
    fallbacks: usize,
}

impl CoefTable {
    /// Number of coefficient cells an adaptive kind uses on a
    /// `width × height` image; zero for the fixed predictors.
    pub fn cell_count(kind: PredictorKind, width: usize, height: usize) -> usize {
        match kind {
            PredictorKind::AlGlobal => 1,
            PredictorKind::AlBlocked(g) => width.div_ceil(g.size()) * height.div_ceil(g.size()),
            _ => 0,
        }
    }

    /// Fits one coefficient vector per cell over the target pixels
    /// `rows × cols` of `img`. Returns `None` for non-adaptive kinds.
    pub fn fit(
        img: &GrayImage,
        kind: PredictorKind,
        rows: Range<usize>,
        cols: Range<usize>,
    ) -> Option<Self> {
        let grid = match kind {
            PredictorKind::AlGlobal => None,
            PredictorKind::AlBlocked(g) => Some(g),
            _ => return None,
        };
        let (cells_across, cells_down, size) = match grid {
            None => (1, 1, img.width().max(img.height())),
            Some(g) => (
                img.width().div_ceil(g.size()),
                img.height().div_ceil(g.size()),
                g.size(),
            ),
        };
        let fitted = par::map_range(cells_across * cells_down, |cell| {
            let (cr, cc) = (cell / cells_across, cell % cells_across);
            let r = intersect(&rows, cr * size..(cr + 1) * size);
            let c = intersect(&cols, cc * size..(cc + 1) * size);
            let ne = NormalEquations::from_image(img, r, c);
            if ne.samples < 4 {
                return (CoefVector::l_fallback(), 0, true);
            }
            match ne.solve() {
                Some(a) => {
                    let (q, clamped) = quantize_with_stats(a);
                    (q, clamped, false)
                }
                None => (CoefVector::l_fallback(), 0, true),
            }
        });
        Some(Self {
            grid,
            cells_across,
            cells_down,
            clamped: fitted.iter().map(|f| f.1).sum(),
            fallbacks: fitted.iter().filter(|f| f.2).count(),
            coefs: fitted.into_iter().map(|f| f.0).collect(),
        })
    }

    /// Rebuilds a table from stored coefficients (e.g. a container sidecar).
    pub fn from_parts(
        kind: PredictorKind,
        width: usize,
        height: usize,
        coefs: Vec<CoefVector>,
    ) -> Option<Self> {
        let grid = match kind {
            PredictorKind::AlGlobal => None,
            PredictorKind::AlBlocked(g) => Some(g),
            _ => return None,
        };
        let (cells_across, cells_down) = match grid {
            None => (1, 1),
            Some(g) => (width.div_ceil(g.size()), height.div_ceil(g.size())),
        };
        (coefs.len() == cells_across * cells_down).then_some(Self {
            grid,
            cells_across,
            cells_down,
            coefs,
            clamped: 0,
            fallbacks: 0,
        })
    }

    pub fn grid(&self) -> Option<AlGrid> {
        self.grid
    }

    pub fn coefs(&self) -> &[CoefVector] {
        &self.coefs
    }

    pub fn cell_count_actual(&self) -> usize {
        self.coefs.len()
    }

    /// Weights that saturated during quantization.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Cells that used the L fallback (singular or too few samples).
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    #[inline]
    pub fn for_pixel(&self, row: usize, col: usize) -> &CoefVector {
        match self.grid {
            None => &self.coefs[0],
            Some(g) => {
                let s = g.size();
                &self.coefs[(row / s) * self.cells_across + col / s]
            }
        }
    }
}

impl PartialEq for CoefTable {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.cells_across == other.cells_across
            && self.cells_down == other.cells_down
            && self.coefs == other.coefs
    }
}

impl Eq for CoefTable {}

fn intersect(a: &Range<usize>, b: Range<usize>) -> Range<usize> {
    let start = a.start.max(b.start);
    let end = a.end.min(b.end).max(start);
    start..end
}

/// A predictor bound to its coefficients, ready to run over an image.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a> {
    kind: PredictorKind,
    table: Option<&'a CoefTable>,
}

impl<'a> Predictor<'a> {
    /// Panics if `kind` is adaptive and `table` is missing.
    pub fn new(kind: PredictorKind, table: Option<&'a CoefTable>) -> Self {
        assert!(
            !kind.is_adaptive() || table.is_some(),
            "adaptive predictor {kind} requires a coefficient table"
        );
        Self { kind, table }
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    #[inline]
    pub fn predict_at(&self, img: &GrayImage, row: usize, col: usize) -> u8 {
        let nb = gather_neighborhood(img, row, col);
        predict(self.kind, &nb, self.table.map(|t| t.for_pixel(row, col)))
    }
}
