//! Corpus experiments: prediction-error histograms, embedding-rate sweeps
//! with full round-trip verification, and report emission.

use std::cmp::Ordering;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::bits::Bits;
use crate::cipher::Key;
use crate::codec::{self, CodecError};
use crate::image::GrayImage;
use crate::par;
use crate::predict::{AlGrid, CoefTable, PredictorKind};
use crate::room::{self, TargetRegion};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("round trip failed for {image} / {predictor} / {q}x{w}: {what}")]
    RoundTrip {
        image: String,
        predictor: PredictorKind,
        q: usize,
        w: usize,
        what: String,
    },
    #[error("corpus directory {0} holds no PGM images")]
    EmptyCorpus(PathBuf),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug)]
pub struct CorpusImage {
    /// File stem, e.g. `lena`.
    pub id: String,
    pub image: GrayImage,
}

#[derive(Clone, Debug)]
pub struct LoadFailure {
    pub path: PathBuf,
    pub error: String,
}

/// Loads every `*.pgm` in `dir`, sorted by file name. Unreadable files are
/// reported individually and do not stop the load.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(Vec<CorpusImage>, Vec<LoadFailure>), ExperimentError> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ExperimentError::EmptyCorpus(dir.to_path_buf()));
    }
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        match GrayImage::load_pgm(&path) {
            Ok(image) => images.push(CorpusImage {
                id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                image,
            }),
            Err(e) => failures.push(LoadFailure {
                path,
                error: e.to_string(),
            }),
        }
    }
    Ok((images, failures))
}

/// Share of target pixels with |e| = 0, 1, 2 and the mean |e|.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub image: String,
    pub predictor: String,
    pub zero: f64,
    pub one: f64,
    pub two: f64,
    pub mean_abs: f64,
}

pub const CORPUS_MEAN_ID: &str = "corpus-mean";

#[derive(Clone, Debug, Default, Serialize)]
pub struct HistogramStats {
    pub per_image: Vec<HistogramRow>,
    /// One row per predictor, averaged over images.
    pub corpus: Vec<HistogramRow>,
}

impl HistogramStats {
    pub fn corpus_row(&self, kind: PredictorKind) -> Option<&HistogramRow> {
        self.corpus.iter().find(|r| r.predictor == kind.name())
    }
}

/// Histogram of one error map.
pub fn histogram_row(id: &str, kind: PredictorKind, img: &GrayImage) -> HistogramRow {
    let region = TargetRegion::standard(img.width(), img.height());
    let table = CoefTable::fit(img, kind, region.row_range(), region.col_range());
    let pe = room::compute_pe_map(img, kind, &region, table.as_ref());
    let mut counts = [0u64; 3];
    let mut sum = 0u64;
    for &e in pe.errors() {
        let a = e.unsigned_abs();
        if a < 3 {
            counts[a as usize] += 1;
        }
        sum += u64::from(a);
    }
    let n = pe.errors().len().max(1) as f64;
    HistogramRow {
        image: id.to_string(),
        predictor: kind.name().to_string(),
        zero: counts[0] as f64 / n,
        one: counts[1] as f64 / n,
        two: counts[2] as f64 / n,
        mean_abs: sum as f64 / n,
    }
}

/// Per-image and corpus-averaged error histograms.
pub fn pe_histogram(images: &[CorpusImage], kinds: &[PredictorKind]) -> HistogramStats {
    let jobs: Vec<(usize, PredictorKind)> = (0..images.len())
        .flat_map(|i| kinds.iter().map(move |&k| (i, k)))
        .collect();
    let per_image = par::map_slice(&jobs, |&(i, k)| histogram_row(&images[i].id, k, &images[i].image));
    let n = images.len().max(1) as f64;
    let corpus = kinds
        .iter()
        .map(|&k| {
            let rows = per_image.iter().filter(|r| r.predictor == k.name());
            let mut acc = [0.0; 4];
            for r in rows {
                acc[0] += r.zero;
                acc[1] += r.one;
                acc[2] += r.two;
                acc[3] += r.mean_abs;
            }
            HistogramRow {
                image: CORPUS_MEAN_ID.to_string(),
                predictor: k.name().to_string(),
                zero: acc[0] / n,
                one: acc[1] / n,
                two: acc[2] / n,
                mean_abs: acc[3] / n,
            }
        })
        .collect();
    HistogramStats { per_image, corpus }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// Full round trip verified.
    Ok,
    InfeasibleLabelChain,
    NoCapacity,
    /// Non-causal predictors cannot be embedded with.
    Unsupported,
}

/// One configuration of an embedding-rate sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErRecord {
    pub image: String,
    pub predictor: String,
    pub q: usize,
    pub w: usize,
    pub width: usize,
    pub height: usize,
    pub status: RunStatus,
    /// C
    pub capacity_bits: u64,
    /// 3K
    pub label_bits: u64,
    pub coefficient_bits: u64,
    /// C_p
    pub pure_bits: u64,
    /// C_p / (width × height); only set when the round trip succeeded.
    pub embedding_rate: Option<f64>,
    pub payload_bits: u64,
    /// Label stream plus container, excluding zero fill.
    pub written_bits: u64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub kinds: Vec<PredictorKind>,
    pub blocks: Vec<(usize, usize)>,
    pub seed: u64,
    pub timings: bool,
}

/// FNV-1a, used to give every configuration its own payload stream.
fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_seed(seed: u64, image: &str, kind: PredictorKind, q: usize, w: usize) -> u64 {
    fnv1a(&[
        &seed.to_le_bytes(),
        image.as_bytes(),
        kind.name().as_bytes(),
        &(q as u64).to_le_bytes(),
        &(w as u64).to_le_bytes(),
    ])
}

/// Embeds a max-capacity random payload, extracts it and recovers the
/// image. A mismatch anywhere is an error, never a record.
pub fn run_config(
    item: &CorpusImage,
    kind: PredictorKind,
    q: usize,
    w: usize,
    seed: u64,
    timings: bool,
) -> Result<ErRecord, ExperimentError> {
    let start = Instant::now();
    let img = &item.image;
    let fail = |what: String| ExperimentError::RoundTrip {
        image: item.id.clone(),
        predictor: kind,
        q,
        w,
        what,
    };
    let mut record = ErRecord {
        image: item.id.clone(),
        predictor: kind.name().to_string(),
        q,
        w,
        width: img.width(),
        height: img.height(),
        status: RunStatus::Ok,
        capacity_bits: 0,
        label_bits: 0,
        coefficient_bits: 0,
        pure_bits: 0,
        embedding_rate: None,
        payload_bits: 0,
        written_bits: 0,
        wall_ms: None,
    };
    if !kind.is_causal() {
        record.status = RunStatus::Unsupported;
        return Ok(record);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config_seed(seed, &item.id, kind, q, w));
    let (ke, kd): (Key, Key) = (Key::new(rng.gen()), Key::new(rng.gen()));
    let nonce: [u8; 12] = rng.gen();

    let enc = codec::encrypt(img, kind, q, w, &ke, nonce).map_err(|e| fail(e.to_string()))?;
    let report = room::capacity_report(&enc.labels, &enc.grid, kind);
    record.capacity_bits = report.total_bits;
    record.label_bits = report.label_bits;
    record.coefficient_bits = report.coefficient_bits;
    record.pure_bits = report.pure_bits;

    let schedule = match codec::build_schedule(&enc.labels, &enc.grid) {
        Ok(s) => s,
        Err(CodecError::InfeasibleLabelChain { .. }) => {
            record.status = RunStatus::InfeasibleLabelChain;
            return Ok(record);
        }
        Err(CodecError::NoCapacity) => {
            record.status = RunStatus::NoCapacity;
            return Ok(record);
        }
        Err(e) => return Err(fail(e.to_string())),
    };
    let Some(max) = codec::max_payload_bits(&schedule, enc.grid.block_count()) else {
        record.status = RunStatus::NoCapacity;
        return Ok(record);
    };
    let payload: Bits = (0..max).map(|_| rng.gen::<bool>()).collect();
    let (marked, stats) = codec::embed_with_stats(&enc, &payload, Some(&kd), None).map_err(|e| fail(e.to_string()))?;

    if stats.capacity_bits as u64 != report.total_bits || stats.written_bits() + stats.fill_bits != stats.capacity_bits {
        return Err(fail(format!("bit accounting: {stats:?} vs C = {}", report.total_bits)));
    }
    let extracted = codec::extract(&marked, Some(&kd), None).map_err(|e| fail(e.to_string()))?;
    if extracted != payload {
        return Err(fail("extracted payload differs".into()));
    }
    let recovered = codec::recover_image(&marked, &ke, None).map_err(|e| fail(e.to_string()))?;
    if &recovered != img {
        return Err(fail("recovered image differs".into()));
    }

    record.payload_bits = payload.len() as u64;
    record.written_bits = stats.written_bits() as u64;
    record.embedding_rate = Some(report.embedding_rate);
    if timings {
        record.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(record)
}

fn kind_rank(name: &str) -> usize {
    PredictorKind::ALL
        .iter()
        .position(|k| k.name() == name)
        .unwrap_or(usize::MAX)
}

fn record_order(a: &ErRecord, b: &ErRecord) -> Ordering {
    (a.image.as_str(), kind_rank(&a.predictor), a.q, a.w).cmp(&(b.image.as_str(), kind_rank(&b.predictor), b.q, b.w))
}

/// Runs every image × predictor × block size, in parallel, and returns
/// records sorted by (image, predictor, q, w).
pub fn er_table(images: &[CorpusImage], cfg: &SweepConfig) -> Result<Vec<ErRecord>, ExperimentError> {
    let jobs: Vec<(usize, PredictorKind, (usize, usize))> = (0..images.len())
        .flat_map(|i| {
            cfg.kinds
                .iter()
                .flat_map(move |&k| cfg.blocks.iter().map(move |&b| (i, k, b)))
        })
        .collect();
    let results = par::map_slice(&jobs, |&(i, k, (q, w))| run_config(&images[i], k, q, w, cfg.seed, cfg.timings));
    let mut records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    records.sort_by(record_order);
    Ok(records)
}

/// Mean ER of the verified records for one predictor and block size.
pub fn mean_embedding_rate(records: &[ErRecord], kind: PredictorKind, q: usize, w: usize) -> Option<f64> {
    let rates: Vec<f64> = records
        .iter()
        .filter(|r| r.predictor == kind.name() && r.q == q && r.w == w)
        .filter_map(|r| r.embedding_rate)
        .collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// One CSV row per record, fixed column order. An empty list still
/// produces the header line.
pub fn write_records_csv<W: Write>(records: &[ErRecord], out: W) -> Result<(), ExperimentError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    wtr.write_record([
        "image",
        "predictor",
        "q",
        "w",
        "width",
        "height",
        "status",
        "capacity_bits",
        "label_bits",
        "coefficient_bits",
        "pure_bits",
        "embedding_rate",
        "payload_bits",
        "written_bits",
        "wall_ms",
    ])?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(stats: &HistogramStats, out: W) -> Result<(), ExperimentError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    wtr.write_record(["image", "predictor", "zero", "one", "two", "mean_abs"])?;
    for r in stats.per_image.iter().chain(&stats.corpus) {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_records<W: Write>(records: &[ErRecord], format: ReportFormat, mut out: W) -> Result<(), ExperimentError> {
    match format {
        ReportFormat::Csv => write_records_csv(records, out),
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, records)?;
            writeln!(out)?;
            Ok(())
        }
    }
}

pub fn write_histogram<W: Write>(stats: &HistogramStats, format: ReportFormat, mut out: W) -> Result<(), ExperimentError> {
    match format {
        ReportFormat::Csv => write_histogram_csv(stats, out),
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, stats)?;
            writeln!(out)?;
            Ok(())
        }
    }
}

/// Published embedding rates this implementation is compared against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRate {
    pub image: &'static str,
    pub kind: PredictorKind,
    pub q: usize,
    pub w: usize,
    pub bpp: f64,
}

pub const REFERENCE_TOLERANCE: f64 = 0.15;

pub const REFERENCE_RATES: [ReferenceRate; 4] = [
    ReferenceRate {
        image: "lena",
        kind: PredictorKind::Gap,
        q: 2,
        w: 4,
        bpp: 3.219,
    },
    ReferenceRate {
        image: "baboon",
        kind: PredictorKind::Gap,
        q: 2,
        w: 4,
        bpp: 1.532,
    },
    ReferenceRate {
        image: "splash",
        kind: PredictorKind::AlBlocked(AlGrid::G32),
        q: 2,
        w: 4,
        bpp: 3.773,
    },
    ReferenceRate {
        image: "baboon",
        kind: PredictorKind::AlBlocked(AlGrid::G32),
        q: 2,
        w: 4,
        bpp: 1.667,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCheck {
    pub reference: ReferenceRate,
    /// `None` when the image is absent or the configuration did not verify.
    pub measured: Option<f64>,
}

impl ReferenceCheck {
    pub fn passed(&self) -> bool {
        self.measured
            .is_some_and(|m| (m - self.reference.bpp).abs() <= REFERENCE_TOLERANCE)
    }
}

impl std::fmt::Display for ReferenceCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let r = &self.reference;
        write!(f, "{}/{}/{}x{}: target {:.3} bpp, ", r.image, r.kind, r.q, r.w, r.bpp)?;
        match self.measured {
            Some(m) => write!(f, "measured {m:.3} (diff {:+.3})", m - r.bpp),
            None => write!(f, "not measured"),
        }
    }
}

pub fn check_reference_rates(records: &[ErRecord]) -> Vec<ReferenceCheck> {
    REFERENCE_RATES
        .iter()
        .map(|&reference| ReferenceCheck {
            reference,
            measured: records
                .iter()
                .find(|r| {
                    r.image.eq_ignore_ascii_case(reference.image)
                        && r.predictor == reference.kind.name()
                        && (r.q, r.w) == (reference.q, reference.w)
                })
                .and_then(|r| r.embedding_rate),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, image: GrayImage) -> CorpusImage {
        CorpusImage { id: id.into(), image }
    }

    fn smooth(w: usize, h: usize, k: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |r, c| ((r * k + c * 2 + (r * c) % 5) % 200) as u8)
    }

    #[test]
    fn constant_image_is_all_zero_errors() {
        let img = GrayImage::filled(30, 30, 77);
        let stats = pe_histogram(&[item("flat", img)], &PredictorKind::ALL);
        for r in &stats.per_image {
            assert_eq!(r.zero, 1.0, "{}", r.predictor);
            assert_eq!(r.mean_abs, 0.0);
        }
        assert_eq!(stats.corpus.len(), PredictorKind::ALL.len());
    }

    #[test]
    fn histogram_bins_are_fractions() {
        let imgs = [item("a", smooth(40, 30, 3)), item("b", smooth(33, 41, 7))];
        let stats = pe_histogram(&imgs, &PredictorKind::ALL);
        for r in stats.per_image.iter().chain(&stats.corpus) {
            for v in [r.zero, r.one, r.two] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert!(r.zero + r.one + r.two <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn sweep_is_sorted_verified_and_reproducible() {
        let imgs = [item("b", smooth(40, 36, 3)), item("a", smooth(36, 40, 1))];
        let cfg = SweepConfig {
            kinds: vec![PredictorKind::Gap, PredictorKind::Med, PredictorKind::Cb],
            blocks: vec![(2, 4), (3, 3)],
            seed: 7,
            timings: false,
        };
        let recs = er_table(&imgs, &cfg).unwrap();
        assert_eq!(recs.len(), 12);
        assert_eq!(recs[0].image, "a");
        // CB comes first in predictor order and is recorded as unsupported
        assert_eq!(recs[0].predictor, "cb");
        assert_eq!(recs[0].status, RunStatus::Unsupported);
        for r in &recs {
            match r.status {
                RunStatus::Ok => {
                    let er = r.embedding_rate.unwrap();
                    assert_eq!(er, r.pure_bits as f64 / (r.width * r.height) as f64);
                    assert_eq!(r.written_bits, r.capacity_bits);
                }
                _ => assert!(r.embedding_rate.is_none()),
            }
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_records_csv(&recs, &mut a).unwrap();
        write_records_csv(&er_table(&imgs, &cfg).unwrap(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut out = Vec::new();
        write_records_csv(&[], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("image,predictor,q,w,"));
    }

    #[test]
    fn row_count_matches_configurations() {
        let img = smooth(24, 24, 2);
        let imgs: Vec<_> = (0..3).map(|i| item(&format!("i{i}"), img.clone())).collect();
        let cfg = SweepConfig {
            kinds: PredictorKind::CAUSAL[..7].to_vec(),
            blocks: vec![(2, 4), (3, 3), (4, 4)],
            seed: 1,
            timings: true,
        };
        let recs = er_table(&imgs, &cfg).unwrap();
        let mut out = Vec::new();
        write_records_csv(&recs, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + 3 * 7 * 3);
    }

    #[test]
    fn json_round_trips() {
        let imgs = [item("x", smooth(30, 30, 2))];
        let cfg = SweepConfig {
            kinds: vec![PredictorKind::L],
            blocks: vec![(4, 4)],
            seed: 3,
            timings: false,
        };
        let recs = er_table(&imgs, &cfg).unwrap();
        let mut out = Vec::new();
        write_records(&recs, ReportFormat::Json, &mut out).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 1);
        assert_eq!(v[0]["predictor"], "l");
        assert_eq!(v[0]["pure_bits"], recs[0].pure_bits);
    }

    #[test]
    fn config_seeds_differ() {
        let a = config_seed(1, "lena", PredictorKind::Gap, 2, 4);
        assert_ne!(a, config_seed(2, "lena", PredictorKind::Gap, 2, 4));
        assert_ne!(a, config_seed(1, "lena", PredictorKind::Med, 2, 4));
        assert_ne!(a, config_seed(1, "lena", PredictorKind::Gap, 4, 2));
        assert_eq!(a, config_seed(1, "lena", PredictorKind::Gap, 2, 4));
    }

    #[test]
    fn missing_reference_image_fails_its_check() {
        let checks = check_reference_rates(&[]);
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| !c.passed()));
    }

    #[test]
    fn load_corpus_reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        smooth(8, 8, 1).save_pgm(dir.path().join("good.pgm")).unwrap();
        fs::write(dir.path().join("bad.pgm"), b"P6 nope").unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let (imgs, fails) = load_corpus(dir.path()).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].id, "good");
        assert_eq!(fails.len(), 1);
        assert!(matches!(
            load_corpus(tempfile::tempdir().unwrap().path()),
            Err(ExperimentError::EmptyCorpus(_))
        ));
    }
}
