use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;

use rrbe::cipher::{self, Key, Nonce};
use rrbe::experiment::{self, ReportFormat, SweepConfig};
use rrbe::image::GrayImage;
use rrbe::predict::PredictorKind;
use rrbe::{bits, codec, container, room};

#[derive(Parser)]
#[command(name = "rrbe", version, about = "Reversible data hiding in encrypted grayscale images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encrypt a PGM image and hide a payload in it.
    Embed(EmbedArgs),
    /// Read the hidden payload back (needs only the data-hider key).
    Extract(ExtractArgs),
    /// Rebuild the original image (needs only the content-owner key).
    Recover(RecoverArgs),
    /// Report per-image capacity without embedding anything.
    Analyze(AnalyzeArgs),
    /// Run a verified embedding-rate sweep over a corpus directory.
    Bench(BenchArgs),
}

#[derive(Args)]
struct EmbedArgs {
    /// Plaintext PGM image.
    #[arg(long = "in")]
    input: PathBuf,
    /// Content-owner key K_e: 32 hex characters or a file holding them.
    #[arg(long)]
    key_ke: String,
    /// Data-hider key K_d.
    #[arg(long)]
    key_kd: String,
    /// Optional shared key K_s that seals the header and labels.
    #[arg(long)]
    key_ks: Option<String>,
    /// File whose bytes form the payload.
    #[arg(long)]
    payload: PathBuf,
    #[arg(long, default_value = "gap")]
    pred: PredictorKind,
    #[arg(long, default_value = "2x4", value_parser = parse_block)]
    block: (usize, usize),
    /// 24 hex characters; a random nonce is drawn when omitted.
    #[arg(long)]
    nonce: Option<String>,
    /// Marked-image container to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    key_kd: String,
    #[arg(long)]
    key_ks: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    key_ke: String,
    #[arg(long)]
    key_ks: Option<String>,
    /// Recovered PGM image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// One or more PGM images.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Comma-separated predictors; all of them by default.
    #[arg(long, value_delimiter = ',')]
    pred: Vec<PredictorKind>,
    #[arg(long, value_delimiter = ',', default_value = "2x4", value_parser = parse_block)]
    block: Vec<(usize, usize)>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of PGM images.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated predictors; all causal ones by default.
    #[arg(long, value_delimiter = ',')]
    preds: Vec<PredictorKind>,
    #[arg(long, value_delimiter = ',', default_value = "2x4,3x3,4x4", value_parser = parse_block)]
    blocks: Vec<(usize, usize)>,
    /// Payload seed; the same seed reproduces the same report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding-rate report.
    #[arg(long)]
    out: PathBuf,
    /// Also write prediction-error histograms here.
    #[arg(long)]
    hist: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Compare against the published reference rates and fail outside tolerance.
    #[arg(long)]
    check_paper: bool,
    /// Record wall time per configuration (makes the report non-reproducible).
    #[arg(long)]
    timings: bool,
}

fn parse_block(s: &str) -> Result<(usize, usize), String> {
    let (q, w) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("block size {s:?} is not of the form QxW"))?;
    let q: usize = q.parse().map_err(|_| format!("bad block rows in {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad block cols in {s:?}"))?;
    if q == 0 || w == 0 || q > 255 || w > 255 {
        return Err(format!("block dimensions must be in 1..=255, got {s:?}"));
    }
    Ok((q, w))
}

/// Accepts the hex key itself or a path to a file containing it.
fn read_key(arg: &str) -> Result<Key> {
    if let Ok(k) = Key::from_hex(arg) {
        return Ok(k);
    }
    let text = fs::read_to_string(arg).with_context(|| format!("{arg:?} is neither a 32-hex-digit key nor a readable key file"))?;
    Key::from_hex(&text).with_context(|| format!("key file {arg}"))
}

fn read_optional_key(arg: Option<&String>) -> Result<Option<Key>> {
    arg.map(|a| read_key(a)).transpose()
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn embed(a: EmbedArgs) -> Result<ExitCode> {
    let img = GrayImage::load_pgm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let ke = read_key(&a.key_ke)?;
    let kd = read_key(&a.key_kd)?;
    let ks = read_optional_key(a.key_ks.as_ref())?;
    let nonce: Nonce = match &a.nonce {
        Some(n) => cipher::nonce_from_hex(n).context("nonce")?,
        None => {
            let mut n = [0u8; 12];
            rand::thread_rng().fill_bytes(&mut n);
            n
        }
    };
    let payload = bits::from_bytes(&fs::read(&a.payload).with_context(|| format!("reading {}", a.payload.display()))?);
    let (q, w) = a.block;
    let enc = codec::encrypt(&img, a.pred, q, w, &ke, nonce)?;
    let (marked, stats) = codec::embed_with_stats(&enc, &payload, Some(&kd), ks.as_ref())?;
    container::save(&marked, &a.out)?;
    let report = room::capacity_report(&enc.labels, &enc.grid, a.pred);
    eprintln!(
        "embedded {} payload bits; capacity {} bits, pure {} bits ({:.3} bpp), {} bits of fill",
        payload.len(),
        stats.capacity_bits,
        report.pure_bits,
        report.embedding_rate,
        stats.fill_bits
    );
    Ok(ExitCode::SUCCESS)
}

fn extract(a: ExtractArgs) -> Result<ExitCode> {
    let marked = container::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let kd = read_key(&a.key_kd)?;
    let ks = read_optional_key(a.key_ks.as_ref())?;
    let payload = codec::extract(&marked, Some(&kd), ks.as_ref())?;
    fs::write(&a.out, bits::to_bytes(&payload))?;
    eprintln!("extracted {} payload bits", payload.len());
    Ok(ExitCode::SUCCESS)
}

fn recover(a: RecoverArgs) -> Result<ExitCode> {
    let marked = container::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let ke = read_key(&a.key_ke)?;
    let ks = read_optional_key(a.key_ks.as_ref())?;
    let img = codec::recover_image(&marked, &ke, ks.as_ref())?;
    img.save_pgm(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct AnalyzeRow {
    image: String,
    predictor: String,
    #[serde(flatten)]
    report: room::CapacityReport,
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let kinds = if a.pred.is_empty() {
        PredictorKind::ALL.to_vec()
    } else {
        a.pred
    };
    let mut rows = Vec::new();
    for path in &a.input {
        let img = GrayImage::load_pgm(path).with_context(|| format!("reading {}", path.display()))?;
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        for &kind in &kinds {
            for &(q, w) in &a.block {
                let pre = room::preprocess(&img, kind, q, w)?;
                rows.push(AnalyzeRow {
                    image: id.clone(),
                    predictor: kind.name().to_string(),
                    report: pre.report(),
                });
            }
        }
    }
    let mut out = output(a.out.as_deref())?;
    match a.format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, &rows)?;
            writeln!(out)?;
        }
        Format::Csv => {
            writeln!(
                out,
                "image,predictor,q,w,blocks,total_bits,label_bits,coefficient_bits,pure_bits,pure_clamped,embedding_rate"
            )?;
            for r in &rows {
                let p = &r.report;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.image,
                    r.predictor,
                    p.q,
                    p.w,
                    p.blocks,
                    p.total_bits,
                    p.label_bits,
                    p.coefficient_bits,
                    p.pure_bits,
                    p.pure_clamped,
                    p.embedding_rate
                )?;
            }
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> Result<ExitCode> {
    let (images, failures) = experiment::load_corpus(&a.corpus)?;
    for f in &failures {
        eprintln!("skipping {}: {}", f.path.display(), f.error);
    }
    if images.is_empty() {
        bail!("no readable images in {}", a.corpus.display());
    }
    let kinds = if a.preds.is_empty() {
        PredictorKind::CAUSAL.to_vec()
    } else {
        a.preds
    };
    let cfg = SweepConfig {
        kinds: kinds.clone(),
        blocks: a.blocks,
        seed: a.seed,
        timings: a.timings,
    };
    let records = experiment::er_table(&images, &cfg)?;
    experiment::write_records(&records, a.format.into(), output(Some(&a.out))?)?;
    eprintln!("{} configurations verified on {} images", records.len(), images.len());
    for r in records.iter().filter(|r| r.status != experiment::RunStatus::Ok) {
        eprintln!("not embedded: {} / {} / {}x{}: {:?}", r.image, r.predictor, r.q, r.w, r.status);
    }

    if let Some(path) = &a.hist {
        let mut hist_kinds = kinds;
        if !hist_kinds.contains(&PredictorKind::Cb) {
            hist_kinds.insert(0, PredictorKind::Cb);
        }
        let stats = experiment::pe_histogram(&images, &hist_kinds);
        experiment::write_histogram(&stats, a.format.into(), output(Some(path))?)?;
    }

    let mut ok = failures.is_empty();
    if a.check_paper {
        for check in experiment::check_reference_rates(&records) {
            let verdict = if check.passed() { "PASS" } else { "FAIL" };
            eprintln!("{verdict} {check}");
            ok &= check.passed();
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Embed(a) => embed(a),
        Command::Extract(a) => extract(a),
        Command::Recover(a) => recover(a),
        Command::Analyze(a) => analyze(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
