use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const KE: &str = "000102030405060708090a0b0c0d0e0f";
const KD: &str = "f0e1d2c3b4a5968778695a4b3c2d1e0f";
const KS: &str = "0123456789abcdeffedcba9876543210";

fn rrbe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrbe"))
        .args(args)
        .output()
        .expect("failed to run rrbe")
}

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn embed_extract_recover_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus("extra/microaneurysms.pgm");
    let payload = dir.path().join("payload.bin");
    fs::write(&payload, b"a short secret message").unwrap();
    let marked = dir.path().join("marked.rrbe");
    let out_payload = dir.path().join("out.bin");
    let out_img = dir.path().join("out.pgm");

    let o = rrbe(&[
        "embed", "--in", s(&input), "--key-ke", KE, "--key-kd", KD, "--key-ks", KS, "--payload", s(&payload),
        "--pred", "al32", "--block", "2x4", "--nonce", "00112233445566778899aabb", "--out", s(&marked),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&fs::read(&marked).unwrap()[..5], b"RRBE1");

    let o = rrbe(&["extract", "--in", s(&marked), "--key-kd", KD, "--key-ks", KS, "--out", s(&out_payload)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&out_payload).unwrap(), fs::read(&payload).unwrap());

    let o = rrbe(&["recover", "--in", s(&marked), "--key-ke", KE, "--key-ks", KS, "--out", s(&out_img)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&out_img).unwrap(), fs::read(&input).unwrap());
}

#[test]
fn keys_can_come_from_files_and_wrong_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus("extra/microaneurysms.pgm");
    let payload = dir.path().join("p.bin");
    fs::write(&payload, [0xa5u8; 40]).unwrap();
    let ke_file = dir.path().join("ke.hex");
    fs::write(&ke_file, format!("{KE}\n")).unwrap();
    let marked = dir.path().join("m.rrbe");
    let o = rrbe(&[
        "embed", "--in", s(&input), "--key-ke", s(&ke_file), "--key-kd", KD, "--payload", s(&payload),
        "--pred", "med", "--out", s(&marked),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let out = dir.path().join("bad.bin");
    let o = rrbe(&["extract", "--in", s(&marked), "--key-kd", KE, "--out", s(&out)]);
    if o.status.success() {
        assert_ne!(fs::read(&out).unwrap(), fs::read(&payload).unwrap());
    }
    let img = dir.path().join("bad.pgm");
    let o = rrbe(&["recover", "--in", s(&marked), "--key-ke", KD, "--out", s(&img)]);
    if o.status.success() {
        assert_ne!(fs::read(&img).unwrap(), fs::read(&input).unwrap());
    }
    let o = rrbe(&["recover", "--in", s(&marked), "--key-ke", "not-a-key", "--out", s(&img)]);
    assert!(!o.status.success());
}

#[test]
fn embed_rejects_cb_and_oversized_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus("extra/microaneurysms.pgm");
    let payload = dir.path().join("p.bin");
    fs::write(&payload, b"x").unwrap();
    let marked = dir.path().join("m.rrbe");
    let o = rrbe(&[
        "embed", "--in", s(&input), "--key-ke", KE, "--key-kd", KD, "--payload", s(&payload), "--pred", "cb",
        "--out", s(&marked),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not causal"));

    fs::write(&payload, vec![0u8; 1 << 20]).unwrap();
    let o = rrbe(&[
        "embed", "--in", s(&input), "--key-ke", KE, "--key-kd", KD, "--payload", s(&payload), "--out", s(&marked),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds the maximum"));
}

#[test]
fn analyze_reports_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.csv");
    let o = rrbe(&[
        "analyze", "--in", s(&corpus("extra/microaneurysms.pgm")), s(&corpus("extra/chelsea.pgm")),
        "--pred", "gap,l,al32", "--block", "2x4,4x4", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3 * 2);

    let o = rrbe(&["analyze", "--in", s(&corpus("extra/microaneurysms.pgm")), "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 9);
}

#[test]
fn bench_is_reproducible_and_flags_partial_failures() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("c");
    fs::create_dir(&corpus_dir).unwrap();
    fs::copy(corpus("extra/microaneurysms.pgm"), corpus_dir.join("micro.pgm")).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let hist = dir.path().join("h.csv");
    for out in [&a, &b] {
        let o = rrbe(&[
            "bench", "--corpus", s(&corpus_dir), "--preds", "med,gap", "--blocks", "2x4,3x3", "--seed", "9",
            "--out", s(out), "--hist", s(&hist),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 1 + 4);
    assert!(fs::read_to_string(&hist).unwrap().contains("corpus-mean,cb"));

    fs::write(corpus_dir.join("broken.pgm"), b"P5 garbage").unwrap();
    let o = rrbe(&["bench", "--corpus", s(&corpus_dir), "--preds", "med", "--blocks", "2x4", "--out", s(&a)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.pgm"));
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 2);
}

#[test]
fn check_paper_fails_without_reference_images() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("c");
    fs::create_dir(&corpus_dir).unwrap();
    fs::copy(corpus("extra/microaneurysms.pgm"), corpus_dir.join("micro.pgm")).unwrap();
    let out = dir.path().join("r.csv");
    let o = rrbe(&[
        "bench", "--corpus", s(&corpus_dir), "--preds", "gap", "--blocks", "2x4", "--out", s(&out), "--check-paper",
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL lena/gap/2x4"));
}
