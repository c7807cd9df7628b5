#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn nphd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nphd"))
        .current_dir(dir)
        .args(args)
        .env_remove("NPHD_ADMIN_SECRET")
        .output()
        .expect("spawn nphd")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = nphd(dir, args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "nphd {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Writes a 70,769-record corpus with the per-category counts of
/// `fixtures/category_counts.toml` and one-word headlines and bodies.
pub fn category_corpus(dir: &Path) -> PathBuf {
    let counts = fixtures().join("category_counts.toml");
    let out = dir.join("category_counts.jsonl");
    ok(
        dir,
        &[
            "synth",
            "--categories",
            counts.to_str().unwrap(),
            "--headline-words",
            "1-1",
            "--body-words",
            "1-1",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    out
}

pub const REFERENCE_TABLE: [(&str, u64); 10] = [
    ("News", 36_798),
    ("Sports", 18_767),
    ("Others(Mix)", 7_258),
    ("Opinion", 2_358),
    ("Entertainment", 2_144),
    ("Feature", 2_014),
    ("Diaspora", 750),
    ("World", 462),
    ("Education", 188),
    ("Blog", 30),
];
