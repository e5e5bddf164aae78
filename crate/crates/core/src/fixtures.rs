//! Prebuilt guest programs used by the tests, the acceptance suite and the
//! CLI. The text sources live next to the binaries in `fixtures/`; the
//! binaries are checked in so the library does not need a WAT assembler.

use crate::kernel::vfs::{FsError, FsImage, ImageEntry};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    pub wasm: &'static [u8],
    pub wat: &'static str,
    /// Hex sha256 of `wasm`, as recorded in `fixtures/manifest.txt`.
    pub sha256: &'static str,
    pub usage: &'static str,
}

macro_rules! fixture {
    ($name:literal, $sha:literal, $usage:literal) => {
        Fixture {
            name: $name,
            wasm: include_bytes!(concat!("../fixtures/", $name, ".wasm")),
            wat: include_str!(concat!("../fixtures/", $name, ".wat")),
            sha256: $sha,
            usage: $usage,
        }
    };
}

pub const ALL: &[Fixture] = &[
    fixture!(
        "cat",
        "52f3d2ae899829b0fdfff68862493ecb865072cc166ccc3c021965f8455db77b",
        "cat [file...]: copy files (or stdin) to stdout"
    ),
    fixture!(
        "pipeline",
        "7a49e4dbda33f4b4c5072b04a9ea6e0e046a51b433e1ca2d29a32b8259da2664",
        "pipeline <program> [arg...]: feed stdin to <program> through a pipe"
    ),
    fixture!(
        "append_stress",
        "5a22e7ea384915a2a3cf43d470171c67df7d46d5275d4cb1bb6eedfe7f4222ef",
        "append_stress <path> <n>: n one-byte appends to <path>"
    ),
    fixture!(
        "matmul",
        "49b29204b01655fe11d35ff3fbefa5abbf442e4916ac6304220152290ebbe990",
        "matmul <ni> <nj> <nk> <out> [identity]: i32 matrix product written to <out>"
    ),
];

pub const MANIFEST: &str = include_str!("../fixtures/manifest.txt");

pub fn get(name: &str) -> Option<&'static Fixture> {
    ALL.iter().find(|f| f.name == name)
}

/// Guest path a fixture is installed under.
pub fn guest_path(name: &str) -> String {
    format!("/bin/{name}.wasm")
}

/// Adds every fixture to `image` under `/bin`.
pub fn install(image: &mut FsImage) -> Result<(), FsError> {
    if image.get("/bin").is_none() {
        image.insert("/bin".into(), ImageEntry::Directory)?;
    }
    for f in ALL {
        image.add_file(&guest_path(f.name), f.wasm)?;
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
