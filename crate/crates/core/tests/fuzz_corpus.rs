//! Replays the checked-in fuzz seeds through the properties the fuzz targets
//! assert, so the corpus stays meaningful without a nightly toolchain.

use std::fs;
use std::path::{Path, PathBuf};

use trnet::arch::ArchSpec;
use trnet::cost::arch_cost;
use trnet::data::{parse_idx_images, parse_idx_labels};
use trnet::io::{decode_trt, encode_trt, Checkpoint};
use trnet::train::TrainConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|entry| {
            let path: PathBuf = entry.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&path).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn accepted(target: &str, ok: impl Fn(&[u8]) -> bool) -> Vec<String> {
    seeds(target)
        .into_iter()
        .filter(|(_, bytes)| ok(bytes))
        .map(|(name, _)| name)
        .collect()
}

#[test]
fn trt_seeds() {
    let ok = accepted("trt", |b| match decode_trt(b) {
        Ok(t) => {
            assert_eq!(encode_trt(&t), b);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["core_2x3x2", "matrix_2x3", "scalar"]);
}

#[test]
fn trm_seeds() {
    let ok = accepted("trm", |b| match Checkpoint::decode(b) {
        Ok(ck) => {
            assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["empty", "two_records"]);
}

#[test]
fn idx_seeds() {
    let ok = accepted("idx_images", |b| match parse_idx_images(b) {
        Ok(img) => {
            assert_eq!(img.pixels.len(), img.count * img.rows * img.cols);
            true
        }
        Err(_) => false,
    });
    assert_eq!(ok, ["empty", "two_2x3"]);
    let ok = accepted("idx_labels", |b| parse_idx_labels(b).is_ok());
    assert_eq!(ok, ["empty", "five"]);
}

#[test]
fn json_seeds() {
    let ok = accepted("arch_json", |b| {
        let arch = ArchSpec::from_json(std::str::from_utf8(b).unwrap());
        arch.is_ok_and(|a| arch_cost(&a, 2, 1).is_ok())
    });
    assert_eq!(
        ok,
        [
            "conv_pool.json",
            "empty_layers.json",
            "lenet300.json",
            "lenet5.json",
            "resnet32.json"
        ]
    );
    let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let ok = accepted("train_config", |b| {
        TrainConfig::from_json(std::str::from_utf8(b).unwrap(), &base).is_ok()
    });
    assert_eq!(ok, ["blobs_path_arch.json", "inline_sgd.json"]);
}
