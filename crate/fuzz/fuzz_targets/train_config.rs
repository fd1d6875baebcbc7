#![no_main]

use libfuzzer_sys::fuzz_target;
use trnet::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = TrainConfig::from_json(text, std::path::Path::new("."));
});
