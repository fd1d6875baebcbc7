#![no_main]

use libfuzzer_sys::fuzz_target;
use trnet::io::{decode_trt, encode_trt};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_trt(data) {
        assert_eq!(encode_trt(&t), data);
    }
});
