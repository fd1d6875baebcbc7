#![no_main]

use libfuzzer_sys::fuzz_target;
use trnet::arch::ArchSpec;
use trnet::cost::arch_cost;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(arch) = ArchSpec::from_json(text) {
        let _ = arch_cost(&arch, 2, 1);
    }
});
