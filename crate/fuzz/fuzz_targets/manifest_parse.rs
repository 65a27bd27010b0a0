#![no_main]

use avedit::cli::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = avedit::config::from_json_str::<RunManifest>(text);
    }
});
