#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(resolved) = avedit::config::parse_edit_config(text) {
            let _ = avedit::config::check_config(&resolved.config);
        }
    }
});
