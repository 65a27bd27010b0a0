#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Keep allocations small; the cap is checked before any value is read.
    if let Ok(latent) = avedit::grid::decode_with_cap(data, 1 << 16) {
        let bytes = avedit::grid::encode(&latent).expect("decoded latents re-encode");
        assert_eq!(bytes, data);
    }
});
