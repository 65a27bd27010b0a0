#![no_main]

use libfuzzer_sys::fuzz_target;

// Input is "source\ntarget".
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (source, target) = text.split_once('\n').unwrap_or((text, ""));
    let (Ok(source), Ok(target)) = (avedit::attention::tokenize(source), avedit::attention::tokenize(target)) else {
        return;
    };
    let alignment = avedit::attention::compute_alignment(&source, &target);
    assert_eq!(alignment.target_len(), target.len());
    for m in alignment.mapping().iter().flatten() {
        assert!(*m < source.len());
    }
});
