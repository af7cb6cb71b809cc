#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = fedspectra::data::idx::parse_idx_labels(data) {
        assert_eq!(labels.len() + 8, data.len());
    }
});
