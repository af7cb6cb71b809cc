#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = fedspectra::data::idx::parse_idx_images(data) {
        // A successful parse must describe exactly the bytes it consumed.
        assert_eq!(images.pixels.len(), images.count * images.rows * images.cols);
    }
});
