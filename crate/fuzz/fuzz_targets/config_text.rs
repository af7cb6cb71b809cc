#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = fedspectra::config::parse_config_str(text) {
        let text = config.to_text();
        let again = fedspectra::config::parse_config_str(&text).expect("serialized config parses");
        // Compare text, not values: NaN fields never compare equal.
        assert_eq!(again.to_text(), text);
    }
});
