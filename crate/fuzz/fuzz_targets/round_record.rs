#![no_main]
use fedspectra::federation::RoundRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(record) = RoundRecord::from_json_line(line) {
        let Ok(text) = record.to_json_line() else {
            return;
        };
        let again = RoundRecord::from_json_line(&text).expect("serialized record parses");
        // NaN never compares equal, so compare the serialized forms.
        assert_eq!(again.to_json_line().ok(), Some(text));
    }
});
