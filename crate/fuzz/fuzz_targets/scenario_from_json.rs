#![no_main]

use libfuzzer_sys::fuzz_target;
use morseflow::scenario::Scenario;

fuzz_target!(|data: &[u8]| {
    // Rejections are fine; panics are not.
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Scenario::from_json(text);
    }
});
