#![no_main]

use ivr_core::mdp::State;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = State::parse_key(text) {
        assert_eq!(State::parse_key(&s.key()).expect("canonical key parses"), s);
    }
});
