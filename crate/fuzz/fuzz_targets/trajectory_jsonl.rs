#![no_main]

use ivr_core::mdp::Trajectory;
use ivr_core::store::parse_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ts) = parse_jsonl(text) {
        for t in ts {
            let back = Trajectory::from_json_line(&t.to_json_line()).expect("re-encoded line parses");
            assert_eq!(back, t);
        }
    }
});
