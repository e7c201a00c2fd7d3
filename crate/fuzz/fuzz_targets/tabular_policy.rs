#![no_main]

use ivr_core::mdp::{TokenId, Vocabulary};
use ivr_core::policy::TabularPolicy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let vocab = Vocabulary::new(6, TokenId(0)).expect("valid vocabulary");
    if let Ok(p) = TabularPolicy::from_json(vocab.clone(), text) {
        let again = TabularPolicy::from_json(vocab, &p.to_json()).expect("re-encoded table parses");
        assert_eq!(again.len(), p.len());
    }
});
