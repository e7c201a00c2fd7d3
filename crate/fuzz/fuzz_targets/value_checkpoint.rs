#![no_main]

use ivr_core::mdp::{State, TokenId};
use ivr_core::value::{AnyValue, ValueFunction};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = AnyValue::from_checkpoint_json(data) {
        let again = AnyValue::from_checkpoint_json(v.to_checkpoint_json().as_bytes())
            .expect("re-encoded checkpoint loads");
        let s = State::with_generated(vec![TokenId(1)], vec![TokenId(2)]);
        assert_eq!(v.evaluate(&s).to_bits(), again.evaluate(&s).to_bits());
    }
});
