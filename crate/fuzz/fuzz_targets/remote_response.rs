#![no_main]

use ivr_core::policy::remote::parse_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&k, body)) = data.split_first() else { return };
    let k = usize::from(k % 32);
    if let Ok(d) = parse_response(body, k, 32) {
        d.validate(32).expect("accepted responses are valid distributions");
        let total: f64 = d.sampling_law(32).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
});
