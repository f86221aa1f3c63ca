#![no_main]

use libfuzzer_sys::fuzz_target;
use p3dc_core::BasePrototypeSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(p) = BasePrototypeSet::from_json(text) {
            let again = BasePrototypeSet::from_json(&p.to_json()).expect("re-parse");
            assert_eq!(again, p);
        }
    }
});
