#![no_main]

use libfuzzer_sys::fuzz_target;
use p3dc_core::feature_store::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_manifest(text) {
            // whatever parses must survive a round trip
            let again = parse_manifest(&m.to_json()).expect("re-parse");
            assert_eq!(again.to_json(), m.to_json());
        }
    }
});
