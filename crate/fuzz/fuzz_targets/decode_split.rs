#![no_main]

use libfuzzer_sys::fuzz_target;
use p3dc_core::feature_store::decode_split;

fuzz_target!(|data: &[u8]| {
    if let Ok(split) = decode_split(data) {
        assert_eq!(split.values.len(), split.labels.len() * split.dim);
        assert!(split.values.iter().all(|v| v.is_finite()));
    }
});
