#![no_main]

use libfuzzer_sys::fuzz_target;
use shardkrp::partition::{decode_plan, encode_plan};

fuzz_target!(|data: &[u8]| {
    if let Ok(plan) = decode_plan(data) {
        let bytes = encode_plan(&plan);
        assert_eq!(decode_plan(&bytes).expect("re-encoded plan decodes"), plan);
    }
});
