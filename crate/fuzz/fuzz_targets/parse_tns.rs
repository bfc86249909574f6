#![no_main]

use libfuzzer_sys::fuzz_target;
use shardkrp::tns::{parse_tns, write_tns, ParseOptions};

fuzz_target!(|data: &[u8]| {
    for coalesce in [false, true] {
        let opts = ParseOptions {
            coalesce_duplicates: coalesce,
            ..Default::default()
        };
        let Ok(loaded) = parse_tns(data, &opts) else { continue };
        let mut text = Vec::new();
        write_tns(&loaded.tensor, &mut text).unwrap();
        let again = parse_tns(&text[..], &ParseOptions::default()).expect("written tensor parses");
        assert_eq!(again.tensor, loaded.tensor);
    }
});
