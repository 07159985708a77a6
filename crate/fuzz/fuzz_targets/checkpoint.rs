#![no_main]

use ffr_core::pipeline::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck).expect("decoded checkpoint re-encodes");
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again).expect("stable"), bytes);
    }
});
