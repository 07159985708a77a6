#![no_main]

use ffr_core::synth::{read_manifest, write_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_manifest(data) {
        let mut out = Vec::new();
        write_manifest(&mut out, &rows, None).expect("rows serialize");
        let back = read_manifest(out.as_slice()).expect("written manifest parses");
        assert_eq!(back, rows);
    }
});
