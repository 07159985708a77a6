#![no_main]

use ffr_core::config::RunConfig;
use libfuzzer_sys::fuzz_target;

// First line: config JSON (empty for defaults). Remaining lines: overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut lines = text.lines();
    let json = lines.next().unwrap_or("");
    let base = if json.trim().is_empty() {
        RunConfig::default()
    } else {
        match RunConfig::from_json(json) {
            Ok(c) => c,
            Err(_) => return,
        }
    };
    let overrides: Vec<&str> = lines.collect();
    if let Ok(cfg) = base.with_overrides(&overrides) {
        if cfg.validate().is_ok() {
            let back = RunConfig::from_json(&cfg.to_json()).expect("serialized config parses");
            assert_eq!(back.hash(), cfg.hash());
        }
    }
});
