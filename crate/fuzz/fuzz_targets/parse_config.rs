#![no_main]
use cegcl::TrainConfig;
use libfuzzer_sys::fuzz_target;

// Input is a TOML document followed by `\0`-separated `key=value` overrides.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut parts = text.split('\0');
    let doc = parts.next().unwrap_or_default();
    let overrides: Vec<String> = parts.map(str::to_string).collect();
    if let Ok(config) = TrainConfig::from_toml_str(doc, &overrides) {
        assert_eq!(TrainConfig::from_toml_str(&config.to_toml(), &[]).unwrap(), config);
    }
    let _ = TrainConfig::from_json_str(doc, &overrides);
});
