#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = hiertax::config::parse_config(text) {
            let h = hiertax::parse_taxonomy(hiertax::TOY_TAXONOMY).unwrap();
            let mut s = hiertax::config::ToySettings {
                train: Default::default(),
                data: hiertax::synthetic::SyntheticConfig::for_hierarchy(&h, 10, 10),
            };
            let _ = s.apply(&entries);
        }
    }
});
