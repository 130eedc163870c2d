#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = hiertax::ScoreField::from_bytes(data) {
        assert_eq!(f.to_bytes(), data);
    }
});
