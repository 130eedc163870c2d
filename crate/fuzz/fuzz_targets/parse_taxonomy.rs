#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = hiertax::taxonomy::parse_taxonomy_bytes(data) {
        let counts = h.level_counts();
        assert_eq!(counts.first(), Some(&h.leaves().len()));
        assert_eq!(counts.last(), Some(&1));
        assert!(counts.iter().sum::<usize>() >= h.len());
        for &leaf in h.leaves() {
            assert_eq!(h.level(leaf), 1);
            assert_eq!(h.tree_distance(leaf, h.root()).unwrap(), h.depth(leaf));
        }
    }
});
