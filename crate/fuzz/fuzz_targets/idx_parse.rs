#![no_main]

use hetdp_core::fedsim::data::{idx_dataset, parse_idx};
use libfuzzer_sys::fuzz_target;

// The first byte splits the input into an image file and a label file.
fuzz_target!(|data: &[u8]| {
    let Some((&split, rest)) = data.split_first() else { return };
    let cut = (split as usize * rest.len()) / 255;
    let (a, b) = rest.split_at(cut);
    let images = parse_idx(a);
    let labels = parse_idx(b);
    if let (Ok(images), Ok(labels)) = (images, labels) {
        if let Ok(shard) = idx_dataset(&images, &labels) {
            assert_eq!(shard.len(), labels.values.len());
        }
    }
});
