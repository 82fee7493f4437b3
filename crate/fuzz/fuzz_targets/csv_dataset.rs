#![no_main]

use hetdp_core::fedsim::data::read_csv_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(shard) = read_csv_dataset(data) {
        assert!(shard.labels().iter().all(|&l| l < shard.num_classes()));
        assert_eq!(shard.class_counts().iter().sum::<usize>(), shard.len());
    }
});
