#![no_main]

use asr_core::io::{read_trajectories, write_trajectories};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(batch) = read_trajectories(data) {
        let mut buf = Vec::new();
        write_trajectories(&batch, &mut buf).expect("parsed batches serialize");
        assert_eq!(read_trajectories(&buf[..]).expect("serialized batches parse"), batch);
    }
});
