#![no_main]

use freespace::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode(data) {
        assert_eq!(encode(&params), data);
    }
});
