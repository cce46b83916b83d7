#![no_main]

use freespace::synth::manifest::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::decode(text) {
        let encoded = m.encode();
        let again = Manifest::decode(&encoded).expect("re-encoded manifest decodes");
        assert_eq!(again.encode(), encoded);
    }
});
