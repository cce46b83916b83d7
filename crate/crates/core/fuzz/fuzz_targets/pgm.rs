#![no_main]

use freespace::synth::pgm::Pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = Pgm::decode(text) {
        let again = Pgm::decode(&p.encode()).expect("re-encoded PGM decodes");
        assert_eq!(again.encode(), p.encode());
        assert!(p.to_unit().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
