#![no_main]

use freespace::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let ini = cfg.to_ini();
        let again = RunConfig::parse(&ini).expect("printed config parses");
        assert_eq!(again.to_ini(), ini);
    }
});
