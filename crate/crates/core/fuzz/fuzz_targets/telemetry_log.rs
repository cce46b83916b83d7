#![no_main]

use freespace::annotation::{annotate_log, parse_log, write_log, AnnotationConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_log(text) {
        let again = parse_log(&write_log(&records)).expect("written log parses");
        assert_eq!(write_log(&again), write_log(&records));
        if let Ok(labels) = annotate_log(&records, &AnnotationConfig::default()) {
            let mut ids: Vec<u64> = labels.iter().map(|l| l.frame_id).collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), labels.len());
        }
    }
});
