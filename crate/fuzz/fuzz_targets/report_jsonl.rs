#![no_main]

use covaudit_cli::report::{parse_jsonl, to_jsonl_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_jsonl(text) {
        let again = parse_jsonl(&to_jsonl_string(&records)).unwrap();
        assert_eq!(records.len(), again.len());
    }
});
