#![no_main]

use covaudit_cli::report::{parse_csv, to_csv_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_csv(text) {
        let again = parse_csv(&to_csv_string(&rows)).unwrap();
        assert_eq!(rows.len(), again.len());
    }
});
