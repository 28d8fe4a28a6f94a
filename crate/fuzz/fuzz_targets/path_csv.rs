#![no_main]

use libfuzzer_sys::fuzz_target;
use switching_mdp_cli::csvio::parse_table;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(table) = parse_table(text) {
        for name in &table.columns {
            assert!(table.column(name).is_some());
        }
    }
});
