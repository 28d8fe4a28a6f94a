#![no_main]

use libfuzzer_sys::fuzz_target;
use switching_mdp_cli::{Experiment, ExperimentConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if ExperimentConfig::parse(text).is_ok() {
        // Model construction must reject bad parameters without panicking.
        let _ = Experiment::from_str(text, std::path::Path::new("."), None);
    }
});
