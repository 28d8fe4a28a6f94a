//! Runs the fuzz corpus seeds, plus cheap byte mutations of them, through
//! the parsers on stable. The real fuzzers live in `fuzz/`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use switching_mdp_cli::csvio::parse_table;
use switching_mdp_cli::{Experiment, ExperimentConfig};

fn seeds(dir: &str) -> Vec<Vec<u8>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(dir);
    let mut out: Vec<Vec<u8>> = fs::read_dir(&root)
        .unwrap()
        .map(|e| fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!out.is_empty(), "no seeds in {}", root.display());
    out.sort();
    out
}

fn mutations(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    const BYTES: &[u8] = b"0123456789.,-+eE[]{}=\"#\n \tnaif";
    (0..200)
        .map(|_| {
            let mut m = seed.to_vec();
            for _ in 0..rng.gen_range(1..4) {
                let pos = rng.gen_range(0..=m.len());
                match rng.gen_range(0..3) {
                    0 if pos < m.len() => {
                        m.remove(pos);
                    }
                    1 if pos < m.len() => m[pos] = BYTES[rng.gen_range(0..BYTES.len())],
                    _ => m.insert(pos, BYTES[rng.gen_range(0..BYTES.len())]),
                }
            }
            m
        })
        .collect()
}

#[test]
fn config_parser_survives_seeds_and_mutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut accepted = 0;
    for seed in seeds("config") {
        for input in std::iter::once(seed.clone()).chain(mutations(&seed, &mut rng)) {
            let Ok(text) = std::str::from_utf8(&input) else { continue };
            if ExperimentConfig::parse(text).is_ok() {
                accepted += 1;
                let _ = Experiment::from_str(text, Path::new("."), None);
            }
        }
    }
    assert!(accepted > 0);
}

#[test]
fn csv_reader_survives_seeds_and_mutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut accepted = 0;
    for seed in seeds("path_csv") {
        for input in std::iter::once(seed.clone()).chain(mutations(&seed, &mut rng)) {
            let Ok(text) = std::str::from_utf8(&input) else { continue };
            if let Ok(t) = parse_table(text) {
                accepted += 1;
                assert!(t.rows.iter().all(|r| r.len() == t.columns.len()));
                assert!(t.rows.iter().flatten().all(|v| v.is_finite()));
            }
        }
    }
    assert!(accepted > 0);
}
