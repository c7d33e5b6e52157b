mod common;

use common::{check_case, primitive_cases};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for (i, c) in primitive_cases().iter().enumerate() {
        for seed in 0..3 {
            let err = check_case(c, 100 * i as u64 + seed).unwrap();
            if err > 1e-4 {
                failures.push(format!("{} (seed {seed}): {err:e}", c.name));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
