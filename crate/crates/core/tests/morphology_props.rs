//! Labeling, largest-component and thinning checked against naive oracles.

mod checks;
mod oracles;

use airwayal::morphology::is_simple;
use airwayal::rng::{derived, RngExt};
use airwayal::volume::{BinaryMask, VolumeDims};
use oracles::{background_components, euler_simple};

#[test]
fn labeling_matches_flood_fill() {
    let bad = checks::labeling_mismatches();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn largest_component_matches_flood_fill() {
    let bad = checks::largest_mismatches();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn simple_point_test_matches_euler_oracle() {
    let mut rng = derived(3, "simple", 0);
    for i in 0..200_000u32 {
        // Sweep densities so both sparse and nearly full neighborhoods occur.
        let density = (i % 19) as f64 / 18.0;
        let nbhd = (0..27)
            .filter(|_| rng.random::<f64>() < density)
            .fold(0u32, |a, b| a | (1 << b));
        assert_eq!(is_simple(nbhd), euler_simple(nbhd), "neighborhood {nbhd:#029b}");
    }
}

#[test]
fn skeleton_invariants_on_fuzzed_masks() {
    let bad = checks::skeleton_fuzz_failures();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn euler_oracle_sanity() {
    // Solid cube 1, hollow cube (sphere) 2, square ring (circle) 0.
    let solid = BinaryMask::full(VolumeDims::cube(3));
    assert_eq!(checks::euler(&solid), 1);
    let mut hollow = solid.clone();
    hollow.set([1, 1, 1], false);
    assert_eq!(checks::euler(&hollow), 2);
    let ring = BinaryMask::from_voxels(
        VolumeDims::new(3, 3, 1).unwrap(),
        [
            [0, 0, 0],
            [1, 0, 0],
            [2, 0, 0],
            [0, 1, 0],
            [2, 1, 0],
            [0, 2, 0],
            [1, 2, 0],
            [2, 2, 0],
        ],
    );
    assert_eq!(checks::euler(&ring), 0);
    assert_eq!(background_components(&hollow), 2);
}
