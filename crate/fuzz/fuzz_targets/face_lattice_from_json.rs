#![no_main]

use libfuzzer_sys::fuzz_target;
use morseflow::strata::{product_faces, FaceLattice};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(lattice) = FaceLattice::from_json(text) else { return };
    // Anything accepted must survive a round trip and a product with an
    // interval.
    let again = FaceLattice::from_json(&lattice.to_json()).expect("round trip");
    assert_eq!(again, lattice);
    if lattice.strata.len() <= 64 {
        product_faces(&lattice, &FaceLattice::interval()).validate().expect("product validates");
    }
});
