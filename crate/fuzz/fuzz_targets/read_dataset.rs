#![no_main]

use autoprobe::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(dataset) = Dataset::from_bytes(data.to_vec()) else {
        return;
    };
    // lazy reads and the eager check must agree
    let lazy_ok = dataset.samples().iter().all(|s| dataset.block(&s.id).is_ok());
    assert_eq!(lazy_ok, dataset.verify_payload().is_ok());
});
