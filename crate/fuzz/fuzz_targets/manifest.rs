#![no_main]

use autoprobe::repr_store::validate_manifest;
use autoprobe::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = serde_json::from_slice::<DatasetManifest>(data) {
        let _ = validate_manifest(&manifest);
    }
});
