#![no_main]

use autoprobe::train::{load_model, save_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = load_model(data) {
        let mut first = Vec::new();
        save_model(&model, &mut first).unwrap();
        let mut second = Vec::new();
        save_model(&load_model(&first[..]).unwrap(), &mut second).unwrap();
        assert_eq!(first, second);
    }
});
