#![no_main]

use autoprobe::oracles::OracleConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = OracleConfig::from_json(data);
});
