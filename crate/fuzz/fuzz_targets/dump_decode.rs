#![no_main]
use lft::io::LatentDump;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = LatentDump::decode(data) {
        assert_eq!(d.encode().expect("re-encode"), data);
        for s in 0..d.n_slices() {
            let _ = d.rows(s, &[0, d.n_tokens - 1]);
        }
    }
});
