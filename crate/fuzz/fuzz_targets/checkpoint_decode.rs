#![no_main]
use lft::io::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        // anything accepted must re-encode to a checkpoint that decodes the same
        let bytes = c.encode().expect("re-encode");
        assert_eq!(Checkpoint::decode(&bytes).expect("re-decode"), c);
    }
});
