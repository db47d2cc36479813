#![no_main]
use libfuzzer_sys::fuzz_target;

const COMMANDS: [&str; 6] = ["toy2d", "teacher", "dump-latents", "recouple", "distill", "eval"];

fuzz_target!(|data: &[u8]| {
    let Some((&which, rest)) = data.split_first() else {
        return;
    };
    if let Ok(text) = std::str::from_utf8(rest) {
        let _ = lft::cli::check_config(COMMANDS[which as usize % COMMANDS.len()], text);
    }
});
