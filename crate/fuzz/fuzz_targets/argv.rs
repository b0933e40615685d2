#![no_main]

use covaudit_cli::parse_config;
use libfuzzer_sys::fuzz_target;

// one argument per line, first line optionally "COVAUDIT_SEED=<value>"
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut lines = text.lines().peekable();
    let env_seed = lines
        .peek()
        .and_then(|l| l.strip_prefix("COVAUDIT_SEED="))
        .map(str::to_owned);
    if env_seed.is_some() {
        lines.next();
    }
    let argv: Vec<&str> = std::iter::once("covaudit").chain(lines).collect();
    if let Ok(config) = parse_config(argv, env_seed.as_deref()) {
        assert!(config.d >= 1 && config.trials >= 1);
    }
});
