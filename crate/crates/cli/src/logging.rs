//! `key=value` log lines on stdout.

use std::io::Write;

/// Every record becomes `level=<lvl> <message>`; messages that are not
/// already `key=value` pairs are quoted into a `msg` field.
pub fn init(level: &str) {
    let filter = level.parse::<log::LevelFilter>().unwrap_or(log::LevelFilter::Info);
    env_logger::Builder::new()
        .filter_level(filter)
        .target(env_logger::Target::Stdout)
        .format(|buf, record| {
            let msg = record.args().to_string();
            let level = record.level().as_str().to_ascii_lowercase();
            if is_key_value(&msg) {
                writeln!(buf, "level={level} {msg}")
            } else {
                writeln!(buf, "level={level} msg={msg:?}")
            }
        })
        .init();
}

/// Space-separated `k=v` tokens; double-quoted values may contain spaces.
fn is_key_value(msg: &str) -> bool {
    if msg.is_empty() || msg.contains('\n') {
        return false;
    }
    let mut tokens = Vec::new();
    let (mut start, mut quoted, mut escaped) = (0, false, false);
    for (i, c) in msg.char_indices() {
        match c {
            _ if escaped => escaped = false,
            '\\' if quoted => escaped = true,
            '"' => quoted = !quoted,
            ' ' if !quoted => {
                tokens.push(&msg[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    tokens.push(&msg[start..]);
    !quoted && tokens.iter().all(|kv| kv.split_once('=').is_some_and(|(k, _)| !k.is_empty() && !k.contains('"')))
}

#[cfg(test)]
mod tests {
    use super::is_key_value;

    #[test]
    fn recognizes_pairs() {
        assert!(is_key_value("step=1 total=0.5"));
        assert!(!is_key_value("starting up"));
        assert!(!is_key_value("a=1 b"));
        assert!(!is_key_value("=1"));
        assert!(!is_key_value(""));
        assert!(is_key_value("event=x reason=\"too few frames\" n=3"));
        assert!(!is_key_value("reason=\"unterminated"));
    }
}
