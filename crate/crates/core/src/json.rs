//! Tolerant JSON extraction from free-form model output.

use serde_json::Value;

/// Find the first balanced `{...}` span in `text` that parses as a JSON
/// object. Returns the span and the parsed value.
pub fn first_json_object(text: &str) -> Option<(&str, Value)> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = balanced_end(bytes, open) {
            let span = &text[open..=close];
            if let Ok(value @ Value::Object(_)) = serde_json::from_str::<Value>(span) {
                return Some((span, value));
            }
        }
        start = open + 1;
    }
    None
}

/// Index of the brace closing the one at `open`, skipping string literals.
fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_object_in_prose() {
        let (span, v) = first_json_object("Here you go:\n```json\n{\"a\": \"}\", \"b\": {\"c\": 1}}\n```").unwrap();
        assert_eq!(span, "{\"a\": \"}\", \"b\": {\"c\": 1}}");
        assert_eq!(v["b"]["c"], 1);
    }

    #[test]
    fn skips_unparseable_braces() {
        let (_, v) = first_json_object("set {x} then {\"ok\": true}").unwrap();
        assert_eq!(v["ok"], true);
        assert!(first_json_object("Sorry, I cannot help").is_none());
        assert!(first_json_object("{\"unterminated\": ").is_none());
    }
}
