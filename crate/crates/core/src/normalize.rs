//! Canonical value normalization.
//!
//! Slot names and values are compared after trimming surrounding Unicode
//! whitespace and lower-casing. Original spellings are kept for display.

use alloc::string::String;

/// Trim and case-fold a slot name or value.
pub fn normalize_value(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// True when `a` and `b` are the same value after normalization.
pub fn same_value(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}
