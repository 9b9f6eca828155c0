//! Versioned prompt templates.
//!
//! Templates are plain text files under `prompts/` with `{{name}}`
//! placeholders. The defaults are compiled in; a different set can be loaded
//! at runtime through [`PromptSet::from_lookup`].

use alloc::string::{String, ToString};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub version: String,
    pub extract_iterchat_system: String,
    pub extract_multi_turn_system: String,
    pub realize_system: String,
    pub realize_user: String,
    pub draft_system: String,
    pub draft_user: String,
    pub draft_values_user: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            version: include_str!("../prompts/VERSION").trim().to_string(),
            extract_iterchat_system: include_str!("../prompts/extract_iterchat_system.txt").to_string(),
            extract_multi_turn_system: include_str!("../prompts/extract_multi_turn_system.txt").to_string(),
            realize_system: include_str!("../prompts/realize_system.txt").to_string(),
            realize_user: include_str!("../prompts/realize_user.txt").to_string(),
            draft_system: include_str!("../prompts/draft_system.txt").to_string(),
            draft_user: include_str!("../prompts/draft_user.txt").to_string(),
            draft_values_user: include_str!("../prompts/draft_values_user.txt").to_string(),
        }
    }
}

impl PromptSet {
    /// File names (without directory) of every template, in field order.
    pub const FILES: [&'static str; 8] = [
        "VERSION",
        "extract_iterchat_system.txt",
        "extract_multi_turn_system.txt",
        "realize_system.txt",
        "realize_user.txt",
        "draft_system.txt",
        "draft_user.txt",
        "draft_values_user.txt",
    ];

    /// Build a set from `lookup(file_name)`, falling back to the compiled-in
    /// template for any file the lookup does not provide.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Self {
        let mut set = Self::default();
        let fields: [&mut String; 8] = [
            &mut set.version,
            &mut set.extract_iterchat_system,
            &mut set.extract_multi_turn_system,
            &mut set.realize_system,
            &mut set.realize_user,
            &mut set.draft_system,
            &mut set.draft_user,
            &mut set.draft_values_user,
        ];
        for (name, field) in Self::FILES.iter().zip(fields) {
            if let Some(text) = lookup(name) {
                *field = text;
            }
        }
        set.version = set.version.trim().to_string();
        set
    }

    /// Substitute `{{key}}` placeholders. Unknown placeholders are left as is.
    pub fn render(&self, template: &str, vars: &[(&str, &str)]) -> String {
        let mut out = template.to_string();
        for (key, value) in vars {
            let needle = alloc::format!("{{{{{key}}}}}");
            out = out.replace(&needle, value);
        }
        out.trim_end().to_string()
    }
}
