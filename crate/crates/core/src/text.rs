//! Tweet text normalization and the target placeholder protocol.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::lm::PLACEHOLDER;
use crate::{Error, Result};

/// Emoji sequence to short plain-text description.
pub type EmojiTable = BTreeMap<String, String>;

/// Replaces the first occurrence of `target` in `text` with the placeholder.
pub fn substitute_target(text: &str, target: &str) -> Result<(String, String)> {
    match (target.is_empty(), text.find(target)) {
        (false, Some(at)) => {
            let mut out = String::with_capacity(text.len());
            out.push_str(&text[..at]);
            out.push_str(PLACEHOLDER);
            out.push_str(&text[at + target.len()..]);
            Ok((out, target.to_string()))
        }
        _ => Err(Error::TargetNotFound {
            text: text.to_string(),
            target: target.to_string(),
        }),
    }
}

/// One `(rewritten_text, target)` pair per distinct target of a tweet.
pub fn expand_targets(text: &str, targets: &[&str]) -> Result<Vec<(String, String)>> {
    let mut seen: Vec<&str> = Vec::new();
    let mut out = Vec::new();
    for &t in targets {
        if seen.contains(&t) {
            continue;
        }
        seen.push(t);
        out.push(substitute_target(text, t)?);
    }
    Ok(out)
}

fn replace_emojis(text: &str, table: &EmojiTable) -> String {
    let longest = table.keys().map(|k| k.chars().count()).max().unwrap_or(0);
    if longest == 0 {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'outer: while !rest.is_empty() {
        let bounds: Vec<usize> = rest
            .char_indices()
            .map(|(i, _)| i)
            .skip(1)
            .take(longest)
            .chain(core::iter::once(rest.len()))
            .collect();
        for &end in bounds.iter().take(longest).rev() {
            if let Some(desc) = table.get(&rest[..end]) {
                out.push_str(" (");
                out.push_str(&desc.to_lowercase());
                out.push_str(") ");
                rest = &rest[end..];
                continue 'outer;
            }
        }
        let c = rest.chars().next().expect("non-empty");
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn normalize_word(word: &str) -> String {
    let lower = word.to_lowercase();
    if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.") {
        return "url".to_string();
    }
    if let Some(handle) = lower.strip_prefix('@') {
        let end = handle
            .char_indices()
            .find(|&(_, c)| !(c.is_alphanumeric() || c == '_'))
            .map_or(handle.len(), |(i, _)| i);
        if end > 0 {
            return ["user", &handle[end..]].concat();
        }
    }
    if let Some(tag) = lower.strip_prefix('#') {
        if tag.chars().next().is_some_and(char::is_alphanumeric) {
            return normalize_word(tag);
        }
    }
    lower
}

/// Lowercases, maps `@handles` to `user` and URLs to `url`, strips the `#`
/// from hashtags, writes table emojis as `(description)`, and collapses
/// whitespace. The target placeholder is kept as is. Idempotent.
pub fn normalize_text(text: &str, emojis: &EmojiTable) -> String {
    let replaced = replace_emojis(text, emojis);
    let words: Vec<String> = replaced
        .split_whitespace()
        .map(|w| w.split(PLACEHOLDER).map(normalize_word).collect::<Vec<_>>().join(PLACEHOLDER))
        .collect();
    words.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> EmojiTable {
        [("🙂", "smile"), ("👍🏽", "Thumbs Up")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn substitution() {
        assert_eq!(substitute_target("jimmy rocks", "jimmy").unwrap(), ("$T$ rocks".into(), "jimmy".into()));
        assert_eq!(substitute_target("a b a", "a").unwrap().0, "$T$ b a");
        assert!(matches!(substitute_target("a b", "c"), Err(Error::TargetNotFound { .. })));
        let two = expand_targets("obama meets merkel", &["obama", "merkel", "obama"]).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].0, "obama meets $T$");
    }

    #[test]
    fn normalization_rules() {
        let t = table();
        assert_eq!(normalize_text("@bob check https://x.y 🙂", &t), "user check url (smile)");
        assert_eq!(normalize_text("#Great day", &t), "great day");
        assert_eq!(normalize_text("nice👍🏽!", &t), "nice (thumbs up) !");
        assert_eq!(normalize_text("  user   check ", &t), "user check");
        assert_eq!(normalize_text("@bob: hi", &t), "user: hi");
        assert_eq!(normalize_text("$T$'s Day", &t), "$T$'s day");
    }

    proptest! {
        #[test]
        fn idempotent(s in "([a-zA-Z@#:/.$ 🙂👍🏽]|\\$T\\$){0,40}") {
            let t = table();
            let once = normalize_text(&s, &t);
            prop_assert_eq!(normalize_text(&once, &t), once.clone());
        }
    }
}
