//! Emoji tables and vocabulary files.

use std::fs;
use std::path::Path;

use vault_core::lm::Vocabulary;
use vault_core::text::EmojiTable;

use crate::{Error, Result};

/// Reads a sequence written either literally or as code points such as
/// `U+1F44D U+1F3FD` (the `U+` is optional).
fn parse_sequence(field: &str) -> Option<String> {
    let parts: Vec<&str> = field.split_whitespace().collect();
    let codepoints: Option<String> = parts
        .iter()
        .map(|p| {
            let hex = p.strip_prefix("U+").or_else(|| p.strip_prefix("u+")).unwrap_or(p);
            if hex.len() < 4 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
                return None;
            }
            u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
        })
        .collect();
    match codepoints {
        Some(s) if !parts.is_empty() => Some(s),
        _ => {
            let literal = field.trim();
            (!literal.is_empty()).then(|| literal.to_string())
        }
    }
}

/// Parses `sequence<TAB>description` lines. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_emoji_table(text: &str, path: &Path) -> Result<EmojiTable> {
    let mut table = EmojiTable::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.into(),
        };
        let (seq, desc) = line.split_once('\t').ok_or_else(|| err("expected sequence<TAB>description"))?;
        let seq = parse_sequence(seq).ok_or_else(|| err("empty emoji sequence"))?;
        let desc = desc.trim();
        if desc.is_empty() {
            return Err(err("empty description"));
        }
        table.insert(seq, desc.to_string());
    }
    Ok(table)
}

pub fn load_emoji_table(path: &Path) -> Result<EmojiTable> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_emoji_table(&text, path)
}

/// One token per line, in id order.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let tokens = text.lines().map(str::to_string).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| Error::format(path, e))
}
