//! JSONL manifests of image-text examples.
//!
//! Each line is `{"id", "text", "target"?, "label", "image_path"}`. When a
//! target is given, its first occurrence in `text` is replaced by `$T$`
//! unless the text already carries the placeholder exactly once.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use vault_core::data::MultimodalExample;
use vault_core::image::RgbImage;
use vault_core::lm::PLACEHOLDER;
use vault_core::text::substitute_target;

use crate::imageio::read_image;
use crate::{Error, Result};

/// Parses manifest lines; blank lines are skipped. Errors carry the 1-based
/// line number.
pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<MultimodalExample>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: MultimodalExample = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !ids.insert(ex.id.clone()) {
            return Err(err(format!("duplicate id {:?}", ex.id)));
        }
        if let Some(target) = &ex.target {
            match ex.text.matches(PLACEHOLDER).count() {
                1 => {}
                0 => ex.text = substitute_target(&ex.text, target).map_err(|e| err(e.to_string()))?.0,
                n => return Err(err(format!("text holds the placeholder {n} times"))),
            }
        }
        out.push(ex);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LoadedExample {
    pub example: MultimodalExample,
    pub image: RgbImage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Excluded {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub examples: Vec<LoadedExample>,
    /// Examples whose image exists but does not decode.
    pub excluded: Vec<Excluded>,
}

pub fn resolve_image_path(manifest: &Path, image_path: &str) -> PathBuf {
    let p = Path::new(image_path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().unwrap_or(Path::new("")).join(p)
}

/// Reads the manifest and decodes every image. Missing image files are an
/// error naming all affected ids; undecodable images are excluded and
/// reported.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let parsed = parse_manifest(&text, path)?;
    let missing: Vec<String> = parsed
        .iter()
        .filter(|ex| !resolve_image_path(path, &ex.image_path).is_file())
        .map(|ex| ex.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    let mut examples = Vec::with_capacity(parsed.len());
    let mut excluded = Vec::new();
    for example in parsed {
        match read_image(&resolve_image_path(path, &example.image_path)) {
            Ok(image) => examples.push(LoadedExample { example, image }),
            Err(Error::Format { message, .. }) => excluded.push(Excluded {
                id: example.id,
                reason: message,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(Manifest {
        path: path.to_path_buf(),
        examples,
        excluded,
    })
}

pub fn manifest_line(example: &MultimodalExample) -> String {
    serde_json::to_string(example).expect("examples serialize")
}
