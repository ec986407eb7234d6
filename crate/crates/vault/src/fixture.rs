use std::fs;
use std::path::{Path, PathBuf};

use vault_core::data::MultimodalExample;
use vault_core::fixture::make_synthetic_fixture;

use crate::imageio::{write_image, ImageKind};
use crate::manifest::manifest_line;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `images/<id>.<ext>` and `manifest.jsonl` under `out`; returns the
/// manifest path. The text keeps the target name in place.
pub fn write_fixture(out: &Path, n: usize, seed: u64, kind: ImageKind) -> Result<PathBuf> {
    let examples = make_synthetic_fixture(n, seed)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(Error::io(&images))?;
    let mut manifest = String::new();
    for ex in &examples {
        let rel = format!("images/{}.{}", ex.id, kind.extension());
        write_image(&out.join(&rel), &ex.image, kind)?;
        let record = MultimodalExample {
            id: ex.id.clone(),
            text: ex.text.clone(),
            target: Some(ex.target.clone()),
            label: ex.label,
            image_path: rel,
        };
        manifest.push_str(&manifest_line(&record));
        manifest.push('\n');
    }
    let path = out.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(Error::io(&path))?;
    Ok(path)
}
