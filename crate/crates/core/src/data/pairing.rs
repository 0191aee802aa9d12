//! Matching image and label files by an identifier taken from file names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;

use crate::error::{Error, Result};

/// Leading characters up to the first `_` (or the whole stem without one).
pub const DEFAULT_ID_PATTERN: &str = r"^([^_.]+)";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairing {
    /// Sorted by identifier.
    pub pairs: Vec<Pair>,
    pub unmatched_images: Vec<PathBuf>,
    pub unmatched_labels: Vec<PathBuf>,
}

/// The identifier of a path: capture group 1 of `pattern` (or the whole
/// match) applied to the file name.
pub fn identifier(path: &Path, pattern: &Regex) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let caps = pattern.captures(name)?;
    let m = caps.get(1).or_else(|| caps.get(0))?;
    (!m.as_str().is_empty()).then(|| m.as_str().to_string())
}

fn index(paths: &[PathBuf], pattern: &Regex, what: &str, unmatched: &mut Vec<PathBuf>) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for p in paths {
        match identifier(p, pattern) {
            Some(id) => {
                if let Some(prev) = map.insert(id.clone(), p.clone()) {
                    return Err(Error::invalid(format!(
                        "duplicate {what} identifier `{id}`: {} and {}",
                        prev.display(),
                        p.display()
                    )));
                }
            }
            None => unmatched.push(p.clone()),
        }
    }
    Ok(map)
}

/// Pairs every identifier present on both sides. Files without a partner
/// (or without an identifier) are reported rather than dropped.
pub fn pair_by_identifier(images: &[PathBuf], labels: &[PathBuf], pattern: &Regex) -> Result<Pairing> {
    let mut out = Pairing::default();
    let imgs = index(images, pattern, "image", &mut out.unmatched_images)?;
    let mut labs = index(labels, pattern, "label", &mut out.unmatched_labels)?;
    for (id, image) in imgs {
        match labs.remove(&id) {
            Some(label) => out.pairs.push(Pair { id, image, label }),
            None => out.unmatched_images.push(image),
        }
    }
    out.unmatched_labels.extend(labs.into_values());
    out.unmatched_images.sort();
    out.unmatched_labels.sort();
    Ok(out)
}
