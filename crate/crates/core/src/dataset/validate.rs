use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Component, Path};

use serde::Serialize;

use super::shard::MANIFEST_FILE;
use super::{DatasetRecord, RECORD_KEYS};
use crate::render::RenderedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    ManifestMissing,
    ManifestParse,
    SchemaKeys,
    NonCanonical,
    DuplicateId,
    Unsorted,
    ImagePath,
    MissingImage,
    UndecodableImage,
    DimensionMismatch,
    UnreferencedImage,
    EmptyQa,
    EmptyPoints,
    CoordinateRange,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::ManifestMissing => "manifest-missing",
            ViolationKind::ManifestParse => "manifest-parse",
            ViolationKind::SchemaKeys => "schema-keys",
            ViolationKind::NonCanonical => "non-canonical",
            ViolationKind::DuplicateId => "duplicate-id",
            ViolationKind::Unsorted => "unsorted",
            ViolationKind::ImagePath => "image-path",
            ViolationKind::MissingImage => "missing-image",
            ViolationKind::UndecodableImage => "undecodable-image",
            ViolationKind::DimensionMismatch => "dimension-mismatch",
            ViolationKind::UnreferencedImage => "unreferenced-image",
            ViolationKind::EmptyQa => "empty-qa",
            ViolationKind::EmptyPoints => "empty-points",
            ViolationKind::CoordinateRange => "coordinate-range",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub record_id: Option<String>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.record_id {
            Some(id) => write!(f, "{} [{}]: {}", self.kind.as_str(), id, self.detail),
            None => write!(f, "{}: {}", self.kind.as_str(), self.detail),
        }
    }
}

fn v(kind: ViolationKind, id: Option<&str>, detail: impl Into<String>) -> Violation {
    Violation {
        kind,
        record_id: id.map(str::to_string),
        detail: detail.into(),
    }
}

/// Read-only structural check of a shard directory. An empty result means
/// the shard is valid.
pub fn validate_shard(dir: &Path) -> Vec<Violation> {
    let mut out = Vec::new();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) => {
            out.push(v(
                ViolationKind::ManifestMissing,
                None,
                format!("{}: {e}", manifest_path.display()),
            ));
            return out;
        }
    };
    let mut ids = HashSet::new();
    let mut referenced = BTreeSet::new();
    let mut prev_id: Option<String> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(val) => val,
            Err(e) => {
                out.push(v(
                    ViolationKind::ManifestParse,
                    None,
                    format!("line {line_no}: {e}"),
                ));
                continue;
            }
        };
        let id_hint = value.get("id").and_then(|i| i.as_str()).map(str::to_string);
        let keys: Vec<&str> = value
            .as_object()
            .map(|o| o.keys().map(String::as_str).collect())
            .unwrap_or_default();
        let mut expected: Vec<&str> = RECORD_KEYS.to_vec();
        expected.sort_unstable();
        if keys != expected {
            out.push(v(
                ViolationKind::SchemaKeys,
                id_hint.as_deref(),
                format!("line {line_no}: keys {keys:?}, expected {:?}", RECORD_KEYS),
            ));
            continue;
        }
        let record: DatasetRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                out.push(v(
                    ViolationKind::SchemaKeys,
                    id_hint.as_deref(),
                    format!("line {line_no}: {e}"),
                ));
                continue;
            }
        };
        let id = record.id.as_str();
        if serde_json::to_string(&record).ok().as_deref() != Some(line) {
            out.push(v(
                ViolationKind::NonCanonical,
                Some(id),
                format!("line {line_no} is not in canonical key order/format"),
            ));
        }
        if !ids.insert(record.id.clone()) {
            out.push(v(
                ViolationKind::DuplicateId,
                Some(id),
                format!("line {line_no}"),
            ));
        }
        if prev_id.as_deref().is_some_and(|p| p > id) {
            out.push(v(
                ViolationKind::Unsorted,
                Some(id),
                format!("line {line_no} sorts before the previous id"),
            ));
        }
        prev_id = Some(record.id.clone());
        check_record(dir, &record, &mut out);
        referenced.insert(record.image.clone());
    }
    if let Ok(entries) = fs::read_dir(dir.join("images")) {
        let mut names: Vec<String> = entries
            .flatten()
            .map(|e| format!("images/{}", e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        for n in names.into_iter().filter(|n| !referenced.contains(n)) {
            out.push(v(ViolationKind::UnreferencedImage, None, n));
        }
    }
    out
}

fn check_record(dir: &Path, r: &DatasetRecord, out: &mut Vec<Violation>) {
    let id = Some(r.id.as_str());
    let rel = Path::new(&r.image);
    let inside = rel.components().all(|c| matches!(c, Component::Normal(_)))
        && rel.starts_with("images")
        && r.image == format!("images/{}.png", r.id);
    if !inside {
        out.push(v(ViolationKind::ImagePath, id, r.image.clone()));
    } else {
        let path = dir.join(rel);
        if !path.is_file() {
            out.push(v(ViolationKind::MissingImage, id, r.image.clone()));
        } else {
            match RenderedImage::open(&path) {
                Ok(img) if (img.width, img.height) != (r.width, r.height) => out.push(v(
                    ViolationKind::DimensionMismatch,
                    id,
                    format!(
                        "manifest {}x{}, file {}x{}",
                        r.width, r.height, img.width, img.height
                    ),
                )),
                Ok(_) => {}
                Err(e) => out.push(v(ViolationKind::UndecodableImage, id, e)),
            }
        }
    }
    if r.category.is_pointing() {
        if r.points.is_empty() || r.points.iter().any(|p| p.points.is_empty()) {
            out.push(v(
                ViolationKind::EmptyPoints,
                id,
                "pointing record without points",
            ));
        }
        for ann in &r.points {
            if ann.points.len() != ann.pixel_points.len() {
                out.push(v(
                    ViolationKind::CoordinateRange,
                    id,
                    "points and pixel_points differ in length",
                ));
            }
            for p in &ann.points {
                if !p.iter().all(|c| (0.0..=100.0).contains(c)) {
                    out.push(v(
                        ViolationKind::CoordinateRange,
                        id,
                        format!("({}, {})", p[0], p[1]),
                    ));
                }
            }
        }
    } else if r.qa.is_empty() {
        out.push(v(ViolationKind::EmptyQa, id, "QA record without triplets"));
    }
}

#[cfg(test)]
mod tests {
    use super::super::shard::{write_shard, WriteOptions};
    use super::super::testutil::record;
    use super::*;
    use crate::pipeline::Category;

    fn shard() -> (tempfile::TempDir, std::path::PathBuf) {
        let tmp = tempfile::tempdir().unwrap();
        let recs = vec![
            record(tmp.path(), "0001", Category::Charts, "a", 2),
            record(tmp.path(), "0002", Category::Pointing, "b", 0),
        ];
        let dir = tmp.path().join("shard");
        write_shard(recs, &dir, &WriteOptions::default()).unwrap();
        (tmp, dir)
    }

    fn kinds(dir: &Path) -> Vec<ViolationKind> {
        validate_shard(dir).into_iter().map(|v| v.kind).collect()
    }

    #[test]
    fn fresh_shard_passes() {
        let (_t, dir) = shard();
        assert_eq!(validate_shard(&dir), vec![]);
    }

    #[test]
    fn missing_image_is_reported() {
        let (_t, dir) = shard();
        fs::remove_file(dir.join("images/0001.png")).unwrap();
        let vs = validate_shard(&dir);
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0].kind, ViolationKind::MissingImage);
        assert_eq!(vs[0].record_id.as_deref(), Some("0001"));
    }

    #[test]
    fn out_of_range_coordinate_is_reported() {
        let (_t, dir) = shard();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut rec: DatasetRecord = serde_json::from_str(&lines[1]).unwrap();
        rec.points[0].points[0][0] = 101.0;
        lines[1] = serde_json::to_string(&rec).unwrap();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert_eq!(kinds(&dir), vec![ViolationKind::CoordinateRange]);
    }

    #[test]
    fn structural_problems() {
        let (_t, dir) = shard();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        fs::write(&path, format!("{}\n{}\n{{oops\n", lines[1], lines[0])).unwrap();
        let k = kinds(&dir);
        assert!(k.contains(&ViolationKind::Unsorted));
        assert!(k.contains(&ViolationKind::ManifestParse));

        fs::write(&path, format!("{}\n{}\n", lines[0], lines[0])).unwrap();
        let k = kinds(&dir);
        assert!(k.contains(&ViolationKind::DuplicateId));
        assert!(k.contains(&ViolationKind::UnreferencedImage));

        fs::write(&path, "{\"id\":\"x\"}\n").unwrap();
        assert_eq!(kinds(&dir)[0], ViolationKind::SchemaKeys);
        fs::remove_file(&path).unwrap();
        assert_eq!(kinds(&dir), vec![ViolationKind::ManifestMissing]);
    }
}
