//! Data files compiled into the binary: the pipeline registry, prompt
//! templates, seed queries, the bundled persona corpus and the mock LLM
//! fixtures. The same files live under `crates/core/data/` and can be loaded
//! from disk instead.

use include_dir::{include_dir, Dir};

static DATA: Dir<'_> = include_dir!("$CARGO_MANIFEST_DIR/data");

/// Returns the embedded file at `path` (relative to the data directory).
pub fn file(path: &str) -> Option<&'static str> {
    DATA.get_file(path.trim_start_matches("./"))
        .and_then(|f| f.contents_utf8())
}

pub fn registry_toml() -> &'static str {
    file("registry.toml").expect("embedded registry")
}

pub fn personas_txt() -> &'static str {
    file("personas.txt").expect("embedded persona corpus")
}

/// Absolute path of the on-disk data directory this binary was built from.
pub fn source_dir() -> std::path::PathBuf {
    std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}
