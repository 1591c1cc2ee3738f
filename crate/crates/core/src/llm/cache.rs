//! Content-addressed response cache.
//!
//! Responses are keyed by a SHA-256 digest over every request field that can
//! influence the completion. The on-disk layout is `<dir>/<d0d1>/<digest>.txt`
//! holding the raw response text, so a rerun in a fresh process replays every
//! completion without contacting the provider.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};

use super::LlmRequest;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

fn put_field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

impl CacheKey {
    /// Digest over (provider, model, prompt, temperature, top-p, seed, stage).
    /// Fields are length-prefixed so no two distinct requests share an
    /// encoding.
    pub fn of(req: &LlmRequest) -> Self {
        let mut h = Sha256::new();
        h.update(b"codesynth-cache-v1");
        put_field(&mut h, req.provider.as_bytes());
        put_field(&mut h, req.model.as_bytes());
        put_field(&mut h, req.prompt.as_bytes());
        put_field(&mut h, &req.temperature.to_bits().to_le_bytes());
        put_field(&mut h, &req.top_p.to_bits().to_le_bytes());
        put_field(&mut h, &req.seed.to_le_bytes());
        put_field(&mut h, req.stage.as_str().as_bytes());
        Self(hex::encode(h.finalize()))
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Thread-safe cache with an in-memory layer over an optional directory.
///
/// Entries are immutable: once a key has a value, later `put`s for the same
/// key are ignored (values for one key are identical by construction).
#[derive(Debug, Default)]
pub struct ResponseCache {
    mem: RwLock<HashMap<CacheKey, Arc<str>>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            mem: RwLock::default(),
            dir: Some(dir),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn entry_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key.0[..2]).join(format!("{}.txt", key.0)))
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<str>> {
        if let Some(v) = self.mem.read().unwrap_or_else(|e| e.into_inner()).get(key) {
            return Some(v.clone());
        }
        let path = self.entry_path(key)?;
        let text: Arc<str> = std::fs::read_to_string(path).ok()?.into();
        self.mem
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .entry(key.clone())
            .or_insert_with(|| text.clone());
        Some(text)
    }

    pub fn put(&self, key: &CacheKey, text: &str) -> std::io::Result<()> {
        {
            let mut mem = self.mem.write().unwrap_or_else(|e| e.into_inner());
            if mem.contains_key(key) {
                return Ok(());
            }
            mem.insert(key.clone(), text.into());
        }
        if let Some(path) = self.entry_path(key) {
            if path.exists() {
                return Ok(());
            }
            let parent = path.parent().expect("entry has a parent");
            std::fs::create_dir_all(parent)?;
            let mut tmp = tempfile_in(parent)?;
            tmp.1.write_all(text.as_bytes())?;
            tmp.1.sync_all()?;
            drop(tmp.1);
            std::fs::rename(&tmp.0, &path)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.mem.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tempfile_in(dir: &Path) -> std::io::Result<(PathBuf, std::fs::File)> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let path = dir.join(format!(".tmp-{}-{n}", std::process::id()));
    let file = std::fs::File::create(&path)?;
    Ok((path, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Stage;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn req(prompt: &str, seed: u64) -> LlmRequest {
        LlmRequest {
            provider: "mock".into(),
            model: "m".into(),
            prompt: prompt.into(),
            temperature: 0.7,
            top_p: 1.0,
            seed,
            stage: Stage::Data,
        }
    }

    #[test]
    fn key_depends_on_every_field() {
        let base = req("p", 1);
        let k = CacheKey::of(&base);
        assert_eq!(k, CacheKey::of(&base.clone()));
        let variants = [
            LlmRequest {
                provider: "x".into(),
                ..base.clone()
            },
            LlmRequest {
                model: "x".into(),
                ..base.clone()
            },
            LlmRequest {
                prompt: "q".into(),
                ..base.clone()
            },
            LlmRequest {
                temperature: 0.3,
                ..base.clone()
            },
            LlmRequest {
                top_p: 0.9,
                ..base.clone()
            },
            LlmRequest {
                seed: 2,
                ..base.clone()
            },
            LlmRequest {
                stage: Stage::Code,
                ..base.clone()
            },
        ];
        for v in variants {
            assert_ne!(CacheKey::of(&v), k, "{v:?}");
        }
    }

    #[test]
    fn length_prefix_prevents_field_shifting() {
        let a = LlmRequest {
            provider: "ab".into(),
            model: "c".into(),
            ..req("p", 0)
        };
        let b = LlmRequest {
            provider: "a".into(),
            model: "bc".into(),
            ..req("p", 0)
        };
        assert_ne!(CacheKey::of(&a), CacheKey::of(&b));
    }

    #[test]
    fn no_collisions_in_a_million_random_requests() {
        // Every request is distinct by construction (the trial index is part
        // of the prompt); the other fields are randomized. Distinct 128-bit
        // key prefixes imply distinct keys.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut seen = HashSet::with_capacity(1_000_000);
        for i in 0..1_000_000u32 {
            let len = rng.gen_range(0..8);
            let suffix: String = (0..len)
                .map(|_| rng.gen_range(b'a'..=b'e') as char)
                .collect();
            let mut r = req(&format!("{i}:{suffix}"), rng.gen_range(0..4));
            r.temperature = f64::from(rng.gen_range(0..3u8)) / 2.0;
            r.top_p = if rng.gen_bool(0.5) { 1.0 } else { 0.95 };
            let key = CacheKey::of(&r);
            let prefix = u128::from_str_radix(&key.as_hex()[..32], 16).unwrap();
            assert!(seen.insert(prefix), "collision at trial {i}");
        }
    }

    #[test]
    fn persistent_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let key = CacheKey::of(&req("hello", 3));
        {
            let c = ResponseCache::persistent(dir.path()).unwrap();
            assert!(c.get(&key).is_none());
            c.put(&key, "world").unwrap();
        }
        let c = ResponseCache::persistent(dir.path()).unwrap();
        assert_eq!(c.get(&key).as_deref(), Some("world"));
        let on_disk = dir
            .path()
            .join(&key.as_hex()[..2])
            .join(format!("{key}.txt"));
        assert_eq!(std::fs::read_to_string(on_disk).unwrap(), "world");
    }

    #[test]
    fn entries_are_immutable() {
        let c = ResponseCache::in_memory();
        let key = CacheKey::of(&req("x", 0));
        c.put(&key, "first").unwrap();
        c.put(&key, "second").unwrap();
        assert_eq!(c.get(&key).as_deref(), Some("first"));
        assert_eq!(c.len(), 1);
    }
}
