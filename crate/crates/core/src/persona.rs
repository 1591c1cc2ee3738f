//! Persona corpus: one short identity sentence per line, sampled uniformly
//! per job to diversify topic generation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum PersonaError {
    #[error("failed to read persona corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("persona corpus contains no personas")]
    EmptyCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: u32,
    pub text: String,
}

/// Immutable persona corpus. Ids are dense line-order indices over the
/// non-blank lines.
#[derive(Debug, Clone)]
pub struct PersonaStore {
    personas: Vec<Persona>,
}

impl PersonaStore {
    /// Builds a store from corpus text. Blank lines are skipped; every other
    /// line is trimmed and becomes one persona.
    pub fn from_text(text: &str) -> Result<Self, PersonaError> {
        let personas: Vec<Persona> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| Persona {
                id: i as u32,
                text: l.to_string(),
            })
            .collect();
        if personas.is_empty() {
            return Err(PersonaError::EmptyCorpus);
        }
        Ok(Self { personas })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PersonaError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PersonaError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// The small corpus bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_text(crate::assets::personas_txt()).expect("bundled corpus is non-empty")
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Persona> {
        self.personas.get(id as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Persona> {
        self.personas.iter()
    }

    /// Uniform draw from the store; a pure function of (contents, seed).
    pub fn sample(&self, seed: u64) -> Result<&Persona, PersonaError> {
        if self.personas.is_empty() {
            return Err(PersonaError::EmptyCorpus);
        }
        let idx = seed::rng(seed).gen_range(0..self.personas.len());
        Ok(&self.personas[idx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_line_order() {
        let s = PersonaStore::from_text("a chef\na pilot\na poet\n").unwrap();
        assert_eq!(s.len(), 3);
        let ids: Vec<u32> = s.iter().map(|p| p.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(s.get(1).unwrap().text, "a pilot");
    }

    #[test]
    fn blank_lines_are_skipped_and_ids_stay_dense() {
        let s = PersonaStore::from_text("\na chef\n\n   \na pilot\n\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.get(0).unwrap().text, "a chef");
        assert_eq!(s.get(1).unwrap().text, "a pilot");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            PersonaStore::from_text("\n  \n"),
            Err(PersonaError::EmptyCorpus)
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = PersonaStore::load("/definitely/not/here.txt").unwrap_err();
        assert!(matches!(err, PersonaError::Io { .. }));
    }

    #[test]
    fn singleton_store_always_returns_its_persona() {
        let s = PersonaStore::from_text("a lighthouse keeper").unwrap();
        for seed in [0, 1, 42, u64::MAX] {
            assert_eq!(s.sample(seed).unwrap().text, "a lighthouse keeper");
        }
    }

    #[test]
    fn same_seed_same_persona() {
        let s = PersonaStore::builtin();
        assert_eq!(s.sample(42).unwrap(), s.sample(42).unwrap());
    }

    #[test]
    fn bundled_corpus_has_at_least_twenty() {
        assert!(PersonaStore::builtin().len() >= 20);
    }

    #[test]
    fn sampling_is_uniform() {
        let text: String = (0..10).map(|i| format!("persona {i}\n")).collect();
        let s = PersonaStore::from_text(&text).unwrap();
        let mut counts = [0u32; 10];
        for seed in 0..10_000u64 {
            counts[s.sample(seed).unwrap().id as usize] += 1;
        }
        // Expected 1000 each; binomial sigma = sqrt(10000 * 0.1 * 0.9) = 30.
        for c in counts {
            assert!((f64::from(c) - 1000.0).abs() <= 5.0 * 30.0, "{counts:?}");
        }
        // Chi-square with 9 degrees of freedom; critical value at alpha=0.001 is 27.877.
        let chi2: f64 = counts
            .iter()
            .map(|&c| (f64::from(c) - 1000.0).powi(2) / 1000.0)
            .sum();
        assert!(chi2 < 27.877, "chi2 = {chi2}");
    }

    #[test]
    fn large_corpus_size() {
        let text: String = (0..200_000)
            .map(|i| format!("persona number {i}\n"))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("personas.txt");
        std::fs::write(&path, text).unwrap();
        assert_eq!(PersonaStore::load(&path).unwrap().len(), 200_000);
    }
}
