#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use codesynth::pipeline::{JobDeps, JobSettings, PipelineRegistry, RunConfig};
use codesynth::render::Renderer;
use codesynth::{Gateway, PersonaStore};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_codesynth"))
}

/// Mock provider, in-memory cache, fixture renderer backed by the built binary.
pub fn hermetic_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.use_mock_provider();
    c.provider.cache_dir = None;
    c.sandbox.fixture_renderer = true;
    c.sandbox.fixture_program = Some(bin());
    c
}

/// Owns everything a batch borrows.
pub struct Harness {
    pub registry: PipelineRegistry,
    pub personas: PersonaStore,
    pub gateway: Gateway,
    pub renderer: Box<dyn Renderer>,
    pub settings: JobSettings,
}

impl Harness {
    pub fn new(config: &RunConfig) -> Self {
        Self::with_renderer(config, Box::new(config.renderer()))
    }

    pub fn with_renderer(config: &RunConfig, renderer: Box<dyn Renderer>) -> Self {
        config.validate().unwrap();
        Self {
            registry: config.registry().unwrap(),
            personas: config.personas().unwrap(),
            gateway: config.gateway().unwrap(),
            renderer,
            settings: config.job_settings(),
        }
    }

    pub fn deps(&self) -> JobDeps<'_> {
        JobDeps {
            registry: &self.registry,
            personas: &self.personas,
            gateway: &self.gateway,
            renderer: self.renderer.as_ref(),
            settings: &self.settings,
        }
    }
}

pub fn codesynth(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("CODESYNTH_FIXTURE_BIN")
        .output()
        .expect("spawn codesynth")
}

/// Whether `pid` is still running (zombies count as gone).
pub fn alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat
                .rsplit(')')
                .next()
                .and_then(|s| s.split_whitespace().next());
            !matches!(state, Some("Z") | Some("X"))
        }
        Err(_) => false,
    }
}

/// Byte content of manifest, training rows and every image.
pub fn shard_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![(
        "manifest.jsonl".to_string(),
        std::fs::read(dir.join("manifest.jsonl")).unwrap(),
    )];
    if let Ok(train) = std::fs::read(dir.join("train.jsonl")) {
        files.push(("train.jsonl".into(), train));
    }
    let mut images: Vec<_> = std::fs::read_dir(dir.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    images.sort();
    for p in images {
        files.push((
            format!("images/{}", p.file_name().unwrap().to_string_lossy()),
            std::fs::read(&p).unwrap(),
        ));
    }
    files
}
