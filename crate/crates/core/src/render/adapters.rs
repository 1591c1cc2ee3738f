//! Per-tool subprocess adapters.
//!
//! Every adapter writes the source into the policy's working directory, runs
//! one or more external programs there and collects a PNG. Programs are
//! resolved in this order: an explicit path in [`AdapterConfig::programs`],
//! the environment variable `CODESYNTH_BIN_<NAME>` (upper case, `-` as `_`),
//! then `PATH`.
//!
//! | tool       | programs                                  |
//! |------------|-------------------------------------------|
//! | latex      | `pdflatex`, then `pdftoppm` (first page, 144 DPI) |
//! | html       | headless `chromium`, 1024px wide viewport, bottom margin trimmed |
//! | mermaid    | `mmdc`                                    |
//! | graphviz   | `dot`                                     |
//! | vegalite   | `vl2png`                                  |
//! | svg        | `rsvg-convert`                            |
//! | asymptote  | `asy`                                     |
//! | lilypond   | `lilypond`                                |
//! | matplotlib, plotly, rdkit | `python3` running the render harness script (`CODESYNTH_HARNESS`) |
//! | fixture    | `codesynth render-fixture` (`CODESYNTH_FIXTURE_BIN`) |
//!
//! After every render the working directory is swept so that only the source
//! file, `render.png` and `render.log` remain.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::image::{composite_over_white, RenderedImage};
use super::sandbox::{self, Invocation};
use super::{CodeArtifact, RenderError, Renderer, SandboxPolicy, Tool};
use crate::sync::Semaphore;

pub const OUTPUT_FILE: &str = "render.png";
pub const LOG_FILE: &str = "render.log";
const STDERR_TAIL: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Explicit program paths keyed by program name (`dot`, `pdflatex`, ...).
    pub programs: BTreeMap<String, PathBuf>,
    /// Executable providing the `render-fixture` subcommand.
    pub fixture_program: Option<PathBuf>,
    /// Render harness script for the Python-based tools.
    pub harness: Option<PathBuf>,
    /// Render every artifact with the fixture tool regardless of its tag.
    pub route_all_to_fixture: bool,
    pub max_concurrent: usize,
    pub html_viewport_width: u32,
    pub html_max_height: u32,
    pub pdf_dpi: u32,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            programs: BTreeMap::new(),
            fixture_program: None,
            harness: None,
            route_all_to_fixture: false,
            max_concurrent: 4,
            html_viewport_width: 1024,
            html_max_height: 4096,
            pdf_dpi: 144,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Program {
    /// First of these names that resolves.
    Named(&'static [&'static str]),
    Fixture,
}

struct Step {
    program: Program,
    args: Vec<String>,
    /// Harness script prepended to the arguments.
    harness: bool,
}

struct Plan {
    steps: Vec<Step>,
    outputs: &'static [&'static str],
    aux: Vec<(&'static str, &'static str)>,
    trim_bottom: bool,
}

fn step(names: &'static [&'static str], args: &[&str]) -> Step {
    Step {
        program: Program::Named(names),
        args: args.iter().map(|s| s.to_string()).collect(),
        harness: false,
    }
}

const CHROMIUM: &[&str] = &[
    "chromium",
    "chromium-browser",
    "google-chrome",
    "google-chrome-stable",
];

pub struct SandboxRenderer {
    config: AdapterConfig,
    slots: Semaphore,
}

impl SandboxRenderer {
    pub fn new(config: AdapterConfig) -> Self {
        let slots = Semaphore::new(config.max_concurrent);
        Self { config, slots }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    /// Tools this renderer has adapters for.
    pub fn advertised_tools() -> Vec<Tool> {
        Tool::RENDERING.into_iter().chain([Tool::Fixture]).collect()
    }

    fn effective_tool(&self, tool: Tool) -> Tool {
        if self.config.route_all_to_fixture {
            Tool::Fixture
        } else {
            tool
        }
    }

    fn plan(&self, tool: Tool, policy: &SandboxPolicy) -> Plan {
        let src = tool.source_file();
        let dpi = self.config.pdf_dpi.to_string();
        match tool {
            Tool::Fixture => Plan {
                steps: vec![Step {
                    program: Program::Fixture,
                    args: vec!["render-fixture".into(), src.into(), "out.png".into()],
                    harness: false,
                }],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Latex => Plan {
                steps: vec![
                    step(
                        &["pdflatex"],
                        &[
                            "-interaction=nonstopmode",
                            "-halt-on-error",
                            "-no-shell-escape",
                            src,
                        ],
                    ),
                    step(
                        &["pdftoppm"],
                        &[
                            "-png",
                            "-r",
                            &dpi,
                            "-f",
                            "1",
                            "-l",
                            "1",
                            "-singlefile",
                            "main.pdf",
                            "out",
                        ],
                    ),
                ],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Html => {
                let mut args = vec![
                    "--headless".to_string(),
                    "--disable-gpu".into(),
                    "--no-sandbox".into(),
                    "--hide-scrollbars".into(),
                    "--user-data-dir=profile".into(),
                    format!(
                        "--window-size={},{}",
                        self.config.html_viewport_width, self.config.html_max_height
                    ),
                    format!(
                        "--screenshot={}",
                        policy.working_dir.join("out.png").display()
                    ),
                ];
                if policy.network_disabled {
                    args.push("--proxy-server=127.0.0.1:9".into());
                }
                args.push(format!("file://{}", policy.working_dir.join(src).display()));
                Plan {
                    steps: vec![Step {
                        program: Program::Named(CHROMIUM),
                        args,
                        harness: false,
                    }],
                    outputs: &["out.png"],
                    aux: vec![],
                    trim_bottom: true,
                }
            }
            Tool::Mermaid => Plan {
                steps: vec![step(
                    &["mmdc"],
                    &[
                        "-i",
                        src,
                        "-o",
                        "out.png",
                        "-b",
                        "white",
                        "-w",
                        "1024",
                        "-p",
                        "puppeteer.json",
                    ],
                )],
                outputs: &["out.png"],
                aux: vec![("puppeteer.json", r#"{"args":["--no-sandbox"]}"#)],
                trim_bottom: false,
            },
            Tool::Graphviz => Plan {
                steps: vec![step(&["dot"], &["-Tpng", "-o", "out.png", src])],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Vegalite => Plan {
                steps: vec![step(&["vl2png"], &[src, "out.png"])],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Svg => Plan {
                steps: vec![step(
                    &["rsvg-convert"],
                    &["-b", "white", "-o", "out.png", src],
                )],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Asymptote => Plan {
                steps: vec![step(
                    &["asy"],
                    &["-f", "png", "-render=2", "-o", "out", src],
                )],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Lilypond => Plan {
                steps: vec![step(
                    &["lilypond"],
                    &[
                        "--png",
                        &format!("-dresolution={dpi}"),
                        "-dno-point-and-click",
                        "-o",
                        "out",
                        src,
                    ],
                )],
                outputs: &["out.png", "out-page1.png"],
                aux: vec![],
                trim_bottom: false,
            },
            Tool::Matplotlib | Tool::Plotly | Tool::Rdkit => Plan {
                steps: vec![Step {
                    program: Program::Named(&["python3"]),
                    args: vec![tool.as_str().into(), src.into(), "out.png".into()],
                    harness: true,
                }],
                outputs: &["out.png"],
                aux: vec![],
                trim_bottom: false,
            },
        }
    }

    fn resolve(&self, tool: Tool, program: Program) -> Result<PathBuf, RenderError> {
        match program {
            Program::Fixture => self
                .config
                .fixture_program
                .clone()
                .or_else(|| std::env::var_os("CODESYNTH_FIXTURE_BIN").map(PathBuf::from))
                .or_else(|| sandbox::which("codesynth"))
                .ok_or(RenderError::ToolMissing {
                    tool,
                    program: "codesynth render-fixture".into(),
                }),
            Program::Named(names) => names
                .iter()
                .find_map(|name| self.resolve_named(name))
                .ok_or_else(|| RenderError::ToolMissing {
                    tool,
                    program: names[0].to_string(),
                }),
        }
    }

    fn resolve_named(&self, name: &str) -> Option<PathBuf> {
        if let Some(p) = self.config.programs.get(name) {
            return sandbox::which(&p.to_string_lossy());
        }
        let var = format!("CODESYNTH_BIN_{}", name.to_uppercase().replace('-', "_"));
        if let Some(p) = std::env::var_os(var) {
            return sandbox::which(&p.to_string_lossy());
        }
        sandbox::which(name)
    }

    fn harness(&self, tool: Tool) -> Result<PathBuf, RenderError> {
        self.config
            .harness
            .clone()
            .or_else(|| std::env::var_os("CODESYNTH_HARNESS").map(PathBuf::from))
            .filter(|p| p.is_file())
            .ok_or(RenderError::ToolMissing {
                tool,
                program: "render harness".into(),
            })
    }

    fn run_plan(
        &self,
        tool: Tool,
        artifact: &CodeArtifact,
        policy: &SandboxPolicy,
        log: &mut String,
    ) -> Result<RenderedImage, RenderError> {
        let plan = self.plan(tool, policy);
        let mut invocations = Vec::with_capacity(plan.steps.len());
        for s in &plan.steps {
            let program = self.resolve(tool, s.program)?;
            let mut args = Vec::new();
            if s.harness {
                args.push(self.harness(tool)?.to_string_lossy().into_owned());
            }
            args.extend(s.args.iter().cloned());
            invocations.push(Invocation {
                program,
                args,
                cwd: policy.working_dir.clone(),
                env: vec![(
                    "HOME".into(),
                    policy.working_dir.to_string_lossy().into_owned(),
                )],
            });
        }

        let dir = &policy.working_dir;
        fs::write(dir.join(tool.source_file()), &artifact.source)?;
        for (name, content) in &plan.aux {
            fs::write(dir.join(name), content)?;
        }

        let _slot = self.slots.acquire();
        let deadline = Instant::now() + policy.wall_timeout;
        for inv in &invocations {
            let out = sandbox::run(
                inv,
                deadline,
                policy.max_output_bytes,
                policy.network_disabled,
            )?;
            log.push_str(&format!(
                "$ {} {}\n{}{}[exit {:?}{}]\n",
                inv.program.display(),
                inv.args.join(" "),
                String::from_utf8_lossy(&out.stdout),
                out.stderr_text(),
                out.status,
                if out.timed_out { ", timed out" } else { "" },
            ));
            if out.timed_out {
                return Err(RenderError::Timeout {
                    tool,
                    seconds: policy.wall_timeout.as_secs_f64(),
                });
            }
            if !out.success() {
                return Err(RenderError::CompileError {
                    tool,
                    status: out.status,
                    stderr: tail(&out.stderr_text(), STDERR_TAIL),
                });
            }
        }

        let produced = plan
            .outputs
            .iter()
            .map(|o| dir.join(o))
            .find(|p| p.is_file())
            .ok_or(RenderError::NoOutputImage { tool })?;
        let final_path = dir.join(OUTPUT_FILE);
        let undecodable = |reason: String| RenderError::UndecodableImage { tool, reason };
        if plan.trim_bottom {
            let img = image::open(&produced).map_err(|e| undecodable(e.to_string()))?;
            let trimmed = trim_bottom(&composite_over_white(&img.to_rgba8()), 16);
            trimmed
                .save_with_format(&final_path, ImageFormat::Png)
                .map_err(|e| RenderError::Io(e.to_string()))?;
        } else {
            fs::rename(&produced, &final_path)?;
        }
        RenderedImage::open(&final_path).map_err(undecodable)
    }
}

fn tail(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_string()
}

/// Crops trailing rows that match the bottom-left pixel, keeping `margin`
/// rows of padding.
pub fn trim_bottom(img: &RgbImage, margin: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if h == 0 {
        return img.clone();
    }
    let bg = img.get_pixel(0, h - 1).0;
    let differs = |y: u32| {
        (0..w).any(|x| {
            let p = img.get_pixel(x, y).0;
            p.iter().zip(bg).any(|(&a, b)| a.abs_diff(b) > 8)
        })
    };
    let last = (0..h).rev().find(|&y| differs(y)).unwrap_or(0);
    let keep = (last + 1 + margin).min(h).max(1);
    image::imageops::crop_imm(img, 0, 0, w, keep).to_image()
}

/// Removes everything in `dir` except the given file names.
fn sweep(dir: &Path, keep: &[&str]) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let name = entry.file_name();
        if keep.iter().any(|k| name == **k) {
            continue;
        }
        let path = entry.path();
        let _ = if path.is_dir() {
            fs::remove_dir_all(&path)
        } else {
            fs::remove_file(&path)
        };
    }
}

impl Renderer for SandboxRenderer {
    fn render(
        &self,
        artifact: &CodeArtifact,
        policy: &SandboxPolicy,
    ) -> Result<RenderedImage, RenderError> {
        policy.validate()?;
        fs::create_dir_all(&policy.working_dir)?;
        let tool = self.effective_tool(artifact.tool);
        let mut log = String::new();
        let result = self.run_plan(tool, artifact, policy, &mut log);
        if let Err(e) = &result {
            log.push_str(&format!("error: {e}\n"));
        }
        let _ = fs::write(policy.working_dir.join(LOG_FILE), log);
        sweep(
            &policy.working_dir,
            &[tool.source_file(), OUTPUT_FILE, LOG_FILE],
        );
        result
    }
}
