//! The fixture tool: a tiny line-oriented scene format rasterized by this
//! crate itself, so the full pipeline can run without external renderers.
//!
//! ```text
//! # comment
//! canvas 640 480 #ffffff     width, height, background (required, once)
//! scale 2                    multiply every coordinate by 2 (default 1)
//! rect 10 20 100 40 #1f3a5f  covers pixels x <= i < x+w, y <= j < y+h
//! disk 320 240 6 #ff00ff     anti-aliased filled circle, center in pixel units
//! ```
//!
//! Pixel centers sit at integer coordinates. Disks are anti-aliased with 4x4
//! supersampling per pixel. Under `scale s` a center `c` maps to
//! `s*c + (s-1)/2` and a radius `r` to `s*r`, so a scene keeps its geometry
//! in normalized coordinates.
//!
//! Fault-injection directives, executed in order when the scene is run as a
//! subprocess (`codesynth render-fixture <src> <out>`):
//!
//! ```text
//! sleep 1.5      sleep for 1.5 seconds
//! spin           busy-loop forever
//! fail message   print message to stderr and exit with status 1
//! no-output      exit 0 without writing an image
//! garbage        write bytes that are not a PNG
//! spawn 30       start a `sleep 30` child and print its pid to stderr
//! ```

use std::path::Path;
use std::time::Duration;

use image::{Rgb, RgbImage};

pub const MAX_SIDE: u32 = 16_384;

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Canvas {
        width: u32,
        height: u32,
        background: [u8; 3],
    },
    Scale(f64),
    Rect {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        color: [u8; 3],
    },
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
        color: [u8; 3],
    },
    Sleep(f64),
    Spin,
    Fail(String),
    NoOutput,
    Garbage,
    Spawn(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FixtureError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("scene has no canvas directive")]
    MissingCanvas,
    #[error("canvas {0}x{1} is out of range")]
    CanvasSize(u64, u64),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub directives: Vec<Directive>,
}

pub fn parse_color(s: &str) -> Option<[u8; 3]> {
    let hex = s.strip_prefix('#')?;
    if hex.len() != 6 || !hex.is_ascii() {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).ok();
    Some([byte(0)?, byte(2)?, byte(4)?])
}

pub fn format_color(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

pub fn parse(src: &str) -> Result<Scene, FixtureError> {
    let mut directives = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("```") {
            continue;
        }
        let err = |message: String| FixtureError::Syntax {
            line: idx + 1,
            message,
        };
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let num = |i: usize| -> Result<f64, FixtureError> {
            let a = args
                .get(i)
                .ok_or_else(|| err(format!("`{word}` needs more arguments")))?;
            a.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("`{a}` is not a number")))
        };
        let color = |i: usize| -> Result<[u8; 3], FixtureError> {
            let a = args
                .get(i)
                .ok_or_else(|| err(format!("`{word}` needs a color")))?;
            parse_color(a).ok_or_else(|| err(format!("`{a}` is not a #rrggbb color")))
        };
        let arity = |n: usize| -> Result<(), FixtureError> {
            if args.len() == n {
                Ok(())
            } else {
                Err(err(format!(
                    "`{word}` takes {n} arguments, got {}",
                    args.len()
                )))
            }
        };
        let d = match word {
            "canvas" => {
                arity(3)?;
                let (w, h) = (num(0)?, num(1)?);
                if w < 1.0 || h < 1.0 || w > MAX_SIDE as f64 || h > MAX_SIDE as f64 {
                    return Err(FixtureError::CanvasSize(w as u64, h as u64));
                }
                Directive::Canvas {
                    width: w as u32,
                    height: h as u32,
                    background: color(2)?,
                }
            }
            "scale" => {
                arity(1)?;
                let s = num(0)?;
                if s <= 0.0 {
                    return Err(err("scale must be positive".into()));
                }
                Directive::Scale(s)
            }
            "rect" => {
                arity(5)?;
                Directive::Rect {
                    x: num(0)?,
                    y: num(1)?,
                    w: num(2)?,
                    h: num(3)?,
                    color: color(4)?,
                }
            }
            "disk" => {
                arity(4)?;
                Directive::Disk {
                    cx: num(0)?,
                    cy: num(1)?,
                    r: num(2)?,
                    color: color(3)?,
                }
            }
            "sleep" => {
                arity(1)?;
                Directive::Sleep(num(0)?.max(0.0))
            }
            "spin" => Directive::Spin,
            "fail" => Directive::Fail(args.join(" ")),
            "no-output" => Directive::NoOutput,
            "garbage" => Directive::Garbage,
            "spawn" => {
                arity(1)?;
                Directive::Spawn(num(0)?.max(0.0))
            }
            other => return Err(err(format!("unknown directive `{other}`"))),
        };
        directives.push(d);
    }
    Ok(Scene { directives })
}

impl Scene {
    /// Rasterizes the drawing directives; control directives are ignored.
    pub fn rasterize(&self) -> Result<RgbImage, FixtureError> {
        let (width, height, background) = self
            .directives
            .iter()
            .find_map(|d| match d {
                Directive::Canvas {
                    width,
                    height,
                    background,
                } => Some((*width, *height, *background)),
                _ => None,
            })
            .ok_or(FixtureError::MissingCanvas)?;
        let s = self
            .directives
            .iter()
            .rev()
            .find_map(|d| match d {
                Directive::Scale(s) => Some(*s),
                _ => None,
            })
            .unwrap_or(1.0);
        let (w, h) = ((width as f64 * s).round(), (height as f64 * s).round());
        if w < 1.0 || h < 1.0 || w > MAX_SIDE as f64 || h > MAX_SIDE as f64 {
            return Err(FixtureError::CanvasSize(w as u64, h as u64));
        }
        let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb(background));
        for d in &self.directives {
            match *d {
                Directive::Rect { x, y, w, h, color } => {
                    fill_rect(&mut img, x * s, y * s, w * s, h * s, color)
                }
                Directive::Disk { cx, cy, r, color } => {
                    let off = (s - 1.0) / 2.0;
                    draw_disk(&mut img, cx * s + off, cy * s + off, r * s, color)
                }
                _ => {}
            }
        }
        Ok(img)
    }
}

fn fill_rect(img: &mut RgbImage, x: f64, y: f64, w: f64, h: f64, color: [u8; 3]) {
    let clamp = |v: f64, max: u32| v.ceil().clamp(0.0, max as f64) as u32;
    let (x0, x1) = (clamp(x, img.width()), clamp(x + w, img.width()));
    let (y0, y1) = (clamp(y, img.height()), clamp(y + h, img.height()));
    for j in y0..y1 {
        for i in x0..x1 {
            img.put_pixel(i, j, Rgb(color));
        }
    }
}

const SUB: [f64; 4] = [-0.375, -0.125, 0.125, 0.375];

/// Fraction of the 4x4 subsamples of pixel (i, j) inside the disk.
pub fn disk_coverage(i: f64, j: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let r2 = r * r;
    let mut hits = 0u32;
    for dy in SUB {
        for dx in SUB {
            let (px, py) = (i + dx - cx, j + dy - cy);
            if px * px + py * py <= r2 {
                hits += 1;
            }
        }
    }
    f64::from(hits) / 16.0
}

pub fn draw_disk(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
    if r <= 0.0 {
        return;
    }
    let lo = |c: f64| (c - r - 1.0).floor().max(0.0) as u32;
    let hi = |c: f64, max: u32| ((c + r + 1.0).ceil().max(0.0) as u32).min(max);
    for j in lo(cy)..hi(cy, img.height()) {
        for i in lo(cx)..hi(cx, img.width()) {
            let a = disk_coverage(i as f64, j as f64, cx, cy, r);
            if a == 0.0 {
                continue;
            }
            let p = img.get_pixel_mut(i, j);
            for (ch, fg) in p.0.iter_mut().zip(color) {
                *ch = (a * f64::from(fg) + (1.0 - a) * f64::from(*ch)).round() as u8;
            }
        }
    }
}

/// Runs a scene file as the fixture tool would: executes control directives
/// in order, then writes the PNG unless told otherwise.
pub fn execute(src: &Path, out: &Path) -> Result<(), FixtureError> {
    let text = std::fs::read_to_string(src).map_err(|e| FixtureError::Io(e.to_string()))?;
    let scene = parse(&text)?;
    let mut write = true;
    let mut garbage = false;
    for d in &scene.directives {
        match d {
            Directive::Sleep(secs) => std::thread::sleep(Duration::from_secs_f64(*secs)),
            Directive::Spin => {
                let mut x = 0u64;
                loop {
                    x = std::hint::black_box(x.wrapping_add(1));
                }
            }
            Directive::Fail(msg) => return Err(FixtureError::Failed(msg.clone())),
            Directive::NoOutput => write = false,
            Directive::Garbage => garbage = true,
            Directive::Spawn(secs) => {
                let child = std::process::Command::new("sleep")
                    .arg(format!("{secs}"))
                    .stdin(std::process::Stdio::null())
                    .stdout(std::process::Stdio::null())
                    .stderr(std::process::Stdio::null())
                    .spawn()
                    .map_err(|e| FixtureError::Io(e.to_string()))?;
                eprintln!("spawned {}", child.id());
                std::mem::forget(child);
            }
            _ => {}
        }
    }
    if !write {
        return Ok(());
    }
    if garbage {
        return std::fs::write(out, b"\x89PNG but not really")
            .map_err(|e| FixtureError::Io(e.to_string()));
    }
    let img = scene.rasterize()?;
    img.save_with_format(out, image::ImageFormat::Png)
        .map_err(|e| FixtureError::Io(e.to_string()))
}
