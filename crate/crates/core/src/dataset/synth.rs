//! Deterministic synthetic logos and sketches.
//!
//! Each instance is a composition of 2–4 stroked primitives on white. Its
//! sketches redraw the same composition with perturbed control points,
//! varied stroke width and, for harder tiers, dropped strokes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, LogoRecord, SketchRecord, Subset};
use crate::error::{Error, Result};

/// Logo stroke width as a fraction of the image side.
const LOGO_THICKNESS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub instances: usize,
    pub sketches_per_instance: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            instances: 20,
            sketches_per_instance: 4,
            size: 64,
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Bar {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Triangle {
        pts: [(f64, f64); 3],
    },
    Arc {
        cx: f64,
        cy: f64,
        r: f64,
        start: f64,
        sweep: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Circle { .. } => "circle",
            Primitive::Bar { .. } => "bar",
            Primitive::Triangle { .. } => "triangle",
            Primitive::Arc { .. } => "arc",
        }
    }

    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match u(0.0, 4.0) as usize {
            0 => {
                let r = u(0.1, 0.3);
                Primitive::Circle {
                    cx: u(0.15 + r, 0.85 - r + 1e-9),
                    cy: u(0.15 + r, 0.85 - r + 1e-9),
                    r,
                }
            }
            1 => loop {
                let (x0, y0, x1, y1) = (u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9));
                if (x1 - x0).hypot(y1 - y0) >= 0.3 {
                    break Primitive::Bar { x0, y0, x1, y1 };
                }
            },
            2 => loop {
                let pts = [
                    (u(0.1, 0.9), u(0.1, 0.9)),
                    (u(0.1, 0.9), u(0.1, 0.9)),
                    (u(0.1, 0.9), u(0.1, 0.9)),
                ];
                let [(ax, ay), (bx, by), (cx, cy)] = pts;
                let area = ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)).abs() / 2.0;
                if area >= 0.04 {
                    break Primitive::Triangle { pts };
                }
            },
            _ => {
                let r = u(0.15, 0.35);
                Primitive::Arc {
                    cx: u(0.15 + r * 0.5, 0.85 - r * 0.5),
                    cy: u(0.15 + r * 0.5, 0.85 - r * 0.5),
                    r,
                    start: u(0.0, 2.0 * PI),
                    sweep: u(0.5 * PI, 1.5 * PI),
                }
            }
        }
    }

    /// Same primitive with control points and radii perturbed by uniform
    /// noise of standard deviation `sigma`.
    fn jittered(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Self {
        let half = sigma * 3f64.sqrt();
        let mut n = || {
            if half > 0.0 {
                rng.random_range(-half..half)
            } else {
                0.0
            }
        };
        match *self {
            Primitive::Circle { cx, cy, r } => Primitive::Circle {
                cx: cx + n(),
                cy: cy + n(),
                r: (r + n()).max(0.02),
            },
            Primitive::Bar { x0, y0, x1, y1 } => Primitive::Bar {
                x0: x0 + n(),
                y0: y0 + n(),
                x1: x1 + n(),
                y1: y1 + n(),
            },
            Primitive::Triangle { pts } => Primitive::Triangle {
                pts: pts.map(|(x, y)| (x + n(), y + n())),
            },
            Primitive::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => Primitive::Arc {
                cx: cx + n(),
                cy: cy + n(),
                r: (r + n()).max(0.02),
                start: start + n() * PI,
                sweep,
            },
        }
    }

    fn polyline(&self) -> Vec<(f64, f64)> {
        const ARC_STEPS: usize = 48;
        let ring = |cx: f64, cy: f64, r: f64, a0: f64, sweep: f64, steps: usize| {
            (0..=steps)
                .map(|i| {
                    let a = a0 + sweep * i as f64 / steps as f64;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect::<Vec<_>>()
        };
        match *self {
            Primitive::Circle { cx, cy, r } => ring(cx, cy, r, 0.0, 2.0 * PI, ARC_STEPS),
            Primitive::Bar { x0, y0, x1, y1 } => vec![(x0, y0), (x1, y1)],
            Primitive::Triangle { pts } => vec![pts[0], pts[1], pts[2], pts[0]],
            Primitive::Arc {
                cx,
                cy,
                r,
                start,
                sweep,
            } => ring(
                cx,
                cy,
                r,
                start,
                sweep,
                (ARC_STEPS as f64 * sweep / (2.0 * PI)).ceil() as usize,
            ),
        }
    }
}

/// Difficulty knobs per tier: control-point noise and stroke dropout.
pub fn tier_params(subset: Subset) -> (f64, f64) {
    match subset {
        Subset::Easy => (0.015, 0.0),
        Subset::Medium => (0.025, 0.1),
        Subset::Hard => (0.035, 0.3),
    }
}

/// Tier of the `k`-th sketch of an instance: easy, medium, hard, repeating.
pub fn tier_of(k: usize) -> Subset {
    Subset::ALL[k % 3]
}

/// The primitives of instance `index`.
pub fn instance_primitives(seed: u64, index: usize) -> Vec<Primitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let count = rng.random_range(2..=4);
    (0..count).map(|_| Primitive::random(&mut rng)).collect()
}

/// Strokes `(primitive, width)` of sketch `k` of instance `index`.
fn sketch_strokes(seed: u64, index: usize, k: usize, prims: &[Primitive]) -> Vec<(Primitive, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5CE7_C4E5);
    rng.set_stream(((index as u64) << 16) | k as u64);
    let (sigma, dropout) = tier_params(tier_of(k));
    let mut strokes: Vec<(Primitive, f64)> = Vec::new();
    let keep_anyway = rng.random_range(0..prims.len());
    for (i, p) in prims.iter().enumerate() {
        let dropped = rng.random::<f64>() < dropout;
        let jittered = p.jittered(sigma, &mut rng);
        let width = LOGO_THICKNESS * rng.random_range(0.6..1.4);
        if !dropped || i == keep_anyway {
            strokes.push((jittered, width));
        }
    }
    strokes
}

/// Anti-aliased rendering of strokes; ink is 0, background is 1.
pub fn rasterize(strokes: &[(Primitive, f64)], size: usize) -> Vec<f32> {
    let s = size as f64;
    let segments: Vec<((f64, f64), (f64, f64), f64)> = strokes
        .iter()
        .flat_map(|(p, w)| {
            let pts: Vec<(f64, f64)> = p
                .polyline()
                .into_iter()
                .map(|(x, y)| (x * s, y * s))
                .collect();
            let half = w * s / 2.0;
            pts.windows(2)
                .map(move |w2| (w2[0], w2[1], half))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut out = vec![1.0f32; size * size];
    for (y, row) in out.chunks_mut(size).enumerate() {
        for (x, px) in row.iter_mut().enumerate() {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut coverage: f64 = 0.0;
            for &(a, b, half) in &segments {
                let d = point_segment_distance((cx, cy), a, b);
                coverage = coverage.max((half - d + 0.5).clamp(0.0, 1.0));
                if coverage >= 1.0 {
                    break;
                }
            }
            *px = (1.0 - coverage) as f32;
        }
    }
    out
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Rendered logo of instance `index`.
pub fn render_logo(seed: u64, index: usize, size: usize) -> Vec<f32> {
    let strokes: Vec<_> = instance_primitives(seed, index)
        .into_iter()
        .map(|p| (p, LOGO_THICKNESS))
        .collect();
    rasterize(&strokes, size)
}

/// Rendered sketch `k` of instance `index`.
pub fn render_sketch(seed: u64, index: usize, k: usize, size: usize) -> Vec<f32> {
    let prims = instance_primitives(seed, index);
    rasterize(&sketch_strokes(seed, index, k, &prims), size)
}

pub fn logo_id(index: usize) -> String {
    format!("logo_{index:04}")
}

pub fn sketch_id(index: usize, k: usize) -> String {
    format!("logo_{index:04}_s{k}")
}

fn write_png(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    let raw: Vec<u8> = pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(size as u32, size as u32, raw)
        .expect("pixel buffer sized from size");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
}

/// Writes the dataset layout (`images/`, `sketches/`, `manifest.csv`) under
/// `out_root` and returns the manifest. Splits are left unset.
pub fn synth_generate(cfg: &SynthConfig, out_root: impl AsRef<Path>) -> Result<DatasetManifest> {
    if cfg.instances < 2 {
        return Err(Error::invalid("synth", "need at least 2 instances"));
    }
    if cfg.sketches_per_instance == 0 || cfg.size < 8 {
        return Err(Error::invalid(
            "synth",
            "need at least one sketch per instance and size >= 8",
        ));
    }
    let root = out_root.as_ref();
    for dir in ["images", "sketches"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut logos = Vec::with_capacity(cfg.instances);
    let mut sketches = Vec::with_capacity(cfg.instances * cfg.sketches_per_instance);
    for i in 0..cfg.instances {
        let prims = instance_primitives(cfg.seed, i);
        let id = logo_id(i);
        let image_path = PathBuf::from(format!("images/{id}.png"));
        write_png(
            &root.join(&image_path),
            &render_logo(cfg.seed, i, cfg.size),
            cfg.size,
        )?;
        let label = prims.iter().map(|p| p.name()).collect::<Vec<_>>().join(" ");
        logos.push(LogoRecord {
            instance_id: id.clone(),
            image_path,
            text_label: Some(label),
        });
        for k in 0..cfg.sketches_per_instance {
            let sid = sketch_id(i, k);
            let path = PathBuf::from(format!("sketches/{sid}.png"));
            let strokes = sketch_strokes(cfg.seed, i, k, &prims);
            write_png(&root.join(&path), &rasterize(&strokes, cfg.size), cfg.size)?;
            sketches.push(SketchRecord {
                sketch_id: sid,
                instance_id: id.clone(),
                path,
                subset: tier_of(k),
                split: None,
            });
        }
    }
    let manifest = DatasetManifest::new(root, logos, sketches)?;
    manifest.save()?;
    log::info!(
        "synthesized {} instances x {} sketches at {}px into {}",
        cfg.instances,
        cfg.sketches_per_instance,
        cfg.size,
        root.display()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instances_have_two_to_four_primitives() {
        for i in 0..50 {
            let n = instance_primitives(3, i).len();
            assert!((2..=4).contains(&n));
        }
    }

    #[test]
    fn rendering_is_deterministic_and_inked() {
        let a = render_sketch(1, 4, 2, 32);
        assert_eq!(a, render_sketch(1, 4, 2, 32));
        let ink = a.iter().filter(|&&v| v < 0.5).count();
        assert!(ink > 10, "only {ink} ink pixels");
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_sketch_keeps_a_stroke() {
        let prims = instance_primitives(0, 0);
        for k in 0..60 {
            assert!(!sketch_strokes(0, 0, k, &prims).is_empty());
        }
    }
}
