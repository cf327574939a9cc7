//! Procedurally rendered stand-in corpora in the on-disk manifest layout.
//!
//! `objects` mirrors the 10-class 32×32 RGB classification corpus: one
//! randomly posed, colored shape per image over a cluttered background whose
//! tint is weakly class dependent. `faces` mirrors the 40-attribute face
//! corpus at 64×64: cartoon faces where a subset of the attributes (hair,
//! smile, mustache, glasses, ...) change the rendering and the rest are
//! annotation-only.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusMeta, ImageShape, ManifestRecord, Preprocess, Split};
use crate::error::{Error, Result};
use crate::rng::{self, StdRng};

pub const OBJECT_CLASSES: [&str; 10] =
    ["disc", "square", "triangle", "plus", "ring", "hbars", "vbars", "xcross", "checker", "pair"];

pub const FACE_ATTRIBUTES: [&str; 40] = [
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald", "Bangs",
    "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair", "Blurry", "Brown_Hair", "Bushy_Eyebrows",
    "Chubby", "Double_Chin", "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup",
    "High_Cheekbones", "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard",
    "Oval_Face", "Pale_Skin", "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks", "Sideburns",
    "Smiling", "Straight_Hair", "Wavy_Hair", "Wearing_Earrings", "Wearing_Hat",
    "Wearing_Lipstick", "Wearing_Necklace", "Wearing_Necktie", "Young",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Objects,
    Faces,
}

impl SynthKind {
    pub fn shape(&self) -> ImageShape {
        match self {
            SynthKind::Objects => ImageShape::new(32, 32, 3),
            SynthKind::Faces => ImageShape::new(64, 64, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub name: String,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

type Rgb = [f32; 3];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![[0.0; 3]; w * h] }
    }

    /// Alpha-blends `color` over the region where `inside` holds, with 2×2
    /// supersampled coverage, restricted to the given bounding box.
    fn fill(&mut self, bbox: (f32, f32, f32, f32), color: Rgb, alpha: f32, inside: impl Fn(f32, f32) -> bool) {
        let x0 = bbox.0.floor().max(0.0) as usize;
        let y0 = bbox.1.floor().max(0.0) as usize;
        let x1 = (bbox.2.ceil().max(0.0) as usize).min(self.w);
        let y1 = (bbox.3.ceil().max(0.0) as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if inside(x as f32 + dx, y as f32 + dy) {
                        hits += 1;
                    }
                }
                if hits > 0 {
                    let a = alpha * hits as f32 / 4.0;
                    let p = &mut self.px[y * self.w + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + color[c] * a;
                    }
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f32, cy: f32, rx: f32, ry: f32, color: Rgb, alpha: f32) {
        self.fill((cx - rx, cy - ry, cx + rx + 1.0, cy + ry + 1.0), color, alpha, |x, y| {
            let (u, v) = ((x - cx) / rx, (y - cy) / ry);
            u * u + v * v <= 1.0
        });
    }

    fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb, alpha: f32) {
        self.fill((x0, y0, x1 + 1.0, y1 + 1.0), color, alpha, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1);
    }

    fn blur(&mut self) {
        let src = self.px.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = [0.0f32; 3];
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(self.h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(self.w) {
                        let p = src[yy * self.w + xx];
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                self.px[y * self.w + x] = acc.map(|v| v / n);
            }
        }
    }

    fn finish(mut self, rng: &mut StdRng, noise: f32) -> Vec<f32> {
        for p in &mut self.px {
            for c in p.iter_mut() {
                let z: f32 = StandardNormal.sample(rng);
                *c = (*c + noise * z).clamp(0.0, 1.0);
            }
        }
        self.px.into_iter().flatten().collect()
    }
}

fn random_color(rng: &mut StdRng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

fn luminance(c: Rgb) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn mix(a: Rgb, b: Rgb, t: f32) -> Rgb {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

fn hue(h: f32) -> Rgb {
    let k = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Renders one 32×32 object image of class `class` (NHWC, `[0, 1]`).
pub fn render_object(class: usize, rng: &mut StdRng) -> Vec<f32> {
    let mut cv = Canvas::new(32, 32);
    let tint = hue(class as f32 / 10.0);
    let top = mix(random_color(rng), tint, 0.3);
    let bottom = mix(random_color(rng), tint, 0.3);
    for y in 0..32 {
        let c = mix(top, bottom, y as f32 / 31.0);
        for x in 0..32 {
            cv.px[y * 32 + x] = c;
        }
    }
    for _ in 0..3 {
        let (cx, cy) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
        let r = rng.random_range(2.0..6.0);
        let col = random_color(rng);
        cv.ellipse(cx, cy, r, r, col, 0.25);
    }
    let bg = luminance(mix(top, bottom, 0.5));
    let mut fg = random_color(rng);
    if (luminance(fg) - bg).abs() < 0.25 {
        fg = fg.map(|v| 1.0 - v);
        if (luminance(fg) - bg).abs() < 0.25 {
            fg = if bg > 0.5 { [0.05, 0.05, 0.1] } else { [0.95, 0.95, 0.9] };
        }
    }
    let cx: f32 = rng.random_range(10.0..22.0);
    let cy: f32 = rng.random_range(10.0..22.0);
    let r: f32 = rng.random_range(6.0..10.0);
    let theta: f32 = if matches!(class, 5 | 6) {
        rng.random_range(-0.35..0.35)
    } else {
        rng.random_range(0.0..std::f32::consts::TAU)
    };
    let (s, c) = theta.sin_cos();
    let inside = move |x: f32, y: f32| {
        let (dx, dy) = ((x - cx) / r, (y - cy) / r);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let rad = (u * u + v * v).sqrt();
        let frac = |t: f32| t - t.floor();
        match class {
            0 => rad <= 1.0,
            1 => u.abs().max(v.abs()) <= 0.8,
            2 => {
                let (ax, ay, bx, by, qx, qy) = (0.0, -0.9, 0.85, 0.6, -0.85, 0.6);
                let cross = |x0: f32, y0: f32, x1: f32, y1: f32| (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
                let d1 = cross(ax, ay, bx, by);
                let d2 = cross(bx, by, qx, qy);
                let d3 = cross(qx, qy, ax, ay);
                (d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0) || (d1 <= 0.0 && d2 <= 0.0 && d3 <= 0.0)
            }
            3 => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
            4 => (0.55..=1.0).contains(&rad),
            5 => u.abs() <= 0.95 && v.abs() <= 0.95 && frac((v + 1.0) * 1.5) < 0.5,
            6 => u.abs() <= 0.95 && v.abs() <= 0.95 && frac((u + 1.0) * 1.5) < 0.5,
            7 => rad <= 1.0 && ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3),
            8 => {
                u.abs() <= 0.9
                    && v.abs() <= 0.9
                    && (((u + 1.0) * 2.0).floor() as i32 + ((v + 1.0) * 2.0).floor() as i32) % 2 == 0
            }
            _ => {
                let d1 = (u - 0.55).powi(2) + v * v;
                let d2 = (u + 0.55).powi(2) + v * v;
                d1 <= 0.16 || d2 <= 0.16
            }
        }
    };
    cv.fill((cx - r - 1.0, cy - r - 1.0, cx + r + 2.0, cy + r + 2.0), fg, 1.0, inside);
    cv.finish(rng, 0.04)
}

fn attr(name: &str) -> usize {
    FACE_ATTRIBUTES.iter().position(|a| *a == name).expect("known attribute")
}

/// Samples a consistent 40-bit attribute vector.
pub fn sample_face_attributes(rng: &mut StdRng) -> Vec<u8> {
    let mut a: Vec<u8> = (0..FACE_ATTRIBUTES.len()).map(|_| rng.random_bool(0.3) as u8).collect();
    let mut set = |name: &str, v: bool| a[attr(name)] = v as u8;
    let male = rng.random_bool(0.5);
    set("Male", male);
    let hair = rng.random_range(0..5);
    set("Black_Hair", hair == 0);
    set("Blond_Hair", hair == 1);
    set("Brown_Hair", hair == 2);
    set("Gray_Hair", hair == 3);
    let bald = rng.random_bool(0.06);
    set("Bald", bald);
    let wavy = !bald && rng.random_bool(0.35);
    set("Wavy_Hair", wavy);
    set("Straight_Hair", !bald && !wavy && rng.random_bool(0.5));
    set("Bangs", !bald && rng.random_bool(0.2));
    set("Smiling", rng.random_bool(0.5));
    let mustache = rng.random_bool(0.4);
    let goatee = rng.random_bool(0.15);
    set("Mustache", mustache);
    set("Goatee", goatee);
    set("No_Beard", !mustache && !goatee);
    set("Eyeglasses", rng.random_bool(0.15));
    set("Wearing_Hat", rng.random_bool(0.08));
    set("Pale_Skin", rng.random_bool(0.2));
    set("Heavy_Makeup", rng.random_bool(0.3));
    set("Wearing_Lipstick", rng.random_bool(0.35));
    set("Mouth_Slightly_Open", rng.random_bool(0.4));
    set("Narrow_Eyes", rng.random_bool(0.15));
    set("Rosy_Cheeks", rng.random_bool(0.15));
    set("Bushy_Eyebrows", rng.random_bool(0.25));
    set("Wearing_Earrings", rng.random_bool(0.2));
    set("Blurry", rng.random_bool(0.05));
    a
}

/// Renders one 64×64 face for an attribute vector.
pub fn render_face(a: &[u8], rng: &mut StdRng) -> Vec<f32> {
    let on = |name: &str| a[attr(name)] == 1;
    let mut cv = Canvas::new(64, 64);
    let top = random_color(rng);
    let bottom = random_color(rng);
    for y in 0..64 {
        let c = mix(top, bottom, y as f32 / 63.0);
        for x in 0..64 {
            cv.px[y * 64 + x] = c;
        }
    }
    let hair = if on("Black_Hair") {
        [0.08, 0.06, 0.05]
    } else if on("Blond_Hair") {
        [0.86, 0.73, 0.38]
    } else if on("Brown_Hair") {
        [0.40, 0.25, 0.12]
    } else if on("Gray_Hair") {
        [0.62, 0.62, 0.62]
    } else {
        mix([0.25, 0.15, 0.08], random_color(rng), 0.3)
    };
    let jitter = |rng: &mut StdRng, s: f32| rng.random_range(-s..s);
    let cx = 32.0 + jitter(rng, 2.5);
    let cy = 35.0 + jitter(rng, 2.5);
    let rx = 14.5 + if on("Male") { 2.0 } else { 0.0 } + jitter(rng, 1.0);
    let ry = 19.0 + jitter(rng, 1.0);

    if !on("Bald") {
        let wavy = on("Wavy_Hair");
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let (hx, hy, hrx, hry) = (cx, cy - 4.0, rx + 3.5, ry + 2.5);
        cv.fill((hx - hrx - 2.0, hy - hry - 2.0, hx + hrx + 3.0, hy + hry + 3.0), hair, 1.0, |x, y| {
            let (dx, dy) = (x - hx, y - hy);
            let ang = dy.atan2(dx);
            let k = if wavy { 1.0 + 0.09 * (9.0 * ang + phase).sin() } else { 1.0 };
            let (u, v) = (dx / (hrx * k), dy / (hry * k));
            u * u + v * v <= 1.0
        });
        if wavy {
            let dark = hair.map(|v| v * 0.6);
            for i in 0..5 {
                let x0 = hx - hrx + 2.0 + i as f32 * (2.0 * hrx - 4.0) / 4.0;
                cv.fill((x0 - 3.0, hy - hry, x0 + 4.0, hy + 4.0), dark, 0.8, |x, y| {
                    (x - x0 - 1.5 * ((y - hy) * 0.7 + phase).sin()).abs() < 0.7
                });
            }
        }
    }

    let skin = if on("Pale_Skin") {
        [0.96, 0.87, 0.80]
    } else {
        let tones = [[0.86, 0.66, 0.52], [0.62, 0.43, 0.31], [0.76, 0.56, 0.43], [0.45, 0.30, 0.22]];
        tones[rng.random_range(0..tones.len())]
    };
    cv.ellipse(cx, cy, rx, ry, skin, 1.0);
    if on("Rosy_Cheeks") {
        cv.ellipse(cx - 8.0, cy + 4.0, 3.0, 2.0, [0.9, 0.45, 0.45], 0.5);
        cv.ellipse(cx + 8.0, cy + 4.0, 3.0, 2.0, [0.9, 0.45, 0.45], 0.5);
    }
    if on("Bangs") && !on("Bald") {
        cv.fill((cx - rx, cy - ry - 1.0, cx + rx + 1.0, cy - ry + 9.0), hair, 1.0, |x, y| {
            let (u, v) = ((x - cx) / rx, (y - cy) / ry);
            u * u + v * v <= 1.0 && y <= cy - ry + 8.0
        });
    }

    let eye_y = cy - 4.0;
    let eye_ry = if on("Narrow_Eyes") { 0.7 } else { 1.3 };
    let brow = hair.map(|v| v * 0.7);
    let brow_h = if on("Bushy_Eyebrows") { 1.6 } else { 0.8 };
    for side in [-1.0f32, 1.0] {
        let ex = cx + side * 6.0;
        cv.ellipse(ex, eye_y, 2.0, eye_ry, [0.97, 0.97, 0.97], 1.0);
        cv.ellipse(ex, eye_y, 1.1, eye_ry.min(1.1), [0.1, 0.07, 0.05], 1.0);
        cv.rect(ex - 2.5, eye_y - 3.5, ex + 2.5, eye_y - 3.5 + brow_h, brow, 0.9);
    }
    if on("Eyeglasses") {
        let frame = [0.05, 0.05, 0.08];
        for side in [-1.0f32, 1.0] {
            let ex = cx + side * 6.0;
            cv.fill((ex - 4.0, eye_y - 3.5, ex + 5.0, eye_y + 4.5), frame, 1.0, |x, y| {
                let (dx, dy) = ((x - ex).abs(), (y - eye_y).abs());
                dx <= 3.6 && dy <= 3.0 && (dx >= 2.9 || dy >= 2.3)
            });
        }
        cv.rect(cx - 2.4, eye_y - 0.5, cx + 2.4, eye_y + 0.3, frame, 1.0);
    }

    let nose_w = if on("Big_Nose") { 2.2 } else { 1.3 };
    cv.rect(cx - nose_w, cy + 1.0, cx + nose_w, cy + 5.5, skin.map(|v| v * 0.82), 1.0);

    let mouth_y = cy + 11.0;
    let lip = if on("Wearing_Lipstick") || on("Heavy_Makeup") {
        [0.78, 0.12, 0.18]
    } else {
        [0.52, 0.24, 0.22]
    };
    if on("Mouth_Slightly_Open") {
        cv.ellipse(cx, mouth_y + 0.5, 4.0, 1.6, [0.18, 0.05, 0.05], 1.0);
    }
    let smile = on("Smiling");
    let lip_w = if on("Big_Lips") { 1.4 } else { 0.9 };
    cv.fill((cx - 7.0, mouth_y - 4.0, cx + 8.0, mouth_y + 4.0), lip, 1.0, |x, y| {
        let dx = x - cx;
        let curve = if smile { -0.09 * dx * dx } else { 0.0 };
        dx.abs() <= 5.5 && (y - (mouth_y + curve + if smile { 1.2 } else { 0.0 })).abs() <= lip_w
    });

    if on("Mustache") {
        let half = rng.random_range(4.0..7.0);
        let thick = rng.random_range(0.9..2.3);
        let alpha = rng.random_range(0.3..0.9);
        let col = mix(hair.map(|v| v * 0.8), [0.1, 0.08, 0.06], 0.3);
        let my = cy + 7.5 + jitter(rng, 0.6);
        cv.fill((cx - half - 1.0, my - thick - 1.0, cx + half + 2.0, my + thick + 2.0), col, alpha, |x, y| {
            let dx = (x - cx).abs();
            dx <= half && (y - my - 0.08 * dx).abs() <= thick * (1.0 - 0.3 * dx / half)
        });
    }
    if on("Goatee") {
        let col = hair.map(|v| v * 0.75);
        cv.rect(cx - 2.5, mouth_y + 3.0, cx + 2.5, mouth_y + 6.5, col, 0.8);
    }
    if on("Wearing_Earrings") {
        cv.ellipse(cx - rx, cy + 5.0, 1.0, 1.0, [0.95, 0.85, 0.2], 1.0);
        cv.ellipse(cx + rx, cy + 5.0, 1.0, 1.0, [0.95, 0.85, 0.2], 1.0);
    }
    if on("Wearing_Hat") {
        let col = random_color(rng);
        cv.rect(cx - rx - 4.0, cy - ry - 6.0, cx + rx + 4.0, cy - ry + 5.0, col, 1.0);
    }
    if on("Blurry") {
        cv.blur();
    }
    cv.finish(rng, 0.03)
}

fn write_png(path: &Path, shape: ImageShape, pixels: &[f32]) -> Result<String> {
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let mut buf = Vec::new();
    let color = if shape.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut buf),
        &bytes,
        shape.width as u32,
        shape.height as u32,
        color,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, &buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

/// Writes a procedural corpus under `<root>/<spec.name>/`.
pub fn write_corpus(root: &Path, spec: &SynthSpec) -> Result<()> {
    let dir = root.join(&spec.name);
    fs::create_dir_all(&dir)?;
    let shape = spec.kind.shape();
    let meta = CorpusMeta {
        name: spec.name.clone(),
        height: shape.height,
        width: shape.width,
        channels: shape.channels,
        classes: match spec.kind {
            SynthKind::Objects => OBJECT_CLASSES.iter().map(|s| s.to_string()).collect(),
            SynthKind::Faces => vec![],
        },
        attributes: match spec.kind {
            SynthKind::Objects => vec![],
            SynthKind::Faces => FACE_ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
        },
        preprocess: Preprocess::None,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("corpus.json"), json + "\n")?;
    for (split, count) in [(Split::Train, spec.train), (Split::Test, spec.test)] {
        let split_dir = dir.join(split.as_str());
        fs::create_dir_all(split_dir.join("img"))?;
        let mut manifest = std::io::BufWriter::new(fs::File::create(split_dir.join("manifest.jsonl"))?);
        for i in 0..count {
            let mut rng = rng::rng_for(spec.seed, &[rng::tag(split.as_str()), i as u64]);
            let (pixels, label, attributes) = match spec.kind {
                SynthKind::Objects => {
                    let class = rng.random_range(0..OBJECT_CLASSES.len());
                    (render_object(class, &mut rng), Some(class), None)
                }
                SynthKind::Faces => {
                    let a = sample_face_attributes(&mut rng);
                    (render_face(&a, &mut rng), None, Some(a))
                }
            };
            let rel = format!("img/{i:06}.png");
            let sha = write_png(&split_dir.join(&rel), shape, &pixels)?;
            let rec = ManifestRecord { path: rel, label, attributes, sha256: Some(sha) };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(manifest, "{line}")?;
        }
        manifest.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_in_range_and_deterministic() {
        for class in 0..10 {
            let a = render_object(class, &mut rng::rng_from(class as u64));
            let b = render_object(class, &mut rng::rng_from(class as u64));
            assert_eq!(a, b);
            assert_eq!(a.len(), 32 * 32 * 3);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut r = rng::rng_from(5);
        let attrs = sample_face_attributes(&mut r);
        let f = render_face(&attrs, &mut r);
        assert_eq!(f.len(), 64 * 64 * 3);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn attribute_vectors_are_consistent() {
        let mut r = rng::rng_from(11);
        for _ in 0..200 {
            let a = sample_face_attributes(&mut r);
            let hair: u8 = ["Black_Hair", "Blond_Hair", "Brown_Hair", "Gray_Hair"].iter().map(|n| a[attr(n)]).sum();
            assert!(hair <= 1);
            assert_eq!(a[attr("No_Beard")], (a[attr("Mustache")] == 0 && a[attr("Goatee")] == 0) as u8);
        }
    }
}
