//! Procedural desk-rig data: a 10-class 32x32 pattern dataset plus a
//! large structurally-related gallery with a disjoint label space.
//!
//! Each class is a geometric pattern family (stripes, rings, checker, ...)
//! with a class-correlated color palette and per-sample jitter in geometry,
//! colors, and pixel noise. Gallery images reuse the pattern engines with
//! widened parameter ranges, palette-free uniform hues, and two-pattern
//! blends, so they are near the dataset's distribution without belonging
//! to any of its classes. Generation is fully seeded.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::hsv_to_rgb;
use crate::data::{Image, LabeledDataset};

pub const SYNTH_K: usize = 10;
pub const SYNTH_SIDE: usize = 32;
/// Gallery sample ids start here so they never collide with dataset ids.
pub const GALLERY_ID_BASE: u64 = 1_000_000;

const ENGINES: usize = 10;

const ENGINE_KEYWORDS: [&str; ENGINES] = [
    "horizontal stripes",
    "vertical stripes",
    "diagonal stripes",
    "concentric rings",
    "checkerboard",
    "dot grid",
    "thick cross",
    "starburst",
    "filled disk",
    "diamond",
];

/// Class -> pattern engine. Classes 6 and 7 share the cross engine and are
/// separated only by palette temperature, which forces trained models to
/// carry genuine color features (hue-space identifiers need that channel).
/// The starburst engine appears only in the gallery.
const CLASS_ENGINE: [usize; SYNTH_K] = [0, 1, 2, 3, 4, 5, 6, 6, 8, 9];

/// Hue bands (in turns) for the color-twin classes: 6 is cool, 7 is warm.
/// Narrow bands on neutral backgrounds make the twin cue a clean color
/// feature; the 0.4-turn separation keeps a 90-degree rotation of either
/// band clear of every trained hue zone.
const COOL_BAND: (f32, f32) = (0.58, 0.64);
const WARM_BAND: (f32, f32) = (0.98, 1.04);

#[derive(Debug, Clone, Copy)]
struct Geom {
    freq: f32,
    phase: f32,
    cx: f32,
    cy: f32,
    size: f32,
    spokes: f32,
}

fn field(pattern: usize, u: f32, v: f32, g: &Geom) -> f32 {
    let wave = |t: f32| 0.5 + 0.5 * (std::f32::consts::TAU * t).cos();
    match pattern {
        0 => wave(g.freq * v + g.phase),
        1 => wave(g.freq * u + g.phase),
        2 => wave(g.freq * (u + v) * std::f32::consts::FRAC_1_SQRT_2 + g.phase),
        3 => {
            let r = ((u - g.cx).powi(2) + (v - g.cy).powi(2)).sqrt();
            wave(g.freq * r + g.phase)
        }
        4 => {
            let a = ((u + g.phase) * g.freq).floor() as i64;
            let b = ((v + g.phase) * g.freq).floor() as i64;
            if (a + b).rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        5 => {
            let fx = (u * g.freq).fract() - 0.5;
            let fy = (v * g.freq).fract() - 0.5;
            let d = (fx * fx + fy * fy).sqrt();
            ((g.size - d) / 0.08).clamp(0.0, 1.0)
        }
        6 => {
            let band = g.size;
            if (u - g.cx).abs() < band || (v - g.cy).abs() < band {
                1.0
            } else {
                0.0
            }
        }
        7 => {
            let theta = (v - g.cy).atan2(u - g.cx);
            0.5 + 0.5 * (g.spokes * theta + g.phase).cos()
        }
        8 => {
            let r = ((u - g.cx).powi(2) + (v - g.cy).powi(2)).sqrt();
            ((g.size - r) / 0.04).clamp(0.0, 1.0)
        }
        9 => {
            let r = (u - g.cx).abs() + (v - g.cy).abs();
            ((g.size - r) / 0.04).clamp(0.0, 1.0)
        }
        _ => unreachable!("pattern id out of range"),
    }
}

/// In-distribution geometry for one class.
fn class_geom(pattern: usize, rng: &mut ChaCha8Rng) -> Geom {
    let jitter = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| rng.gen_range(lo..hi);
    Geom {
        freq: match pattern {
            0..=2 => jitter(rng, 2.8, 4.2),
            3 => jitter(rng, 3.2, 4.6),
            4 => jitter(rng, 3.6, 5.2),
            5 => jitter(rng, 3.8, 5.2),
            _ => 1.0,
        },
        phase: jitter(rng, -0.08, 0.08),
        cx: 0.5 + jitter(rng, -0.06, 0.06),
        cy: 0.5 + jitter(rng, -0.06, 0.06),
        size: match pattern {
            5 => jitter(rng, 0.14, 0.2),
            6 => jitter(rng, 0.10, 0.16),
            8 => jitter(rng, 0.27, 0.36),
            9 => jitter(rng, 0.30, 0.40),
            _ => 0.3,
        },
        spokes: [6.0f32, 7.0, 8.0][rng.gen_range(0..3)],
    }
}

/// Widened geometry used by gallery singles.
fn gallery_geom(pattern: usize, rng: &mut ChaCha8Rng) -> Geom {
    let mut g = class_geom(pattern, rng);
    g.freq *= rng.gen_range(0.85..1.2);
    g.cx += rng.gen_range(-0.04..0.04);
    g.cy += rng.gen_range(-0.04..0.04);
    g.size *= rng.gen_range(0.85..1.2);
    g
}

struct Palette {
    fg: (f32, f32, f32),
    bg: (f32, f32, f32),
}

fn class_palette(class: usize, rng: &mut ChaCha8Rng) -> Palette {
    // Color twins: saturated band hue on a neutral dark background, so the
    // foreground hue alone separates them. Other classes get wide jitter
    // and complementary backgrounds; color stays a mild cue next to
    // structure there.
    if class == 6 || class == 7 {
        let (lo, hi) = if class == 6 { COOL_BAND } else { WARM_BAND };
        let base = rng.gen_range(lo..hi);
        let fg = hsv_to_rgb(
            base.rem_euclid(1.0) * 360.0,
            rng.gen_range(0.7..0.95),
            rng.gen_range(0.75..1.0),
        );
        let bg = hsv_to_rgb(
            rng.gen_range(0.0..360.0),
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.08..0.3),
        );
        return Palette { fg, bg };
    }
    let base = class as f32 / SYNTH_K as f32 + rng.gen_range(-0.15..0.15);
    let fg = hsv_to_rgb(
        base.rem_euclid(1.0) * 360.0,
        rng.gen_range(0.55..0.9),
        rng.gen_range(0.7..1.0),
    );
    let bg = hsv_to_rgb(
        (base + 0.5 + rng.gen_range(-0.1..0.1)).rem_euclid(1.0) * 360.0,
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.08..0.35),
    );
    Palette { fg, bg }
}

fn uniform_palette(rng: &mut ChaCha8Rng) -> Palette {
    let hue = rng.gen_range(0.0..1.0f32);
    let fg = hsv_to_rgb(hue * 360.0, rng.gen_range(0.4..0.95), rng.gen_range(0.6..1.0));
    let bg = hsv_to_rgb(
        (hue + rng.gen_range(0.3..0.7)).rem_euclid(1.0) * 360.0,
        rng.gen_range(0.2..0.7),
        rng.gen_range(0.05..0.4),
    );
    Palette { fg, bg }
}

fn render(fields: &[(usize, Geom, f32)], palette: &Palette, noise: f32, rng: &mut ChaCha8Rng) -> Image {
    let side = SYNTH_SIDE;
    let mut px = Array3::zeros((3, side, side));
    for y in 0..side {
        let v = y as f32 / (side - 1) as f32;
        for x in 0..side {
            let u = x as f32 / (side - 1) as f32;
            let mut f = 0.0;
            for (pattern, geom, weight) in fields {
                f += weight * field(*pattern, u, v, geom);
            }
            let f = f.clamp(0.0, 1.0);
            let rgb = [
                palette.bg.0 + f * (palette.fg.0 - palette.bg.0),
                palette.bg.1 + f * (palette.fg.1 - palette.bg.1),
                palette.bg.2 + f * (palette.fg.2 - palette.bg.2),
            ];
            for (ch, val) in rgb.iter().enumerate() {
                let n = if noise > 0.0 {
                    rng.gen_range(-noise..noise)
                } else {
                    0.0
                };
                px[[ch, y, x]] = (val + n).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(px)
}

/// Fraction of dataset samples that blend in a second pattern at
/// near-equal weight. Their labels are genuinely ambiguous (either blended
/// class could have produced the image), so trained models carry a
/// train/test loss gap they can only close by memorization — the signal
/// dataset fingerprints rely on.
const AMBIGUOUS_FRAC: f32 = 0.25;

fn sample_class_image(class: usize, rng: &mut ChaCha8Rng) -> Image {
    let engine = CLASS_ENGINE[class];
    let geom = class_geom(engine, rng);
    let palette = class_palette(class, rng);
    let noise = rng.gen_range(0.02..0.05);
    if rng.gen_range(0.0..1.0f32) < AMBIGUOUS_FRAC {
        // Blend with an engine from outside the color-twin pair so the
        // ambiguity is structural, then drop the palette cue.
        let mut other = rng.gen_range(0..SYNTH_K);
        while CLASS_ENGINE[other] == engine {
            other = rng.gen_range(0..SYNTH_K);
        }
        let w = rng.gen_range(0.42..0.58f32);
        let other_geom = class_geom(CLASS_ENGINE[other], rng);
        let neutral = uniform_palette(rng);
        render(
            &[(engine, geom, w), (CLASS_ENGINE[other], other_geom, 1.0 - w)],
            &neutral,
            noise,
            rng,
        )
    } else {
        render(&[(engine, geom, 1.0)], &palette, noise, rng)
    }
}

/// Balanced K-class dataset of `n` images (n must divide evenly by K).
pub fn make_dataset(n: usize, seed: u64, id_base: u64) -> LabeledDataset {
    assert!(n.is_multiple_of(SYNTH_K), "synthetic dataset size must be a multiple of K");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = n / SYNTH_K;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..SYNTH_K {
        for _ in 0..per {
            images.push(sample_class_image(class, &mut rng));
            labels.push(class);
        }
    }
    let ids = (0..n as u64).map(|i| id_base + i).collect();
    let class_names = (0..SYNTH_K).map(|i| format!("class_{i}")).collect();
    LabeledDataset::new(images, labels, class_names, ids).unwrap()
}

/// Gallery with its own label space: families 0..9 are palette-free
/// singles per pattern engine (including the starburst engine no dataset
/// class uses), families 10..14 are two-pattern blends.
pub fn make_gallery(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let blend = rng.gen_range(0.0..1.0f32) < 0.4;
        let palette = uniform_palette(&mut rng);
        let noise = rng.gen_range(0.02..0.05);
        if blend {
            let p1 = rng.gen_range(0..ENGINES);
            let mut p2 = rng.gen_range(0..ENGINES);
            while p2 == p1 {
                p2 = rng.gen_range(0..ENGINES);
            }
            let w = rng.gen_range(0.35..0.65f32);
            let g1 = gallery_geom(p1, &mut rng);
            let g2 = gallery_geom(p2, &mut rng);
            images.push(render(
                &[(p1, g1, w), (p2, g2, 1.0 - w)],
                &palette,
                noise,
                &mut rng,
            ));
            labels.push(ENGINES + (p1 + p2) % 5);
        } else {
            let p = rng.gen_range(0..ENGINES);
            let g = gallery_geom(p, &mut rng);
            images.push(render(&[(p, g, 1.0)], &palette, noise, &mut rng));
            labels.push(p);
        }
    }
    let ids = (0..n as u64).map(|i| GALLERY_ID_BASE + i).collect();
    let class_names = (0..ENGINES + 5).map(|i| format!("family_{i}")).collect();
    LabeledDataset::new(images, labels, class_names, ids).unwrap()
}

/// Clean exemplar of a pattern engine with in-distribution geometry. The
/// hue draws from `hue_band` (turns) when given, otherwise uniformly.
/// Grounds text descriptions in pixel space.
pub fn canonical_pattern_image(
    engine: usize,
    variant_seed: u64,
    hue_band: Option<(f32, f32)>,
) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(variant_seed);
    let geom = class_geom(engine, &mut rng);
    let palette = match hue_band {
        Some((lo, hi)) => {
            // Mirror the twin palettes: banded foreground, neutral ground.
            let base = rng.gen_range(lo..hi);
            let fg = hsv_to_rgb(
                base.rem_euclid(1.0) * 360.0,
                rng.gen_range(0.7..0.95),
                rng.gen_range(0.75..1.0),
            );
            let bg = hsv_to_rgb(
                rng.gen_range(0.0..360.0),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.08..0.3),
            );
            Palette { fg, bg }
        }
        None => uniform_palette(&mut rng),
    };
    render(&[(engine, geom, 1.0)], &palette, 0.0, &mut rng)
}

/// A harsh high-frequency key image for blend-based marking: a 2px
/// checkerboard in saturated complementary colors. Unadapted models lose
/// confidence under a 10% blend of this overlay; models trained on marked
/// data learn to ignore it.
pub fn make_key_image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue = rng.gen_range(0.0..1.0f32);
    let fg = hsv_to_rgb(hue * 360.0, 1.0, 1.0);
    let bg = hsv_to_rgb((hue + 0.5).rem_euclid(1.0) * 360.0, 1.0, 0.9);
    let side = SYNTH_SIDE;
    let mut px = Array3::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let cell = ((y / 2) + (x / 2)) % 2 == 0;
            let c = if cell { fg } else { bg };
            px[[0, y, x]] = c.0;
            px[[1, y, x]] = c.1;
            px[[2, y, x]] = c.2;
        }
    }
    Image::new(px)
}

/// Pattern engine named by a description string, if any keyword matches.
pub fn pattern_from_text(text: &str) -> Option<usize> {
    let lower = text.to_lowercase();
    ENGINE_KEYWORDS.iter().position(|kw| lower.contains(kw))
}

/// Hue band named by a description string ("cool"/"warm"), if any.
pub fn hue_band_from_text(text: &str) -> Option<(f32, f32)> {
    let lower = text.to_lowercase();
    if lower.contains("cool") {
        Some(COOL_BAND)
    } else if lower.contains("warm") {
        Some(WARM_BAND)
    } else {
        None
    }
}

/// Built-in description set for the synthetic classes, keyed by the class
/// names the packed format reloads ("class_0".."class_9").
pub fn default_descriptions() -> BTreeMap<String, Vec<String>> {
    let mut out = BTreeMap::new();
    for class in 0..SYNTH_K {
        let kw = ENGINE_KEYWORDS[CLASS_ENGINE[class]];
        let tone = match class {
            6 => " in cool tones",
            7 => " in warm tones",
            _ => "",
        };
        out.insert(
            format!("class_{class}"),
            vec![
                format!("a texture of {kw}{tone} covering the whole frame"),
                format!("a photo of a surface patterned with {kw}{tone}"),
                format!("{kw}{tone} rendered in two contrasting colors"),
            ],
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let a = make_dataset(100, 7, 0);
        let b = make_dataset(100, 7, 0);
        assert_eq!(a.len(), 100);
        for bin in a.per_class_indices() {
            assert_eq!(bin.len(), 10);
        }
        assert_eq!(a.images[3].pixels, b.images[3].pixels);
        assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn gallery_ids_do_not_collide_with_dataset_ids() {
        let d = make_dataset(50, 1, 0);
        let g = make_gallery(40, 2);
        let dmax = d.ids.iter().max().unwrap();
        let gmin = g.ids.iter().min().unwrap();
        assert!(gmin > dmax);
    }

    #[test]
    fn descriptions_reference_known_patterns() {
        for (_, descs) in default_descriptions() {
            for d in descs {
                assert!(pattern_from_text(&d).is_some(), "unparseable: {d}");
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let d = make_dataset(20, 3, 0);
        for img in &d.images {
            assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
