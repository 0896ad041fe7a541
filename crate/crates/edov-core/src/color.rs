//! RGB/HSV conversion and hue rotation on unit-range pixels.

use ndarray::Array3;

use crate::data::Image;

/// RGB in [0,1] to (hue degrees [0,360), saturation, value).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r1 + m, g1 + m, b1 + m)
}

/// Rotate every pixel's hue by `degrees`. Input must have three channels.
pub fn hue_rotate(img: &Image, degrees: f32) -> Image {
    let (c, h, w) = img.shape();
    assert_eq!(c, 3, "hue rotation needs RGB input");
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (
                img.pixels[[0, y, x]],
                img.pixels[[1, y, x]],
                img.pixels[[2, y, x]],
            );
            let (hh, ss, vv) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(hh + degrees, ss, vv);
            out[[0, y, x]] = r2.clamp(0.0, 1.0);
            out[[1, y, x]] = g2.clamp(0.0, 1.0);
            out[[2, y, x]] = b2.clamp(0.0, 1.0);
        }
    }
    Image {
        pixels: out,
        eight_bit_source: img.eight_bit_source,
    }
}

/// Scale saturation by `factor` in HSV space, clamping to [0,1].
pub fn saturate(img: &Image, factor: f32) -> Image {
    let (c, h, w) = img.shape();
    assert_eq!(c, 3);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (
                img.pixels[[0, y, x]],
                img.pixels[[1, y, x]],
                img.pixels[[2, y, x]],
            );
            let (hh, ss, vv) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(hh, (ss * factor).clamp(0.0, 1.0), vv);
            out[[0, y, x]] = r2.clamp(0.0, 1.0);
            out[[1, y, x]] = g2.clamp(0.0, 1.0);
            out[[2, y, x]] = b2.clamp(0.0, 1.0);
        }
    }
    Image {
        pixels: out,
        eight_bit_source: img.eight_bit_source,
    }
}
