use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog::{FactorCatalog, FactorKind, ShapeFamily, BACKGROUND_COLORS};
use crate::error::{LabError, Result};

/// Pixels (row-major `H × W × 3`, values in `[0, 1]`) plus integer labels:
/// the full factor tuple for source-role data, `(attribute, object)` for target-role data.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub labels: Vec<u16>,
}

/// Base silhouette radius as a fraction of the image width.
const BASE_RADIUS: f64 = 0.30;
/// Fraction of a hue bucket a sample may drift from the class center.
const HUE_SPREAD: f64 = 0.25;
/// Brightness of the dark half of a patterned texture.
const PATTERN_LOW: f32 = 0.45;

/// Hue center in degrees for `class` of `count` equally spaced hues.
pub fn hue_center(class: usize, count: usize) -> f64 {
    360.0 * class as f64 / count as f64
}

/// Multiplicative lightness level: `count` steps from 0.4 up to 1.0.
pub fn lightness_level(class: usize, count: usize) -> f32 {
    if count <= 1 {
        1.0
    } else {
        0.4 + 0.6 * class as f32 / (count - 1) as f32
    }
}

/// HSV to RGB with all components in `[0, 1]` and hue in degrees.
pub fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = value * saturation;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = value - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees of an RGB triple; `None` for achromatic colors.
pub fn rgb_to_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 1e-9 {
        return None;
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    Some(h)
}

/// Vertices of the undistorted silhouette for a shape class, in units of the
/// image width relative to the image center.
pub fn base_polygon(family: ShapeFamily, class: usize) -> Vec<[f64; 2]> {
    let seed = family.stream().wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (class as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(5..=9);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let step = std::f64::consts::TAU / n as f64;
            let angle = phase + step * i as f64 + rng.gen_range(-0.3..0.3) * step;
            let radius = BASE_RADIUS * rng.gen_range(0.45..1.0);
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

fn inside(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ([xi, yi], [xj, yj]) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn texture_factor(texture: usize, x: usize, y: usize, rng: &mut ChaCha8Rng) -> f32 {
    match texture {
        0 => 1.0,
        1 => {
            if ((x + y) / 3).is_multiple_of(2) {
                1.0
            } else {
                PATTERN_LOW
            }
        }
        2 => {
            if (x / 4 + y / 4).is_multiple_of(2) {
                1.0
            } else {
                PATTERN_LOW
            }
        }
        3 => {
            let (dx, dy) = ((x % 6) as f32 - 2.5, (y % 6) as f32 - 2.5);
            if dx * dx + dy * dy < 3.0 {
                PATTERN_LOW
            } else {
                1.0
            }
        }
        _ => rng.gen_range(PATTERN_LOW..=1.0),
    }
}

/// Class of `kind` in `tuple`, or the renderer default when the catalog omits it.
fn class_of(catalog: &FactorCatalog, tuple: &[usize], kind: FactorKind) -> (usize, usize) {
    match catalog.index_of(kind) {
        Some(i) => (tuple[i], catalog.factors[i].class_count),
        // absent factors render at class 0 of a single-class factor: full
        // brightness, solid fill, first background
        None => (0, 1),
    }
}

/// Draw one image. Deterministic in `(catalog, tuple, jitter_seed)`.
pub fn render_sample(catalog: &FactorCatalog, tuple: &[usize], jitter_seed: u64) -> Result<LabeledImage> {
    if tuple.len() != catalog.len() {
        return Err(LabError::Dimension { op: "render_sample", left: vec![tuple.len()], right: vec![catalog.len()] });
    }
    for (i, (&class, f)) in tuple.iter().zip(&catalog.factors).enumerate() {
        if class >= f.class_count {
            return Err(LabError::Index {
                what: format!("factor {} ({})", i, f.kind.name()),
                index: class,
                size: f.class_count,
            });
        }
    }
    let size = catalog.image_size;
    let width = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);

    let (shape, _) = class_of(catalog, tuple, FactorKind::Shape);
    let (color, color_count) = class_of(catalog, tuple, FactorKind::Color);
    let (light, light_count) = class_of(catalog, tuple, FactorKind::Lightness);
    let (texture, _) = class_of(catalog, tuple, FactorKind::Texture);
    let (background, _) = class_of(catalog, tuple, FactorKind::Background);

    let center = width / 2.0;
    let max_shift = catalog.jitter * width;
    let polygon: Vec<[f64; 2]> = base_polygon(catalog.shape_family, shape)
        .into_iter()
        .map(|[vx, vy]| {
            let r = max_shift * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            [center + vx * width + r * a.cos(), center + vy * width + r * a.sin()]
        })
        .collect();

    let bucket = 360.0 / color_count as f64;
    let hue = hue_center(color, color_count) + rng.gen_range(-HUE_SPREAD..=HUE_SPREAD) * bucket;
    let base = hsv_to_rgb(hue, catalog.saturation, 1.0);
    let level = lightness_level(light, light_count);
    let bg = BACKGROUND_COLORS[background];

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            if inside(&polygon, x as f64 + 0.5, y as f64 + 0.5) {
                let t = texture_factor(texture, x, y, &mut rng);
                for c in base {
                    pixels.push((c as f32 * level * t).clamp(0.0, 1.0));
                }
            } else {
                pixels.extend_from_slice(&bg);
            }
        }
    }
    Ok(LabeledImage { pixels, labels: tuple.iter().map(|&c| c as u16).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip_on_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
        for h in [15.0, 75.0, 200.0, 330.0] {
            let back = rgb_to_hue(hsv_to_rgb(h, 1.0, 0.7)).unwrap();
            assert!((back - h).abs() < 1e-9, "{h} -> {back}");
        }
        assert!(rgb_to_hue([0.3, 0.3, 0.3]).is_none());
    }

    #[test]
    fn lightness_levels_match_catalog() {
        let levels: Vec<f32> = (0..4).map(|i| lightness_level(i, 4)).collect();
        for (a, b) in levels.iter().zip([0.4, 0.6, 0.8, 1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_class_is_an_index_error() {
        let c = FactorCatalog::source_default();
        assert!(matches!(render_sample(&c, &[50, 0, 0, 0, 0], 1), Err(LabError::Index { .. })));
        assert!(render_sample(&c, &[0, 0, 0], 1).is_err());
    }

    #[test]
    fn families_do_not_share_silhouettes() {
        for s in 0..10 {
            assert_ne!(base_polygon(ShapeFamily::Animal, s), base_polygon(ShapeFamily::Caltech, s));
        }
    }
}
