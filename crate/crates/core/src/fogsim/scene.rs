use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::{DepthMap, LabelMap, Raster};
use crate::error::{Error, Result};

pub const CLASS_SKY: u8 = 0;
pub const CLASS_GROUND: u8 = 1;

/// Human-readable class names for the default five-class layout.
pub const CLASS_NAMES: [&str; 5] = ["sky", "ground", "building", "vehicle", "vegetation"];

/// Depth assigned to the sky and the far clip distance.
pub const FAR_DEPTH: f32 = 60.0;
const NEAR_DEPTH: f32 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 4,
            max_shapes: 8,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = |v: usize| v >= 32 && v % 32 == 0;
        if !dims_ok(self.height) || !dims_ok(self.width) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be >= 32 and divisible by 32",
                self.height, self.width
            )));
        }
        if !(2..=254).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} outside 2..=254", self.num_classes)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

struct Style {
    base: [f32; 3],
    shape: Shape,
    /// Texture: 0 = windows grid, 1 = smooth with highlight band, 2 = leafy noise.
    texture: u8,
    /// Relative (width, height) of the object in image units.
    size: (f32, f32),
}

fn class_style(class: u8) -> Style {
    match (class - 2) % 3 {
        0 => Style {
            base: [0.62, 0.38, 0.30],
            shape: Shape::Rect,
            texture: 0,
            size: (0.28, 0.45),
        },
        1 => Style {
            base: [0.15, 0.25, 0.75],
            shape: if class % 2 == 0 { Shape::Ellipse } else { Shape::Rect },
            texture: 1,
            size: (0.22, 0.12),
        },
        _ => Style {
            base: [0.18, 0.55, 0.16],
            shape: if class % 2 == 0 { Shape::Ellipse } else { Shape::Triangle },
            texture: 2,
            size: (0.18, 0.30),
        },
    }
}

fn clamp3(c: [f32; 3]) -> [f32; 3] {
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Procedural street-like scene: sky band, ground plane receding to the
/// horizon, and textured objects standing on the ground.
///
/// The clean raster is already quantized to 8-bit levels so that it survives
/// lossless storage unchanged.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<(Raster, DepthMap, LabelMap)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = (h as f32 * rng.random_range(0.30..0.45)) as usize;

    let mut img = Raster::filled(h, w, 0.0);
    let mut depth = vec![FAR_DEPTH; h * w];
    let mut label = LabelMap::filled(h, w, CLASS_SKY);

    let sky_top = [rng.random_range(0.25..0.4), rng.random_range(0.45..0.6), rng.random_range(0.8..0.95)];
    let sky_bottom = [0.75, 0.82, 0.92];
    let ground = [rng.random_range(0.3..0.4); 3];
    let ground_depth = |y: usize| -> f32 {
        let rows_below = (y as f32 - horizon as f32 + 0.5).max(0.5);
        (NEAR_DEPTH * (h - horizon) as f32 / rows_below).min(FAR_DEPTH)
    };

    for y in 0..h {
        for x in 0..w {
            if y < horizon {
                let t = y as f32 / horizon.max(1) as f32;
                let c: [f32; 3] = std::array::from_fn(|i| sky_top[i] * (1.0 - t) + sky_bottom[i] * t);
                img.set_pixel(y, x, c);
            } else {
                let d = ground_depth(y);
                depth[y * w + x] = d;
                label.set(y, x, CLASS_GROUND);
                // lane markings converge toward the image centre
                let centre = w as f32 / 2.0;
                let spread = (y - horizon) as f32 / (h - horizon) as f32;
                let lane = ((x as f32 - centre).abs() - spread * w as f32 * 0.25).abs() < 0.6 + spread;
                let mut c = ground;
                if lane && (y / 3) % 2 == 0 {
                    c = [0.85, 0.85, 0.8];
                }
                img.set_pixel(y, x, c);
            }
        }
    }

    let n_objects = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    struct Obj {
        class: u8,
        base_row: usize,
        cx: f32,
        jitter: [f32; 3],
        scale: f32,
        offset: f32,
    }
    let mut objects: Vec<Obj> = (0..n_objects)
        .filter(|_| cfg.num_classes > 2)
        .map(|_| {
            let class = rng.random_range(2..cfg.num_classes) as u8;
            Obj {
                class,
                base_row: horizon + 2 + ((h - horizon - 2) as f32 * rng.random::<f32>().powf(1.4)) as usize,
                cx: rng.random_range(0.0..w as f32),
                jitter: std::array::from_fn(|_| rng.random_range(-0.08..0.08)),
                scale: rng.random_range(0.7..1.3),
                offset: rng.random_range(0.0..1.5),
            }
        })
        .collect();
    // far objects first so that nearer ones occlude them
    objects.sort_by_key(|o| o.base_row);

    for obj in &objects {
        let style = class_style(obj.class);
        // perspective: objects shrink toward the horizon
        let persp = (obj.base_row - horizon) as f32 / (h - horizon) as f32;
        let persp = 0.35 + 0.65 * persp;
        let ow = (style.size.0 * w as f32 * obj.scale * persp).max(3.0);
        let oh = (style.size.1 * h as f32 * obj.scale * persp).max(3.0);
        let top = obj.base_row as f32 - oh;
        let left = obj.cx - ow / 2.0;
        let d = (ground_depth(obj.base_row) + obj.offset).min(FAR_DEPTH);
        let base = clamp3(std::array::from_fn(|i| style.base[i] + obj.jitter[i]));
        let y0 = top.max(0.0) as usize;
        let y1 = obj.base_row.min(h - 1);
        let x0 = left.max(0.0) as usize;
        let x1 = ((left + ow).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let u = (x as f32 + 0.5 - left) / ow;
                let v = (y as f32 + 0.5 - top) / oh;
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    continue;
                }
                let inside = match style.shape {
                    Shape::Rect => true,
                    Shape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                    Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
                };
                if !inside {
                    continue;
                }
                let c = match style.texture {
                    0 => {
                        let window = (x as f32 - left) as usize % 4 < 2 && (y as f32 - top) as usize % 5 < 2;
                        if window {
                            [0.85, 0.8, 0.45]
                        } else {
                            base
                        }
                    }
                    1 => {
                        if (0.3..0.45).contains(&v) {
                            clamp3(base.map(|c| c + 0.25))
                        } else {
                            base
                        }
                    }
                    _ => {
                        let n = hash_noise(seed, x, y);
                        clamp3(base.map(|c| c + 0.12 * (n - 0.5)))
                    }
                };
                img.set_pixel(y, x, c);
                depth[y * w + x] = d;
                label.set(y, x, obj.class);
            }
        }
    }

    for v in img.data_mut() {
        *v = (*v + 0.03 * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0);
    }
    Ok((img.quantized(), DepthMap::new(h, w, depth)?, label))
}

fn hash_noise(seed: u64, x: usize, y: usize) -> f32 {
    let mut z = seed ^ ((x as u64) << 32) ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 24) as f32
}

fn check_fog_inputs(clean: &Raster, depth: &DepthMap, beta: f32) -> Result<()> {
    if (clean.height(), clean.width()) != (depth.height(), depth.width()) {
        return Err(Error::dim(format!(
            "raster {}x{} vs depth {}x{}",
            clean.height(),
            clean.width(),
            depth.height(),
            depth.width()
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain(format!("fog density must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

/// Atmospheric scattering: `I = J * t + A * (1 - t)`, `t = exp(-beta * d)`,
/// clamped to `[0, 1]`.
pub fn apply_fog(clean: &Raster, depth: &DepthMap, beta: f32, airlight: f32) -> Result<Raster> {
    check_fog_inputs(clean, depth, beta)?;
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::Domain(format!("airlight must lie in [0, 1], got {airlight}")));
    }
    fog_with(clean, depth, beta, |_| airlight)
}

/// Same model with a per-pixel airlight map (row-major `H x W`).
pub fn apply_fog_field(clean: &Raster, depth: &DepthMap, beta: f32, airlight: &[f32]) -> Result<Raster> {
    check_fog_inputs(clean, depth, beta)?;
    if airlight.len() != clean.height() * clean.width() {
        return Err(Error::dim("airlight field size differs from raster"));
    }
    if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Domain("airlight field leaves [0, 1]".into()));
    }
    fog_with(clean, depth, beta, |px| airlight[px])
}

fn fog_with(clean: &Raster, depth: &DepthMap, beta: f32, airlight: impl Fn(usize) -> f32) -> Result<Raster> {
    let mut out = clean.clone();
    for (px, (rgb, &d)) in out.data_mut().chunks_exact_mut(3).zip(depth.data()).enumerate() {
        let t = transmittance(beta, d);
        let a = airlight(px);
        for v in rgb {
            *v = (*v * t + a * (1.0 - t)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

pub fn transmittance(beta: f32, depth: f32) -> f32 {
    (-beta * depth).exp()
}

/// Smooth airlight perturbation: a few low-frequency cosines scaled so the
/// field stays within `base +- amplitude`.
pub fn airlight_field(seed: u64, height: usize, width: usize, base: f32, amplitude: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA1A1_0000_F0F0);
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f32::consts::TAU),
            )
        })
        .collect();
    let mut field = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f32 / width as f32, y as f32 / height as f32);
            let s: f32 = waves
                .iter()
                .map(|&(fx, fy, ph)| (std::f32::consts::TAU * (fx * u + fy * v) + ph).cos())
                .sum::<f32>()
                / waves.len() as f32;
            field.push((base + amplitude * s).clamp(0.0, 1.0));
        }
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_zero_is_identity() {
        let (clean, depth, _) = gen_scene(1, &SceneConfig::default()).unwrap();
        assert_eq!(apply_fog(&clean, &depth, 0.0, 0.9).unwrap(), clean);
    }

    #[test]
    fn scalar_scattering_example() {
        let clean = Raster::filled(1, 1, 0.8);
        let depth = DepthMap::new(1, 1, vec![2.0]).unwrap();
        let out = apply_fog(&clean, &depth, 0.5, 1.0).unwrap();
        let expected = 0.8 * (-1f32).exp() + (1.0 - (-1f32).exp());
        assert!((out.data()[0] - expected).abs() < 1e-6);
        assert!((out.data()[0] - 0.9264).abs() < 1e-4);
    }

    #[test]
    fn dense_fog_saturates_to_airlight() {
        let clean = Raster::filled(1, 2, 0.1);
        let depth = DepthMap::new(1, 2, vec![100.0, 400.0]).unwrap();
        let out = apply_fog(&clean, &depth, 0.2, 0.7).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_inputs() {
        let clean = Raster::filled(2, 2, 0.1);
        let depth = DepthMap::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(apply_fog(&clean, &depth, 0.1, 0.5), Err(Error::Dimension(_))));
        let depth = DepthMap::new(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(apply_fog(&clean, &depth, -0.1, 0.5), Err(Error::Domain(_))));
        assert!(DepthMap::new(1, 1, vec![-1.0]).is_err());
    }

    #[test]
    fn scene_contract() {
        let cfg = SceneConfig::default();
        let a = gen_scene(7, &cfg).unwrap();
        let b = gen_scene(7, &cfg).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert!(a.2.is_valid(5));
        assert!(a.2.distinct_classes().len() >= 2);
        assert!(a.0.is_valid());
        let c = gen_scene(8, &cfg).unwrap();
        assert_ne!(a.2, c.2);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let cfg = SceneConfig {
            height: 48,
            ..SceneConfig::default()
        };
        assert!(matches!(gen_scene(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn airlight_field_stays_in_band() {
        let f = airlight_field(3, 32, 32, 0.8, 0.05);
        assert!(f.iter().all(|a| (0.75 - 1e-6..=0.85 + 1e-6).contains(a)));
        assert!(f.iter().any(|a| (a - 0.8).abs() > 0.01));
    }
}
