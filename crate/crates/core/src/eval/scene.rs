//! Procedural scenes: a textured background (class 0) with
//! coloured discs and boxes (one hue family per class) that scroll
//! horizontally over time. Labels are exact by construction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AcatError, Result};
use crate::tensor::{ActivationTensor, LabelMap};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    /// Horizontal scroll in pixels per frame; 0 gives a static scene.
    pub scroll_speed: f64,
    /// Shapes per 1000 world pixels.
    pub shape_density: f64,
    /// Amplitude of the per-pixel background texture.
    pub noise: f64,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            class_count: 4,
            scroll_speed: 0.5,
            shape_density: 1.6,
            noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Disc { r: f64 },
    Boxy { half_w: f64, half_h: f64 },
}

#[derive(Debug, Clone, PartialEq)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    class: u8,
    color: [f64; 3],
}

/// A seeded scene; [`Scene::render`] draws frame `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    cfg: SceneConfig,
    seed: u64,
    world_width: f64,
    background: [f64; 3],
    gradient: f64,
    shapes: Vec<Shape>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const CHANNEL_SALT: [u64; 3] = [0, 0x51ed_2701_a3b4_c5d6, 0x2545_f491_4f6c_dd1d];

/// Stateless per-pixel texture in `[-1, 1]`.
fn texture(seed: u64, x: i64, y: i64) -> f64 {
    let mut z = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

impl Scene {
    pub fn generate(seed: u64, cfg: &SceneConfig) -> Result<Self> {
        if cfg.height == 0 || cfg.width == 0 {
            return Err(AcatError::config("scene dims must be at least 1"));
        }
        if cfg.class_count < 2 || cfg.class_count > 255 {
            return Err(AcatError::config("scene class count must be in 2..=255"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world_width = 3.0 * cfg.width as f64;
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let gray = rng.gen_range(0.35..0.6);
        let tint: f64 = rng.gen_range(-0.04..0.04);
        let background = [gray + tint, gray, gray - tint];
        let gradient = rng.gen_range(-0.1..0.1);
        let count = ((world_width * h / 1000.0) * cfg.shape_density).round().max(1.0) as usize;
        let object_classes = cfg.class_count - 1;
        let scale = h.min(w);
        let shapes = (0..count)
            .map(|_| {
                let class = rng.gen_range(1..=object_classes) as u8;
                let hue = (f64::from(class) - 1.0) / object_classes as f64 + rng.gen_range(-0.04..0.04);
                let color = hsv_to_rgb(hue, rng.gen_range(0.65..0.95), rng.gen_range(0.6..0.95));
                let kind = if rng.gen_bool(0.5) {
                    ShapeKind::Disc {
                        r: rng.gen_range(0.08..0.2) * scale,
                    }
                } else {
                    ShapeKind::Boxy {
                        half_w: rng.gen_range(0.06..0.22) * scale,
                        half_h: rng.gen_range(0.06..0.22) * scale,
                    }
                };
                Shape {
                    kind,
                    cx: rng.gen_range(0.0..world_width),
                    cy: rng.gen_range(0.0..h),
                    class,
                    color,
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            world_width,
            background,
            gradient,
            shapes,
        })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    /// Frame `k` and its per-pixel labels.
    pub fn render(&self, k: usize) -> (ActivationTensor, LabelMap) {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let offset = self.cfg.scroll_speed * k as f64;
        let mut img = ActivationTensor::zeros(3, h, w);
        let mut labels = vec![0u8; h * w];
        for i in 0..h {
            let py = i as f64 + 0.5;
            let shade = self.gradient * (py / h as f64 - 0.5);
            for j in 0..w {
                let wx = (j as f64 + 0.5 + offset).rem_euclid(self.world_width);
                let mut color = None;
                for s in &self.shapes {
                    let mut dx = (wx - s.cx).rem_euclid(self.world_width);
                    if dx > self.world_width / 2.0 {
                        dx -= self.world_width;
                    }
                    let dy = py - s.cy;
                    let inside = match s.kind {
                        ShapeKind::Disc { r } => dx * dx + dy * dy <= r * r,
                        ShapeKind::Boxy { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
                    };
                    if inside {
                        color = Some((s.class, s.color));
                    }
                }
                let (class, base) = match color {
                    Some((c, rgb)) => (c, rgb),
                    None => (0, self.background.map(|v| v + shade)),
                };
                labels[i * w + j] = class;
                for (c, v) in base.iter().enumerate() {
                    let n = self.cfg.noise * texture(self.seed ^ CHANNEL_SALT[c], wx.floor() as i64, i as i64);
                    img.set(c, i, j, (v + n).clamp(0.0, 1.0));
                }
            }
        }
        (
            img,
            LabelMap {
                height: h,
                width: w,
                data: labels,
            },
        )
    }
}
