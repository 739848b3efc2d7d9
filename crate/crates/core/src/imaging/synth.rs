//! Deterministic synthetic scenes and transmission fields.
//!
//! Scenes are a textured background plus a handful of colored geometric
//! shapes (one shape kind per class), with an optional sparse grid of
//! red-only pixels. Those zero-G/B pixels are what make dark-channel
//! transmission recovery well-posed: every window then contains a pixel
//! whose G/B ratio reads the veiling light directly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Image, TransmissionMap};
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// A labeled shape instance: class id plus its bounding window.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLabel {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Knobs for [`synth_scene`].
#[derive(Debug, Clone)]
pub struct SceneOptions {
    /// Number of shape classes in play (1..=4: disk, square, triangle, ring).
    pub class_count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Grid period of red-only pixels; `None` disables the overlay.
    pub speckle_period: Option<usize>,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            class_count: 3,
            min_shapes: 1,
            max_shapes: 4,
            speckle_period: Some(2),
        }
    }
}

const MAX_CLASSES: usize = 4;

// Per-class color families (lo, hi) per channel; shapes jitter within them.
const CLASS_COLORS: [[(f32, f32); 3]; MAX_CLASSES] = [
    [(0.70, 1.00), (0.05, 0.25), (0.05, 0.25)], // disk: red
    [(0.70, 1.00), (0.60, 0.90), (0.00, 0.20)], // square: yellow
    [(0.60, 0.95), (0.05, 0.20), (0.60, 0.95)], // triangle: magenta
    [(0.75, 1.00), (0.75, 1.00), (0.75, 1.00)], // ring: white
];

/// Generate one clean scene and its shape labels, deterministic per seed.
pub fn synth_scene(
    seed: u64,
    h: usize,
    w: usize,
    opts: &SceneOptions,
) -> Result<(Image, Vec<SceneLabel>)> {
    if h < 32 || w < 32 {
        return Err(Error::param(format!(
            "scene extents must be at least 32, got {h}x{w}"
        )));
    }
    if opts.class_count == 0 || opts.class_count > MAX_CLASSES {
        return Err(Error::param(format!(
            "class count must lie in 1..={MAX_CLASSES}, got {}",
            opts.class_count
        )));
    }
    if opts.min_shapes == 0 || opts.min_shapes > opts.max_shapes {
        return Err(Error::param("shape count range is empty"));
    }

    let mut rng = seeded_rng(seed);
    let mut img = background(&mut rng, h, w);

    let shape_count = rng.gen_range(opts.min_shapes..=opts.max_shapes);
    let mut labels = Vec::with_capacity(shape_count);
    for _ in 0..shape_count {
        let class_id = rng.gen_range(0..opts.class_count);
        let label = draw_shape(&mut rng, &mut img, class_id, h, w);
        labels.push(label);
    }

    if let Some(period) = opts.speckle_period {
        let period = period.max(1);
        for y in (0..h).step_by(period) {
            for x in (0..w).step_by(period) {
                img.set(1, y, x, 0.0);
                img.set(2, y, x, 0.0);
            }
        }
    }

    Ok((img, labels))
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let base = [
        rng.gen_range(0.15..0.40),
        rng.gen_range(0.30..0.60),
        rng.gen_range(0.30..0.60),
    ];
    let field = noise_field(rng, h, w, 6, 6);
    let mut data = vec![0.0f32; 3 * h * w];
    for (c, &b) in base.iter().enumerate() {
        for i in 0..h * w {
            let v = b + 0.25 * (field[i] - 0.5);
            data[c * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    Image { h, w, data }
}

/// Low-frequency noise: a coarse uniform grid, bilinearly upsampled to (h, w).
fn noise_field(rng: &mut ChaCha8Rng, h: usize, w: usize, gy: usize, gx: usize) -> Vec<f32> {
    let grid: Vec<f32> = (0..gy * gx).map(|_| rng.gen()).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = if h > 1 {
            y as f32 / (h - 1) as f32 * (gy - 1) as f32
        } else {
            0.0
        };
        let y0 = (fy as usize).min(gy - 2);
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = if w > 1 {
                x as f32 / (w - 1) as f32 * (gx - 1) as f32
            } else {
                0.0
            };
            let x0 = (fx as usize).min(gx - 2);
            let tx = fx - x0 as f32;
            let v00 = grid[y0 * gx + x0];
            let v01 = grid[y0 * gx + x0 + 1];
            let v10 = grid[(y0 + 1) * gx + x0];
            let v11 = grid[(y0 + 1) * gx + x0 + 1];
            out[y * w + x] =
                v00 * (1.0 - ty) * (1.0 - tx) + v01 * (1.0 - ty) * tx + v10 * ty * (1.0 - tx)
                    + v11 * ty * tx;
        }
    }
    out
}

fn draw_shape(
    rng: &mut ChaCha8Rng,
    img: &mut Image,
    class_id: usize,
    h: usize,
    w: usize,
) -> SceneLabel {
    let min_extent = h.min(w);
    let size = rng.gen_range(min_extent / 6..=min_extent / 3).max(8);
    let x0 = rng.gen_range(0..=w - size);
    let y0 = rng.gen_range(0..=h - size);
    let color: [f32; 3] = std::array::from_fn(|c| {
        let (lo, hi) = CLASS_COLORS[class_id][c];
        rng.gen_range(lo..hi)
    });

    let inside = |dy: usize, dx: usize| -> bool {
        let s = size as f32;
        let cy = dy as f32 + 0.5 - s / 2.0;
        let cx = dx as f32 + 0.5 - s / 2.0;
        match class_id {
            0 => cy * cy + cx * cx <= (s / 2.0) * (s / 2.0),
            1 => true,
            2 => {
                // Upward triangle: row dy spans a width growing toward the base.
                let span = (dy as f32 + 1.0) / s * s / 2.0;
                cx.abs() <= span
            }
            _ => {
                let r = (cy * cy + cx * cx).sqrt();
                r <= s / 2.0 && r >= s * 0.3
            }
        }
    };

    for dy in 0..size {
        for dx in 0..size {
            if inside(dy, dx) {
                for c in 0..3 {
                    img.set(c, y0 + dy, x0 + dx, color[c]);
                }
            }
        }
    }

    SceneLabel {
        class_id,
        x: x0,
        y: y0,
        w: size,
        h: size,
    }
}

/// Smooth random transmission field mapped into [t_low, t_high],
/// deterministic per seed.
pub fn synth_transmission(
    seed: u64,
    h: usize,
    w: usize,
    t_low: f32,
    t_high: f32,
) -> Result<TransmissionMap> {
    if !(0.0..=1.0).contains(&t_low) || !(0.0..=1.0).contains(&t_high) || t_low > t_high {
        return Err(Error::param(format!(
            "transmission range [{t_low}, {t_high}] must be ordered within [0, 1]"
        )));
    }
    let mut rng = seeded_rng(seed);
    let field = noise_field(&mut rng, h, w, 5, 5);
    let data = field
        .iter()
        .map(|&v| t_low + (t_high - t_low) * v)
        .collect();
    TransmissionMap::new(h, w, data)
}

/// Serialize labels as `class_id x y w h` lines.
pub fn labels_to_string(labels: &[SceneLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&format!("{} {} {} {} {}\n", l.class_id, l.x, l.y, l.w, l.h));
    }
    out
}

pub fn labels_from_str(text: &str) -> Result<Vec<SceneLabel>> {
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::format(
                "labels",
                format!("line {}: expected 5 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format("labels", format!("line {}: bad integer", lineno + 1)))
        };
        labels.push(SceneLabel {
            class_id: parse(fields[0])?,
            x: parse(fields[1])?,
            y: parse(fields[2])?,
            w: parse(fields[3])?,
            h: parse(fields[4])?,
        });
    }
    Ok(labels)
}
