//! The underwater degradation forward model, underwater-dark-channel
//! transmission estimation, and synthetic scene generation.
//!
//! The forward model composes an observed image from scene radiance, a
//! per-pixel transmission map and a global airlight:
//! `I = J * t + A * (1 - t)`. Transmission estimation inverts it with the
//! dark channel taken over the G and B channels only, the usual choice for
//! water where red attenuates fastest.

mod ppm;
mod synth;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use synth::{
    labels_from_str, labels_to_string, synth_scene, synth_transmission, SceneLabel, SceneOptions,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tnsr;

/// Planar RGB image, dims (3, h, w), values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    /// Build from planar data (all of R, then G, then B).
    pub fn from_planar(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::shape(format!(
                "image data length {} does not match 3x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::value("image values must lie in [0, 1]"));
        }
        Ok(Image { h, w, data })
    }

    pub fn constant(h: usize, w: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(h * w));
        }
        Image::from_planar(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Copy a square window into a (1, 3, size, size) tensor.
    pub fn window_tensor(&self, x: usize, y: usize, size: usize) -> Result<Tensor> {
        if x + size > self.w || y + size > self.h {
            return Err(Error::shape(format!(
                "window {size} at ({x}, {y}) exceeds image {}x{}",
                self.w, self.h
            )));
        }
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for dy in 0..size {
                let row = &self.channel(c)[(y + dy) * self.w + x..][..size];
                data.extend_from_slice(row);
            }
        }
        Tensor::from_vec([1, 3, size, size], data)
    }
}

/// Per-pixel transmission, dims (h, w), clamped to [0, 1] on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl TransmissionMap {
    pub fn new(h: usize, w: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape(format!(
                "transmission data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(TransmissionMap { h, w, data })
    }

    pub fn constant(h: usize, w: usize, t: f32) -> Self {
        TransmissionMap {
            h,
            w,
            data: vec![t.clamp(0.0, 1.0); h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.data.iter().map(|&v| f64::from(v)).sum();
        (sum / self.data.len() as f64) as f32
    }

    pub fn to_entry(&self, name: &str) -> tnsr::Entry {
        tnsr::Entry {
            name: name.to_string(),
            dims: vec![self.h as u32, self.w as u32],
            data: self.data.clone(),
        }
    }

    pub fn from_entry(entry: &tnsr::Entry) -> Result<Self> {
        if entry.dims.len() != 2 {
            return Err(Error::shape(format!(
                "transmission entry '{}' has {} dims, expected 2",
                entry.name,
                entry.dims.len()
            )));
        }
        TransmissionMap::new(
            entry.dims[0] as usize,
            entry.dims[1] as usize,
            entry.data.clone(),
        )
    }
}

/// Global atmospheric light; each channel in [0.05, 1] (the floor keeps the
/// transmission ratio away from division blow-up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Airlight(pub [f32; 3]);

impl Airlight {
    pub fn new(r: f32, g: f32, b: f32) -> Result<Self> {
        for v in [r, g, b] {
            if !(0.05..=1.0).contains(&v) {
                return Err(Error::param(format!(
                    "airlight channels must lie in [0.05, 1], got {v}"
                )));
            }
        }
        Ok(Airlight([r, g, b]))
    }

    /// Clamp arbitrary channel values up to the floor and down to 1.
    pub fn clamped(rgb: [f32; 3]) -> Self {
        Airlight(rgb.map(|v| v.clamp(0.05, 1.0)))
    }
}

/// A plain (h, w) scalar grid; the dark channel and intermediate ratio maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ScalarMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }
}

/// Forward degradation: `I = J * t + A * (1 - t)`, clamped to [0, 1].
pub fn degrade(j: &Image, t: &TransmissionMap, a: Airlight) -> Result<Image> {
    if j.h != t.h || j.w != t.w {
        return Err(Error::shape(format!(
            "image {}x{} vs transmission {}x{}",
            j.w, j.h, t.w, t.h
        )));
    }
    let hw = j.h * j.w;
    let mut data = Vec::with_capacity(3 * hw);
    for c in 0..3 {
        let ac = a.0[c];
        let plane = j.channel(c);
        for (jv, tv) in plane.iter().zip(&t.data) {
            data.push((jv * tv + ac * (1.0 - tv)).clamp(0.0, 1.0));
        }
    }
    Ok(Image {
        h: j.h,
        w: j.w,
        data,
    })
}

/// Windowed minimum with edge replication, separable in x then y.
fn window_min(map: &ScalarMap, window: usize) -> ScalarMap {
    let r = window / 2;
    let (h, w) = (map.h, map.w);
    let mut horiz = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &map.data[y * w..][..w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut m = f32::INFINITY;
            for &v in &row[lo..=hi] {
                m = m.min(v);
            }
            horiz[y * w + x] = m;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut m = f32::INFINITY;
            for yy in lo..=hi {
                m = m.min(horiz[yy * w + x]);
            }
            out[y * w + x] = m;
        }
    }
    ScalarMap { h, w, data: out }
}

/// Underwater dark channel: per-pixel min over {G, B}, then a windowed
/// spatial minimum with replicated borders.
pub fn underwater_dark_channel(image: &Image, window: usize) -> Result<ScalarMap> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::param(format!(
            "dark-channel window must be odd and positive, got {window}"
        )));
    }
    let hw = image.h * image.w;
    let g = image.channel(1);
    let b = image.channel(2);
    let mut data = Vec::with_capacity(hw);
    for i in 0..hw {
        data.push(g[i].min(b[i]));
    }
    let chan_min = ScalarMap {
        h: image.h,
        w: image.w,
        data,
    };
    if window == 1 {
        return Ok(chan_min);
    }
    Ok(window_min(&chan_min, window))
}

/// Airlight estimate: the image color at the brightest dark-channel pixel
/// (row-major first on ties), clamped into the legal airlight range.
pub fn estimate_airlight(image: &Image, window: usize) -> Result<Airlight> {
    let dark = underwater_dark_channel(image, window)?;
    let mut best = f32::NEG_INFINITY;
    let mut best_at = 0usize;
    for (i, &v) in dark.data.iter().enumerate() {
        if v > best {
            best = v;
            best_at = i;
        }
    }
    let (y, x) = (best_at / image.w, best_at % image.w);
    Ok(Airlight::clamped([
        image.at(0, y, x),
        image.at(1, y, x),
        image.at(2, y, x),
    ]))
}

/// Transmission estimate:
/// `t(x) = 1 - omega * min_window min_{c in {G,B}} I_c / A_c`, clamped to [0, 1].
pub fn estimate_transmission(
    image: &Image,
    a: Airlight,
    window: usize,
    omega: f32,
) -> Result<TransmissionMap> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::param(format!("omega must lie in (0, 1], got {omega}")));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::param(format!(
            "transmission window must be odd and positive, got {window}"
        )));
    }
    let hw = image.h * image.w;
    let g = image.channel(1);
    let b = image.channel(2);
    let mut ratio = Vec::with_capacity(hw);
    for i in 0..hw {
        ratio.push((g[i] / a.0[1]).min(b[i] / a.0[2]));
    }
    let ratio = ScalarMap {
        h: image.h,
        w: image.w,
        data: ratio,
    };
    let dark_ratio = if window == 1 {
        ratio
    } else {
        window_min(&ratio, window)
    };
    let data = dark_ratio.data.iter().map(|&v| 1.0 - omega * v).collect();
    TransmissionMap::new(image.h, image.w, data)
}
