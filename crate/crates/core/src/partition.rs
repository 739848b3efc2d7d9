//! Patch extraction, transmission-threshold HD/LD splitting, the
//! detector-score selection gate, and pair sampling for transference
//! training.
//!
//! A patch is heavily degraded (HD) when its windowed transmission aggregate
//! falls strictly below the threshold; at-or-above goes to the lightly
//! degraded (LD) side. The aggregate is the window mean by default, with min
//! and median selectable because the cut could plausibly be taken on either.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::TransmissionMap;
use crate::util::seeded_rng;

/// Where a patch came from: a generic underwater image (`u`) or a
/// detector-friendly one (`f`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Underwater,
    DetectorFriendly,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Underwater => "u",
            SourceTag::DetectorFriendly => "f",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u" => Ok(SourceTag::Underwater),
            "f" => Ok(SourceTag::DetectorFriendly),
            other => Err(Error::format("index", format!("unknown source tag '{other}'"))),
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a patch summarizes the transmission values under its window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
    Median,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
            Aggregation::Median => "median",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "min" => Ok(Aggregation::Min),
            "median" => Ok(Aggregation::Median),
            other => Err(Error::param(format!("unknown aggregation '{other}'"))),
        }
    }
}

/// A square window into a source image, with its transmission aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    /// Window aggregate of the paired transmission map (mean by default).
    pub mean_transmission: f32,
    pub tag: SourceTag,
}

/// Whether a set holds heavily or lightly degraded patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradationLabel {
    Heavy,
    Light,
}

/// Patches on one side of the threshold split.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub label: DegradationLabel,
    pub threshold: f32,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Per-image detector scores and the selection threshold.
#[derive(Debug, Clone)]
pub struct DfuiGate {
    /// image id -> score; sorted map keeps selection output ordering stable.
    pub scores: BTreeMap<String, f32>,
    pub threshold: f32,
}

/// Anything that can turn a patch record back into its pixels as a
/// (1, 3, size, size) tensor.
pub trait PatchResolver {
    fn pixels(&self, patch: &Patch) -> Result<crate::tensor::Tensor>;
}

/// Aggregate the transmission values under one window.
fn aggregate_window(t: &TransmissionMap, x: usize, y: usize, size: usize, agg: Aggregation) -> f32 {
    match agg {
        Aggregation::Mean => {
            let mut sum = 0.0f64;
            for dy in 0..size {
                for dx in 0..size {
                    sum += f64::from(t.at(y + dy, x + dx));
                }
            }
            (sum / (size * size) as f64) as f32
        }
        Aggregation::Min => {
            let mut m = f32::INFINITY;
            for dy in 0..size {
                for dx in 0..size {
                    m = m.min(t.at(y + dy, x + dx));
                }
            }
            m
        }
        Aggregation::Median => {
            let mut vals: Vec<f32> = Vec::with_capacity(size * size);
            for dy in 0..size {
                for dx in 0..size {
                    vals.push(t.at(y + dy, x + dx));
                }
            }
            vals.sort_by(|a, b| a.total_cmp(b));
            vals[vals.len() / 2]
        }
    }
}

/// Enumerate every fully-contained window on the stride grid, ordered by
/// (y, x), each with its transmission aggregate.
pub fn extract_patches(
    image_id: &str,
    t: &TransmissionMap,
    size: usize,
    stride: usize,
    tag: SourceTag,
    agg: Aggregation,
) -> Result<Vec<Patch>> {
    if size == 0 || size > t.height().min(t.width()) {
        return Err(Error::param(format!(
            "patch size {size} does not fit a {}x{} map",
            t.width(),
            t.height()
        )));
    }
    if stride == 0 {
        return Err(Error::param("stride must be at least 1"));
    }
    let mut patches = Vec::new();
    let mut y = 0;
    while y + size <= t.height() {
        let mut x = 0;
        while x + size <= t.width() {
            patches.push(Patch {
                image_id: image_id.to_string(),
                x,
                y,
                size,
                mean_transmission: aggregate_window(t, x, y, size, agg),
                tag,
            });
            x += stride;
        }
        y += stride;
    }
    Ok(patches)
}

/// Split patches into HD (aggregate strictly below `threshold`) and LD
/// (at-or-above), preserving input order within each side.
pub fn split_hd_ld(patches: Vec<Patch>, threshold: f32) -> Result<(PatchSet, PatchSet)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::param(format!(
            "threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let mut hd = Vec::new();
    let mut ld = Vec::new();
    for p in patches {
        if p.mean_transmission < threshold {
            hd.push(p);
        } else {
            ld.push(p);
        }
    }
    Ok((
        PatchSet {
            label: DegradationLabel::Heavy,
            threshold,
            patches: hd,
        },
        PatchSet {
            label: DegradationLabel::Light,
            threshold,
            patches: ld,
        },
    ))
}

/// Image ids whose score clears the gate threshold (inclusive), sorted by id.
/// An empty result is legal; callers decide whether to warn.
pub fn select_dfui(gate: &DfuiGate) -> Result<Vec<String>> {
    if gate.scores.is_empty() {
        return Err(Error::param("score table is empty"));
    }
    Ok(gate
        .scores
        .iter()
        .filter(|(_, &score)| score >= gate.threshold)
        .map(|(id, _)| id.clone())
        .collect())
}

/// Draw `count` (i, j) index pairs uniformly with replacement from the two
/// sets, deterministic per seed. The underwater index is drawn first.
pub fn sample_pairs(
    hd_u: &PatchSet,
    hd_f: &PatchSet,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if hd_u.is_empty() || hd_f.is_empty() {
        return Err(Error::param(format!(
            "pair sampling needs non-empty sets (|HD_u| = {}, |HD_f| = {})",
            hd_u.len(),
            hd_f.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(0..hd_u.len());
        let j = rng.gen_range(0..hd_f.len());
        pairs.push((i, j));
    }
    Ok(pairs)
}

/// Serialize patches as `image_id x y size mean_t tag` lines. Floats use the
/// shortest round-trip form so write -> read -> write is byte-stable.
pub fn index_to_string(patches: &[Patch]) -> String {
    let mut out = String::new();
    for p in patches {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.image_id, p.x, p.y, p.size, p.mean_transmission, p.tag
        ));
    }
    out
}

pub fn index_from_str(text: &str) -> Result<Vec<Patch>> {
    let mut patches = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::format(
                "index",
                format!("line {}: expected 6 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let bad = |what: &str| Error::format("index", format!("line {}: bad {what}", lineno + 1));
        patches.push(Patch {
            image_id: fields[0].to_string(),
            x: fields[1].parse().map_err(|_| bad("x"))?,
            y: fields[2].parse().map_err(|_| bad("y"))?,
            size: fields[3].parse().map_err(|_| bad("size"))?,
            mean_transmission: fields[4].parse().map_err(|_| bad("mean_t"))?,
            tag: SourceTag::parse(fields[5])?,
        });
    }
    Ok(patches)
}

pub fn write_index(path: impl AsRef<Path>, patches: &[Patch]) -> Result<()> {
    fs::write(path, index_to_string(patches))?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<Patch>> {
    index_from_str(&fs::read_to_string(path)?)
}

/// Parse a `image_id<TAB>AP` score file into a gate.
pub fn read_scores(text: &str, threshold: f32) -> Result<DfuiGate> {
    let mut scores = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, ap) = line.split_once('\t').ok_or_else(|| {
            Error::format("scores", format!("line {}: expected id<TAB>AP", lineno + 1))
        })?;
        let ap: f32 = ap.trim().parse().map_err(|_| {
            Error::format("scores", format!("line {}: bad AP value", lineno + 1))
        })?;
        if !(0.0..=100.0).contains(&ap) {
            return Err(Error::format(
                "scores",
                format!("line {}: AP {ap} outside [0, 100]", lineno + 1),
            ));
        }
        scores.insert(id.trim().to_string(), ap);
    }
    Ok(DfuiGate { scores, threshold })
}

pub fn scores_to_string(gate: &DfuiGate) -> String {
    let mut out = String::new();
    for (id, ap) in &gate.scores {
        out.push_str(&format!("{id}\t{ap}\n"));
    }
    out
}
