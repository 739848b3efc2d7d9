//! Desk-scale corpus: paired clean/degraded scenes with transmission fields
//! and labels, plus the helpers that turn scenes into patch sources.
//!
//! One corpus plays both roles of the real-world setup. Scenes assigned the
//! underwater role contribute their degraded rendering; scenes assigned the
//! detector-friendly role contribute their clean rendering. Both sides are
//! partitioned by their paired transmission field, so the heavily degraded
//! subsets compare degraded pixels against clean pixels at equally-degraded
//! locations, which is exactly the gap the transference module is trained to
//! close. The two roles use disjoint scenes, keeping the sources unpaired.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::classify::LabeledPatch;
use crate::error::{Error, Result};
use crate::imaging::{
    degrade, labels_from_str, labels_to_string, read_ppm, synth_scene, synth_transmission,
    write_ppm, Airlight, Image, SceneLabel, SceneOptions, TransmissionMap,
};
use crate::partition::{
    extract_patches, split_hd_ld, Aggregation, Patch, PatchResolver, PatchSet, SourceTag,
};
use crate::tensor::Tensor;
use crate::tnsr;
use crate::util::seeded_rng;
use rand::Rng;

/// Which source a scene feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceRole {
    Underwater,
    Friendly,
}

impl SourceRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceRole::Underwater => "underwater",
            SourceRole::Friendly => "friendly",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "underwater" => Ok(SourceRole::Underwater),
            "friendly" => Ok(SourceRole::Friendly),
            other => Err(Error::format("manifest", format!("unknown role '{other}'"))),
        }
    }
}

/// One synthesized scene with everything derived from it.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: String,
    pub role: SourceRole,
    pub clean: Image,
    pub degraded: Image,
    pub transmission: TransmissionMap,
    pub labels: Vec<SceneLabel>,
    /// Synthetic detector score in [0, 100] for the selection gate.
    pub ap_score: f32,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub scenes: Vec<SceneRecord>,
    pub airlight: Airlight,
}

/// Corpus synthesis knobs.
#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub scene_count: usize,
    pub height: usize,
    pub width: usize,
    pub scene: SceneOptions,
    pub t_low: f32,
    pub t_high: f32,
    pub airlight: [f32; 3],
    /// Fraction of scenes assigned the detector-friendly role (the tail of
    /// the index range, so the two sources use disjoint scenes).
    pub friendly_fraction: f32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            scene_count: 60,
            height: 192,
            width: 192,
            scene: SceneOptions::default(),
            t_low: 0.15,
            t_high: 0.95,
            airlight: [0.75, 0.85, 0.9],
            friendly_fraction: 0.5,
        }
    }
}

fn mix_seed(base: u64, lane: u64) -> u64 {
    base ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Synthesize a corpus, deterministic per seed.
pub fn synth_corpus(seed: u64, opts: &CorpusOptions) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&opts.friendly_fraction) {
        return Err(Error::param("friendly fraction must lie in [0, 1]"));
    }
    let airlight = Airlight::new(opts.airlight[0], opts.airlight[1], opts.airlight[2])?;
    let friendly_from = ((opts.scene_count as f64)
        * (1.0 - f64::from(opts.friendly_fraction)))
    .round() as usize;
    let mut scenes = Vec::with_capacity(opts.scene_count);
    for i in 0..opts.scene_count {
        let (clean, labels) = synth_scene(
            mix_seed(seed, 2 * i as u64),
            opts.height,
            opts.width,
            &opts.scene,
        )?;
        let transmission = synth_transmission(
            mix_seed(seed, 2 * i as u64 + 1),
            opts.height,
            opts.width,
            opts.t_low,
            opts.t_high,
        )?;
        let degraded = degrade(&clean, &transmission, airlight)?;
        // Synthetic detector score: clearer scenes (higher transmission)
        // score higher, with a small seeded jitter.
        let mut jitter_rng = seeded_rng(mix_seed(seed, 0x5c0e + i as u64));
        let ap_score =
            (20.0 + 70.0 * transmission.mean() + 6.0 * jitter_rng.gen::<f32>()).clamp(0.0, 100.0);
        scenes.push(SceneRecord {
            id: format!("scene_{i:04}"),
            role: if i < friendly_from {
                SourceRole::Underwater
            } else {
                SourceRole::Friendly
            },
            clean,
            degraded,
            transmission,
            labels,
            ap_score,
        });
    }
    Ok(Corpus { scenes, airlight })
}

/// Resolves patches back to pixels by image id.
#[derive(Debug, Default)]
pub struct ImageStore {
    images: BTreeMap<String, Image>,
}

impl ImageStore {
    pub fn new() -> Self {
        ImageStore::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: Image) {
        self.images.insert(id.into(), image);
    }

    pub fn get(&self, id: &str) -> Option<&Image> {
        self.images.get(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl PatchResolver for ImageStore {
    fn pixels(&self, patch: &Patch) -> Result<Tensor> {
        let image = self.images.get(&patch.image_id).ok_or_else(|| {
            Error::param(format!("no image '{}' in store", patch.image_id))
        })?;
        image.window_tensor(patch.x, patch.y, patch.size)
    }
}

impl Corpus {
    /// The pixels each source exposes: degraded for underwater scenes, clean
    /// for detector-friendly ones.
    pub fn image_store(&self) -> ImageStore {
        let mut store = ImageStore::new();
        for s in &self.scenes {
            let image = match s.role {
                SourceRole::Underwater => s.degraded.clone(),
                SourceRole::Friendly => s.clean.clone(),
            };
            store.insert(s.id.clone(), image);
        }
        store
    }

    pub fn scene(&self, id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

/// All four patch subsets of a corpus at one threshold.
#[derive(Debug, Clone)]
pub struct PartitionedCorpus {
    pub hd_u: PatchSet,
    pub ld_u: PatchSet,
    pub hd_f: PatchSet,
    pub ld_f: PatchSet,
}

/// Extract grid patches from every scene and split each source by the
/// threshold. `friendly_gate`, when given, keeps only the listed scene ids
/// on the detector-friendly side (the selection-gate contract).
pub fn partition_corpus(
    corpus: &Corpus,
    threshold: f32,
    size: usize,
    stride: usize,
    agg: Aggregation,
    friendly_gate: Option<&[String]>,
) -> Result<PartitionedCorpus> {
    let mut u_patches = Vec::new();
    let mut f_patches = Vec::new();
    for s in &corpus.scenes {
        match s.role {
            SourceRole::Underwater => {
                u_patches.extend(extract_patches(
                    &s.id,
                    &s.transmission,
                    size,
                    stride,
                    SourceTag::Underwater,
                    agg,
                )?);
            }
            SourceRole::Friendly => {
                if let Some(allowed) = friendly_gate {
                    if !allowed.iter().any(|id| id == &s.id) {
                        continue;
                    }
                }
                f_patches.extend(extract_patches(
                    &s.id,
                    &s.transmission,
                    size,
                    stride,
                    SourceTag::DetectorFriendly,
                    agg,
                )?);
            }
        }
    }
    let (hd_u, ld_u) = split_hd_ld(u_patches, threshold)?;
    let (hd_f, ld_f) = split_hd_ld(f_patches, threshold)?;
    Ok(PartitionedCorpus {
        hd_u,
        ld_u,
        hd_f,
        ld_f,
    })
}

/// Truncate a patch set to at most `cap` members (0 = no cap), preserving
/// order; pins reference-experiment corpus sizes.
pub fn cap_patch_set(set: PatchSet, cap: usize) -> PatchSet {
    if cap == 0 || set.patches.len() <= cap {
        return set;
    }
    PatchSet {
        label: set.label,
        threshold: set.threshold,
        patches: set.patches.into_iter().take(cap).collect(),
    }
}

/// Class id for a patch window: the shape with the largest intersection
/// area, shifted by one; 0 means background.
pub fn patch_label(labels: &[SceneLabel], x: usize, y: usize, size: usize) -> usize {
    let mut best_area = 0usize;
    let mut best_class = 0usize;
    for l in labels {
        let ix = overlap(x, size, l.x, l.w);
        let iy = overlap(y, size, l.y, l.h);
        let area = ix * iy;
        if area > best_area {
            best_area = area;
            best_class = l.class_id + 1;
        }
    }
    best_class
}

fn overlap(a0: usize, alen: usize, b0: usize, blen: usize) -> usize {
    let lo = a0.max(b0);
    let hi = (a0 + alen).min(b0 + blen);
    hi.saturating_sub(lo)
}

/// Labeled grid patches of the underwater scenes (degraded pixels), for the
/// stage-2 classification proxy.
pub fn labeled_underwater_patches(
    corpus: &Corpus,
    size: usize,
    stride: usize,
) -> Result<Vec<LabeledPatch>> {
    let mut out = Vec::new();
    for s in &corpus.scenes {
        if s.role != SourceRole::Underwater {
            continue;
        }
        let mut y = 0;
        while y + size <= s.degraded.height() {
            let mut x = 0;
            while x + size <= s.degraded.width() {
                out.push(LabeledPatch {
                    pixels: s.degraded.window_tensor(x, y, size)?,
                    class_id: patch_label(&s.labels, x, y, size),
                });
                x += stride;
            }
            y += stride;
        }
    }
    Ok(out)
}

/// Clean crops for extractor pretraining: one crop centered on every shape
/// plus background corners that touch no shape.
pub fn pretrain_crops(corpus: &Corpus, crop: usize) -> Result<Vec<LabeledPatch>> {
    let mut out = Vec::new();
    for s in &corpus.scenes {
        if s.role != SourceRole::Friendly {
            continue;
        }
        let (h, w) = (s.clean.height(), s.clean.width());
        if crop > h || crop > w {
            return Err(Error::param(format!(
                "crop {crop} exceeds scene extent {w}x{h}"
            )));
        }
        for l in &s.labels {
            let cx = (l.x + l.w / 2).saturating_sub(crop / 2).min(w - crop);
            let cy = (l.y + l.h / 2).saturating_sub(crop / 2).min(h - crop);
            out.push(LabeledPatch {
                pixels: s.clean.window_tensor(cx, cy, crop)?,
                class_id: l.class_id + 1,
            });
        }
        for (cy, cx) in [(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)] {
            let clear = s
                .labels
                .iter()
                .all(|l| overlap(cx, crop, l.x, l.w) * overlap(cy, crop, l.y, l.h) == 0);
            if clear {
                out.push(LabeledPatch {
                    pixels: s.clean.window_tensor(cx, cy, crop)?,
                    class_id: 0,
                });
                break;
            }
        }
    }
    Ok(out)
}

/// Deterministic shuffle split into (train, heldout).
pub fn split_train_heldout(
    mut patches: Vec<LabeledPatch>,
    heldout_fraction: f32,
    seed: u64,
) -> (Vec<LabeledPatch>, Vec<LabeledPatch>) {
    let mut rng = seeded_rng(seed);
    // Fisher-Yates with draws from the seeded stream.
    for i in (1..patches.len()).rev() {
        let j = rng.gen_range(0..=i);
        patches.swap(i, j);
    }
    let heldout_count = ((patches.len() as f64) * f64::from(heldout_fraction)).round() as usize;
    let train = patches.split_off(heldout_count.min(patches.len()));
    (train, patches)
}

// --- on-disk layout -------------------------------------------------------
//
// <dir>/manifest.tsv            id<TAB>role<TAB>ap per scene
// <dir>/scores.tsv              id<TAB>ap  (selection-gate input format)
// <dir>/airlight.tnsr           entry "airlight", 3 values
// <dir>/<id>.clean.ppm
// <dir>/<id>.degraded.ppm
// <dir>/<id>.t.tnsr             entry "t"
// <dir>/<id>.labels.txt

pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut scores = String::new();
    for s in &corpus.scenes {
        manifest.push_str(&format!("{}\t{}\t{}\n", s.id, s.role.as_str(), s.ap_score));
        scores.push_str(&format!("{}\t{}\n", s.id, s.ap_score));
        write_ppm(dir.join(format!("{}.clean.ppm", s.id)), &s.clean)?;
        write_ppm(dir.join(format!("{}.degraded.ppm", s.id)), &s.degraded)?;
        tnsr::write(
            dir.join(format!("{}.t.tnsr", s.id)),
            &[s.transmission.to_entry("t")],
        )?;
        fs::write(
            dir.join(format!("{}.labels.txt", s.id)),
            labels_to_string(&s.labels),
        )?;
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    fs::write(dir.join("scores.tsv"), scores)?;
    tnsr::write(
        dir.join("airlight.tnsr"),
        &[tnsr::Entry::from_values("airlight", &corpus.airlight.0)],
    )?;
    Ok(())
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.tsv");
    if !manifest_path.exists() {
        return Err(Error::param(format!(
            "missing corpus manifest {}; run `synth` first",
            manifest_path.display()
        )));
    }
    let manifest = fs::read_to_string(manifest_path)?;
    let airlight_entries = tnsr::read(dir.join("airlight.tnsr"))?;
    let a = tnsr::find(&airlight_entries, "airlight")?;
    if a.data.len() != 3 {
        return Err(Error::format("TNSR", "airlight entry must hold 3 values"));
    }
    let airlight = Airlight::new(a.data[0], a.data[1], a.data[2])?;

    let mut scenes = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                "manifest",
                format!("line {}: expected 3 fields", lineno + 1),
            ));
        }
        let id = fields[0].to_string();
        let role = SourceRole::parse(fields[1])?;
        let ap_score: f32 = fields[2]
            .parse()
            .map_err(|_| Error::format("manifest", format!("line {}: bad ap", lineno + 1)))?;
        let clean = read_ppm(dir.join(format!("{id}.clean.ppm")))?;
        let degraded = read_ppm(dir.join(format!("{id}.degraded.ppm")))?;
        let t_entries = tnsr::read(dir.join(format!("{id}.t.tnsr")))?;
        let transmission = TransmissionMap::from_entry(tnsr::find(&t_entries, "t")?)?;
        let labels = labels_from_str(&fs::read_to_string(dir.join(format!("{id}.labels.txt")))?)?;
        scenes.push(SceneRecord {
            id,
            role,
            clean,
            degraded,
            transmission,
            labels,
            ap_score,
        });
    }
    Ok(Corpus { scenes, airlight })
}
