//! Quantitative reproduction of the distribution-gap story: pooled stage-1
//! features, MMD gap metrics with permutation nulls, exact t-SNE for figure
//! parity, and the threshold sweep harness.

mod mmd;
mod tsne;

pub use mmd::{
    gap_reduction_permutation_test, median_heuristic_bandwidth, mmd2, percentile,
    two_sample_permutation_test, GapReductionTest, Mmd2, PermutationTest,
};
pub use tsne::{
    separation_statistic, tsne_embed, tsne_embed_with_init, TsneEmbedding, TsneOptions,
};

use std::fmt;

use crate::classify::gap_pool;
use crate::config::PipelineConfig;
use crate::corpus::{
    cap_patch_set, labeled_underwater_patches, partition_corpus, split_train_heldout, Corpus,
};
use crate::error::{Error, Result};
use crate::extractor::{ps01_forward, seeded_conv, ExtractorWeights};
use crate::partition::{PatchResolver, PatchSet};
use crate::rftm::{init_rftm, residual_forward, RftmConfig, RftmParams};
use crate::training::{finetune, train_rftm, HeadParams, TrainConfig};
use crate::util::{seeded_rng, smoothed_tail};

/// Which subset a feature cloud was pooled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudTag {
    HdF,
    HdU,
    HdTu,
    LdF,
    LdU,
}

impl CloudTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CloudTag::HdF => "HD_f",
            CloudTag::HdU => "HD_u",
            CloudTag::HdTu => "HD_tu",
            CloudTag::LdF => "LD_f",
            CloudTag::LdU => "LD_u",
        }
    }
}

impl fmt::Display for CloudTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// n feature vectors of a fixed width, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    pub tag: CloudTag,
    width: usize,
    data: Vec<f32>,
}

impl FeatureCloud {
    pub fn new(tag: CloudTag, width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(Error::shape(format!(
                "cloud data length {} is not a multiple of width {width}",
                data.len()
            )));
        }
        Ok(FeatureCloud { tag, width, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..][..self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Pool intermediate-stage features of every patch in a set: without module
/// parameters this is the plain two-stage forward; with them it is the
/// residual feed-forward (producing transferred clouds).
pub fn pool_features<R: PatchResolver + ?Sized>(
    patches: &PatchSet,
    resolver: &R,
    weights: &ExtractorWeights,
    module: Option<&RftmParams>,
    tag: CloudTag,
) -> Result<FeatureCloud> {
    let width = weights.c1();
    let mut data = Vec::with_capacity(patches.len() * width);
    for patch in &patches.patches {
        let pixels = resolver.pixels(patch)?;
        let features = match module {
            None => ps01_forward(&pixels, weights)?,
            Some(p) => residual_forward(&pixels, weights, p)?,
        };
        data.extend_from_slice(&gap_pool(&features));
    }
    FeatureCloud::new(tag, width, data)
}

/// Recorded floor for slightly-negative unbiased MMD estimates.
pub const MMD_FLOOR: f64 = -1e-9;

/// The three gap numbers the transference story rests on.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub mmd_hd_u_f: f64,
    pub mmd_hd_tu_f: f64,
    pub mmd_ld_u_f: f64,
    /// Which of the three values were raised to [`MMD_FLOOR`].
    pub floored: [bool; 3],
    pub bandwidth: f64,
    /// Sample counts: HD_f, HD_u, HD_tu, LD_f, LD_u.
    pub counts: [usize; 5],
    /// True when the transferred gap is strictly smaller than the raw gap.
    pub verdict: bool,
}

fn floor_mmd(value: f64) -> (f64, bool) {
    if value < MMD_FLOOR {
        (MMD_FLOOR, true)
    } else {
        (value, false)
    }
}

/// Compute the three MMDs under one shared median-heuristic bandwidth.
pub fn gap_report(
    hd_f: &FeatureCloud,
    hd_u: &FeatureCloud,
    hd_tu: &FeatureCloud,
    ld_f: &FeatureCloud,
    ld_u: &FeatureCloud,
) -> Result<GapReport> {
    for (name, cloud) in [
        ("HD_f", hd_f),
        ("HD_u", hd_u),
        ("HD_tu", hd_tu),
        ("LD_f", ld_f),
        ("LD_u", ld_u),
    ] {
        if cloud.len() < 2 {
            return Err(Error::param(format!(
                "cloud {name} has {} points; need at least 2",
                cloud.len()
            )));
        }
    }
    let bandwidth = median_heuristic_bandwidth(&[hd_f, hd_u, hd_tu, ld_f, ld_u])?;
    if bandwidth == 0.0 {
        return Err(Error::param("all clouds degenerate to one point"));
    }
    let (hd, f0) = floor_mmd(mmd2(hd_u, hd_f, Some(bandwidth))?.value);
    let (tu, f1) = floor_mmd(mmd2(hd_tu, hd_f, Some(bandwidth))?.value);
    let (ld, f2) = floor_mmd(mmd2(ld_u, ld_f, Some(bandwidth))?.value);
    Ok(GapReport {
        mmd_hd_u_f: hd,
        mmd_hd_tu_f: tu,
        mmd_ld_u_f: ld,
        floored: [f0, f1, f2],
        bandwidth,
        counts: [hd_f.len(), hd_u.len(), hd_tu.len(), ld_f.len(), ld_u.len()],
        verdict: tu < hd,
    })
}

impl GapReport {
    pub fn to_string_stable(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mmd_hd_u_f = {}\n", self.mmd_hd_u_f));
        out.push_str(&format!("mmd_hd_tu_f = {}\n", self.mmd_hd_tu_f));
        out.push_str(&format!("mmd_ld_u_f = {}\n", self.mmd_ld_u_f));
        out.push_str(&format!(
            "floored = {} {} {}\n",
            self.floored[0], self.floored[1], self.floored[2]
        ));
        out.push_str(&format!("bandwidth = {}\n", self.bandwidth));
        out.push_str(&format!(
            "counts = {} {} {} {} {}\n",
            self.counts[0], self.counts[1], self.counts[2], self.counts[3], self.counts[4]
        ));
        out.push_str(&format!(
            "verdict = {}\n",
            if self.verdict { "yes" } else { "no" }
        ));
        out
    }

    pub fn parse(text: &str) -> Result<GapReport> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::format("gap report", format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("gap report", format!("bad number for {k}")))
        };
        let floored_parts: Vec<bool> = get("floored")?
            .split_whitespace()
            .map(|s| s == "true")
            .collect();
        let count_parts: Vec<usize> = get("counts")?
            .split_whitespace()
            .filter_map(|s| s.parse().ok())
            .collect();
        if floored_parts.len() != 3 || count_parts.len() != 5 {
            return Err(Error::format("gap report", "bad floored/counts arity"));
        }
        Ok(GapReport {
            mmd_hd_u_f: num("mmd_hd_u_f")?,
            mmd_hd_tu_f: num("mmd_hd_tu_f")?,
            mmd_ld_u_f: num("mmd_ld_u_f")?,
            floored: [floored_parts[0], floored_parts[1], floored_parts[2]],
            bandwidth: num("bandwidth")?,
            counts: [
                count_parts[0],
                count_parts[1],
                count_parts[2],
                count_parts[3],
                count_parts[4],
            ],
            verdict: get("verdict")? == "yes",
        })
    }
}

/// Embedding points as `x<TAB>y<TAB>tag` lines behind a `#` header.
pub fn embedding_to_tsv(embedding: &TsneEmbedding) -> String {
    let mut out = String::from("# x\ty\ttag\n");
    for (pt, tag) in embedding.points.iter().zip(&embedding.tags) {
        out.push_str(&format!("{}\t{}\t{}\n", pt[0], pt[1], tag));
    }
    out
}

/// One threshold's outcome in the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f32,
    /// "ok" or the reason the row was skipped.
    pub status: String,
    pub hd_u: usize,
    pub hd_f: usize,
    pub final_kl: f64,
    pub gap_verdict: Option<bool>,
    pub proxy_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# T\tstatus\thd_u\thd_f\tfinal_kl\tgap_verdict\taccuracy\n");
        for r in &self.rows {
            let verdict = match r.gap_verdict {
                Some(true) => "yes",
                Some(false) => "no",
                None => "-",
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.threshold, r.status, r.hd_u, r.hd_f, r.final_kl, verdict, r.proxy_accuracy
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<SweepTable> {
        let mut rows = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::format("sweep", "expected 7 columns"));
            }
            let bad = |what: &str| Error::format("sweep", format!("bad {what}"));
            rows.push(SweepRow {
                threshold: f[0].parse().map_err(|_| bad("T"))?,
                status: f[1].to_string(),
                hd_u: f[2].parse().map_err(|_| bad("hd_u"))?,
                hd_f: f[3].parse().map_err(|_| bad("hd_f"))?,
                final_kl: f[4].parse().map_err(|_| bad("final_kl"))?,
                gap_verdict: match f[5] {
                    "yes" => Some(true),
                    "no" => Some(false),
                    "-" => None,
                    _ => return Err(bad("gap_verdict")),
                },
                proxy_accuracy: f[6].parse().map_err(|_| bad("accuracy"))?,
            });
        }
        Ok(SweepTable { rows })
    }
}

/// Run partition -> stage 1 -> gap metrics -> stage 2 for every threshold,
/// all with the same seed; thresholds whose HD sets are too small to train
/// or measure are skipped with a reason, not an error.
pub fn sweep_threshold(
    corpus: &Corpus,
    weights: &ExtractorWeights,
    t_values: &[f32],
    cfg: &PipelineConfig,
) -> Result<SweepTable> {
    if t_values.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::param("sweep thresholds must lie in [0, 1]"));
    }
    let store = corpus.image_store();
    let labeled = labeled_underwater_patches(
        corpus,
        cfg.partition.patch_size,
        cfg.partition.stride,
    )?;
    let (train_set, heldout) =
        split_train_heldout(labeled, cfg.train.heldout_fraction, cfg.seed);
    let class_count = train_set
        .iter()
        .chain(heldout.iter())
        .map(|p| p.class_id)
        .max()
        .unwrap_or(0)
        + 1;

    let mut rows = Vec::with_capacity(t_values.len());
    for &threshold in t_values {
        let parts = partition_corpus(
            corpus,
            threshold,
            cfg.partition.patch_size,
            cfg.partition.stride,
            cfg.partition.aggregate,
            None,
        )?;
        let hd_u = cap_patch_set(parts.hd_u, cfg.train.hd_cap);
        let hd_f = cap_patch_set(parts.hd_f, cfg.train.hd_cap);
        if hd_u.len() < 2 || hd_f.len() < 2 {
            rows.push(SweepRow {
                threshold,
                status: format!("skipped: HD sets too small ({}, {})", hd_u.len(), hd_f.len()),
                hd_u: hd_u.len(),
                hd_f: hd_f.len(),
                final_kl: f64::NAN,
                gap_verdict: None,
                proxy_accuracy: f64::NAN,
            });
            continue;
        }

        let rftm_cfg = RftmConfig {
            c0: weights.c0(),
            cmid: cfg.rftm.effective_cmid(weights.c1()),
            c1: weights.c1(),
        };
        let p0 = init_rftm(&rftm_cfg, cfg.seed, cfg.rftm.init)?;
        let train_cfg = TrainConfig {
            learning_rate: cfg.train.lr,
            batch_size: cfg.train.batch,
            momentum: cfg.train.momentum,
            stage1_iterations: cfg.sweep.stage1_iterations,
            stage2_iterations: cfg.sweep.stage2_iterations,
            seed: cfg.seed,
            kl_epsilon: cfg.train.kl_epsilon,
            temperature: cfg.train.temperature,
        };
        let (trained, report) = train_rftm(&hd_u, &hd_f, &store, weights, p0, &train_cfg)?;

        let cloud_u = pool_features(&hd_u, &store, weights, None, CloudTag::HdU)?;
        let cloud_tu = pool_features(&hd_u, &store, weights, Some(&trained), CloudTag::HdTu)?;
        let cloud_f = pool_features(&hd_f, &store, weights, None, CloudTag::HdF)?;
        let bandwidth = median_heuristic_bandwidth(&[&cloud_u, &cloud_tu, &cloud_f])?;
        let gap_verdict = if bandwidth > 0.0 {
            let raw = mmd2(&cloud_u, &cloud_f, Some(bandwidth))?.value;
            let transferred = mmd2(&cloud_tu, &cloud_f, Some(bandwidth))?.value;
            Some(transferred < raw)
        } else {
            None
        };

        let mut init_rng = seeded_rng(cfg.seed);
        let fs0 = seeded_conv(weights.c1(), weights.c1(), 3, &mut init_rng);
        let head0 = HeadParams::seeded(weights.c1(), class_count, &mut init_rng);
        let (_, _, ft_report) = finetune(
            &train_set,
            &heldout,
            weights,
            &trained,
            fs0,
            head0,
            &train_cfg,
        )?;
        let proxy_accuracy = ft_report
            .metrics
            .iter()
            .find(|(k, _)| k == "heldout_accuracy")
            .and_then(|(_, v)| v.parse().ok())
            .unwrap_or(f64::NAN);

        rows.push(SweepRow {
            threshold,
            status: "ok".into(),
            hd_u: hd_u.len(),
            hd_f: hd_f.len(),
            final_kl: smoothed_tail(&report.loss_trace, 50),
            gap_verdict,
            proxy_accuracy,
        });
    }
    Ok(SweepTable { rows })
}
