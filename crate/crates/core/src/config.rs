//! Pipeline configuration: UTF-8 `key = value` lines with dotted keys and
//! `#` comments. Parsing starts from the defaults, rejects unknown and
//! duplicate keys outright, and serialization emits every key in a fixed
//! order, so config echoes reproduce byte for byte.

use crate::error::{Error, Result};
use crate::partition::Aggregation;
use crate::rftm::RftmInit;

/// Where the partition step finds its transmission maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapsSource {
    /// The synthetic fields written next to each scene.
    #[default]
    Corpus,
    /// Maps produced by the `estimate` command.
    Estimate,
}

impl MapsSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MapsSource::Corpus => "corpus",
            MapsSource::Estimate => "estimate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "corpus" => Ok(MapsSource::Corpus),
            "estimate" => Ok(MapsSource::Estimate),
            other => Err(Error::param(format!("unknown maps source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSection {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub t_low: f32,
    pub t_high: f32,
    pub airlight_r: f32,
    pub airlight_g: f32,
    pub airlight_b: f32,
    /// Grid period of red-only pixels; 0 disables the overlay.
    pub speckle_period: usize,
    pub friendly_fraction: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UdcpSection {
    pub window: usize,
    pub omega: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSection {
    pub threshold: f32,
    pub patch_size: usize,
    pub stride: usize,
    pub aggregate: Aggregation,
    /// Path to an `id<TAB>AP` score file; empty disables the gate.
    pub score_file: String,
    pub ap_threshold: f32,
    pub maps: MapsSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSection {
    pub c0: usize,
    pub c1: usize,
    /// 0 skips pretraining and uses the seeded fan-in init.
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,
    pub pretrain_crop: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RftmSection {
    /// 0 ties the middle width to C1.
    pub cmid: usize,
    pub init: RftmInit,
}

impl RftmSection {
    pub fn effective_cmid(&self, c1: usize) -> usize {
        if self.cmid == 0 {
            c1
        } else {
            self.cmid
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub lr: f32,
    pub batch: usize,
    pub momentum: f32,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub kl_epsilon: f32,
    pub temperature: f32,
    /// Per-side cap on HD patches fed to stage 1; 0 = no cap.
    pub hd_cap: usize,
    pub heldout_fraction: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSection {
    pub perplexity: f64,
    pub tsne_iterations: usize,
    pub mmd_permutations: usize,
    /// 0 selects the median heuristic.
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub thresholds: Vec<f32>,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: String,
    pub corpus: CorpusSection,
    pub udcp: UdcpSection,
    pub partition: PartitionSection,
    pub extractor: ExtractorSection,
    pub rftm: RftmSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
    pub sweep: SweepSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            out: "runs/default".into(),
            corpus: CorpusSection {
                scenes: 60,
                height: 192,
                width: 192,
                classes: 3,
                shapes_min: 1,
                shapes_max: 4,
                t_low: 0.15,
                t_high: 0.95,
                airlight_r: 0.75,
                airlight_g: 0.85,
                airlight_b: 0.9,
                speckle_period: 2,
                friendly_fraction: 0.5,
            },
            udcp: UdcpSection {
                window: 15,
                omega: 0.95,
            },
            partition: PartitionSection {
                threshold: 0.5,
                patch_size: 64,
                stride: 64,
                aggregate: Aggregation::Mean,
                score_file: String::new(),
                ap_threshold: 60.0,
                maps: MapsSource::Corpus,
            },
            extractor: ExtractorSection {
                c0: 16,
                c1: 32,
                pretrain_iterations: 0,
                pretrain_batch: 8,
                pretrain_lr: 0.05,
                pretrain_crop: 32,
            },
            rftm: RftmSection {
                cmid: 0,
                init: RftmInit::ZeroResidual,
            },
            train: TrainSection {
                lr: 0.002,
                batch: 2,
                momentum: 0.9,
                stage1_iterations: 500,
                stage2_iterations: 300,
                kl_epsilon: 1e-8,
                temperature: 1.0,
                hd_cap: 200,
                heldout_fraction: 0.25,
            },
            analysis: AnalysisSection {
                perplexity: 12.0,
                tsne_iterations: 400,
                mmd_permutations: 200,
                bandwidth: 0.0,
            },
            sweep: SweepSection {
                thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
                stage1_iterations: 150,
                stage2_iterations: 150,
            },
        }
    }
}

impl PipelineConfig {
    /// Serialize every key in canonical order.
    pub fn to_string_stable(&self) -> String {
        let c = &self.corpus;
        let thresholds = self
            .sweep
            .thresholds
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out = {}\n", self.out));
        s.push_str(&format!("corpus.scenes = {}\n", c.scenes));
        s.push_str(&format!("corpus.height = {}\n", c.height));
        s.push_str(&format!("corpus.width = {}\n", c.width));
        s.push_str(&format!("corpus.classes = {}\n", c.classes));
        s.push_str(&format!("corpus.shapes_min = {}\n", c.shapes_min));
        s.push_str(&format!("corpus.shapes_max = {}\n", c.shapes_max));
        s.push_str(&format!("corpus.t_low = {}\n", c.t_low));
        s.push_str(&format!("corpus.t_high = {}\n", c.t_high));
        s.push_str(&format!("corpus.airlight_r = {}\n", c.airlight_r));
        s.push_str(&format!("corpus.airlight_g = {}\n", c.airlight_g));
        s.push_str(&format!("corpus.airlight_b = {}\n", c.airlight_b));
        s.push_str(&format!("corpus.speckle_period = {}\n", c.speckle_period));
        s.push_str(&format!(
            "corpus.friendly_fraction = {}\n",
            c.friendly_fraction
        ));
        s.push_str(&format!("udcp.window = {}\n", self.udcp.window));
        s.push_str(&format!("udcp.omega = {}\n", self.udcp.omega));
        s.push_str(&format!("partition.threshold = {}\n", self.partition.threshold));
        s.push_str(&format!(
            "partition.patch_size = {}\n",
            self.partition.patch_size
        ));
        s.push_str(&format!("partition.stride = {}\n", self.partition.stride));
        s.push_str(&format!(
            "partition.aggregate = {}\n",
            self.partition.aggregate.as_str()
        ));
        s.push_str(&format!(
            "partition.score_file = {}\n",
            self.partition.score_file
        ));
        s.push_str(&format!(
            "partition.ap_threshold = {}\n",
            self.partition.ap_threshold
        ));
        s.push_str(&format!("partition.maps = {}\n", self.partition.maps.as_str()));
        s.push_str(&format!("extractor.c0 = {}\n", self.extractor.c0));
        s.push_str(&format!("extractor.c1 = {}\n", self.extractor.c1));
        s.push_str(&format!(
            "extractor.pretrain_iterations = {}\n",
            self.extractor.pretrain_iterations
        ));
        s.push_str(&format!(
            "extractor.pretrain_batch = {}\n",
            self.extractor.pretrain_batch
        ));
        s.push_str(&format!(
            "extractor.pretrain_lr = {}\n",
            self.extractor.pretrain_lr
        ));
        s.push_str(&format!(
            "extractor.pretrain_crop = {}\n",
            self.extractor.pretrain_crop
        ));
        s.push_str(&format!("rftm.cmid = {}\n", self.rftm.cmid));
        s.push_str(&format!("rftm.init = {}\n", self.rftm.init.as_str()));
        s.push_str(&format!("train.lr = {}\n", self.train.lr));
        s.push_str(&format!("train.batch = {}\n", self.train.batch));
        s.push_str(&format!("train.momentum = {}\n", self.train.momentum));
        s.push_str(&format!(
            "train.stage1_iterations = {}\n",
            self.train.stage1_iterations
        ));
        s.push_str(&format!(
            "train.stage2_iterations = {}\n",
            self.train.stage2_iterations
        ));
        s.push_str(&format!("train.kl_epsilon = {}\n", self.train.kl_epsilon));
        s.push_str(&format!("train.temperature = {}\n", self.train.temperature));
        s.push_str(&format!("train.hd_cap = {}\n", self.train.hd_cap));
        s.push_str(&format!(
            "train.heldout_fraction = {}\n",
            self.train.heldout_fraction
        ));
        s.push_str(&format!("analysis.perplexity = {}\n", self.analysis.perplexity));
        s.push_str(&format!(
            "analysis.tsne_iterations = {}\n",
            self.analysis.tsne_iterations
        ));
        s.push_str(&format!(
            "analysis.mmd_permutations = {}\n",
            self.analysis.mmd_permutations
        ));
        s.push_str(&format!("analysis.bandwidth = {}\n", self.analysis.bandwidth));
        s.push_str(&format!("sweep.thresholds = {thresholds}\n"));
        s.push_str(&format!(
            "sweep.stage1_iterations = {}\n",
            self.sweep.stage1_iterations
        ));
        s.push_str(&format!(
            "sweep.stage2_iterations = {}\n",
            self.sweep.stage2_iterations
        ));
        s
    }

    /// Parse from text, starting at the defaults. Unknown or repeated keys
    /// are errors.
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format("config", format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::format(
                    "config",
                    format!("line {}: duplicate key '{key}'", lineno + 1),
                ));
            }
            cfg.assign(key, value).map_err(|e| {
                Error::format("config", format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::param(format!("bad value '{value}' for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = value.to_string(),
            "corpus.scenes" => self.corpus.scenes = num(key, value)?,
            "corpus.height" => self.corpus.height = num(key, value)?,
            "corpus.width" => self.corpus.width = num(key, value)?,
            "corpus.classes" => self.corpus.classes = num(key, value)?,
            "corpus.shapes_min" => self.corpus.shapes_min = num(key, value)?,
            "corpus.shapes_max" => self.corpus.shapes_max = num(key, value)?,
            "corpus.t_low" => self.corpus.t_low = num(key, value)?,
            "corpus.t_high" => self.corpus.t_high = num(key, value)?,
            "corpus.airlight_r" => self.corpus.airlight_r = num(key, value)?,
            "corpus.airlight_g" => self.corpus.airlight_g = num(key, value)?,
            "corpus.airlight_b" => self.corpus.airlight_b = num(key, value)?,
            "corpus.speckle_period" => self.corpus.speckle_period = num(key, value)?,
            "corpus.friendly_fraction" => self.corpus.friendly_fraction = num(key, value)?,
            "udcp.window" => self.udcp.window = num(key, value)?,
            "udcp.omega" => self.udcp.omega = num(key, value)?,
            "partition.threshold" => self.partition.threshold = num(key, value)?,
            "partition.patch_size" => self.partition.patch_size = num(key, value)?,
            "partition.stride" => self.partition.stride = num(key, value)?,
            "partition.aggregate" => self.partition.aggregate = Aggregation::parse(value)?,
            "partition.score_file" => self.partition.score_file = value.to_string(),
            "partition.ap_threshold" => self.partition.ap_threshold = num(key, value)?,
            "partition.maps" => self.partition.maps = MapsSource::parse(value)?,
            "extractor.c0" => self.extractor.c0 = num(key, value)?,
            "extractor.c1" => self.extractor.c1 = num(key, value)?,
            "extractor.pretrain_iterations" => {
                self.extractor.pretrain_iterations = num(key, value)?
            }
            "extractor.pretrain_batch" => self.extractor.pretrain_batch = num(key, value)?,
            "extractor.pretrain_lr" => self.extractor.pretrain_lr = num(key, value)?,
            "extractor.pretrain_crop" => self.extractor.pretrain_crop = num(key, value)?,
            "rftm.cmid" => self.rftm.cmid = num(key, value)?,
            "rftm.init" => self.rftm.init = RftmInit::parse(value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.batch" => self.train.batch = num(key, value)?,
            "train.momentum" => self.train.momentum = num(key, value)?,
            "train.stage1_iterations" => self.train.stage1_iterations = num(key, value)?,
            "train.stage2_iterations" => self.train.stage2_iterations = num(key, value)?,
            "train.kl_epsilon" => self.train.kl_epsilon = num(key, value)?,
            "train.temperature" => self.train.temperature = num(key, value)?,
            "train.hd_cap" => self.train.hd_cap = num(key, value)?,
            "train.heldout_fraction" => self.train.heldout_fraction = num(key, value)?,
            "analysis.perplexity" => self.analysis.perplexity = num(key, value)?,
            "analysis.tsne_iterations" => self.analysis.tsne_iterations = num(key, value)?,
            "analysis.mmd_permutations" => self.analysis.mmd_permutations = num(key, value)?,
            "analysis.bandwidth" => self.analysis.bandwidth = num(key, value)?,
            "sweep.thresholds" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    out.push(num("sweep.thresholds", part.trim())?);
                }
                self.sweep.thresholds = out;
            }
            "sweep.stage1_iterations" => self.sweep.stage1_iterations = num(key, value)?,
            "sweep.stage2_iterations" => self.sweep.stage2_iterations = num(key, value)?,
            other => return Err(Error::param(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 {
            return Err(Error::param("train.lr must be positive"));
        }
        if self.train.batch == 0 {
            return Err(Error::param("train.batch must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.partition.threshold) {
            return Err(Error::param("partition.threshold must lie in [0, 1]"));
        }
        if self.corpus.t_low > self.corpus.t_high {
            return Err(Error::param("corpus.t_low must not exceed corpus.t_high"));
        }
        if !(0.0..=1.0).contains(&self.train.heldout_fraction) {
            return Err(Error::param("train.heldout_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// CLI-level overrides, applied after parsing.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<String>) -> Self {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.out = out;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 99;
        cfg.train.lr = 0.0035;
        cfg.sweep.thresholds = vec![0.25, 0.5, 0.75];
        cfg.partition.aggregate = Aggregation::Median;
        cfg.rftm.init = RftmInit::Random;
        cfg.out = "runs/exp one".into();

        let text = cfg.to_string_stable();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_string_stable(), text);
    }

    #[test]
    fn comments_and_whitespace_are_tolerated() {
        let text = "# comment\n\n  train.lr = 0.01  \nseed = 3\n";
        let cfg = PipelineConfig::parse(text).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.batch, 2, "unset keys keep defaults");
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(PipelineConfig::parse("train.lrr = 0.01\n").is_err());
        assert!(PipelineConfig::parse("train.lr = 0.01\ntrain.lr = 0.02\n").is_err());
        assert!(PipelineConfig::parse("train.lr\n").is_err());
        assert!(PipelineConfig::parse("train.lr = fast\n").is_err());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        assert!(PipelineConfig::parse("train.lr = -0.5\n").is_err());
        assert!(PipelineConfig::parse("partition.threshold = 1.5\n").is_err());
        assert!(PipelineConfig::parse("corpus.t_low = 0.9\ncorpus.t_high = 0.1\n").is_err());
    }

    #[test]
    fn threshold_lists_parse() {
        let cfg = PipelineConfig::parse("sweep.thresholds = 0.1, 0.5 ,0.9\n").unwrap();
        assert_eq!(cfg.sweep.thresholds, vec![0.1, 0.5, 0.9]);
        assert!(PipelineConfig::parse("sweep.thresholds = 0.1,zap\n").is_err());
    }
}
