//! The frozen two-stage feature extractor: PS0 (shallow) and PS1
//! (intermediate), each one 3x3 stride-1 pad-1 convolution, ReLU, and a 2x2
//! stride-2 max pool. A stand-in for the first two stages of a pretrained
//! backbone: small enough to train on a desk, shaped the same way.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::classify::{
    accuracy, distinct_classes, gap_pool, gap_pool_grad, head_backward, softmax_cross_entropy,
    HeadParams, LabeledPatch,
};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu, relu_grad, ConvParams, PoolIndices, Tensor,
};
use crate::tnsr;
use crate::training::sgd_step;
use crate::util::{fnv1a64, sample_standard_normal, seeded_rng};

/// Channel widths of the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub input_channels: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_channels: 3,
            c0: 16,
            c1: 32,
        }
    }
}

impl ExtractorConfig {
    fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.c0 == 0 || self.c1 == 0 {
            return Err(Error::param("extractor channel widths must be positive"));
        }
        Ok(())
    }
}

/// PS0 and PS1 convolution parameters plus the frozen marker.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorWeights {
    pub ps0: ConvParams,
    pub ps1: ConvParams,
    frozen: bool,
}

/// Fan-in-scaled normal kernel with zero bias; the shared init for every
/// convolution in the toolkit.
pub fn seeded_conv(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    let std = 1.0 / ((c_in * k * k) as f64).sqrt();
    let weights: Vec<f32> = (0..c_out * c_in * k * k)
        .map(|_| (sample_standard_normal(rng) * std) as f32)
        .collect();
    ConvParams::new(
        Tensor::from_vec([c_out, c_in, k, k], weights).expect("sized by construction"),
        vec![0.0; c_out],
        1,
        (k - 1) / 2,
    )
    .expect("stride and bias are valid by construction")
}

impl ExtractorWeights {
    /// Deterministic fan-in init, already frozen; the fallback when no
    /// pretraining corpus is available.
    pub fn seeded_init(config: &ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let ps0 = seeded_conv(config.c0, config.input_channels, 3, &mut rng);
        let ps1 = seeded_conv(config.c1, config.c0, 3, &mut rng);
        Ok(ExtractorWeights {
            ps0,
            ps1,
            frozen: true,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn c0(&self) -> usize {
        self.ps0.c_out()
    }

    pub fn c1(&self) -> usize {
        self.ps1.c_out()
    }

    pub fn to_entries(&self) -> Vec<tnsr::Entry> {
        vec![
            tnsr::Entry::from_tensor("ps0.weight", &self.ps0.weights),
            tnsr::Entry::from_values("ps0.bias", &self.ps0.bias),
            tnsr::Entry::from_tensor("ps1.weight", &self.ps1.weights),
            tnsr::Entry::from_values("ps1.bias", &self.ps1.bias),
        ]
    }

    /// Reconstruct from container entries; loaded weights are frozen.
    pub fn from_entries(entries: &[tnsr::Entry]) -> Result<Self> {
        let conv = |weight: &str, bias: &str| -> Result<ConvParams> {
            let w = tnsr::find(entries, weight)?.to_tensor()?;
            let b = tnsr::find(entries, bias)?.data.clone();
            ConvParams::new(w, b, 1, 1)
        };
        Ok(ExtractorWeights {
            ps0: conv("ps0.weight", "ps0.bias")?,
            ps1: conv("ps1.weight", "ps1.bias")?,
            frozen: true,
        })
    }

    /// Content fingerprint over the serialized weights; stable across runs.
    pub fn hash(&self) -> u64 {
        fnv1a64(&tnsr::encode(&self.to_entries()))
    }
}

fn check_stage_input(x: &Tensor, expect_c: usize, stage: &str) -> Result<()> {
    let [_, c, h, w] = x.dims();
    if c != expect_c {
        return Err(Error::shape(format!(
            "{stage} expects {expect_c} input channels, got {c}"
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "{stage} needs even spatial extents for pooling, got {h}x{w}"
        )));
    }
    Ok(())
}

/// One extraction stage: conv, ReLU, 2x2 max pool.
fn stage_forward(x: &Tensor, conv: &ConvParams) -> Result<Tensor> {
    let pre = conv2d(x, conv)?;
    let act = relu(&pre);
    Ok(maxpool2(&act)?.0)
}

/// Stage forward that keeps what the backward pass needs.
struct StageCache {
    pre: Tensor,
    pool: PoolIndices,
}

fn stage_forward_cached(x: &Tensor, conv: &ConvParams) -> Result<(Tensor, StageCache)> {
    let pre = conv2d(x, conv)?;
    let act = relu(&pre);
    let (out, pool) = maxpool2(&act)?;
    Ok((out, StageCache { pre, pool }))
}

fn stage_backward(
    x: &Tensor,
    conv: &ConvParams,
    cache: &StageCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f32>)> {
    let g_act = maxpool2_grad(&cache.pool, grad_out)?;
    let g_pre = relu_grad(&cache.pre, &g_act)?;
    conv2d_grad(x, conv, &g_pre)
}

/// Shallow stage: (n, 3, h, w) -> (n, C0, h/2, w/2).
pub fn ps0_forward(x: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    check_stage_input(x, w.ps0.c_in(), "ps0")?;
    stage_forward(x, &w.ps0)
}

/// Intermediate stage: (n, C0, h', w') -> (n, C1, h'/2, w'/2).
pub fn ps1_forward(f: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    check_stage_input(f, w.ps1.c_in(), "ps1")?;
    stage_forward(f, &w.ps1)
}

/// Both stages composed.
pub fn ps01_forward(x: &Tensor, w: &ExtractorWeights) -> Result<Tensor> {
    ps1_forward(&ps0_forward(x, w)?, w)
}

/// Pretraining knobs for the shape-classification proxy task.
#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            iterations: 300,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

/// What pretraining left behind, beyond the weights themselves.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
    pub class_count: usize,
}

/// Train PS0/PS1 on clean labeled patches through a temporary
/// global-average-pool + linear head, then discard the head and freeze.
pub fn pretrain_extractor(
    samples: &[LabeledPatch],
    config: &ExtractorConfig,
    opts: &PretrainOptions,
    seed: u64,
) -> Result<(ExtractorWeights, PretrainReport)> {
    config.validate()?;
    if distinct_classes(samples) < 2 {
        return Err(Error::param(
            "pretraining needs at least two distinct classes",
        ));
    }
    if opts.batch_size == 0 {
        return Err(Error::param("pretrain batch size must be positive"));
    }
    let class_count = samples.iter().map(|s| s.class_id).max().unwrap_or(0) + 1;

    let mut rng = seeded_rng(seed);
    let mut ps0 = seeded_conv(config.c0, config.input_channels, 3, &mut rng);
    let mut ps1 = seeded_conv(config.c1, config.c0, 3, &mut rng);
    let mut head = HeadParams::seeded(config.c1, class_count, &mut rng);

    let mut vel_w0 = vec![0.0f32; ps0.weights.len()];
    let mut vel_b0 = vec![0.0f32; ps0.bias.len()];
    let mut vel_w1 = vec![0.0f32; ps1.weights.len()];
    let mut vel_b1 = vec![0.0f32; ps1.bias.len()];
    let mut vel_hw = vec![0.0f32; head.weights.len()];
    let mut vel_hb = vec![0.0f32; head.bias.len()];

    let mut loss_trace = Vec::with_capacity(opts.iterations);
    for iteration in 0..opts.iterations {
        let mut parts = Vec::with_capacity(opts.batch_size);
        let mut labels = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let pick = rng.gen_range(0..samples.len());
            parts.push(&samples[pick].pixels);
            labels.push(samples[pick].class_id);
        }
        let batch = Tensor::stack(&parts)?;

        let (f0, cache0) = stage_forward_cached(&batch, &ps0)?;
        let (f1, cache1) = stage_forward_cached(&f0, &ps1)?;
        let features = gap_pool(&f1);
        let logits = head.logits(&features, labels.len());
        let (loss, g_logits) = softmax_cross_entropy(&logits, &labels, class_count)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration,
                reason: "pretraining loss became non-finite".into(),
            });
        }
        loss_trace.push(loss);

        let (g_hw, g_hb, g_feat) = head_backward(&head, &features, &g_logits, labels.len());
        let g_f1 = gap_pool_grad(f1.dims(), &g_feat);
        let (g_f0, g_w1, g_b1) = stage_backward(&f0, &ps1, &cache1, &g_f1)?;
        let (_, g_w0, g_b0) = stage_backward(&batch, &ps0, &cache0, &g_f0)?;

        let lr = opts.learning_rate;
        let mu = opts.momentum;
        sgd_step(ps0.weights.data_mut(), g_w0.data(), &mut vel_w0, lr, mu)?;
        sgd_step(&mut ps0.bias, &g_b0, &mut vel_b0, lr, mu)?;
        sgd_step(ps1.weights.data_mut(), g_w1.data(), &mut vel_w1, lr, mu)?;
        sgd_step(&mut ps1.bias, &g_b1, &mut vel_b1, lr, mu)?;
        sgd_step(&mut head.weights, &g_hw, &mut vel_hw, lr, mu)?;
        sgd_step(&mut head.bias, &g_hb, &mut vel_hb, lr, mu)?;
    }

    let weights = ExtractorWeights {
        ps0,
        ps1,
        frozen: true,
    };

    // Held-in accuracy through the temporary head, recorded before the head
    // is dropped.
    let mut hits = 0.0f64;
    let mut total = 0usize;
    for chunk in samples.chunks(16) {
        let parts: Vec<&Tensor> = chunk.iter().map(|s| &s.pixels).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.class_id).collect();
        let batch = Tensor::stack(&parts)?;
        let f1 = ps01_forward(&batch, &weights)?;
        let features = gap_pool(&f1);
        let logits = head.logits(&features, labels.len());
        hits += accuracy(&logits, &labels, class_count) * labels.len() as f64;
        total += labels.len();
    }
    let report = PretrainReport {
        loss_trace,
        train_accuracy: hits / total.max(1) as f64,
        class_count,
    };
    Ok((weights, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ImageStore;
    use crate::imaging::Image;
    use crate::rftm::{init_rftm, RftmConfig, RftmInit};
    use crate::training::{train_rftm, TrainConfig};
    use crate::{partition, tnsr};

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let len = dims.iter().product();
        let data = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn stage_shapes_follow_the_contract() {
        let cfg = ExtractorConfig::default();
        let w = ExtractorWeights::seeded_init(&cfg, 1).unwrap();
        let x = random_tensor([2, 3, 64, 64], 2);
        let f0 = ps0_forward(&x, &w).unwrap();
        assert_eq!(f0.dims(), [2, 16, 32, 32]);
        let f1 = ps1_forward(&f0, &w).unwrap();
        assert_eq!(f1.dims(), [2, 32, 16, 16]);
        assert_eq!(ps01_forward(&x, &w).unwrap().dims(), [2, 32, 16, 16]);

        assert!(ps0_forward(&random_tensor([1, 3, 15, 16], 3), &w).is_err());
        assert!(ps0_forward(&random_tensor([1, 4, 16, 16], 3), &w).is_err());
        assert!(ps1_forward(&random_tensor([1, 3, 16, 16], 3), &w).is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let cfg = ExtractorConfig::default();
        let w = ExtractorWeights::seeded_init(&cfg, 4).unwrap();
        let x = Tensor::zeros([1, 3, 16, 16]);
        let f0 = ps0_forward(&x, &w).unwrap();
        assert!(f0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composition_is_bitwise() {
        let cfg = ExtractorConfig::default();
        let w = ExtractorWeights::seeded_init(&cfg, 5).unwrap();
        let x = random_tensor([2, 3, 32, 32], 6);
        let composed = ps01_forward(&x, &w).unwrap();
        let manual = ps1_forward(&ps0_forward(&x, &w).unwrap(), &w).unwrap();
        assert_eq!(composed, manual);
    }

    #[test]
    fn seeded_init_is_reproducible_and_persists() {
        let cfg = ExtractorConfig::default();
        let a = ExtractorWeights::seeded_init(&cfg, 9).unwrap();
        let b = ExtractorWeights::seeded_init(&cfg, 9).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExtractorWeights::seeded_init(&cfg, 10).unwrap().hash());

        let entries = a.to_entries();
        let bytes = tnsr::encode(&entries);
        let back = ExtractorWeights::from_entries(&tnsr::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.hash(), a.hash());
        assert!(back.is_frozen());
    }

    fn toy_corpus(seed: u64, count: usize) -> Vec<LabeledPatch> {
        // Two visually distinct classes: bright-red-dominated patches vs
        // blue-dominated patches, with noise.
        let mut rng = seeded_rng(seed);
        (0..count)
            .map(|i| {
                let class_id = i % 2;
                let mut data = vec![0.0f32; 3 * 16 * 16];
                for (c, chunk) in data.chunks_mut(256).enumerate() {
                    for v in chunk.iter_mut() {
                        let base = match (class_id, c) {
                            (0, 0) => 0.9,
                            (1, 2) => 0.9,
                            _ => 0.1,
                        };
                        *v = (base + 0.1 * rng.gen::<f32>()).clamp(0.0, 1.0);
                    }
                }
                LabeledPatch {
                    pixels: Tensor::from_vec([1, 3, 16, 16], data).unwrap(),
                    class_id,
                }
            })
            .collect()
    }

    #[test]
    fn pretraining_learns_and_is_deterministic() {
        let corpus = toy_corpus(11, 24);
        let cfg = ExtractorConfig {
            input_channels: 3,
            c0: 4,
            c1: 8,
        };
        let opts = PretrainOptions {
            iterations: 60,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
        };
        let (w1, r1) = pretrain_extractor(&corpus, &cfg, &opts, 12).unwrap();
        let (w2, r2) = pretrain_extractor(&corpus, &cfg, &opts, 12).unwrap();
        assert_eq!(w1.hash(), w2.hash());
        assert_eq!(r1.loss_trace, r2.loss_trace);
        assert!(w1.is_frozen());
        assert!(
            r1.train_accuracy > 0.5,
            "accuracy {} at or below chance",
            r1.train_accuracy
        );

        let single: Vec<LabeledPatch> = corpus
            .iter()
            .filter(|s| s.class_id == 0)
            .cloned()
            .collect();
        assert!(pretrain_extractor(&single, &cfg, &opts, 12).is_err());
    }

    #[test]
    fn frozen_weights_survive_transfer_training() {
        let cfg = ExtractorConfig {
            input_channels: 3,
            c0: 4,
            c1: 8,
        };
        let w = ExtractorWeights::seeded_init(&cfg, 21).unwrap();
        let before = w.hash();

        let mut store = ImageStore::new();
        let mut rng = seeded_rng(30);
        for id in ["img_u", "img_f"] {
            let data = (0..3 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
            store.insert(id, Image::from_planar(16, 16, data).unwrap());
        }
        let mk_patch = |id: &str, x: usize, m: f32, tag| partition::Patch {
            image_id: id.into(),
            x,
            y: 0,
            size: 8,
            mean_transmission: m,
            tag,
        };
        let hd_u = partition::PatchSet {
            label: partition::DegradationLabel::Heavy,
            threshold: 0.5,
            patches: vec![
                mk_patch("img_u", 0, 0.2, partition::SourceTag::Underwater),
                mk_patch("img_u", 8, 0.3, partition::SourceTag::Underwater),
            ],
        };
        let hd_f = partition::PatchSet {
            label: partition::DegradationLabel::Heavy,
            threshold: 0.5,
            patches: vec![
                mk_patch("img_f", 0, 0.25, partition::SourceTag::DetectorFriendly),
                mk_patch("img_f", 8, 0.35, partition::SourceTag::DetectorFriendly),
            ],
        };

        let p0 = init_rftm(
            &RftmConfig {
                c0: 4,
                cmid: 8,
                c1: 8,
            },
            22,
            RftmInit::ZeroResidual,
        )
        .unwrap();
        let cfg_train = TrainConfig {
            stage1_iterations: 20,
            ..TrainConfig::default()
        };
        let (_, report) = train_rftm(&hd_u, &hd_f, &store, &w, p0, &cfg_train).unwrap();
        assert_eq!(w.hash(), before, "extractor hash drifted");
        assert_eq!(report.loss_trace.len(), 20);
    }
}
