//! Two-stage training: unsupervised transference of the residual module
//! under a KL objective (stage 1), then a frozen-module classification
//! finetune of a small downstream stage and head (stage 2).
//!
//! The KL objective treats each sample's feature block as a distribution:
//! both target and transferred blocks are softmax-normalized over all
//! C*H*W elements, the divergence `sum p*ln(p/q)` is averaged over the
//! batch, and the gradient flows only into the transferred side.

use std::time::Instant;

use rand::Rng;

use crate::classify::{
    accuracy, distinct_classes, gap_pool, gap_pool_grad, head_backward, softmax_cross_entropy,
    LabeledPatch,
};
pub use crate::classify::HeadParams;
use crate::error::{Error, Result};
use crate::extractor::{ps0_forward, ps1_forward, ExtractorWeights};
use crate::partition::{sample_pairs, PatchResolver, PatchSet};
use crate::rftm::{residual_forward_from_f0, rftm_backward, RftmParams};
use crate::tensor::{conv2d, conv2d_grad, relu, relu_grad, ConvParams, Tensor};
use crate::util::{seeded_rng, smoothed_head, smoothed_tail};

/// Hyperparameters shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub seed: u64,
    pub kl_epsilon: f32,
    pub temperature: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            batch_size: 2,
            momentum: 0.9,
            stage1_iterations: 500,
            stage2_iterations: 300,
            seed: 0,
            kl_epsilon: 1e-8,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::param("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if self.kl_epsilon <= 0.0 {
            return Err(Error::param("kl epsilon must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::param("temperature must be positive"));
        }
        Ok(())
    }
}

/// Everything a training run leaves behind. Wall-clock time stays in memory
/// only; the serialized report must be byte-identical across reruns.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    pub seed: u64,
    pub config_echo: Vec<(String, String)>,
    pub loss_trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_clock_seconds: f64,
    pub metrics: Vec<(String, String)>,
}

impl TrainReport {
    /// `iter<TAB>loss` lines followed by a `key = value` summary block.
    pub fn to_string_stable(&self) -> String {
        let mut out = String::new();
        for (i, loss) in self.loss_trace.iter().enumerate() {
            out.push_str(&format!("{i}\t{loss}\n"));
        }
        out.push_str(&format!("stage = {}\n", self.stage));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("initial_loss = {}\n", self.initial_loss));
        out.push_str(&format!("final_loss = {}\n", self.final_loss));
        for (k, v) in self.config_echo.iter().chain(self.metrics.iter()) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<TrainReport> {
        let mut trace = Vec::new();
        let mut kv: Vec<(String, String)> = Vec::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                kv.push((k.to_string(), v.to_string()));
            } else if let Some((idx, loss)) = line.split_once('\t') {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::format("report", "bad trace index"))?;
                if i != trace.len() {
                    return Err(Error::format("report", "trace indices out of order"));
                }
                trace.push(
                    loss.parse()
                        .map_err(|_| Error::format("report", "bad trace loss"))?,
                );
            } else if !line.trim().is_empty() {
                return Err(Error::format("report", format!("unparseable line: {line}")));
            }
        }
        let mut take = |key: &str| -> Result<String> {
            let at = kv
                .iter()
                .position(|(k, _)| k == key)
                .ok_or_else(|| Error::format("report", format!("missing key {key}")))?;
            Ok(kv.remove(at).1)
        };
        let stage = take("stage")?;
        let seed = take("seed")?
            .parse()
            .map_err(|_| Error::format("report", "bad seed"))?;
        let initial_loss = take("initial_loss")?
            .parse()
            .map_err(|_| Error::format("report", "bad initial_loss"))?;
        let final_loss = take("final_loss")?
            .parse()
            .map_err(|_| Error::format("report", "bad final_loss"))?;
        Ok(TrainReport {
            stage,
            seed,
            config_echo: Vec::new(),
            loss_trace: trace,
            initial_loss,
            final_loss,
            wall_clock_seconds: 0.0,
            metrics: kv,
        })
    }
}

/// SGD with momentum on a flat parameter group: `v <- mu*v + g`,
/// `theta <- theta - lr*v`.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    learning_rate: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd group sizes differ: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= learning_rate * velocity[i];
    }
    Ok(())
}

/// KL divergence between softmax-normalized feature blocks, mean over the
/// batch, in nats. Returns the loss and its gradient with respect to the
/// transferred features; the target side is treated as a constant.
///
/// The denominator distribution is floored at `epsilon`, so identical inputs
/// give exactly zero loss and gradient.
pub fn kl_loss(
    target: &Tensor,
    transferred: &Tensor,
    epsilon: f32,
    temperature: f32,
) -> Result<(f64, Tensor)> {
    if target.dims() != transferred.dims() {
        return Err(Error::shape(format!(
            "kl dims {:?} vs {:?}",
            target.dims(),
            transferred.dims()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::param("kl epsilon must be positive"));
    }
    if !target.is_finite() || !transferred.is_finite() {
        return Err(Error::value("kl inputs must be finite"));
    }
    let [n, c, h, w] = target.dims();
    let block = c * h * w;
    let tau = f64::from(temperature);
    let eps = f64::from(epsilon);

    let mut grad = vec![0.0f32; transferred.len()];
    let mut total = 0.0f64;
    for s in 0..n {
        let t_block = &target.data()[s * block..][..block];
        let z_block = &transferred.data()[s * block..][..block];
        let p = softmax_f64(t_block, tau);
        let q = softmax_f64(z_block, tau);

        let mut loss = 0.0f64;
        let mut mass_unfloored = 0.0f64;
        for k in 0..block {
            let denom = q[k].max(eps);
            loss += p[k] * (p[k].ln() - denom.ln());
            if q[k] > eps {
                mass_unfloored += p[k];
            }
        }
        total += loss;

        let g_block = &mut grad[s * block..][..block];
        for k in 0..block {
            let active = if q[k] > eps { p[k] } else { 0.0 };
            g_block[k] = ((q[k] * mass_unfloored - active) / (tau * n as f64)) as f32;
        }
    }
    let grad = Tensor::from_vec(transferred.dims(), grad)?;
    Ok((total / n as f64, grad))
}

fn softmax_f64(values: &[f32], tau: f64) -> Vec<f64> {
    let max = values
        .iter()
        .map(|&v| f64::from(v) / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values
        .iter()
        .map(|&v| (f64::from(v) / tau - max).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Velocity buffers for the three-convolution module.
struct RftmMomentum {
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
    w3: Vec<f32>,
    b3: Vec<f32>,
}

impl RftmMomentum {
    fn zeros(p: &RftmParams) -> Self {
        RftmMomentum {
            w1: vec![0.0; p.conv1.weights.len()],
            b1: vec![0.0; p.conv1.bias.len()],
            w2: vec![0.0; p.conv2.weights.len()],
            b2: vec![0.0; p.conv2.bias.len()],
            w3: vec![0.0; p.conv3.weights.len()],
            b3: vec![0.0; p.conv3.bias.len()],
        }
    }
}

/// Consecutive-iteration divergence guard threshold.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;
const HASH_CHECK_EVERY: usize = 100;

/// Stage 1: train the transference module on heavily degraded patch pairs,
/// updating only its own parameters.
pub fn train_rftm<R: PatchResolver + ?Sized>(
    hd_u: &PatchSet,
    hd_f: &PatchSet,
    resolver: &R,
    weights: &ExtractorWeights,
    initial: RftmParams,
    cfg: &TrainConfig,
) -> Result<(RftmParams, TrainReport)> {
    cfg.validate()?;
    if hd_u.is_empty() || hd_f.is_empty() {
        return Err(Error::param(format!(
            "transfer training needs non-empty HD sets (|HD_u| = {}, |HD_f| = {})",
            hd_u.len(),
            hd_f.len()
        )));
    }
    if !weights.is_frozen() {
        return Err(Error::param("extractor weights must be frozen"));
    }
    let started = Instant::now();
    let extractor_hash = weights.hash();

    // The extractor is frozen, so shallow-stage outputs, the skip branch and
    // the targets are constants; compute each once.
    let mut u_f0 = Vec::with_capacity(hd_u.len());
    let mut u_skip = Vec::with_capacity(hd_u.len());
    for patch in &hd_u.patches {
        let pixels = resolver.pixels(patch)?;
        let f0 = ps0_forward(&pixels, weights)?;
        let skip = ps1_forward(&f0, weights)?;
        u_f0.push(f0);
        u_skip.push(skip);
    }
    let mut f_target = Vec::with_capacity(hd_f.len());
    for patch in &hd_f.patches {
        let pixels = resolver.pixels(patch)?;
        let f0 = ps0_forward(&pixels, weights)?;
        f_target.push(ps1_forward(&f0, weights)?);
    }

    let pairs = sample_pairs(hd_u, hd_f, cfg.stage1_iterations * cfg.batch_size, cfg.seed)?;

    let mut params = initial;
    let mut momentum = RftmMomentum::zeros(&params);
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.stage1_iterations);
    let mut high_streak = 0usize;

    for iteration in 0..cfg.stage1_iterations {
        let chunk = &pairs[iteration * cfg.batch_size..][..cfg.batch_size];
        let f0_batch = Tensor::stack(&chunk.iter().map(|&(i, _)| &u_f0[i]).collect::<Vec<_>>())?;
        let skip_batch =
            Tensor::stack(&chunk.iter().map(|&(i, _)| &u_skip[i]).collect::<Vec<_>>())?;
        let target_batch =
            Tensor::stack(&chunk.iter().map(|&(_, j)| &f_target[j]).collect::<Vec<_>>())?;

        let (transferred, cache) = residual_forward_from_f0(&f0_batch, &skip_batch, &params)?;
        let (loss, grad) = kl_loss(&target_batch, &transferred, cfg.kl_epsilon, cfg.temperature)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration,
                reason: "transfer loss became non-finite".into(),
            });
        }
        if !trace.is_empty() && loss > DIVERGENCE_FACTOR * trace[0].max(1e-12) {
            high_streak += 1;
            if high_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Training {
                    iteration,
                    reason: format!(
                        "loss {loss} stayed above {DIVERGENCE_FACTOR}x the initial for {DIVERGENCE_PATIENCE} iterations"
                    ),
                });
            }
        } else {
            high_streak = 0;
        }
        trace.push(loss);

        let grads = rftm_backward(&cache, &params, &grad)?;
        sgd_step(
            params.conv1.weights.data_mut(),
            grads.conv1_weights.data(),
            &mut momentum.w1,
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(&mut params.conv1.bias, &grads.conv1_bias, &mut momentum.b1, cfg.learning_rate, cfg.momentum)?;
        sgd_step(
            params.conv2.weights.data_mut(),
            grads.conv2_weights.data(),
            &mut momentum.w2,
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(&mut params.conv2.bias, &grads.conv2_bias, &mut momentum.b2, cfg.learning_rate, cfg.momentum)?;
        sgd_step(
            params.conv3.weights.data_mut(),
            grads.conv3_weights.data(),
            &mut momentum.w3,
            cfg.learning_rate,
            cfg.momentum,
        )?;
        sgd_step(&mut params.conv3.bias, &grads.conv3_bias, &mut momentum.b3, cfg.learning_rate, cfg.momentum)?;

        if (iteration + 1) % HASH_CHECK_EVERY == 0 && weights.hash() != extractor_hash {
            return Err(Error::Training {
                iteration,
                reason: "frozen extractor weights mutated".into(),
            });
        }
    }

    if weights.hash() != extractor_hash {
        return Err(Error::Training {
            iteration: cfg.stage1_iterations,
            reason: "frozen extractor weights mutated".into(),
        });
    }

    let report = TrainReport {
        stage: "transfer".into(),
        seed: cfg.seed,
        config_echo: config_echo(cfg),
        initial_loss: trace.first().copied().unwrap_or(f64::NAN),
        final_loss: trace.last().copied().unwrap_or(f64::NAN),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        metrics: vec![
            ("extractor_hash".into(), format!("{extractor_hash:016x}")),
            (
                "smoothed_initial_loss".into(),
                smoothed_head(&trace, 50).to_string(),
            ),
            (
                "smoothed_final_loss".into(),
                smoothed_tail(&trace, 50).to_string(),
            ),
            ("pairs_hd_u".into(), hd_u.len().to_string()),
            ("pairs_hd_f".into(), hd_f.len().to_string()),
        ],
        loss_trace: trace,
    };
    Ok((params, report))
}

fn config_echo(cfg: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("train.lr".into(), cfg.learning_rate.to_string()),
        ("train.batch".into(), cfg.batch_size.to_string()),
        ("train.momentum".into(), cfg.momentum.to_string()),
        (
            "train.stage1_iterations".into(),
            cfg.stage1_iterations.to_string(),
        ),
        (
            "train.stage2_iterations".into(),
            cfg.stage2_iterations.to_string(),
        ),
        ("train.kl_epsilon".into(), cfg.kl_epsilon.to_string()),
        ("train.temperature".into(), cfg.temperature.to_string()),
    ]
}

/// Stage 2: with the extractor and transference module frozen, train one
/// downstream 3x3 stage plus a linear head on labeled degraded patches.
/// Returns the trained stage, head, and a report carrying held-out accuracy.
pub fn finetune(
    train_set: &[LabeledPatch],
    heldout: &[LabeledPatch],
    weights: &ExtractorWeights,
    rftm: &RftmParams,
    fs_init: ConvParams,
    head_init: HeadParams,
    cfg: &TrainConfig,
) -> Result<(ConvParams, HeadParams, TrainReport)> {
    cfg.validate()?;
    if distinct_classes(train_set) < 2 {
        return Err(Error::param(
            "finetuning needs at least two distinct classes",
        ));
    }
    if !weights.is_frozen() {
        return Err(Error::param("extractor weights must be frozen"));
    }
    let started = Instant::now();
    let extractor_hash = weights.hash();
    let rftm_hash = rftm.hash();
    let class_count = head_init.class_count;

    // Frozen upstream: precompute the modified feed-forward for every patch.
    let features_of = |set: &[LabeledPatch]| -> Result<(Vec<Tensor>, Vec<usize>)> {
        let mut feats = Vec::with_capacity(set.len());
        let mut labels = Vec::with_capacity(set.len());
        for s in set {
            let f0 = ps0_forward(&s.pixels, weights)?;
            let skip = ps1_forward(&f0, weights)?;
            let (f_hat, _) = residual_forward_from_f0(&f0, &skip, rftm)?;
            feats.push(f_hat);
            labels.push(s.class_id);
        }
        Ok((feats, labels))
    };
    let (train_feats, train_labels) = features_of(train_set)?;
    let (held_feats, held_labels) = features_of(heldout)?;

    let mut fs = fs_init;
    let mut head = head_init;
    let mut vel_fw = vec![0.0f32; fs.weights.len()];
    let mut vel_fb = vec![0.0f32; fs.bias.len()];
    let mut vel_hw = vec![0.0f32; head.weights.len()];
    let mut vel_hb = vec![0.0f32; head.bias.len()];

    let mut rng = seeded_rng(cfg.seed);
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.stage2_iterations);
    let mut high_streak = 0usize;

    for iteration in 0..cfg.stage2_iterations {
        let mut parts = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pick = rng.gen_range(0..train_feats.len());
            parts.push(&train_feats[pick]);
            labels.push(train_labels[pick]);
        }
        let batch = Tensor::stack(&parts)?;

        let pre = conv2d(&batch, &fs)?;
        let act = relu(&pre);
        let pooled = gap_pool(&act);
        let logits = head.logits(&pooled, labels.len());
        let (loss, g_logits) = softmax_cross_entropy(&logits, &labels, class_count)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration,
                reason: "finetune loss became non-finite".into(),
            });
        }
        if !trace.is_empty() && loss > DIVERGENCE_FACTOR * trace[0].max(1e-12) {
            high_streak += 1;
            if high_streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Training {
                    iteration,
                    reason: "finetune loss diverged".into(),
                });
            }
        } else {
            high_streak = 0;
        }
        trace.push(loss);

        let (g_hw, g_hb, g_feat) = head_backward(&head, &pooled, &g_logits, labels.len());
        let g_act = gap_pool_grad(act.dims(), &g_feat);
        let g_pre = relu_grad(&pre, &g_act)?;
        let (_, g_fw, g_fb) = conv2d_grad(&batch, &fs, &g_pre)?;

        sgd_step(fs.weights.data_mut(), g_fw.data(), &mut vel_fw, cfg.learning_rate, cfg.momentum)?;
        sgd_step(&mut fs.bias, &g_fb, &mut vel_fb, cfg.learning_rate, cfg.momentum)?;
        sgd_step(&mut head.weights, &g_hw, &mut vel_hw, cfg.learning_rate, cfg.momentum)?;
        sgd_step(&mut head.bias, &g_hb, &mut vel_hb, cfg.learning_rate, cfg.momentum)?;
    }

    if weights.hash() != extractor_hash || rftm.hash() != rftm_hash {
        return Err(Error::Training {
            iteration: cfg.stage2_iterations,
            reason: "frozen weights mutated during finetune".into(),
        });
    }

    // Held-out accuracy through the trained stage and head.
    let heldout_accuracy = if held_feats.is_empty() {
        f64::NAN
    } else {
        let mut hits = 0.0f64;
        for (feat, &label) in held_feats.iter().zip(&held_labels) {
            let pre = conv2d(feat, &fs)?;
            let act = relu(&pre);
            let pooled = gap_pool(&act);
            let logits = head.logits(&pooled, 1);
            hits += accuracy(&logits, &[label], class_count);
        }
        hits / held_feats.len() as f64
    };

    let report = TrainReport {
        stage: "finetune".into(),
        seed: cfg.seed,
        config_echo: config_echo(cfg),
        initial_loss: trace.first().copied().unwrap_or(f64::NAN),
        final_loss: trace.last().copied().unwrap_or(f64::NAN),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        metrics: vec![
            ("extractor_hash".into(), format!("{extractor_hash:016x}")),
            ("rftm_hash".into(), format!("{rftm_hash:016x}")),
            ("heldout_accuracy".into(), heldout_accuracy.to_string()),
            ("train_patches".into(), train_set.len().to_string()),
            ("heldout_patches".into(), heldout.len().to_string()),
        ],
        loss_trace: trace,
    };
    Ok((fs, head, report))
}
