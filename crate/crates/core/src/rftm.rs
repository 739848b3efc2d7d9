//! The residual feature transference module: a 2x2 stride-2 max pool
//! followed by three 3x3 stride-1 convolutions, ReLU after the first and
//! second, nothing after the third.
//!
//! It taps the shallow-stage output and its result is added elementwise to
//! the intermediate-stage output, so the modified feed-forward is
//! `F_hat = ps1(f0) + rftm(f0)` with `f0 = ps0(x)` computed once and shared.
//! Gradients exist for the module's own parameters only; the extractor
//! stages stay frozen by construction.

use crate::error::{Error, Result};
use crate::extractor::{ps0_forward, ps1_forward, seeded_conv, ExtractorWeights};
use crate::tensor::{
    add, conv2d, conv2d_grad, maxpool2, maxpool2_grad, relu, relu_grad, ConvParams, PoolIndices,
    Tensor,
};
use crate::tnsr;
use crate::util::{fnv1a64, seeded_rng};

/// Channel chain of the three convolutions: C0 -> Cmid -> Cmid -> C1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RftmConfig {
    pub c0: usize,
    pub cmid: usize,
    pub c1: usize,
}

impl RftmConfig {
    /// Widths matching an extractor, with Cmid tied to C1.
    pub fn for_extractor(w: &ExtractorWeights) -> Self {
        RftmConfig {
            c0: w.c0(),
            cmid: w.c1(),
            c1: w.c1(),
        }
    }
}

/// How to initialize the module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RftmInit {
    /// conv1/conv2 seeded fan-in normal, conv3 all-zero: training starts at
    /// `F_hat == F` exactly.
    ZeroResidual,
    Random,
}

impl RftmInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero-residual" => Ok(RftmInit::ZeroResidual),
            "random" => Ok(RftmInit::Random),
            other => Err(Error::param(format!("unknown init mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RftmInit::ZeroResidual => "zero-residual",
            RftmInit::Random => "random",
        }
    }
}

/// Weights and biases of the three convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct RftmParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

impl RftmParams {
    pub fn parameter_count(&self) -> usize {
        self.conv1.parameter_count() + self.conv2.parameter_count() + self.conv3.parameter_count()
    }

    /// Closed-form count for a (C0, Cmid, C1) chain of 3x3 convolutions.
    pub fn expected_parameter_count(cfg: &RftmConfig) -> usize {
        9 * cfg.c0 * cfg.cmid + cfg.cmid + 9 * cfg.cmid * cfg.cmid + cfg.cmid
            + 9 * cfg.cmid * cfg.c1
            + cfg.c1
    }

    pub fn to_entries(&self) -> Vec<tnsr::Entry> {
        let mut entries = Vec::with_capacity(6);
        for (name, conv) in [
            ("rftm.conv1", &self.conv1),
            ("rftm.conv2", &self.conv2),
            ("rftm.conv3", &self.conv3),
        ] {
            entries.push(tnsr::Entry::from_tensor(
                format!("{name}.weight"),
                &conv.weights,
            ));
            entries.push(tnsr::Entry::from_values(format!("{name}.bias"), &conv.bias));
        }
        entries
    }

    pub fn from_entries(entries: &[tnsr::Entry]) -> Result<Self> {
        let conv = |name: &str| -> Result<ConvParams> {
            let w = tnsr::find(entries, &format!("{name}.weight"))?.to_tensor()?;
            let b = tnsr::find(entries, &format!("{name}.bias"))?.data.clone();
            ConvParams::new(w, b, 1, 1)
        };
        Ok(RftmParams {
            conv1: conv("rftm.conv1")?,
            conv2: conv("rftm.conv2")?,
            conv3: conv("rftm.conv3")?,
        })
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(&tnsr::encode(&self.to_entries()))
    }
}

/// Build module parameters for the given widths, deterministic per seed.
pub fn init_rftm(cfg: &RftmConfig, seed: u64, mode: RftmInit) -> Result<RftmParams> {
    if cfg.c0 == 0 || cfg.cmid == 0 || cfg.c1 == 0 {
        return Err(Error::param("rftm channel widths must be positive"));
    }
    let mut rng = seeded_rng(seed);
    let conv1 = seeded_conv(cfg.cmid, cfg.c0, 3, &mut rng);
    let conv2 = seeded_conv(cfg.cmid, cfg.cmid, 3, &mut rng);
    let conv3 = match mode {
        RftmInit::ZeroResidual => ConvParams::new(
            Tensor::zeros([cfg.c1, cfg.cmid, 3, 3]),
            vec![0.0; cfg.c1],
            1,
            1,
        )?,
        RftmInit::Random => seeded_conv(cfg.c1, cfg.cmid, 3, &mut rng),
    };
    Ok(RftmParams {
        conv1,
        conv2,
        conv3,
    })
}

/// Module forward: pool, conv1, ReLU, conv2, ReLU, conv3 (no activation).
pub fn rftm_forward(f0: &Tensor, p: &RftmParams) -> Result<Tensor> {
    let (pooled, _) = maxpool2(f0)?;
    let a1 = relu(&conv2d(&pooled, &p.conv1)?);
    let a2 = relu(&conv2d(&a1, &p.conv2)?);
    conv2d(&a2, &p.conv3)
}

/// Everything the backward pass needs from one residual forward.
pub struct ResidualCache {
    params_hash: u64,
    pooled: Tensor,
    pool_indices: PoolIndices,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
    output_dims: [usize; 4],
}

/// Gradients for the three convolutions.
#[derive(Debug, Clone)]
pub struct RftmGrads {
    pub conv1_weights: Tensor,
    pub conv1_bias: Vec<f32>,
    pub conv2_weights: Tensor,
    pub conv2_bias: Vec<f32>,
    pub conv3_weights: Tensor,
    pub conv3_bias: Vec<f32>,
}

/// Modified feed-forward `F_hat = ps1(f0) + rftm(f0)`, sharing one ps0 pass.
pub fn residual_forward(
    x: &Tensor,
    w: &ExtractorWeights,
    p: &RftmParams,
) -> Result<Tensor> {
    let f0 = ps0_forward(x, w)?;
    let skip = ps1_forward(&f0, w)?;
    add(&skip, &rftm_forward(&f0, p)?)
}

/// Residual forward given a precomputed shallow-stage output, keeping the
/// activation cache for [`rftm_backward`]. `skip` is `ps1(f0)`.
pub fn residual_forward_from_f0(
    f0: &Tensor,
    skip: &Tensor,
    p: &RftmParams,
) -> Result<(Tensor, ResidualCache)> {
    let (pooled, pool_indices) = maxpool2(f0)?;
    let pre1 = conv2d(&pooled, &p.conv1)?;
    let act1 = relu(&pre1);
    let pre2 = conv2d(&act1, &p.conv2)?;
    let act2 = relu(&pre2);
    let residual = conv2d(&act2, &p.conv3)?;
    let out = add(skip, &residual)?;
    let cache = ResidualCache {
        params_hash: p.hash(),
        pooled,
        pool_indices,
        pre1,
        act1,
        pre2,
        act2,
        output_dims: out.dims(),
    };
    Ok((out, cache))
}

/// Cached variant of [`residual_forward`].
pub fn residual_forward_cached(
    x: &Tensor,
    w: &ExtractorWeights,
    p: &RftmParams,
) -> Result<(Tensor, ResidualCache)> {
    let f0 = ps0_forward(x, w)?;
    let skip = ps1_forward(&f0, w)?;
    residual_forward_from_f0(&f0, &skip, p)
}

/// Exact gradients of `sum(grad * F_hat)` with respect to the module
/// parameters. The residual branch is the only path that depends on them, so
/// backpropagation walks conv3 -> conv2 -> conv1 and stops; no gradients are
/// produced for the frozen extractor.
pub fn rftm_backward(cache: &ResidualCache, p: &RftmParams, grad: &Tensor) -> Result<RftmGrads> {
    if p.hash() != cache.params_hash {
        return Err(Error::state(
            "rftm parameters changed between forward and backward",
        ));
    }
    if grad.dims() != cache.output_dims {
        return Err(Error::state(format!(
            "gradient dims {:?} do not match cached forward output {:?}",
            grad.dims(),
            cache.output_dims
        )));
    }
    let (g_act2, g_w3, g_b3) = conv2d_grad(&cache.act2, &p.conv3, grad)?;
    let g_pre2 = relu_grad(&cache.pre2, &g_act2)?;
    let (g_act1, g_w2, g_b2) = conv2d_grad(&cache.act1, &p.conv2, &g_pre2)?;
    let g_pre1 = relu_grad(&cache.pre1, &g_act1)?;
    let (_, g_w1, g_b1) = conv2d_grad(&cache.pooled, &p.conv1, &g_pre1)?;
    Ok(RftmGrads {
        conv1_weights: g_w1,
        conv1_bias: g_b1,
        conv2_weights: g_w2,
        conv2_bias: g_b2,
        conv3_weights: g_w3,
        conv3_bias: g_b3,
    })
}

/// Gradient of the max-pool entry path, exposed for completeness when the
/// module is probed in isolation (training never needs it).
pub fn rftm_input_grad(cache: &ResidualCache, p: &RftmParams, grad: &Tensor) -> Result<Tensor> {
    if p.hash() != cache.params_hash {
        return Err(Error::state(
            "rftm parameters changed between forward and backward",
        ));
    }
    let (g_act2, _, _) = conv2d_grad(&cache.act2, &p.conv3, grad)?;
    let g_pre2 = relu_grad(&cache.pre2, &g_act2)?;
    let (g_act1, _, _) = conv2d_grad(&cache.act1, &p.conv2, &g_pre2)?;
    let g_pre1 = relu_grad(&cache.pre1, &g_act1)?;
    let (g_pooled, _, _) = conv2d_grad(&cache.pooled, &p.conv1, &g_pre1)?;
    maxpool2_grad(&cache.pool_indices, &g_pooled)
}
