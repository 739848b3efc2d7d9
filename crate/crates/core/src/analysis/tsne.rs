//! Exact t-SNE in two dimensions: Gaussian input affinities calibrated to a
//! target perplexity by bisection, Student-t output affinities, and plain
//! gradient descent with early exaggeration and a momentum switch.
//!
//! Everything runs in f64 and no approximation trees are involved; the
//! point counts here stay desk-scale (guarded at 2000).

use super::{CloudTag, FeatureCloud};
use crate::error::{Error, Result};
use crate::util::{sample_standard_normal, seeded_rng};

const MAX_POINTS: usize = 2000;
const P_FLOOR: f64 = 1e-12;
const EARLY_EXAGGERATION: f64 = 4.0;
const MOMENTUM_EARLY: f64 = 0.5;
const MOMENTUM_LATE: f64 = 0.8;
const LEARNING_RATE: f64 = 100.0;

/// Fixed-point accumulator for sums over points. Each term is rounded to
/// 2^-80 once, independently, and summed in i128, so the total cannot
/// depend on summation order; permuting the input points permutes the
/// embedding exactly instead of drifting through amplified f64 rounding.
#[derive(Clone, Copy, Default)]
struct ExactSum(i128);

const FIX_SCALE: f64 = 1.2089258196146292e24; // 2^80

impl ExactSum {
    #[inline]
    fn add(&mut self, v: f64) {
        self.0 += (v * FIX_SCALE) as i128;
    }

    #[inline]
    fn value(self) -> f64 {
        self.0 as f64 / FIX_SCALE
    }
}

#[derive(Debug, Clone)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        TsneOptions {
            perplexity: 12.0,
            iterations: 400,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneEmbedding {
    pub points: Vec<[f64; 2]>,
    pub tags: Vec<CloudTag>,
    /// KL(P||Q) against the un-exaggerated P, recorded every iteration.
    pub kl_trace: Vec<f64>,
    pub kl_after_exaggeration: f64,
    pub final_kl: f64,
}

/// Embed the concatenated clouds; the low-dimensional init is drawn from the
/// seed (Gaussian, scale 1e-4).
pub fn tsne_embed(clouds: &[&FeatureCloud], opts: &TsneOptions) -> Result<TsneEmbedding> {
    let (rows, tags) = concat_rows(clouds)?;
    let mut rng = seeded_rng(opts.seed);
    let init: Vec<[f64; 2]> = (0..rows.len())
        .map(|_| {
            [
                sample_standard_normal(&mut rng) * 1e-4,
                sample_standard_normal(&mut rng) * 1e-4,
            ]
        })
        .collect();
    tsne_embed_with_init(&rows, tags, init, opts)
}

/// Embedding with an explicit init; lets callers check that permuting the
/// points together with their init permutes the embedding and nothing else.
pub fn tsne_embed_with_init(
    rows: &[Vec<f64>],
    tags: Vec<CloudTag>,
    init: Vec<[f64; 2]>,
    opts: &TsneOptions,
) -> Result<TsneEmbedding> {
    let n = rows.len();
    if n < 5 {
        return Err(Error::param(format!(
            "t-SNE needs at least 5 points, got {n}"
        )));
    }
    if n > MAX_POINTS {
        return Err(Error::param(format!(
            "t-SNE input {n} exceeds the exact-method guard of {MAX_POINTS}"
        )));
    }
    if !(opts.perplexity > 0.0 && opts.perplexity < (n - 1) as f64 / 3.0) {
        return Err(Error::param(format!(
            "perplexity {} infeasible for {n} points (needs 0 < perplexity < {})",
            opts.perplexity,
            (n - 1) as f64 / 3.0
        )));
    }
    if init.len() != n || tags.len() != n {
        return Err(Error::shape("init/tag length does not match point count"));
    }

    let p = joint_affinities(rows, opts.perplexity);
    let mut y = init;
    let mut velocity = vec![[0.0f64; 2]; n];
    let exaggeration_end = opts.iterations / 4;
    let mut kl_trace = Vec::with_capacity(opts.iterations);

    let mut q = vec![0.0f64; n * n];
    for iteration in 0..opts.iterations {
        // Student-t affinities in the embedding.
        let mut q_sum = ExactSum::default();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    q[i * n + j] = 0.0;
                    continue;
                }
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let t = 1.0 / (1.0 + dx * dx + dy * dy);
                q[i * n + j] = t;
                q_sum.add(t);
            }
        }
        let q_sum = q_sum.value();

        let exaggeration = if iteration < exaggeration_end {
            EARLY_EXAGGERATION
        } else {
            1.0
        };
        let momentum = if iteration < exaggeration_end {
            MOMENTUM_EARLY
        } else {
            MOMENTUM_LATE
        };

        let mut kl = ExactSum::default();
        for i in 0..n {
            let mut gx = ExactSum::default();
            let mut gy = ExactSum::default();
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = p[i * n + j];
                let t = q[i * n + j];
                let qij = (t / q_sum).max(P_FLOOR);
                kl.add(pij * (pij.ln() - qij.ln()));
                let force = 4.0 * (exaggeration * pij - qij) * t;
                gx.add(force * (y[i][0] - y[j][0]));
                gy.add(force * (y[i][1] - y[j][1]));
            }
            velocity[i][0] = momentum * velocity[i][0] - LEARNING_RATE * gx.value();
            velocity[i][1] = momentum * velocity[i][1] - LEARNING_RATE * gy.value();
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        // Re-center so the embedding cannot drift.
        let mut cx = ExactSum::default();
        let mut cy = ExactSum::default();
        for pt in &y {
            cx.add(pt[0]);
            cy.add(pt[1]);
        }
        let cx = cx.value() / n as f64;
        let cy = cy.value() / n as f64;
        for pt in &mut y {
            pt[0] -= cx;
            pt[1] -= cy;
        }
        kl_trace.push(kl.value());
    }

    let kl_after_exaggeration = kl_trace
        .get(exaggeration_end.saturating_sub(1))
        .copied()
        .unwrap_or(f64::NAN);
    let final_kl = kl_trace.last().copied().unwrap_or(f64::NAN);
    Ok(TsneEmbedding {
        points: y,
        tags,
        kl_trace,
        kl_after_exaggeration,
        final_kl,
    })
}

fn concat_rows(clouds: &[&FeatureCloud]) -> Result<(Vec<Vec<f64>>, Vec<CloudTag>)> {
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    let width = clouds
        .first()
        .ok_or_else(|| Error::param("t-SNE needs at least one cloud"))?
        .width();
    for c in clouds {
        if c.width() != width {
            return Err(Error::shape("clouds have mixed widths"));
        }
        for i in 0..c.len() {
            rows.push(c.vector(i).iter().map(|&v| f64::from(v)).collect());
            tags.push(c.tag);
        }
    }
    Ok((rows, tags))
}

/// Symmetrized joint affinities with per-point bisection to the target
/// perplexity (entropy in nats equal to ln(perplexity)).
fn joint_affinities(rows: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = rows.len();
    let mut sq = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut d = 0.0f64;
            for (a, b) in rows[i].iter().zip(&rows[j]) {
                d += (a - b) * (a - b);
            }
            sq[i * n + j] = d;
            sq[j * n + i] = d;
        }
    }

    let target_entropy = perplexity.ln();
    let mut cond = vec![0.0f64; n * n];
    for i in 0..n {
        let mut beta = 1.0f64;
        let mut beta_lo = f64::NEG_INFINITY;
        let mut beta_hi = f64::INFINITY;
        for _ in 0..64 {
            let mut sum = ExactSum::default();
            for j in 0..n {
                if j == i {
                    cond[i * n + j] = 0.0;
                    continue;
                }
                let v = (-beta * sq[i * n + j]).exp();
                cond[i * n + j] = v;
                sum.add(v);
            }
            let sum = sum.value();
            let mut entropy_acc = ExactSum::default();
            if sum > 0.0 {
                for j in 0..n {
                    if j != i {
                        let pj = cond[i * n + j] / sum;
                        cond[i * n + j] = pj;
                        if pj > 1e-300 {
                            entropy_acc.add(-pj * pj.ln());
                        }
                    }
                }
            }
            let entropy = entropy_acc.value();
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-9 {
                break;
            }
            if diff > 0.0 {
                beta_lo = beta;
                beta = if beta_hi.is_infinite() {
                    beta * 2.0
                } else {
                    0.5 * (beta + beta_hi)
                };
            } else {
                beta_hi = beta;
                beta = if beta_lo.is_infinite() {
                    beta * 0.5
                } else {
                    0.5 * (beta + beta_lo)
                };
            }
        }
    }

    let mut joint = vec![0.0f64; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                joint[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / norm).max(P_FLOOR);
            }
        }
    }
    joint
}

/// Centroid separation over mean intra-cluster spread for two point groups;
/// the separability statistic used on two-cluster reference runs.
pub fn separation_statistic(points: &[[f64; 2]], first_group: &[bool]) -> f64 {
    assert_eq!(points.len(), first_group.len());
    let mut ca = [0.0f64; 2];
    let mut cb = [0.0f64; 2];
    let mut na = 0usize;
    let mut nb = 0usize;
    for (pt, &is_a) in points.iter().zip(first_group) {
        if is_a {
            ca[0] += pt[0];
            ca[1] += pt[1];
            na += 1;
        } else {
            cb[0] += pt[0];
            cb[1] += pt[1];
            nb += 1;
        }
    }
    ca[0] /= na as f64;
    ca[1] /= na as f64;
    cb[0] /= nb as f64;
    cb[1] /= nb as f64;
    let mut spread = 0.0f64;
    for (pt, &is_a) in points.iter().zip(first_group) {
        let c = if is_a { ca } else { cb };
        spread += ((pt[0] - c[0]).powi(2) + (pt[1] - c[1]).powi(2)).sqrt();
    }
    spread /= points.len() as f64;
    let centroid_dist = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
    centroid_dist / spread.max(1e-12)
}
