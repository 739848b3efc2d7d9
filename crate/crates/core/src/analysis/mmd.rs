//! Unbiased squared maximum mean discrepancy with a Gaussian kernel, plus
//! the permutation machinery used to judge whether a gap (or a gap
//! reduction) is larger than chance.

use rand::Rng;

use super::FeatureCloud;
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// Result of one MMD^2 evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd2 {
    pub value: f64,
    pub bandwidth: f64,
    /// Every point in both sets was identical; the value is pinned to 0.
    pub degenerate: bool,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(*x) - f64::from(*y);
        acc += d * d;
    }
    acc
}

/// Median pairwise distance over the pooled rows of all given clouds.
/// Returns 0 when every pooled point coincides.
pub fn median_heuristic_bandwidth(clouds: &[&FeatureCloud]) -> Result<f64> {
    let mut rows: Vec<&[f32]> = Vec::new();
    for c in clouds {
        for i in 0..c.len() {
            rows.push(c.vector(i));
        }
    }
    if rows.len() < 2 {
        return Err(Error::param("median heuristic needs at least two points"));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape("pooled clouds have mixed widths"));
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(squared_distance(rows[i], rows[j]).sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    Ok(median)
}

fn gaussian(sq_dist: f64, sigma: f64) -> f64 {
    (-sq_dist / (2.0 * sigma * sigma)).exp()
}

/// Unbiased squared MMD with kernel `exp(-||a-b||^2 / (2 sigma^2))`.
/// `bandwidth = None` derives sigma by the median heuristic over both sets.
///
/// Equal-sized clouds use the paired U-statistic whose cross sum skips the
/// aligned diagonal, so literally identical samples measure exactly zero;
/// unequal sizes fall back to the full cross mean. Arguments are ordered
/// canonically before summation, making `mmd2(x, y)` and `mmd2(y, x)`
/// bitwise identical.
pub fn mmd2(x: &FeatureCloud, y: &FeatureCloud, bandwidth: Option<f64>) -> Result<Mmd2> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::param(format!(
            "mmd needs at least two points per cloud, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.width() != y.width() {
        return Err(Error::shape(format!(
            "cloud widths differ: {} vs {}",
            x.width(),
            y.width()
        )));
    }
    let sigma = match bandwidth {
        Some(b) if b > 0.0 => b,
        Some(b) => return Err(Error::param(format!("bandwidth must be positive, got {b}"))),
        None => median_heuristic_bandwidth(&[x, y])?,
    };
    if sigma == 0.0 {
        return Ok(Mmd2 {
            value: 0.0,
            bandwidth: 0.0,
            degenerate: true,
        });
    }

    let (a, b) = if cloud_order(x, y) == std::cmp::Ordering::Greater {
        (y, x)
    } else {
        (x, y)
    };
    let (m, n) = (a.len(), b.len());
    let within = |c: &FeatureCloud| -> f64 {
        let mut acc = 0.0f64;
        for i in 0..c.len() {
            for j in 0..c.len() {
                if i != j {
                    acc += gaussian(squared_distance(c.vector(i), c.vector(j)), sigma);
                }
            }
        }
        acc / (c.len() as f64 * (c.len() - 1) as f64)
    };
    let cross = if m == n {
        let mut acc = 0.0f64;
        for i in 0..m {
            for j in 0..n {
                if i != j {
                    acc += gaussian(squared_distance(a.vector(i), b.vector(j)), sigma);
                }
            }
        }
        acc / (m as f64 * (m - 1) as f64)
    } else {
        let mut acc = 0.0f64;
        for i in 0..m {
            for j in 0..n {
                acc += gaussian(squared_distance(a.vector(i), b.vector(j)), sigma);
            }
        }
        acc / (m as f64 * n as f64)
    };
    let value = within(a) + within(b) - 2.0 * cross;
    Ok(Mmd2 {
        value,
        bandwidth: sigma,
        degenerate: false,
    })
}

/// Deterministic total order on clouds (size, then elementwise), used only
/// to canonicalize the summation order inside [`mmd2`].
fn cloud_order(x: &FeatureCloud, y: &FeatureCloud) -> std::cmp::Ordering {
    x.len().cmp(&y.len()).then_with(|| {
        for (a, b) in x.data().iter().zip(y.data()) {
            let ord = a.total_cmp(b);
            if ord != std::cmp::Ordering::Equal {
                return ord;
            }
        }
        std::cmp::Ordering::Equal
    })
}

/// Precomputed kernel matrix over pooled rows, for permutation resampling.
struct PooledKernel {
    k: Vec<f64>,
    n: usize,
}

impl PooledKernel {
    fn build(rows: &[&[f32]], sigma: f64) -> PooledKernel {
        let n = rows.len();
        let mut k = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v = gaussian(squared_distance(rows[i], rows[j]), sigma);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        PooledKernel { k, n }
    }

    /// Unbiased MMD^2 of the split defined by `assign[i] == true` (first set).
    fn mmd_of_split(&self, assign: &[bool]) -> f64 {
        let m = assign.iter().filter(|&&a| a).count();
        let n2 = self.n - m;
        let mut xx = 0.0f64;
        let mut yy = 0.0f64;
        let mut xy = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                if i == j {
                    continue;
                }
                let v = self.k[i * self.n + j];
                match (assign[i], assign[j]) {
                    (true, true) => xx += v,
                    (false, false) => yy += v,
                    _ => xy += v,
                }
            }
        }
        xx / (m as f64 * (m - 1) as f64) + yy / (n2 as f64 * (n2 - 1) as f64)
            - xy / (m as f64 * n2 as f64)
    }
}

/// Classic two-sample permutation test: pool the clouds, relabel preserving
/// sizes, and collect the null distribution of MMD^2. The kernel bandwidth
/// is fixed from the observed pooled sets.
#[derive(Debug, Clone)]
pub struct PermutationTest {
    pub observed: f64,
    pub null: Vec<f64>,
    pub percentile95: f64,
    pub exceeds: bool,
    pub bandwidth: f64,
}

pub fn two_sample_permutation_test(
    x: &FeatureCloud,
    y: &FeatureCloud,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::param("permutation test needs two points per cloud"));
    }
    let sigma = median_heuristic_bandwidth(&[x, y])?;
    if sigma == 0.0 {
        return Err(Error::param("degenerate clouds: all points identical"));
    }

    let mut rows: Vec<&[f32]> = Vec::new();
    for i in 0..x.len() {
        rows.push(x.vector(i));
    }
    for i in 0..y.len() {
        rows.push(y.vector(i));
    }
    let kernel = PooledKernel::build(&rows, sigma);
    // Observed value through the same split estimator the null uses.
    let mut real = vec![false; rows.len()];
    for flag in real.iter_mut().take(x.len()) {
        *flag = true;
    }
    let observed = kernel.mmd_of_split(&real);

    let mut rng = seeded_rng(seed);
    let mut null = Vec::with_capacity(permutations);
    let total = rows.len();
    let m = x.len();
    let mut order: Vec<usize> = (0..total).collect();
    for _ in 0..permutations {
        for i in (1..total).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut assign = vec![false; total];
        for &idx in order.iter().take(m) {
            assign[idx] = true;
        }
        null.push(kernel.mmd_of_split(&assign));
    }
    let percentile95 = percentile(&null, 0.95);
    Ok(PermutationTest {
        observed,
        exceeds: observed > percentile95,
        percentile95,
        null,
        bandwidth: sigma,
    })
}

/// Paired-swap null for a gap *reduction*: `u` and `tu` are two renderings
/// of the same patches. Under the no-effect hypothesis the labels are
/// exchangeable per patch, so each permutation swaps u[i] and tu[i] by a
/// seeded coin flip and re-measures
/// `MMD^2(first, f) - MMD^2(second, f)`.
#[derive(Debug, Clone)]
pub struct GapReductionTest {
    /// `MMD^2(u, f) - MMD^2(tu, f)` on the real labeling.
    pub observed: f64,
    pub null: Vec<f64>,
    pub percentile95: f64,
    pub significant: bool,
    pub bandwidth: f64,
}

pub fn gap_reduction_permutation_test(
    u: &FeatureCloud,
    tu: &FeatureCloud,
    f: &FeatureCloud,
    permutations: usize,
    seed: u64,
) -> Result<GapReductionTest> {
    if u.len() != tu.len() {
        return Err(Error::param(format!(
            "paired clouds must have equal sizes, got {} and {}",
            u.len(),
            tu.len()
        )));
    }
    if u.len() < 2 || f.len() < 2 {
        return Err(Error::param("gap test needs two points per cloud"));
    }
    let sigma = median_heuristic_bandwidth(&[u, tu, f])?;
    if sigma == 0.0 {
        return Err(Error::param("degenerate clouds: all points identical"));
    }

    let n = u.len();
    // Kernel blocks against f and within the paired pool.
    let k_u_tu: Vec<&[f32]> = (0..n)
        .map(|i| u.vector(i))
        .chain((0..n).map(|i| tu.vector(i)))
        .collect();
    let pooled = PooledKernel::build(&k_u_tu, sigma);
    let mut cross = vec![0.0f64; 2 * n * f.len()];
    for i in 0..2 * n {
        for j in 0..f.len() {
            cross[i * f.len() + j] = gaussian(squared_distance(k_u_tu[i], f.vector(j)), sigma);
        }
    }
    let ff = {
        let mut acc = 0.0f64;
        for i in 0..f.len() {
            for j in 0..f.len() {
                if i != j {
                    acc += gaussian(squared_distance(f.vector(i), f.vector(j)), sigma);
                }
            }
        }
        acc / (f.len() as f64 * (f.len() - 1) as f64)
    };

    let mmd_against_f = |members: &[usize], pooled: &PooledKernel, cross: &[f64]| -> f64 {
        let m = members.len();
        let mut xx = 0.0f64;
        for (a, &i) in members.iter().enumerate() {
            for (b, &j) in members.iter().enumerate() {
                if a != b {
                    xx += pooled.k[i * pooled.n + j];
                }
            }
        }
        let mut xf = 0.0f64;
        for &i in members {
            for j in 0..f.len() {
                xf += cross[i * f.len() + j];
            }
        }
        xx / (m as f64 * (m - 1) as f64) + ff - 2.0 * xf / (m as f64 * f.len() as f64)
    };

    // Observed difference through the same estimator the null uses.
    let real_u: Vec<usize> = (0..n).collect();
    let real_tu: Vec<usize> = (n..2 * n).collect();
    let observed =
        mmd_against_f(&real_u, &pooled, &cross) - mmd_against_f(&real_tu, &pooled, &cross);

    let mut rng = seeded_rng(seed);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for i in 0..n {
            if rng.gen::<bool>() {
                first.push(i);
                second.push(n + i);
            } else {
                first.push(n + i);
                second.push(i);
            }
        }
        let delta = mmd_against_f(&first, &pooled, &cross) - mmd_against_f(&second, &pooled, &cross);
        null.push(delta);
    }
    let percentile95 = percentile(&null, 0.95);
    Ok(GapReductionTest {
        observed,
        significant: observed > percentile95,
        percentile95,
        null,
        bandwidth: sigma,
    })
}

/// Empirical percentile by sorted rank (nearest-rank rule).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}
