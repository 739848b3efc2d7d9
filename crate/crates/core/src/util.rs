//! Small shared helpers: seeded RNG construction, normal sampling, hashing,
//! and trace smoothing.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere a seed appears in a public signature.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal draw via Box-Muller. Two uniform draws per sample keeps
/// the stream layout independent of any cached second value.
pub fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// FNV-1a over raw bytes; used for cheap content fingerprints of weights and
/// emitted files.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Fingerprint of an f32 slice via its little-endian byte image.
pub fn hash_f32s(values: &[f32]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// Trailing moving average over the last `window` entries of a trace.
/// Shorter traces average whatever is present.
pub fn smoothed_tail(trace: &[f64], window: usize) -> f64 {
    if trace.is_empty() {
        return f64::NAN;
    }
    let take = window.max(1).min(trace.len());
    let tail = &trace[trace.len() - take..];
    tail.iter().sum::<f64>() / take as f64
}

/// Leading moving average over the first `window` entries of a trace.
pub fn smoothed_head(trace: &[f64], window: usize) -> f64 {
    if trace.is_empty() {
        return f64::NAN;
    }
    let take = window.max(1).min(trace.len());
    let head = &trace[..take];
    head.iter().sum::<f64>() / take as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_samples_are_deterministic_and_plausible() {
        let mut a = seeded_rng(11);
        let mut b = seeded_rng(11);
        let xs: Vec<f64> = (0..2000).map(|_| sample_standard_normal(&mut a)).collect();
        let ys: Vec<f64> = (0..2000).map(|_| sample_standard_normal(&mut b)).collect();
        assert_eq!(xs, ys);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "var {var}");
    }

    #[test]
    fn fnv_distinguishes_inputs() {
        assert_ne!(fnv1a64(b"abc"), fnv1a64(b"abd"));
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn smoothing_windows() {
        let trace = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(smoothed_head(&trace, 2), 1.5);
        assert_eq!(smoothed_tail(&trace, 2), 3.5);
        assert_eq!(smoothed_tail(&trace, 50), 2.5);
    }
}
