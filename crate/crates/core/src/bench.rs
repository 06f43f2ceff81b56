//! Wall-time and transient-memory scaling of SA versus ESA.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMode, AttentionParams};
use crate::error::{Error, Result};
use crate::memory::measure_peak;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: AttentionMode,
    pub n: usize,
    /// Best-of-`reps` seconds per forward.
    pub seconds: f64,
    /// Peak bytes allocated during one forward (0 unless the counting allocator is installed).
    pub peak_bytes: usize,
    /// Largest |SA − ESA| over the output at this size.
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub sa_exponent: f64,
    pub esa_exponent: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    num / den
}

/// Random attention weights with a nonzero `scale`.
pub fn random_params(channels: usize, qk_channels: usize, seed: u64) -> AttentionParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], s: f32| Tensor::from_fn(shape, |_| rng.gen_range(-s..s));
    let ws = 1.0 / (channels as f32).sqrt();
    AttentionParams {
        query_weight: t(&[qk_channels, channels], ws),
        query_bias: t(&[qk_channels], 0.1),
        key_weight: t(&[qk_channels, channels], ws),
        key_bias: t(&[qk_channels], 0.1),
        value_weight: t(&[channels, channels], ws),
        value_bias: t(&[channels], 0.1),
        scale: 0.5,
    }
}

/// Feature map of `n` pixels laid out as `[C, 32, n/32]` (or `[C, 1, n]` for small `n`).
pub fn bench_input(channels: usize, n: usize, seed: u64) -> Tensor<f32> {
    let (h, w) = if n % 32 == 0 { (32, n / 32) } else { (1, n) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[channels, h, w], |_| rng.gen_range(0.0..1.0))
}

/// Times both modes at every size and fits the scaling exponents.
pub fn bench_attention(sizes: &[usize], channels: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config("bench needs at least two positive sizes".into()));
    }
    if channels < 8 || channels % 8 != 0 {
        return Err(Error::Config(format!("channels must be a positive multiple of 8, got {channels}")));
    }
    let params = random_params(channels, channels / 8, seed);
    let mut rows = Vec::new();
    for &n in sizes {
        let x = bench_input(channels, n, seed ^ n as u64);
        let (sa_out, sa_peak) = measure_peak(|| params.sa(&x));
        let (esa_out, esa_peak) = measure_peak(|| params.esa(&x));
        let deviation = sa_out?.max_abs_diff(&esa_out?)? as f64;
        for (mode, peak) in [(AttentionMode::Sa, sa_peak), (AttentionMode::Esa, esa_peak)] {
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let t = Instant::now();
                let out = match mode {
                    AttentionMode::Sa => params.sa(&x)?,
                    _ => params.esa(&x)?,
                };
                best = best.min(t.elapsed().as_secs_f64());
                std::hint::black_box(out);
            }
            rows.push(BenchRow { mode, n, seconds: best, peak_bytes: peak, max_deviation: deviation });
        }
    }
    let fit = |mode| {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.mode == mode).map(|r| (r.n as f64, r.seconds)).collect();
        loglog_slope(&pts)
    };
    let (sa_exponent, esa_exponent) = (fit(AttentionMode::Sa), fit(AttentionMode::Esa));
    Ok(BenchReport { rows, sa_exponent, esa_exponent })
}

impl BenchReport {
    /// `mode,n,seconds,peak_bytes,max_deviation` rows followed by `exponent,` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,n,seconds,peak_bytes,max_deviation\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6e},{},{:.6e}", r.mode, r.n, r.seconds, r.peak_bytes, r.max_deviation);
        }
        let _ = writeln!(s, "exponent,sa,{:.4}", self.sa_exponent);
        let _ = writeln!(s, "exponent,esa,{:.4}", self.esa_exponent);
        s
    }

    pub fn peak(&self, mode: AttentionMode, n: usize) -> Option<usize> {
        self.rows.iter().find(|r| r.mode == mode && r.n == n).map(|r| r.peak_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.7))).collect();
        assert!((loglog_slope(&pts) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn report_has_two_rows_per_size() {
        let r = bench_attention(&[64, 128], 8, 1, 0).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.to_csv().lines().count(), 1 + 4 + 2);
    }
}
