use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExecutionPlan, RuntimeError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Seconds per timed iteration.
    pub latencies: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    /// `median / batch_size`.
    pub per_image_seconds: f64,
    /// `batch_size / median`.
    pub throughput: f64,
}

impl BenchReport {
    pub fn from_latencies(batch_size: usize, warmup_iters: usize, latencies: Vec<f64>) -> Self {
        let n = latencies.len() as f64;
        let mut sorted = latencies.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 { sorted[mid] } else { (sorted[mid - 1] + sorted[mid]) / 2.0 };
        let mean = latencies.iter().sum::<f64>() / n;
        let std = (latencies.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            batch_size,
            warmup_iters,
            timed_iters: latencies.len(),
            latencies,
            median,
            mean,
            std,
            per_image_seconds: median / batch_size as f64,
            throughput: batch_size as f64 / median,
        }
    }
}

/// Times `iters` inference calls on a fixed random batch after `warmup`
/// untimed calls.
pub fn bench(plan: &ExecutionPlan, batch_size: usize, warmup: usize, iters: usize) -> Result<BenchReport, RuntimeError> {
    if iters < 3 {
        return Err(RuntimeError::TooFewIterations(iters));
    }
    let s = plan.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let data = (0..batch_size.max(1) * s.elements()).map(|_| rng.gen::<f32>()).collect();
    let batch = Tensor::new([batch_size.max(1), s.height, s.width, s.channels], data);
    for _ in 0..warmup {
        plan.infer(&batch)?;
    }
    let mut latencies = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(plan.infer(&batch)?);
        latencies.push(t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    Ok(BenchReport::from_latencies(batch.batch(), warmup, latencies))
}

/// `a.per_image_seconds / b.per_image_seconds`: how many times faster `b` is.
pub fn speedup(a: &BenchReport, b: &BenchReport) -> Result<f64, RuntimeError> {
    if a.per_image_seconds <= 0.0 || b.per_image_seconds <= 0.0 {
        return Err(RuntimeError::ZeroLatency);
    }
    Ok(a.per_image_seconds / b.per_image_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::display_ratio;

    fn report(per_image: f64, batch: usize) -> BenchReport {
        BenchReport::from_latencies(batch, 0, vec![per_image * batch as f64; 3])
    }

    #[test]
    fn arithmetic_identities() {
        let r = BenchReport::from_latencies(1024, 1, vec![3.0, 1.0, 2.0]);
        assert_eq!(r.median, 2.0);
        assert_eq!(r.mean, 2.0);
        assert_eq!(r.per_image_seconds, 2.0 / 1024.0);
        assert_eq!(r.throughput, 512.0);
        assert!((r.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let even = BenchReport::from_latencies(2, 0, vec![4.0, 1.0, 2.0, 3.0]);
        assert_eq!(even.median, 2.5);
    }

    #[test]
    fn speedup_ratio() {
        let s = speedup(&report(0.01881, 1024), &report(0.00247, 1024)).unwrap();
        assert!((s - 7.615).abs() < 1e-3);
        assert_eq!(display_ratio(s), "7.6×");
        let a = report(0.5, 4);
        assert_eq!(speedup(&a, &a).unwrap(), 1.0);
        let mut z = a.clone();
        z.per_image_seconds = 0.0;
        assert!(matches!(speedup(&a, &z), Err(RuntimeError::ZeroLatency)));
    }
}
