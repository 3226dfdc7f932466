//! Wall-clock throughput measurement over forward passes with fixed
//! participation schedules.

use std::time::Instant;

use crate::model::{Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub images_per_sec: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub reps: usize,
}

/// Worker-thread cap from `TPC_THREADS` (default 1; the measurement loop
/// itself is always sequential for determinism).
pub fn max_threads() -> usize {
    std::env::var("TPC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Schedule where every token runs the first `full_layers` layers and only
/// the CLS token continues afterwards. With `full_layers = depth / 2` the
/// mean halting depth is roughly half the model depth.
pub fn cls_only_after(depth: usize, tokens: usize, full_layers: usize) -> Vec<Vec<bool>> {
    (0..depth)
        .map(|l| {
            (0..tokens)
                .map(|t| t == 0 || l < full_layers)
                .collect()
        })
        .collect()
}

/// Time repeated single-image forward passes under a fixed schedule.
/// `warmup` is clamped up to 3 and `reps` up to 10.
pub fn bench_throughput(
    model: &Model,
    image: &[f64],
    masks: &[Vec<bool>],
    reps: usize,
    warmup: usize,
) -> Result<BenchResult, ModelError> {
    let reps = reps.max(10);
    let warmup = warmup.max(3);
    for _ in 0..warmup {
        model.bind().forward_scheduled(image, masks)?;
    }
    let mut times_ms = Vec::with_capacity(reps);
    let started = Instant::now();
    for _ in 0..reps {
        let t0 = Instant::now();
        model.bind().forward_scheduled(image, masks)?;
        times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let wall = started.elapsed().as_secs_f64();
    times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |q: f64| {
        let idx = ((times_ms.len() as f64 - 1.0) * q).round() as usize;
        times_ms[idx]
    };
    Ok(BenchResult {
        images_per_sec: reps as f64 / wall,
        p50_ms: pct(0.5),
        p95_ms: pct(0.95),
        reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn schedule_shape_and_cls_persistence() {
        let masks = cls_only_after(4, 6, 2);
        assert_eq!(masks.len(), 4);
        for (l, m) in masks.iter().enumerate() {
            assert_eq!(m.len(), 6);
            assert!(m[0], "CLS inactive at layer {l}");
            assert_eq!(m.iter().filter(|a| **a).count(), if l < 2 { 6 } else { 1 });
        }
    }

    #[test]
    fn bench_reports_positive_statistics() {
        let mut cfg = ModelConfig::default();
        cfg.depth = 2;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.patch_size = 4;
        cfg.image_size = 8;
        cfg.channels = 1;
        cfg.num_classes = 2;
        let model = Model::new(cfg.clone(), 1).unwrap();
        let image = vec![0.2; 64];
        let masks = cls_only_after(2, cfg.tokens(), 1);
        let r = bench_throughput(&model, &image, &masks, 2, 0).unwrap();
        assert_eq!(r.reps, 10); // clamped
        assert!(r.images_per_sec > 0.0);
        assert!(r.p50_ms > 0.0 && r.p95_ms >= r.p50_ms);
    }

    #[test]
    fn threads_env_parses_with_default() {
        // no env manipulation here; just the default path
        assert!(max_threads() >= 1);
    }
}
