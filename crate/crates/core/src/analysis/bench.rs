use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::eval::csv_err;
use crate::error::{Error, Result};
use crate::model::{AttnMask, KVCache, ModelWeights};
use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub cache_len: usize,
    pub width: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub trials: usize,
}

/// Wall time of one forward of `width` new rows over a cache of
/// `cache_len` entries, for every pair, over `trials` random inputs.
pub fn forward_microbench<T: Real>(
    model: &ModelWeights<T>,
    cache_lengths: &[usize],
    widths: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let cfg = &model.config;
    if trials == 0 {
        return Err(Error::Config("microbenchmark needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &cache_len in cache_lengths {
        let widest = widths.iter().copied().max().unwrap_or(0);
        if cache_len + widest > cfg.max_positions {
            return Err(Error::Config(format!(
                "cache {cache_len} + width {widest} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        let mut cache = KVCache::new(cfg.n_layers, cfg.d_model, cfg.max_positions);
        if cache_len > 0 {
            let prefix: Vec<u32> = (0..cache_len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
            model.forward(
                &prefix,
                &(0..cache_len).collect::<Vec<_>>(),
                &AttnMask::causal(cache_len, 0),
                Some(&mut cache),
                &[],
            )?;
        }
        for &width in widths {
            let positions: Vec<usize> = (cache_len..cache_len + width).collect();
            let mask = AttnMask::causal(width, cache_len);
            let mut times = Vec::with_capacity(trials);
            for trial in 0..trials + 2 {
                let tokens: Vec<u32> = (0..width).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
                let start = Instant::now();
                model.forward(&tokens, &positions, &mask, Some(&mut cache), &[])?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                cache.truncate(cache_len);
                // Two warmup runs per cell.
                if trial >= 2 {
                    times.push(elapsed);
                }
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                cache_len,
                width,
                median_ms: median(&times),
                mean_ms: times.iter().sum::<f64>() / times.len() as f64,
                min_ms: times[0],
                trials,
            });
        }
    }
    Ok(rows)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median time of width `wide` over width `narrow` at each cache length.
pub fn width_ratio(rows: &[BenchRow], narrow: usize, wide: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.width == wide) {
        if let Some(n) = rows.iter().find(|n| n.cache_len == r.cache_len && n.width == narrow) {
            out.push((r.cache_len, r.median_ms / n.median_ms));
        }
    }
    out
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cache_len", "width", "median_ms", "mean_ms", "min_ms", "trials"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.cache_len.to_string(),
            r.width.to_string(),
            format!("{:.4}", r.median_ms),
            format!("{:.4}", r.mean_ms),
            format!("{:.4}", r.min_ms),
            r.trials.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
