//! Wall-clock scaling of a single route: one automaton stepped over `T`
//! random (key, query) pairs, counterfactual branches included.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{config, Result};
use crate::retrieval::{RetrievalConfig, RouteState};
use crate::sam::Symbol;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub t: usize,
    /// Best of the repetitions.
    pub seconds: f64,
    pub ns_per_step: f64,
    /// Median over repetitions of `seconds(T) / seconds(T/2)`, both measured
    /// in the same repetition; absent on the first row.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchConfig {
    pub min_log2: u32,
    pub max_log2: u32,
    pub route_bits: u32,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            min_log2: 10,
            max_log2: 20,
            route_bits: 4,
            reps: 9,
            seed: 0,
        }
    }
}

/// Seconds to stream `t` steps through a route.
///
/// The route is driven once untimed so the timed pass reuses memory that is
/// already mapped; page faults would otherwise dominate the noise.
pub fn time_route(t: usize, route_bits: u32, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = 1u32 << route_bits;
    let keys: Vec<Symbol> = (0..t)
        .map(|_| rng.random_range(0..alpha) as Symbol)
        .collect();
    let queries: Vec<Symbol> = (0..t)
        .map(|_| rng.random_range(0..alpha) as Symbol)
        .collect();
    let m = route_bits as usize;
    let (mut tau_cf, mut ridx_cf) = (vec![0i32; 2 * m], vec![0i32; 2 * m]);
    let mut route = RouteState::with_config(route_bits, RetrievalConfig::default(), t)?;
    let mut sink = 0i64;
    let mut elapsed = 0.0;
    for pass in 0..2 {
        route.reset();
        let start = Instant::now();
        for i in 0..t {
            sink += route.step_into(keys[i], queries[i], i, &mut tau_cf, &mut ridx_cf)? as i64;
        }
        elapsed = start.elapsed().as_secs_f64();
        if pass == 0 {
            std::hint::black_box(sink);
        }
    }
    std::hint::black_box(sink);
    Ok(elapsed)
}

pub fn bench_sam(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.min_log2 > cfg.max_log2 || cfg.max_log2 > 28 || cfg.reps == 0 {
        return config("bench needs min_log2 ≤ max_log2 ≤ 28 and at least one repetition");
    }
    let sizes: Vec<usize> = (cfg.min_log2..=cfg.max_log2).map(|e| 1usize << e).collect();
    // samples[r][i]: repetition r at size i. Sizes run back to back inside a
    // repetition, so the ratio of neighbours sees the same machine state.
    let mut samples = vec![vec![f64::INFINITY; sizes.len()]; cfg.reps];
    for (r, row) in samples.iter_mut().enumerate() {
        for (i, &t) in sizes.iter().enumerate() {
            // Short runs are dominated by timer noise; repeat them more.
            let inner = ((1usize << 16) / t).max(1);
            for k in 0..inner {
                let seed = cfg.seed.wrapping_add((r * inner + k) as u64);
                row[i] = row[i].min(time_route(t, cfg.route_bits, seed)?);
            }
        }
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(sizes.len());
    for (i, &t) in sizes.iter().enumerate() {
        let seconds = samples
            .iter()
            .map(|row| row[i])
            .fold(f64::INFINITY, f64::min);
        let ratio =
            (i > 0).then(|| median(samples.iter().map(|row| row[i] / row[i - 1]).collect()));
        rows.push(BenchRow {
            t,
            seconds,
            ns_per_step: seconds * 1e9 / t as f64,
            ratio,
        });
    }
    Ok(rows)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Worst doubling ratio across the table.
pub fn worst_ratio(rows: &[BenchRow]) -> f64 {
    rows.iter().filter_map(|r| r.ratio).fold(0.0, f64::max)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("t,seconds,ns_per_step,ratio\n");
    for r in rows {
        let ratio = r.ratio.map(|x| format!("{x:.3}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{:.6},{:.1},{}\n",
            r.t, r.seconds, r.ns_per_step, ratio
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_table_has_ratios() {
        let rows = bench_sam(&BenchConfig {
            min_log2: 8,
            max_log2: 10,
            reps: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].ratio.is_none() && rows[2].ratio.is_some());
        assert_eq!(to_csv(&rows).lines().count(), 4);
    }

    #[test]
    fn rejects_inverted_range() {
        let cfg = BenchConfig {
            min_log2: 5,
            max_log2: 4,
            ..Default::default()
        };
        assert!(bench_sam(&cfg).unwrap_err().is_config());
    }
}
