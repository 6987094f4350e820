//! Brute-force references and Monte-Carlo estimators used by the test suites.
//!
//! Nothing in here is fast. Every function is written as directly as possible
//! so it can serve as an equality oracle for the optimized engine.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{input, Result};
use crate::retrieval::{RetrievalOutput, StepResult};
use crate::sam::Symbol;

/// Longest suffix of `query` occurring in `keys`: `(length, max end index)`.
pub fn brute_match(keys: &[Symbol], query: &[Symbol]) -> (usize, Option<usize>) {
    for len in (1..=query.len().min(keys.len())).rev() {
        let suffix = &query[query.len() - len..];
        let end = (0..=keys.len() - len)
            .filter(|&i| &keys[i..i + len] == suffix)
            .map(|i| i + len - 1)
            .max();
        if end.is_some() {
            return (len, end);
        }
    }
    (0, None)
}

/// Reference for one retrieval stream, driven by explicit strings.
///
/// Keeps the matched string itself rather than an automaton state and rescans
/// the folded key sequence at every step.
pub fn naive_route_retrieve(
    keys: &[Symbol],
    queries: &[Symbol],
    bits: u32,
    max_match_len: Option<usize>,
) -> Vec<StepResult> {
    let m = bits as usize;
    let mut run_syms: Vec<Symbol> = Vec::new();
    let mut run_starts: Vec<usize> = Vec::new();
    let mut matched: Vec<Symbol> = Vec::new();
    let mut cf: Vec<Vec<Symbol>> = vec![Vec::new(); 2 * m];
    let mut last_query = None;
    let mut out = Vec::with_capacity(keys.len());

    let advance = |run_syms: &[Symbol], prev: &[Symbol], sym: Symbol| -> Vec<Symbol> {
        let mut s = prev.to_vec();
        s.push(sym);
        let (len, _) = brute_match(run_syms, &s);
        let len = max_match_len.map_or(len, |c| len.min(c));
        s[s.len() - len..].to_vec()
    };
    let dest = |run_syms: &[Symbol], run_starts: &[usize], s: &[Symbol], t: usize| -> (i32, i32) {
        if s.is_empty() {
            return (-1, -1);
        }
        let (len, end) = brute_match(run_syms, s);
        assert_eq!(len, s.len(), "matched string must stay a substring");
        let p = end.unwrap();
        match run_starts.get(p + 1) {
            Some(&st) if st < t => (st as i32, (p + 1) as i32),
            _ => (-1, -1),
        }
    };

    for t in 0..keys.len() {
        let q = queries[t];
        if last_query != Some(q) {
            let pre = matched.clone();
            matched = advance(&run_syms, &pre, q);
            for j in 0..m {
                for u in 0..2u16 {
                    let forced = (q & !(1 << j)) | (u << j);
                    cf[2 * j + u as usize] = advance(&run_syms, &pre, forced);
                }
            }
            last_query = Some(q);
        }
        let (tau, _) = dest(&run_syms, &run_starts, &matched, t);
        let mut tau_cf = vec![[0i32; 2]; m];
        let mut ridx_cf = vec![[0i32; 2]; m];
        for j in 0..m {
            for u in 0..2 {
                let (a, b) = dest(&run_syms, &run_starts, &cf[2 * j + u], t);
                tau_cf[j][u] = a;
                ridx_cf[j][u] = b;
            }
        }
        out.push(StepResult {
            tau,
            tau_cf,
            ridx_cf,
        });
        if run_syms.last() != Some(&keys[t]) {
            run_syms.push(keys[t]);
            run_starts.push(t);
        }
    }
    out
}

/// Softmax attention over `values` where matched positions score 1 and the
/// rest score 0, at inverse temperature `beta`, in closed form.
pub fn quantized_attention(
    values: &[Vec<f64>],
    match_set: &[usize],
    beta: f64,
) -> Result<Vec<f64>> {
    let t = values.len();
    if t == 0 {
        return input("quantized attention needs a non-empty history");
    }
    if let Some(&bad) = match_set.iter().find(|&&i| i >= t) {
        return input(format!("match index {bad} outside history of length {t}"));
    }
    let mut is_match = vec![false; t];
    for &i in match_set {
        is_match[i] = true;
    }
    let m = is_match.iter().filter(|&&x| x).count() as f64;
    // Divide through by e^beta so large beta does not overflow.
    let rest = (t as f64 - m) * (-beta).exp();
    let denom = m + rest;
    let w_match = 1.0 / denom;
    let w_other = (-beta).exp() / denom;
    let dim = values[0].len();
    let mut out = vec![0.0; dim];
    for (i, v) in values.iter().enumerate() {
        let w = if is_match[i] { w_match } else { w_other };
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Successor set `{i + 1 : i ∈ match_set, i + 1 < t}`, sorted.
pub fn successor_set(match_set: &[usize], t: usize) -> Vec<usize> {
    let mut s: Vec<usize> = match_set
        .iter()
        .map(|&i| i + 1)
        .filter(|&i| i < t)
        .collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Destination the single-symbol matcher must report: the successor of the
/// most recent match, or −1 when that successor is not strictly before `t`.
pub fn most_recent_successor(match_set: &[usize], t: usize) -> i32 {
    match match_set.iter().max() {
        Some(&i) if i + 1 < t => (i + 1) as i32,
        _ => -1,
    }
}

/// Checks a single-symbol destination `rosa_tau` at time `t = values.len()`.
///
/// A valid destination must be the most recent member of the successor set.
/// Independently, hard attention over the one-step-shifted values must give
/// the uniform average over that set.
pub fn successor_shift_check(
    values: &[Vec<f64>],
    match_set: &[usize],
    beta: f64,
    rosa_tau: i32,
) -> bool {
    let t = values.len();
    let succ = successor_set(match_set, t);
    if rosa_tau != most_recent_successor(match_set, t) {
        return false;
    }
    if rosa_tau >= 0 && succ.last() != Some(&(rosa_tau as usize)) {
        return false;
    }
    if succ.is_empty() || t < 2 {
        return true;
    }
    // position i of the shifted history carries the value at i + 1
    let shifted: Vec<Vec<f64>> = values[1..].to_vec();
    let shifted_matches: Vec<usize> = succ.iter().map(|&s| s - 1).collect();
    let Ok(att) = quantized_attention(&shifted, &shifted_matches, beta) else {
        return false;
    };
    let dim = values[0].len();
    let n = succ.len() as f64;
    (0..dim).all(|d| {
        let avg = succ.iter().map(|&s| values[s][d]).sum::<f64>() / n;
        (att[d] - avg).abs() <= 1e-6
    })
}

/// Distribution of the bits fed to the collision estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitSource {
    /// Independent fair bits.
    Balanced,
    /// Every bit is zero.
    Constant,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EstimateReport {
    #[serde(rename = "M")]
    pub m: u32,
    pub estimate: f64,
    pub bound: f64,
    pub sigma: f64,
    pub samples: usize,
    pub pass: bool,
}

fn binomial_sigma(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Fraction of independent symbol pairs that coincide.
///
/// For balanced bits the estimate must sit within 3σ of `2^-M`; for any
/// source it must not fall below that lower bound by more than 3σ.
pub fn collision_estimate(m: u32, samples: usize, seed: u64, source: BitSource) -> EstimateReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = if m >= 32 { u32::MAX } else { (1u32 << m) - 1 };
    let draw = |rng: &mut ChaCha8Rng| match source {
        BitSource::Balanced => rng.random::<u32>() & mask,
        BitSource::Constant => 0,
    };
    let hits = (0..samples)
        .filter(|_| draw(&mut rng) == draw(&mut rng))
        .count();
    let estimate = hits as f64 / samples as f64;
    let bound = 0.5f64.powi(m as i32);
    let sigma = binomial_sigma(bound, samples);
    let pass = match source {
        BitSource::Balanced => (estimate - bound).abs() <= 3.0 * sigma,
        BitSource::Constant => estimate >= bound - 3.0 * sigma,
    };
    EstimateReport {
        m,
        estimate,
        bound,
        sigma,
        samples,
        pass,
    }
}

/// Fraction of two-view symbol mismatches under bounded uniform noise.
///
/// Each channel is `x ~ U[-1, 1]` observed twice as `x + ε`, `ε ~ U[-δ, δ]`,
/// thresholded at 0 and packed into one `M`-bit symbol per view. The mismatch
/// rate must not exceed `δ·M` by more than 3σ.
pub fn stability_estimate(m: u32, delta: f64, samples: usize, seed: u64) -> EstimateReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut ChaCha8Rng| {
        if delta > 0.0 {
            rng.random_range(-delta..=delta)
        } else {
            0.0
        }
    };
    let mut mismatches = 0usize;
    for _ in 0..samples {
        let mut a = 0u32;
        let mut b = 0u32;
        for j in 0..m {
            let x: f64 = rng.random_range(-1.0..=1.0);
            if x + noise(&mut rng) > 0.0 {
                a |= 1 << j;
            }
            if x + noise(&mut rng) > 0.0 {
                b |= 1 << j;
            }
        }
        if a != b {
            mismatches += 1;
        }
    }
    let estimate = mismatches as f64 / samples as f64;
    let bound = delta * m as f64;
    let sigma = binomial_sigma(bound.min(1.0), samples);
    let pass = estimate <= bound + 3.0 * sigma;
    EstimateReport {
        m,
        estimate,
        bound,
        sigma,
        samples,
        pass,
    }
}

/// Reference surrogate gradients `(g_v, g_q, g_k)` as literal nested loops.
///
/// `run_starts[b·R + r]` lists the key run start times of each stream and
/// `key_scale` multiplies the key-branch result.
pub fn dense_surrogate_grads(
    theta: &Array3<f64>,
    out: &RetrievalOutput,
    v: &Array3<f64>,
    q: &Array3<f64>,
    k: &Array3<f64>,
    key_scale: f64,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let dsig = |x: f64| sig(x) * (1.0 - sig(x));
    let (b_len, t_len, c) = theta.dim();
    let m = out.route_bits as usize;
    let r_len = c / m;
    let mut g_v = Array3::zeros((b_len, t_len, c));
    let mut g_q = Array3::zeros((b_len, t_len, c));
    let mut g_k = Array3::zeros((b_len, t_len, c));

    for b in 0..b_len {
        for dst in 0..t_len {
            for ch in 0..c {
                let r = ch / m;
                let mut acc = 0.0;
                for t in 0..t_len {
                    if out.tau[[b, t, r]] == dst as i32 {
                        acc += theta[[b, t, ch]];
                    }
                }
                g_v[[b, dst, ch]] = dsig(v[[b, dst, ch]]) * acc;
            }
        }
    }

    for b in 0..b_len {
        for t in 0..t_len {
            for r in 0..r_len {
                for j in 0..m {
                    let mut acc = 0.0;
                    for mm in 0..m {
                        let ch = r * m + mm;
                        let read = |u: usize| {
                            let d = out.tau_cf[[b, t, r, j, u]];
                            if d >= 0 {
                                sig(v[[b, d as usize, ch]])
                            } else {
                                0.0
                            }
                        };
                        acc += theta[[b, t, ch]] * (read(1) - read(0));
                    }
                    let ch = r * m + j;
                    g_q[[b, t, ch]] = dsig(q[[b, t, ch]]) * acc;
                }
            }
        }
    }

    for b in 0..b_len {
        for r in 0..r_len {
            let starts = out.run_starts_of(b, r);
            for (l, &start) in starts.iter().enumerate() {
                let s = start as usize;
                for j in 0..m {
                    let mut u = [0.0f64; 2];
                    for (branch, acc) in u.iter_mut().enumerate() {
                        for t in 0..t_len {
                            if out.ridx_cf[[b, t, r, j, branch]] != l as i32 {
                                continue;
                            }
                            for mm in 0..m {
                                let ch = r * m + mm;
                                *acc += theta[[b, t, ch]] * sig(v[[b, s, ch]]);
                            }
                        }
                    }
                    let ch = r * m + j;
                    g_k[[b, s, ch]] = key_scale * dsig(k[[b, s, ch]]) * (u[1] - u[0]);
                }
            }
        }
    }
    (g_v, g_q, g_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_match_examples() {
        assert_eq!(brute_match(&[2, 1, 2, 1], &[3, 1, 2]), (2, Some(2)));
        assert_eq!(brute_match(&[2, 1, 2, 1], &[2, 1]), (2, Some(3)));
        assert_eq!(brute_match(&[0, 1], &[5, 6]), (0, None));
        let k = [3, 1, 4, 1, 5];
        assert_eq!(brute_match(&k, &k), (5, Some(4)));
        assert_eq!(brute_match(&[], &[1]), (0, None));
    }

    #[test]
    fn quantized_attention_limits() {
        let vals = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![7.0, 7.0],
            vec![0.0, 1.0],
            vec![-3.0, 2.0],
        ];
        let out = quantized_attention(&vals, &[1, 3], 50.0).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-6 && (out[1] - 0.5).abs() < 1e-6);

        let mean: Vec<f64> = (0..2)
            .map(|d| vals.iter().map(|v| v[d]).sum::<f64>() / 5.0)
            .collect();
        let all: Vec<usize> = (0..5).collect();
        let out = quantized_attention(&vals, &all, 3.0).unwrap();
        let out0 = quantized_attention(&vals, &[2], 0.0).unwrap();
        for d in 0..2 {
            assert!((out[d] - mean[d]).abs() < 1e-12);
            assert!((out0[d] - mean[d]).abs() < 1e-12);
        }
        assert!(quantized_attention(&[], &[], 1.0).is_err());
        assert!(quantized_attention(&vals, &[5], 1.0).is_err());
    }

    #[test]
    fn successor_examples() {
        assert_eq!(successor_set(&[1, 3], 6), vec![2, 4]);
        assert_eq!(most_recent_successor(&[1, 3], 6), 4);
        assert_eq!(most_recent_successor(&[], 6), -1);
        assert_eq!(most_recent_successor(&[5], 6), -1);
        let vals: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        assert!(successor_shift_check(&vals, &[1, 3], 50.0, 4));
        assert!(!successor_shift_check(&vals, &[1, 3], 50.0, 2));
        assert!(successor_shift_check(&vals, &[], 50.0, -1));
        assert!(successor_shift_check(&vals, &[5], 50.0, -1));
    }

    #[test]
    fn collision_estimates() {
        for m in [2, 4, 8] {
            let r = collision_estimate(m, 200_000, 7 + m as u64, BitSource::Balanced);
            assert!(r.pass, "{r:?}");
        }
        let r = collision_estimate(4, 1000, 1, BitSource::Constant);
        assert_eq!(r.estimate, 1.0);
        assert!(r.pass);
    }

    #[test]
    fn stability_estimates() {
        assert_eq!(stability_estimate(4, 0.0, 10_000, 3).estimate, 0.0);
        let r = stability_estimate(4, 0.01, 200_000, 5);
        assert!(r.pass, "{r:?}");
        let r = stability_estimate(4, 5.0, 10_000, 5);
        assert!(r.bound >= 1.0 && r.pass);
    }

    #[test]
    fn report_serializes_with_upper_m() {
        let r = collision_estimate(2, 100, 0, BitSource::Balanced);
        let js = serde_json::to_value(&r).unwrap();
        assert_eq!(js["M"], 2);
        assert!(js.get("pass").is_some());
    }
}
