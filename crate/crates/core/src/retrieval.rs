//! Streaming per-route retrieval with run-length folding and counterfactual
//! destination tables.
//!
//! Each `(batch, route)` pair owns one [`RouteState`]. At step `t` the query
//! symbol is matched against the automaton built from the key runs of
//! `k[0..t]` (strictly before `t`), the destination is read off the matched
//! state, and only then is `k[t]` folded into the key runs. The destination is
//! the start of the run that follows the most recent occurrence of the
//! matched string, provided that run exists and starts before `t`.

use ndarray::{Array, Array3, Ix5};
use rayon::prelude::*;

use crate::error::{config, input, Result, RosaError};
use crate::sam::{MatchCursor, SuffixAutomaton, Symbol};
use crate::symbolizer::{check_route_bits, SymbolStream};

/// Retrieval knobs that do not change the data layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalConfig {
    /// Caps the matched suffix length; `Some(1)` gives the single-symbol regime.
    pub max_match_len: Option<u32>,
    /// Worker threads for [`batch_retrieve`]; 0 means all available cores.
    pub workers: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            max_match_len: None,
            workers: 1,
        }
    }
}

/// `run_starts[p + 1]` if that run exists and starts before `t`, else −1.
pub fn map_run_to_time(p: usize, run_starts: &[u32], t: usize) -> i32 {
    match run_starts.get(p + 1) {
        Some(&s) if (s as usize) < t => s as i32,
        _ => -1,
    }
}

/// Destination of one step: actual plus per-bit counterfactuals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepResult {
    pub tau: i32,
    /// `tau_cf[j][u]`: destination with query bit `j` forced to `u`.
    pub tau_cf: Vec<[i32; 2]>,
    /// Run-level destination index for each branch, −1 if invalid.
    pub ridx_cf: Vec<[i32; 2]>,
}

impl StepResult {
    pub fn mask(&self) -> bool {
        self.tau >= 0
    }
}

/// Matcher state for one `(batch, route)` stream.
#[derive(Debug, Clone)]
pub struct RouteState {
    sam: SuffixAutomaton,
    run_starts: Vec<u32>,
    run_symbols: Vec<Symbol>,
    cursor: MatchCursor,
    last_query: Option<Symbol>,
    /// Counterfactual cursors for the current query run, index `2·j + u`.
    cf: Vec<MatchCursor>,
    bits: u32,
    max_match_len: Option<u32>,
    steps: usize,
}

impl RouteState {
    pub fn new(bits: u32) -> Result<Self> {
        Self::with_config(bits, RetrievalConfig::default(), 0)
    }

    pub fn with_config(bits: u32, cfg: RetrievalConfig, capacity: usize) -> Result<Self> {
        check_route_bits(bits)?;
        Ok(Self {
            sam: SuffixAutomaton::with_capacity(capacity),
            run_starts: Vec::with_capacity(capacity),
            run_symbols: Vec::with_capacity(capacity),
            cursor: MatchCursor::EMPTY,
            last_query: None,
            cf: vec![MatchCursor::EMPTY; 2 * bits as usize],
            bits,
            max_match_len: cfg.max_match_len,
            steps: 0,
        })
    }

    /// Returns to the state right after construction, keeping allocations.
    pub fn reset(&mut self) {
        self.sam.clear();
        self.run_starts.clear();
        self.run_symbols.clear();
        self.cursor = MatchCursor::EMPTY;
        self.last_query = None;
        self.cf.fill(MatchCursor::EMPTY);
        self.steps = 0;
    }

    pub fn sam(&self) -> &SuffixAutomaton {
        &self.sam
    }

    pub fn run_starts(&self) -> &[u32] {
        &self.run_starts
    }

    pub fn run_symbols(&self) -> &[Symbol] {
        &self.run_symbols
    }

    pub fn cursor(&self) -> MatchCursor {
        self.cursor
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    fn advance(&self, from: MatchCursor, symbol: Symbol) -> MatchCursor {
        let c = self.sam.match_advance(from, symbol);
        match self.max_match_len {
            Some(cap) => self.sam.cap(c, cap),
            None => c,
        }
    }

    /// `(time destination, run destination)`, both −1 when invalid.
    #[inline]
    fn destination(&self, cursor: MatchCursor, t: usize) -> (i32, i32) {
        match self.sam.recent_endpos(cursor) {
            Some(p) => {
                let tau = map_run_to_time(p as usize, &self.run_starts, t);
                if tau >= 0 {
                    (tau, p as i32 + 1)
                } else {
                    (-1, -1)
                }
            }
            None => (-1, -1),
        }
    }

    /// One streaming step writing the counterfactual tables into
    /// caller-provided slices of length `2·M` (index `2·j + u`).
    pub fn step_into(
        &mut self,
        key: Symbol,
        query: Symbol,
        t: usize,
        tau_cf: &mut [i32],
        ridx_cf: &mut [i32],
    ) -> Result<i32> {
        let limit = 1u32 << self.bits;
        if u32::from(key) >= limit || u32::from(query) >= limit {
            return input(format!(
                "symbols ({key}, {query}) out of range for M={}",
                self.bits
            ));
        }
        if t != self.steps {
            return Err(RosaError::Usage(format!(
                "route step fed t={t} but {} steps were already taken",
                self.steps
            )));
        }
        let m = self.bits as usize;
        if tau_cf.len() != 2 * m || ridx_cf.len() != 2 * m {
            return config("counterfactual buffers must have length 2·M");
        }

        // Query side: the cursor only moves at query-run boundaries.
        if self.last_query != Some(query) {
            let pre = self.cursor;
            self.cursor = self.advance(pre, query);
            for j in 0..m {
                for u in 0..2u16 {
                    let forced = (query & !(1 << j)) | (u << j);
                    self.cf[2 * j + u as usize] = if forced == query {
                        self.cursor
                    } else {
                        self.advance(pre, forced)
                    };
                }
            }
            self.last_query = Some(query);
        }

        let (tau, _) = self.destination(self.cursor, t);
        for (i, &c) in self.cf.iter().enumerate() {
            let (ct, cr) = self.destination(c, t);
            tau_cf[i] = ct;
            ridx_cf[i] = cr;
        }

        // Key side: a new run starts whenever the symbol changes.
        if self.run_symbols.last() != Some(&key) {
            self.run_starts.push(t as u32);
            self.run_symbols.push(key);
            self.sam.extend(key);
        }
        self.steps += 1;
        Ok(tau)
    }

    pub fn step(&mut self, key: Symbol, query: Symbol, t: usize) -> Result<StepResult> {
        let m = self.bits as usize;
        let mut tc = vec![0i32; 2 * m];
        let mut rc = vec![0i32; 2 * m];
        let tau = self.step_into(key, query, t, &mut tc, &mut rc)?;
        Ok(StepResult {
            tau,
            tau_cf: tc.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            ridx_cf: rc.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }

    /// Index of the key run that covers the most recently fed time step.
    pub fn current_run(&self) -> Option<usize> {
        self.run_starts.len().checked_sub(1)
    }
}

/// Output tensors of [`batch_retrieve`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalOutput {
    /// `[B, T, R]` destinations, −1 when invalid.
    pub tau: Array3<i32>,
    /// `[B, T, R, M, 2]` destinations with query bit `j` forced to `u`.
    pub tau_cf: Array<i32, Ix5>,
    /// `[B, T, R, M, 2]` run-level destination indices for the same branches.
    pub ridx_cf: Array<i32, Ix5>,
    /// `[B, T, R]` index of the key run covering each time step.
    pub run_start_of_time: Array3<i32>,
    /// Key run start times per stream, indexed `b·R + r`.
    pub run_starts: Vec<Vec<u32>>,
    pub route_bits: u32,
}

impl RetrievalOutput {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.tau.dim()
    }

    pub fn mask(&self) -> Array3<u8> {
        self.tau.mapv(|t| u8::from(t >= 0))
    }

    pub fn run_starts_of(&self, b: usize, r: usize) -> &[u32] {
        &self.run_starts[b * self.tau.dim().2 + r]
    }
}

struct RouteTrace {
    tau: Vec<i32>,
    tau_cf: Vec<i32>,
    ridx_cf: Vec<i32>,
    run_of_time: Vec<i32>,
    run_starts: Vec<u32>,
}

fn run_route(
    keys: &[Symbol],
    queries: &[Symbol],
    bits: u32,
    cfg: RetrievalConfig,
) -> Result<RouteTrace> {
    let t_len = keys.len();
    let m2 = 2 * bits as usize;
    let mut state = RouteState::with_config(bits, cfg, t_len)?;
    let mut trace = RouteTrace {
        tau: Vec::with_capacity(t_len),
        tau_cf: vec![0; t_len * m2],
        ridx_cf: vec![0; t_len * m2],
        run_of_time: Vec::with_capacity(t_len),
        run_starts: Vec::new(),
    };
    for t in 0..t_len {
        let tc = &mut trace.tau_cf[t * m2..(t + 1) * m2];
        let rc = &mut trace.ridx_cf[t * m2..(t + 1) * m2];
        let tau = state.step_into(keys[t], queries[t], t, tc, rc)?;
        trace.tau.push(tau);
        trace
            .run_of_time
            .push(state.current_run().map_or(-1, |r| r as i32));
    }
    trace.run_starts = state.run_starts;
    Ok(trace)
}

/// Runs every `(b, r)` stream independently over `t = 0..T`.
///
/// Work is partitioned over `B·R` with no cross-task communication, so the
/// result is identical for every worker count.
pub fn batch_retrieve(
    q: &SymbolStream,
    k: &SymbolStream,
    cfg: RetrievalConfig,
) -> Result<RetrievalOutput> {
    if q.dim() != k.dim() || q.route_bits() != k.route_bits() {
        return config(format!(
            "query stream {:?}/M={} and key stream {:?}/M={} disagree",
            q.dim(),
            q.route_bits(),
            k.dim(),
            k.route_bits()
        ));
    }
    let (b_len, t_len, r_len) = q.dim();
    let bits = q.route_bits();
    let m = bits as usize;
    let tasks: Vec<(usize, usize)> = (0..b_len)
        .flat_map(|b| (0..r_len).map(move |r| (b, r)))
        .collect();
    let job = |&(b, r): &(usize, usize)| -> Result<RouteTrace> {
        let keys: Vec<Symbol> = (0..t_len).map(|t| k.get(b, t, r)).collect();
        let queries: Vec<Symbol> = (0..t_len).map(|t| q.get(b, t, r)).collect();
        run_route(&keys, &queries, bits, cfg)
    };
    let traces: Vec<RouteTrace> = if cfg.workers == 1 || tasks.len() <= 1 {
        tasks.iter().map(job).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| RosaError::Config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(job).collect::<Result<Vec<_>>>())?
    };

    let mut out = RetrievalOutput {
        tau: Array3::zeros((b_len, t_len, r_len)),
        tau_cf: Array::zeros((b_len, t_len, r_len, m, 2)),
        ridx_cf: Array::zeros((b_len, t_len, r_len, m, 2)),
        run_start_of_time: Array3::zeros((b_len, t_len, r_len)),
        run_starts: Vec::with_capacity(tasks.len()),
        route_bits: bits,
    };
    for (&(b, r), trace) in tasks.iter().zip(traces) {
        for t in 0..t_len {
            out.tau[[b, t, r]] = trace.tau[t];
            out.run_start_of_time[[b, t, r]] = trace.run_of_time[t];
            for j in 0..m {
                for u in 0..2 {
                    let i = t * 2 * m + 2 * j + u;
                    out.tau_cf[[b, t, r, j, u]] = trace.tau_cf[i];
                    out.ridx_cf[[b, t, r, j, u]] = trace.ridx_cf[i];
                }
            }
        }
        out.run_starts.push(trace.run_starts);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::naive_route_retrieve;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(vals: Vec<u16>, b: usize, t: usize, r: usize, m: u32) -> SymbolStream {
        SymbolStream::new(Array3::from_shape_vec((b, t, r), vals).unwrap(), m).unwrap()
    }

    #[test]
    fn map_run_to_time_examples() {
        let starts = [0, 2, 3, 4];
        assert_eq!(map_run_to_time(2, &starts, 5), 4);
        assert_eq!(map_run_to_time(3, &starts, 5), -1);
        assert_eq!(map_run_to_time(2, &starts, 4), -1);
    }

    #[test]
    fn first_step_has_no_destination() {
        let mut st = RouteState::new(2).unwrap();
        let r = st.step(1, 1, 0).unwrap();
        assert_eq!(r.tau, -1);
        assert!(!r.mask());
        assert!(r.tau_cf.iter().all(|c| c == &[-1, -1]));
    }

    #[test]
    fn worked_stream_destinations() {
        // key symbols over time [2,2,1,2,1,1]: runs [2,1,2,1] starting at 0,2,3,4
        let keys = [2u16, 2, 1, 2, 1, 1];
        // query suffix "1,2" at t = 5
        let queries = [0u16, 0, 0, 1, 1, 2];
        let mut st = RouteState::new(2).unwrap();
        let mut last = None;
        for t in 0..6 {
            last = Some(st.step(keys[t], queries[t], t).unwrap());
        }
        assert_eq!(st.run_starts(), &[0, 2, 3, 4]);
        assert_eq!(st.run_symbols(), &[2, 1, 2, 1]);
        assert_eq!(st.cursor().length, 2);
        assert_eq!(st.sam().recent_endpos(st.cursor()), Some(2));
        assert_eq!(last.unwrap().tau, 4);

        // query suffix "2,1" at t = 5: most recent end is run 3, no successor
        let queries = [0u16, 0, 0, 0, 2, 1];
        let mut st = RouteState::new(2).unwrap();
        let mut last = None;
        for t in 0..6 {
            last = Some(st.step(keys[t], queries[t], t).unwrap());
        }
        assert_eq!(st.sam().recent_endpos(st.cursor()), Some(3));
        assert_eq!(last.unwrap().tau, -1);
    }

    #[test]
    fn forcing_a_bit_to_an_unseen_symbol_kills_the_branch() {
        // M = 2, keys only ever use symbols {0, 1}; actual query symbol 1 (bits [1,0]).
        let keys = [1u16, 0, 1, 0, 0];
        let queries = [2u16, 2, 2, 2, 1];
        let mut st = RouteState::new(2).unwrap();
        let mut last = None;
        for t in 0..5 {
            last = Some(st.step(keys[t], queries[t], t).unwrap());
        }
        let r = last.unwrap();
        assert!(r.tau >= 0);
        // bit 1 of symbol 1 is 0; forcing it to 1 gives symbol 3, absent from the keys
        assert_eq!(r.tau_cf[1][1], -1);
        assert_eq!(r.tau_cf[1][0], r.tau);
    }

    #[test]
    fn rejects_out_of_range_symbols() {
        let mut st = RouteState::new(2).unwrap();
        assert!(matches!(st.step(4, 0, 0), Err(RosaError::Input(_))));
    }

    #[test]
    fn degenerate_batch_equals_route_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t_len = 80;
        let keys: Vec<u16> = (0..t_len).map(|_| rng.random_range(0..4)).collect();
        let queries: Vec<u16> = (0..t_len).map(|_| rng.random_range(0..4)).collect();
        let out = batch_retrieve(
            &stream(queries.clone(), 1, t_len, 1, 2),
            &stream(keys.clone(), 1, t_len, 1, 2),
            RetrievalConfig::default(),
        )
        .unwrap();
        let mut st = RouteState::new(2).unwrap();
        for t in 0..t_len {
            let r = st.step(keys[t], queries[t], t).unwrap();
            assert_eq!(out.tau[[0, t, 0]], r.tau);
            for j in 0..2 {
                for u in 0..2 {
                    assert_eq!(out.tau_cf[[0, t, 0, j, u]], r.tau_cf[j][u]);
                    assert_eq!(out.ridx_cf[[0, t, 0, j, u]], r.ridx_cf[j][u]);
                }
            }
        }
    }

    #[test]
    fn constant_keys_form_one_run() {
        let t_len = 50;
        let out = batch_retrieve(
            &stream(vec![3; t_len], 1, t_len, 1, 2),
            &stream(vec![3; t_len], 1, t_len, 1, 2),
            RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(out.run_starts_of(0, 0), &[0]);
        assert!(out.tau.iter().all(|&t| t == -1));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, t, r) = (3, 120, 5);
        let q = stream(
            (0..b * t * r).map(|_| rng.random_range(0..16)).collect(),
            b,
            t,
            r,
            4,
        );
        let k = stream(
            (0..b * t * r).map(|_| rng.random_range(0..16)).collect(),
            b,
            t,
            r,
            4,
        );
        let base = batch_retrieve(&q, &k, RetrievalConfig::default()).unwrap();
        for workers in [4, 0] {
            let cfg = RetrievalConfig {
                workers,
                ..Default::default()
            };
            assert_eq!(batch_retrieve(&q, &k, cfg).unwrap(), base);
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let q = stream(vec![0; 4], 1, 4, 1, 2);
        let k = stream(vec![0; 8], 1, 4, 2, 2);
        assert!(batch_retrieve(&q, &k, RetrievalConfig::default())
            .unwrap_err()
            .is_config());
    }

    proptest! {
        #[test]
        fn causality_and_counterfactual_consistency(
            keys in proptest::collection::vec(0u16..4, 1..120),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t_len = keys.len();
            let queries: Vec<u16> = (0..t_len).map(|_| rng.random_range(0..4)).collect();
            let mut st = RouteState::new(2).unwrap();
            for t in 0..t_len {
                let r = st.step(keys[t], queries[t], t).unwrap();
                prop_assert!(r.tau < t as i32);
                if r.tau >= 0 {
                    prop_assert!(st.run_starts().contains(&(r.tau as u32)));
                }
                for j in 0..2 {
                    let actual = ((queries[t] >> j) & 1) as usize;
                    prop_assert_eq!(r.tau_cf[j][actual], r.tau);
                }
            }
        }

        #[test]
        fn folded_input_is_its_own_run_sequence(raw in proptest::collection::vec(0u16..8, 1..100)) {
            let mut folded = raw.clone();
            folded.dedup();
            let mut st = RouteState::new(3).unwrap();
            for (t, &k) in folded.iter().enumerate() {
                st.step(k, 0, t).unwrap();
            }
            prop_assert_eq!(st.run_symbols(), &folded[..]);
        }

        #[test]
        fn engine_matches_naive_reference(
            keys in proptest::collection::vec(0u16..4, 1..100),
            qseed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(qseed);
            let queries: Vec<u16> = (0..keys.len()).map(|_| rng.random_range(0..4)).collect();
            let naive = naive_route_retrieve(&keys, &queries, 2, None);
            let mut st = RouteState::new(2).unwrap();
            for t in 0..keys.len() {
                let r = st.step(keys[t], queries[t], t).unwrap();
                prop_assert_eq!(&r, &naive[t]);
            }
        }
    }
}
