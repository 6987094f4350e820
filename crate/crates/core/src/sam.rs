//! Online suffix automaton over a run-level symbol sequence.
//!
//! Besides the textbook construction, every state tracks the run index at
//! which its strings most recently ended. The automaton is single-writer;
//! independent automata can be driven from different threads.

pub type Symbol = u16;
pub type StateId = u32;

pub const ROOT: StateId = 0;
const NONE: u32 = u32::MAX;

/// One automaton state, 32 bytes so a lookup touches a single cache line.
///
/// The first two transitions live inline; further ones go to the owning
/// automaton's overflow table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(C, align(32))]
pub struct SamNode {
    len: u32,
    link: u32,
    /// `len` of the link state, kept here so normalizing a cursor touches one node.
    link_len: u32,
    recent_end: u32,
    to: [StateId; 2],
    sym: [Symbol; 2],
    more: u32,
}

impl SamNode {
    fn new(len: u32) -> Self {
        Self {
            len,
            link: NONE,
            link_len: 0,
            recent_end: NONE,
            to: [NONE; 2],
            sym: [0; 2],
            more: NONE,
        }
    }

    /// Length of the longest string in this state.
    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn link(&self) -> Option<StateId> {
        (self.link != NONE).then_some(self.link)
    }

    /// Run index of the most recent end of this state's strings.
    pub fn recent_end(&self) -> Option<u32> {
        (self.recent_end != NONE).then_some(self.recent_end)
    }
}

/// Position of an online matcher inside the automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCursor {
    pub state: StateId,
    /// Matched length in run symbols.
    pub length: u32,
}

impl MatchCursor {
    pub const EMPTY: MatchCursor = MatchCursor {
        state: ROOT,
        length: 0,
    };
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixAutomaton {
    nodes: Vec<SamNode>,
    /// Transitions beyond the inline two, indexed by `SamNode::more`.
    overflow: Vec<Vec<(Symbol, StateId)>>,
    last: StateId,
    inserted: u32,
}

/// Asks the kernel to back a large node table with huge pages, which cuts TLB
/// misses on the random accesses of long streams. A no-op elsewhere.
fn advise_huge_pages<T>(v: &Vec<T>) {
    #[cfg(target_os = "linux")]
    {
        const HUGE: usize = 2 << 20;
        let bytes = v.capacity() * std::mem::size_of::<T>();
        if bytes < 2 * HUGE {
            return;
        }
        let start = v.as_ptr() as usize;
        let aligned = start.next_multiple_of(HUGE);
        let len = (start + bytes).saturating_sub(aligned) / HUGE * HUGE;
        if len > 0 {
            // SAFETY: the range lies inside the vector's own allocation and
            // MADV_HUGEPAGE only changes how the kernel backs it.
            unsafe {
                libc::madvise(aligned as *mut libc::c_void, len, libc::MADV_HUGEPAGE);
            }
        }
    }
    #[cfg(not(target_os = "linux"))]
    let _ = v;
}

impl Default for SuffixAutomaton {
    fn default() -> Self {
        Self::new()
    }
}

impl SuffixAutomaton {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    /// Pre-allocates room for `runs` insertions (at most `2·runs` states).
    pub fn with_capacity(runs: usize) -> Self {
        let mut nodes = Vec::with_capacity(2 * runs + 1);
        advise_huge_pages(&nodes);
        nodes.push(SamNode::new(0));
        Self {
            nodes,
            overflow: Vec::new(),
            last: ROOT,
            inserted: 0,
        }
    }

    /// Drops every insertion but keeps the allocation.
    pub fn clear(&mut self) {
        self.nodes.truncate(1);
        self.nodes[0] = SamNode::new(0);
        self.overflow.clear();
        self.last = ROOT;
        self.inserted = 0;
    }

    #[inline]
    pub fn transition(&self, id: StateId, symbol: Symbol) -> Option<StateId> {
        let n = &self.nodes[id as usize];
        for i in 0..2 {
            if n.to[i] == NONE {
                return None;
            }
            if n.sym[i] == symbol {
                return Some(n.to[i]);
            }
        }
        if n.more == NONE {
            return None;
        }
        self.overflow[n.more as usize]
            .iter()
            .find(|&&(s, _)| s == symbol)
            .map(|&(_, to)| to)
    }

    /// Outgoing transitions of `id`, sorted by symbol.
    pub fn transitions(&self, id: StateId) -> Vec<(Symbol, StateId)> {
        let n = &self.nodes[id as usize];
        let mut out: Vec<(Symbol, StateId)> = (0..2)
            .filter(|&i| n.to[i] != NONE)
            .map(|i| (n.sym[i], n.to[i]))
            .collect();
        if n.more != NONE {
            out.extend_from_slice(&self.overflow[n.more as usize]);
        }
        out.sort_unstable();
        out
    }

    /// Adds or redirects the transition of `id` on `symbol`.
    fn set_transition(&mut self, id: StateId, symbol: Symbol, to: StateId) {
        let n = &mut self.nodes[id as usize];
        for i in 0..2 {
            if n.to[i] == NONE || n.sym[i] == symbol {
                n.sym[i] = symbol;
                n.to[i] = to;
                return;
            }
        }
        if n.more == NONE {
            n.more = self.overflow.len() as u32;
            self.overflow.push(Vec::new());
        }
        let list = &mut self.overflow[n.more as usize];
        match list.iter_mut().find(|(s, _)| *s == symbol) {
            Some(e) => e.1 = to,
            None => list.push((symbol, to)),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of run symbols inserted so far.
    pub fn inserted_runs(&self) -> u32 {
        self.inserted
    }

    pub fn last(&self) -> StateId {
        self.last
    }

    pub fn node(&self, id: StateId) -> &SamNode {
        &self.nodes[id as usize]
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0
    }

    /// Appends one run symbol.
    ///
    /// After the call every state on the suffix-link chain of the new `last`
    /// has `recent_end` equal to the new run index. That chain walk is not
    /// amortized O(1); it is bounded by the chain depth.
    pub fn extend(&mut self, symbol: Symbol) {
        let run = self.inserted;
        let cur = self.nodes.len() as StateId;
        self.nodes
            .push(SamNode::new(self.nodes[self.last as usize].len + 1));
        let mut p = self.last;
        loop {
            if self.transition(p, symbol).is_some() {
                break;
            }
            self.set_transition(p, symbol, cur);
            let link = self.nodes[p as usize].link;
            if link == NONE {
                p = NONE;
                break;
            }
            p = link;
        }
        if p == NONE {
            self.nodes[cur as usize].link = ROOT;
            self.nodes[cur as usize].link_len = 0;
        } else {
            let q = self.transition(p, symbol).expect("checked above");
            if self.nodes[p as usize].len + 1 == self.nodes[q as usize].len {
                self.nodes[cur as usize].link = q;
                self.nodes[cur as usize].link_len = self.nodes[q as usize].len;
            } else {
                let clone = self.nodes.len() as StateId;
                let mut node = self.nodes[q as usize];
                node.len = self.nodes[p as usize].len + 1;
                if node.more != NONE {
                    let extra = self.overflow[node.more as usize].clone();
                    node.more = self.overflow.len() as u32;
                    self.overflow.push(extra);
                }
                self.nodes.push(node);
                let mut pp = p;
                loop {
                    if self.transition(pp, symbol) != Some(q) {
                        break;
                    }
                    self.set_transition(pp, symbol, clone);
                    let link = self.nodes[pp as usize].link;
                    if link == NONE {
                        break;
                    }
                    pp = link;
                }
                let clone_len = self.nodes[clone as usize].len;
                for v in [q, cur] {
                    self.nodes[v as usize].link = clone;
                    self.nodes[v as usize].link_len = clone_len;
                }
            }
        }
        self.last = cur;
        self.inserted += 1;

        let mut v = cur;
        while v != NONE {
            let node = &mut self.nodes[v as usize];
            node.recent_end = run;
            v = node.link;
        }
    }

    /// Walks suffix links until the cursor's state is the one that actually
    /// holds its matched string (`len(link) < length`).
    ///
    /// Cloning during [`extend`](Self::extend) can split a state and leave a
    /// stored cursor pointing one class too deep; this repairs it.
    #[inline]
    pub fn normalize(&self, mut cursor: MatchCursor) -> MatchCursor {
        if cursor.length == 0 {
            return MatchCursor::EMPTY;
        }
        loop {
            let node = &self.nodes[cursor.state as usize];
            match node.link() {
                Some(l) if cursor.length <= node.link_len => cursor.state = l,
                _ => return cursor,
            }
        }
    }

    /// Longest suffix of (matched string + `symbol`) that occurs in the
    /// inserted sequence. Falls back to [`MatchCursor::EMPTY`] on total failure.
    #[inline]
    pub fn match_advance(&self, cursor: MatchCursor, symbol: Symbol) -> MatchCursor {
        let mut cur = self.normalize(cursor);
        loop {
            let node = &self.nodes[cur.state as usize];
            if let Some(to) = self.transition(cur.state, symbol) {
                return self.normalize(MatchCursor {
                    state: to,
                    length: cur.length + 1,
                });
            }
            match node.link() {
                Some(l) => {
                    cur = MatchCursor {
                        state: l,
                        length: node.link_len,
                    }
                }
                None => return MatchCursor::EMPTY,
            }
        }
    }

    /// Shortens the match to its last `max_len` symbols.
    pub fn cap(&self, cursor: MatchCursor, max_len: u32) -> MatchCursor {
        if cursor.length <= max_len {
            return cursor;
        }
        self.normalize(MatchCursor {
            state: cursor.state,
            length: max_len,
        })
    }

    /// Run index of the most recent end of the matched string; `None` for an empty match.
    #[inline]
    pub fn recent_endpos(&self, cursor: MatchCursor) -> Option<u32> {
        if cursor.length == 0 {
            return None;
        }
        self.nodes[self.normalize(cursor).state as usize].recent_end()
    }

    /// Whether `pattern` is a substring of the inserted sequence.
    pub fn contains(&self, pattern: &[Symbol]) -> bool {
        let mut s = ROOT;
        for &c in pattern {
            match self.transition(s, c) {
                Some(n) => s = n,
                None => return false,
            }
        }
        true
    }

    /// Feeds a whole sequence through [`match_advance`](Self::match_advance)
    /// starting from an empty match.
    pub fn match_sequence(&self, query: &[Symbol]) -> MatchCursor {
        query
            .iter()
            .fold(MatchCursor::EMPTY, |c, &s| self.match_advance(c, s))
    }
}

impl FromIterator<Symbol> for SuffixAutomaton {
    fn from_iter<I: IntoIterator<Item = Symbol>>(iter: I) -> Self {
        let mut sam = SuffixAutomaton::new();
        for s in iter {
            sam.extend(s);
        }
        sam
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_match;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn substrings(s: &[Symbol]) -> BTreeSet<Vec<Symbol>> {
        let mut out = BTreeSet::new();
        for i in 0..s.len() {
            for j in i + 1..=s.len() {
                out.insert(s[i..j].to_vec());
            }
        }
        out
    }

    #[test]
    fn single_symbol() {
        let sam: SuffixAutomaton = [5].into_iter().collect();
        assert_eq!(sam.node_count(), 2);
        assert_eq!(sam.node(sam.last()).len(), 1);
        assert_eq!(sam.node(sam.last()).recent_end(), Some(0));
    }

    #[test]
    fn abab_recognizes_exactly_its_substrings() {
        let s = [0, 1, 0, 1];
        let sam: SuffixAutomaton = s.into_iter().collect();
        let subs = substrings(&s);
        let expect: BTreeSet<Vec<Symbol>> = [
            vec![0],
            vec![1],
            vec![0, 1],
            vec![1, 0],
            vec![0, 1, 0],
            vec![1, 0, 1],
            vec![0, 1, 0, 1],
        ]
        .into_iter()
        .collect();
        assert_eq!(subs, expect);
        // every string over {0,1} up to length 5 is accepted iff it is a substring
        for len in 1..=5 {
            for bitsv in 0..(1u32 << len) {
                let p: Vec<Symbol> = (0..len).map(|i| ((bitsv >> i) & 1) as Symbol).collect();
                assert_eq!(sam.contains(&p), expect.contains(&p), "{p:?}");
            }
        }
    }

    #[test]
    fn empty_automaton_never_matches() {
        let sam = SuffixAutomaton::new();
        let c = sam.match_advance(MatchCursor::EMPTY, 3);
        assert_eq!(c, MatchCursor::EMPTY);
        assert_eq!(sam.recent_endpos(c), None);
    }

    #[test]
    fn worked_match_example() {
        let sam: SuffixAutomaton = [2, 1, 2, 1].into_iter().collect();
        let c = sam.match_sequence(&[3, 1, 2]);
        assert_eq!(c.length, 2);
        assert_eq!(sam.recent_endpos(c), Some(2));
        let c = sam.match_sequence(&[2, 1]);
        assert_eq!(sam.recent_endpos(c), Some(3));
        assert_eq!(brute_match(&[2, 1, 2, 1], &[3, 1, 2]), (2, Some(2)));
    }

    #[test]
    fn self_match_tracks_run_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let key: Vec<Symbol> = (0..100).map(|_| rng.random_range(0..4)).collect();
        let sam: SuffixAutomaton = key.iter().copied().collect();
        let mut c = MatchCursor::EMPTY;
        for (i, &s) in key.iter().enumerate() {
            c = sam.match_advance(c, s);
            assert_eq!(c.length as usize, i + 1);
        }
    }

    #[test]
    fn insertion_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let key: Vec<Symbol> = (0..300).map(|_| rng.random_range(0..6)).collect();
        let a: SuffixAutomaton = key.iter().copied().collect();
        let b: SuffixAutomaton = key.iter().copied().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn cursor_survives_interleaved_growth() {
        // Matching while the automaton grows must agree with a fresh brute-force
        // scan of (previous match + symbol) at every step.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut sam = SuffixAutomaton::new();
            let mut keys = Vec::new();
            let mut cursor = MatchCursor::EMPTY;
            let mut matched: Vec<Symbol> = Vec::new();
            for _ in 0..60 {
                let k = rng.random_range(0..3);
                sam.extend(k);
                keys.push(k);
                let q = rng.random_range(0..3);
                cursor = sam.match_advance(cursor, q);
                matched.push(q);
                let (len, end) = brute_match(&keys, &matched);
                matched = matched[matched.len() - len..].to_vec();
                assert_eq!(cursor.length as usize, len);
                assert_eq!(sam.recent_endpos(cursor), end.map(|e| e as u32));
            }
        }
    }

    proptest! {
        #[test]
        fn state_count_bound(seq in proptest::collection::vec(0u16..8, 2..256)) {
            let sam: SuffixAutomaton = seq.iter().copied().collect();
            prop_assert!(sam.node_count() < 2 * seq.len());
        }

        #[test]
        fn links_shorten(seq in proptest::collection::vec(0u16..4, 1..128)) {
            let sam: SuffixAutomaton = seq.iter().copied().collect();
            for id in 1..sam.node_count() as StateId {
                let n = sam.node(id);
                let l = n.link().expect("non-root states have links");
                prop_assert!(sam.node(l).len() < n.len());
            }
        }
    }
}
