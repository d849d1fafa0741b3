//! Capacity-bounded buffer of the best unexplored candidates, backed by a
//! min-max heap so both the best and the worst element are readable in
//! constant time and evictable in logarithmic time.
//!
//! Ordering is defined purely by loss; equal losses are broken by
//! insertion order, older first. Eviction therefore removes the newest of
//! the tied-worst entries, and `best` prefers the oldest of the tied-best.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenSeq;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seq: TokenSeq,
    pub loss: f64,
}

impl Candidate {
    pub fn new(seq: TokenSeq, loss: f64) -> Self {
        Candidate { seq, loss }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    loss: f64,
    tick: u64,
    cand: Candidate,
}

impl Entry {
    fn key(&self) -> (f64, u64) {
        (self.loss, self.tick)
    }
}

fn lt(a: &Entry, b: &Entry) -> bool {
    let (la, ta) = a.key();
    let (lb, tb) = b.key();
    la < lb || (la == lb && ta < tb)
}

/// Min-max heap layout: even tree levels order toward the minimum, odd
/// levels toward the maximum (the classic interval min-max heap layout).
#[derive(Debug, Clone)]
pub struct CandidateBuffer {
    heap: Vec<Entry>,
    capacity: usize,
    next_tick: u64,
}

impl CandidateBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be at least 1");
        CandidateBuffer {
            heap: Vec::with_capacity(capacity + 1),
            capacity,
            next_tick: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert below capacity unconditionally; at capacity accept exactly
    /// when `loss <= worst loss`, evicting the worst first. Returns whether
    /// the candidate was kept.
    pub fn try_insert(&mut self, cand: Candidate) -> bool {
        assert!(cand.loss.is_finite(), "candidate loss must be finite");
        if self.heap.len() < self.capacity {
            self.push(cand);
            return true;
        }
        let worst = self.peek_max().expect("capacity >= 1").loss;
        if cand.loss <= worst {
            self.pop_max();
            self.push(cand);
            true
        } else {
            false
        }
    }

    pub fn best(&self) -> Result<&Candidate> {
        self.heap.first().map(|e| &e.cand).ok_or(Error::EmptyBuffer)
    }

    pub fn worst(&self) -> Result<&Candidate> {
        self.peek_max().map(|e| &e.cand).ok_or(Error::EmptyBuffer)
    }

    pub fn best_loss(&self) -> Result<f64> {
        self.best().map(|c| c.loss)
    }

    pub fn worst_loss(&self) -> Result<f64> {
        self.worst().map(|c| c.loss)
    }

    /// Contents sorted best-first (loss, then insertion order).
    pub fn sorted_snapshot(&self) -> Vec<Candidate> {
        let mut entries: Vec<&Entry> = self.heap.iter().collect();
        entries.sort_by(|a, b| a.key().partial_cmp(&b.key()).expect("finite losses"));
        entries.into_iter().map(|e| e.cand.clone()).collect()
    }

    fn push(&mut self, cand: Candidate) {
        let entry = Entry {
            loss: cand.loss,
            tick: self.next_tick,
            cand,
        };
        self.next_tick += 1;
        self.heap.push(entry);
        self.bubble_up(self.heap.len() - 1);
    }

    fn peek_max(&self) -> Option<&Entry> {
        match self.heap.len() {
            0 => None,
            1 => Some(&self.heap[0]),
            2 => Some(&self.heap[1]),
            _ => {
                if lt(&self.heap[1], &self.heap[2]) {
                    Some(&self.heap[2])
                } else {
                    Some(&self.heap[1])
                }
            }
        }
    }

    fn max_index(&self) -> usize {
        match self.heap.len() {
            0 => panic!("empty heap"),
            1 => 0,
            2 => 1,
            _ => {
                if lt(&self.heap[1], &self.heap[2]) {
                    2
                } else {
                    1
                }
            }
        }
    }

    fn pop_max(&mut self) -> Option<Candidate> {
        if self.heap.is_empty() {
            return None;
        }
        let idx = self.max_index();
        let last = self.heap.len() - 1;
        self.heap.swap(idx, last);
        let out = self.heap.pop().map(|e| e.cand);
        if idx < self.heap.len() {
            self.trickle_down(idx);
        }
        out
    }

    fn bubble_up(&mut self, i: usize) {
        if i == 0 {
            return;
        }
        let parent = (i - 1) / 2;
        if on_min_level(i) {
            if lt(&self.heap[parent], &self.heap[i]) {
                self.heap.swap(i, parent);
                self.bubble_up_grand(parent, false);
            } else {
                self.bubble_up_grand(i, true);
            }
        } else if lt(&self.heap[i], &self.heap[parent]) {
            self.heap.swap(i, parent);
            self.bubble_up_grand(parent, true);
        } else {
            self.bubble_up_grand(i, false);
        }
    }

    fn bubble_up_grand(&mut self, mut i: usize, min: bool) {
        while i >= 3 {
            let gp = ((i - 1) / 2 - 1) / 2;
            let swap = if min {
                lt(&self.heap[i], &self.heap[gp])
            } else {
                lt(&self.heap[gp], &self.heap[i])
            };
            if !swap {
                break;
            }
            self.heap.swap(i, gp);
            i = gp;
        }
    }

    fn trickle_down(&mut self, i: usize) {
        if on_min_level(i) {
            self.trickle(i, true);
        } else {
            self.trickle(i, false);
        }
    }

    fn trickle(&mut self, mut i: usize, min: bool) {
        loop {
            // Extremal element among children and grandchildren.
            let mut m = None;
            for c in descendants(i, self.heap.len()) {
                let better = match m {
                    None => true,
                    Some(j) => {
                        if min {
                            lt(&self.heap[c], &self.heap[j])
                        } else {
                            lt(&self.heap[j], &self.heap[c])
                        }
                    }
                };
                if better {
                    m = Some(c);
                }
            }
            let Some(m) = m else { return };
            let improves = if min {
                lt(&self.heap[m], &self.heap[i])
            } else {
                lt(&self.heap[i], &self.heap[m])
            };
            if m > 2 * i + 2 {
                // Grandchild.
                if improves {
                    self.heap.swap(m, i);
                    let parent = (m - 1) / 2;
                    let fix = if min {
                        lt(&self.heap[parent], &self.heap[m])
                    } else {
                        lt(&self.heap[m], &self.heap[parent])
                    };
                    if fix {
                        self.heap.swap(m, parent);
                    }
                    i = m;
                    continue;
                }
            } else if improves {
                self.heap.swap(m, i);
            }
            return;
        }
    }
}

fn on_min_level(i: usize) -> bool {
    // Level of node i in a complete binary tree; even levels are min levels.
    let level = usize::BITS - 1 - (i + 1).leading_zeros();
    level.is_multiple_of(2)
}

fn descendants(i: usize, len: usize) -> impl Iterator<Item = usize> {
    let c1 = 2 * i + 1;
    let c2 = 2 * i + 2;
    [c1, c2, 2 * c1 + 1, 2 * c1 + 2, 2 * c2 + 1, 2 * c2 + 2]
        .into_iter()
        .filter(move |&j| j < len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn c(loss: f64) -> Candidate {
        Candidate::new(TokenSeq::new(vec![loss.abs() as u32]), loss)
    }

    /// Naive reference: a plain vector kept sorted by (loss, insertion
    /// order), with the same acceptance rule.
    #[derive(Default)]
    struct Reference {
        items: Vec<(f64, u64, Candidate)>,
        capacity: usize,
        tick: u64,
    }

    impl Reference {
        fn new(capacity: usize) -> Self {
            Reference {
                capacity,
                ..Default::default()
            }
        }

        fn try_insert(&mut self, cand: Candidate) -> bool {
            let key = (cand.loss, self.tick);
            if self.items.len() >= self.capacity {
                let worst = self.items.last().unwrap();
                if cand.loss > worst.0 {
                    return false;
                }
                self.items.pop();
            }
            self.items.push((key.0, key.1, cand));
            self.tick += 1;
            self.items
                .sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
            true
        }

        fn best(&self) -> Option<&Candidate> {
            self.items.first().map(|e| &e.2)
        }

        fn worst(&self) -> Option<&Candidate> {
            self.items.last().map(|e| &e.2)
        }
    }

    #[test]
    fn insert_into_empty_always_accepted() {
        let mut b = CandidateBuffer::new(3);
        assert!(b.try_insert(c(5.0)));
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn full_buffer_accepts_between_and_evicts_worst() {
        let mut b = CandidateBuffer::new(3);
        for l in [1.0, 2.0, 3.0] {
            assert!(b.try_insert(c(l)));
        }
        // Oracle: re-sorting {1.0, 2.0, 2.5} after the 3.0 eviction.
        assert!(b.try_insert(c(2.5)));
        assert_eq!(b.len(), 3);
        assert_eq!(b.worst_loss().unwrap(), 2.5);
        assert_eq!(b.best_loss().unwrap(), 1.0);
    }

    #[test]
    fn full_buffer_rejects_above_worst() {
        let mut b = CandidateBuffer::new(3);
        for l in [1.0, 2.0, 3.0] {
            b.try_insert(c(l));
        }
        assert!(!b.try_insert(c(3.1)));
        assert_eq!(b.worst_loss().unwrap(), 3.0);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn equal_loss_accepted_and_evicts_newest_tied_worst() {
        let mut b = CandidateBuffer::new(2);
        let old = Candidate::new(TokenSeq::new(vec![1]), 2.0);
        let newer = Candidate::new(TokenSeq::new(vec![2]), 2.0);
        let incoming = Candidate::new(TokenSeq::new(vec![3]), 2.0);
        b.try_insert(old.clone());
        b.try_insert(newer);
        assert!(b.try_insert(incoming.clone()));
        let snap = b.sorted_snapshot();
        assert_eq!(snap[0].seq, old.seq);
        assert_eq!(snap[1].seq, incoming.seq);
    }

    #[test]
    fn single_element_best_equals_worst() {
        let mut b = CandidateBuffer::new(4);
        b.try_insert(c(7.0));
        assert_eq!(b.best().unwrap().loss, 7.0);
        assert_eq!(b.worst().unwrap().loss, 7.0);
    }

    #[test]
    fn empty_buffer_errors() {
        let b = CandidateBuffer::new(4);
        assert!(matches!(b.best(), Err(Error::EmptyBuffer)));
        assert!(matches!(b.worst(), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn ordered_extremes() {
        let mut b = CandidateBuffer::new(8);
        for l in [3.0, 1.0, 2.0] {
            b.try_insert(c(l));
        }
        assert_eq!(b.best_loss().unwrap(), 1.0);
        assert_eq!(b.worst_loss().unwrap(), 3.0);
    }

    #[test]
    fn differential_against_sorted_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        for capacity in [1usize, 2, 3, 8, 33] {
            let mut heap = CandidateBuffer::new(capacity);
            let mut refr = Reference::new(capacity);
            for _ in 0..10_000 {
                // Coarse losses make ties common enough to stress the rule.
                let loss = (rng.random_range(0..40) as f64) * 0.25;
                let cand = c(loss);
                let a = heap.try_insert(cand.clone());
                let b = refr.try_insert(cand);
                assert_eq!(a, b, "acceptance mismatch at capacity {capacity}");
                assert!(heap.len() <= capacity);
                assert_eq!(heap.len(), refr.items.len());
                assert_eq!(
                    heap.best().map(|c| c.loss).ok(),
                    refr.best().map(|c| c.loss)
                );
                assert_eq!(
                    heap.worst().map(|c| c.loss).ok(),
                    refr.worst().map(|c| c.loss)
                );
                // Tie rule: the retained sequences must match exactly.
                assert_eq!(
                    heap.sorted_snapshot()
                        .iter()
                        .map(|c| &c.seq)
                        .collect::<Vec<_>>(),
                    refr.items.iter().map(|e| &e.2.seq).collect::<Vec<_>>()
                );
            }
        }
    }

    #[test]
    fn worst_loss_non_increasing_once_full() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut b = CandidateBuffer::new(16);
        let mut last_worst = f64::INFINITY;
        for i in 0..2000 {
            b.try_insert(c(rng.random_range(0.0..10.0)));
            if i >= 16 {
                let w = b.worst_loss().unwrap();
                assert!(w <= last_worst);
                last_worst = w;
            }
        }
    }
}
