//! Bounded top-K selection with a fixed tie-break: higher score first, then
//! lower id.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub id: u32,
    pub score: f64,
}

impl Scored {
    pub fn new(id: u32, score: f64) -> Self {
        Scored { id, score }
    }
}

/// Total order where `Less` means "ranks earlier".
pub fn rank_order(a: &Scored, b: &Scored) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

pub fn sort_ranked(items: &mut [Scored]) {
    items.sort_by(rank_order);
}

/// Heap entry whose maximum is the entry ranked last.
#[derive(Debug, Clone, Copy)]
struct Worst(Scored);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        rank_order(&self.0, &other.0) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Entry currently ranked last, if the selection is full.
    pub fn threshold(&self) -> Option<Scored> {
        if self.heap.len() == self.k {
            self.heap.peek().map(|w| w.0)
        } else {
            None
        }
    }

    pub fn push(&mut self, id: u32, score: f64) {
        if self.k == 0 {
            return;
        }
        let item = Scored { id, score };
        if self.heap.len() < self.k {
            self.heap.push(Worst(item));
        } else if let Some(top) = self.heap.peek() {
            if rank_order(&item, &top.0) == Ordering::Less {
                self.heap.pop();
                self.heap.push(Worst(item));
            }
        }
    }

    pub fn into_sorted(self) -> Vec<Scored> {
        let mut v: Vec<Scored> = self.heap.into_iter().map(|w| w.0).collect();
        sort_ranked(&mut v);
        v
    }
}
