//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

/// ARC written straight from the textbook pseudocode, on plain deques
/// (front = LRU, back = MRU).
pub struct RefArc {
    c: usize,
    p: f64,
    t1: VecDeque<usize>,
    t2: VecDeque<usize>,
    b1: VecDeque<usize>,
    b2: VecDeque<usize>,
}

fn remove(q: &mut VecDeque<usize>, x: usize) -> bool {
    match q.iter().position(|&y| y == x) {
        Some(i) => {
            q.remove(i);
            true
        }
        None => false,
    }
}

impl RefArc {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            p: 0.0,
            t1: VecDeque::new(),
            t2: VecDeque::new(),
            b1: VecDeque::new(),
            b2: VecDeque::new(),
        }
    }

    fn replace(&mut self, x_in_b2: bool) {
        let t1 = self.t1.len() as f64;
        if !self.t1.is_empty() && (t1 > self.p || (x_in_b2 && t1 == self.p)) {
            let v = self.t1.pop_front().unwrap();
            self.b1.push_back(v);
        } else {
            let v = self.t2.pop_front().expect("REPLACE with empty T2");
            self.b2.push_back(v);
        }
    }

    /// True on a hit.
    pub fn request(&mut self, x: usize) -> bool {
        let c = self.c;
        if c == 0 {
            return false;
        }
        if remove(&mut self.t1, x) || remove(&mut self.t2, x) {
            self.t2.push_back(x);
            return true;
        }
        if self.b1.contains(&x) {
            let d = if self.b1.len() >= self.b2.len() {
                1.0
            } else {
                self.b2.len() as f64 / self.b1.len() as f64
            };
            self.p = (self.p + d).min(c as f64);
            self.replace(false);
            remove(&mut self.b1, x);
            self.t2.push_back(x);
            return false;
        }
        if self.b2.contains(&x) {
            let d = if self.b2.len() >= self.b1.len() {
                1.0
            } else {
                self.b1.len() as f64 / self.b2.len() as f64
            };
            self.p = (self.p - d).max(0.0);
            self.replace(true);
            remove(&mut self.b2, x);
            self.t2.push_back(x);
            return false;
        }
        if self.t1.len() + self.b1.len() == c {
            if self.t1.len() < c {
                self.b1.pop_front();
                self.replace(false);
            } else {
                self.t1.pop_front();
            }
        } else {
            let total = self.t1.len() + self.t2.len() + self.b1.len() + self.b2.len();
            if total >= c {
                if total == 2 * c {
                    self.b2.pop_front();
                }
                self.replace(false);
            }
        }
        self.t1.push_back(x);
        false
    }
}

pub struct RefLru {
    c: usize,
    q: VecDeque<usize>,
}

impl RefLru {
    pub fn new(c: usize) -> Self {
        Self { c, q: VecDeque::new() }
    }

    pub fn request(&mut self, x: usize) -> bool {
        if self.c == 0 {
            return false;
        }
        let hit = remove(&mut self.q, x);
        if !hit && self.q.len() == self.c {
            self.q.pop_front();
        }
        self.q.push_back(x);
        hit
    }
}

/// Expected per-layer capacities, rebuilt slot by slot: the first `boundary`
/// layers take slots one at a time up to `experts`; the remainder is dealt
/// round-robin to the deep layers, lowest index first, and every layer is
/// finally capped at `experts`.
pub fn partition_oracle(total: u64, layers: usize, experts: usize, boundary: usize) -> Vec<usize> {
    let mut caps = vec![0usize; layers];
    let mut left = total;
    for cap in caps.iter_mut().take(boundary.min(layers)) {
        while *cap < experts && left > 0 {
            *cap += 1;
            left -= 1;
        }
    }
    let deep: Vec<usize> = (boundary.min(layers)..layers).collect();
    if deep.is_empty() {
        return caps;
    }
    // Floor share first, one round at a time.
    let rounds = left / deep.len() as u64;
    for _ in 0..rounds {
        for &l in &deep {
            caps[l] += 1;
        }
    }
    let rem = left % deep.len() as u64;
    for &l in deep.iter().take(rem as usize) {
        caps[l] += 1;
    }
    for c in caps.iter_mut() {
        *c = (*c).min(experts);
    }
    caps
}
