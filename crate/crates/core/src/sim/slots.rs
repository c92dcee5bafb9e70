//! Constant-time membership sets used to pick a uniformly random GPU.

use rand::Rng;

#[derive(Debug, Clone)]
pub(crate) struct IdSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl IdSet {
    pub fn new(universe: usize) -> Self {
        Self {
            items: Vec::new(),
            pos: vec![ABSENT; universe],
        }
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.pos[id as usize] != ABSENT
    }

    pub fn set(&mut self, id: u32, present: bool) {
        if present {
            self.insert(id)
        } else {
            self.remove(id)
        }
    }

    pub fn insert(&mut self, id: u32) {
        if !self.contains(id) {
            self.pos[id as usize] = self.items.len() as u32;
            self.items.push(id);
        }
    }

    pub fn remove(&mut self, id: u32) {
        let p = self.pos[id as usize];
        if p == ABSENT {
            return;
        }
        let last = self.items.pop().expect("nonempty");
        if last != id {
            self.items[p as usize] = last;
            self.pos[last as usize] = p;
        }
        self.pos[id as usize] = ABSENT;
    }

    pub fn choose<R: Rng>(&self, rng: &mut R) -> Option<u32> {
        if self.items.is_empty() {
            None
        } else {
            Some(self.items[rng.random_range(0..self.items.len())])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insert_remove_choose() {
        let mut s = IdSet::new(10);
        for i in [3, 7, 1, 7] {
            s.insert(i);
        }
        assert_eq!(s.len(), 3);
        s.remove(3);
        s.remove(3);
        assert!(!s.contains(3) && s.contains(1) && s.contains(7));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0usize; 10];
        for _ in 0..2000 {
            hits[s.choose(&mut rng).unwrap() as usize] += 1;
        }
        assert!(hits[1] > 900 && hits[7] > 900);
        s.remove(1);
        s.remove(7);
        assert!(s.is_empty() && s.choose(&mut rng).is_none());
    }
}
