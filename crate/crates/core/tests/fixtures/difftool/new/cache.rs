use std::collections::HashMap;

/// Bounded string-keyed cache.
pub struct Cache {
    map: HashMap<String, u64>,
    capacity: usize,
}

impl Cache {
    pub fn get(&self, key: &str) -> Option<u64> {
        self.map.get(key).copied()
    }

    pub fn insert(&mut self, key: String, value: u64) -> bool {
        if self.map.len() >= self.capacity {
            return false;
        }
        self.map.insert(key, value);
        true
    }
}
