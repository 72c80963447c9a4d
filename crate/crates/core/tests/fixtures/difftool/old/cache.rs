use std::collections::HashMap;

pub struct Cache {
    map: HashMap<String, u64>,
}

impl Cache {
    pub fn get(&self, key: &str) -> Option<u64> {
        self.map.get(key).copied()
    }

    pub fn insert(&mut self, key: String, value: u64) {
        self.map.insert(key, value);
    }
}
