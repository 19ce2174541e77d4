//! Linearizable key -> creation-record map shared by all clients of a store.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::api::{Key, StoreError};

#[derive(Debug)]
pub struct Registry<R> {
    map: Rc<RefCell<HashMap<Key, R>>>,
}

impl<R> Clone for Registry<R> {
    fn clone(&self) -> Self {
        Registry { map: self.map.clone() }
    }
}

impl<R> Default for Registry<R> {
    fn default() -> Self {
        Registry { map: Rc::default() }
    }
}

impl<R: Clone> Registry<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, key: &[u8], record: R) -> Result<(), StoreError> {
        let mut m = self.map.borrow_mut();
        if m.contains_key(key) {
            return Err(StoreError::KeyExists);
        }
        m.insert(key.to_vec(), record);
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Option<R> {
        self.map.borrow().get(key).cloned()
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.map.borrow().contains_key(key)
    }

    pub fn remove(&self, key: &[u8]) -> Result<R, StoreError> {
        self.map.borrow_mut().remove(key).ok_or(StoreError::KeyNotFound)
    }

    pub fn update(&self, key: &[u8], f: impl FnOnce(&mut R)) -> Result<(), StoreError> {
        let mut m = self.map.borrow_mut();
        let r = m.get_mut(key).ok_or(StoreError::KeyNotFound)?;
        f(r);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of all records, sorted by key.
    pub fn entries(&self) -> Vec<(Key, R)> {
        let mut v: Vec<_> = self.map.borrow().iter().map(|(k, r)| (k.clone(), r.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}
