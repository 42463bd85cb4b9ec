use crate::error::{Error, Result};
use crate::numerics::Real;

/// Per-layer rotated keys and values of committed positions.
#[derive(Clone, Debug)]
pub struct KVCache<T: Real = f32> {
    d_model: usize,
    capacity: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    positions: Vec<usize>,
}

impl<T: Real> KVCache<T> {
    pub fn new(n_layers: usize, d_model: usize, capacity: usize) -> Self {
        Self {
            d_model,
            capacity,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            positions: Vec::new(),
        }
    }

    /// Committed entries.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer][..self.len() * self.d_model]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer][..self.len() * self.d_model]
    }

    /// Keys/values of one entry at one layer.
    pub fn entry(&self, layer: usize, idx: usize) -> (&[T], &[T]) {
        let d = self.d_model;
        (
            &self.keys[layer][idx * d..(idx + 1) * d],
            &self.values[layer][idx * d..(idx + 1) * d],
        )
    }

    pub(crate) fn check_room(&self, extra: usize) -> Result<()> {
        if self.len() + extra > self.capacity {
            return Err(Error::CacheOverflow {
                needed: self.len() + extra,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    /// Stages rows for one layer; they become visible once
    /// [`KVCache::commit_positions`] runs.
    pub(crate) fn stage(&mut self, layer: usize, keys: &[T], values: &[T]) {
        let end = self.len() * self.d_model;
        self.keys[layer].truncate(end);
        self.values[layer].truncate(end);
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    pub(crate) fn commit_positions(&mut self, positions: &[usize]) -> Result<()> {
        let new_len = self.len() + positions.len();
        let want = new_len * self.d_model;
        if self.keys.iter().chain(&self.values).any(|buf| buf.len() != want) {
            self.discard_staged();
            return Err(Error::Invalid("forward did not stage keys/values for every layer".into()));
        }
        self.positions.extend_from_slice(positions);
        Ok(())
    }

    /// Drops anything staged by an incomplete forward.
    pub(crate) fn discard_staged(&mut self) {
        let end = self.len() * self.d_model;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            buf.truncate(end);
        }
    }

    pub fn truncate(&mut self, len: usize) {
        if len < self.len() {
            self.positions.truncate(len);
        }
        self.discard_staged();
    }

    /// Keeps only the listed entries (ascending, unique), shifting them down.
    pub fn compact(&mut self, keep: &[usize]) -> Result<()> {
        if keep.windows(2).any(|w| w[0] >= w[1]) || keep.last().is_some_and(|&k| k >= self.len()) {
            return Err(Error::Invalid(format!(
                "compaction indices must be ascending and < {}: {keep:?}",
                self.len()
            )));
        }
        let d = self.d_model;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            for (dst, &src) in keep.iter().enumerate() {
                if dst != src {
                    buf.copy_within(src * d..(src + 1) * d, dst * d);
                }
            }
            buf.truncate(keep.len() * d);
        }
        let positions: Vec<usize> = keep.iter().map(|&k| self.positions[k]).collect();
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("compaction left positions out of order".into()));
        }
        self.positions = positions;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(n: usize) -> KVCache<f32> {
        let mut c = KVCache::new(2, 2, 16);
        for layer in 0..2 {
            let k: Vec<f32> = (0..n * 2).map(|i| (layer * 100 + i) as f32).collect();
            let v: Vec<f32> = k.iter().map(|x| -x).collect();
            c.stage(layer, &k, &v);
        }
        c.commit_positions(&(0..n).collect::<Vec<_>>()).unwrap();
        c
    }

    #[test]
    fn compact_shifts_entries() {
        let mut c = filled(5);
        c.compact(&[0, 2, 4]).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.positions(), &[0, 2, 4]);
        assert_eq!(c.entry(1, 1).0, &[104.0, 105.0]);
        assert_eq!(c.entry(0, 2).1, &[-8.0, -9.0]);
    }

    #[test]
    fn compact_rejects_unsorted() {
        let mut c = filled(3);
        assert!(c.compact(&[1, 0]).is_err());
        assert!(c.compact(&[0, 3]).is_err());
    }

    #[test]
    fn overflow_and_partial_stage() {
        let mut c = filled(3);
        assert!(c.check_room(14).is_err());
        c.stage(0, &[1.0, 2.0], &[3.0, 4.0]);
        assert!(c.commit_positions(&[3]).is_err());
        assert_eq!(c.len(), 3);
        assert_eq!(c.keys(0).len(), 6);
    }
}
