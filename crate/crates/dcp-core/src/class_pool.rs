//! The dynamic class pool: a fixed-capacity C x K x D feature store standing
//! in for the fully connected classifier.
//!
//! Each of the C slots holds K unit-norm gallery features of one resident
//! identity. While unfilled, new identities take slots sequentially; once
//! full, each new identity in an insertion batch overwrites the oldest
//! resident that is not itself part of the batch (FIFO by insertion age).
//! An identity that is re-inserted while resident has its features refreshed
//! in place and keeps its queue position, but is never evicted by its own
//! batch. Slots carry explicit insertion ages instead of a shifted array, so
//! an update touches O(batch * K * D) data; the observable semantics match
//! the array-shift formulation (see the reference oracle in the tests).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::mat::{dot, l2_norm, normalize_in_place, Mat};
use crate::rng::{tags, Rng};

const POOL_MAGIC: &[u8; 4] = b"DCPT";
const POOL_VERSION: u32 = 1;

/// Logit value assigned to unoccupied slots so softmax ignores them.
const EMPTY_SENTINEL: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct ClassPool {
    /// (capacity * group) x dim; slot s occupies rows s*group .. (s+1)*group.
    feats: Mat,
    slot_ids: Vec<Option<u32>>,
    /// Insertion sequence number per slot; smallest = evicted first.
    ages: Vec<u64>,
    next_age: u64,
    id_to_slot: HashMap<u32, usize>,
    fill: usize,
    group: usize,
    dim: usize,
    scale: f64,
}

impl ClassPool {
    /// New pool with Gaussian-initialized, row-normalized contents and all
    /// slots marked empty.
    pub fn new(capacity: usize, group: usize, dim: usize, scale: f64, seed: u64) -> Result<ClassPool> {
        if capacity == 0 || group == 0 || dim == 0 {
            return Err(Error::Config("pool sizes must all be >= 1".into()));
        }
        if scale <= 0.0 {
            return Err(Error::Config("logit scale must be positive".into()));
        }
        let mut rng = Rng::stream(seed, tags::POOL_INIT);
        let mut feats = Mat::zeros(capacity * group, dim);
        for r in 0..feats.rows() {
            let row = feats.row_mut(r);
            for v in row.iter_mut() {
                *v = rng.normal();
            }
            normalize_in_place(row);
        }
        Ok(ClassPool {
            feats,
            slot_ids: vec![None; capacity],
            ages: vec![0; capacity],
            next_age: 0,
            id_to_slot: HashMap::new(),
            fill: 0,
            group,
            dim,
            scale,
        })
    }

    pub fn capacity(&self) -> usize {
        self.slot_ids.len()
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn fill_count(&self) -> usize {
        self.fill
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity()
    }

    pub fn slot_of(&self, id: u32) -> Option<usize> {
        self.id_to_slot.get(&id).copied()
    }

    pub fn resident_id(&self, slot: usize) -> Option<u32> {
        self.slot_ids[slot]
    }

    /// Occupied slots from oldest to newest (eviction order).
    pub fn residency_order(&self) -> Vec<(u32, usize)> {
        let mut out: Vec<(u64, u32, usize)> = (0..self.capacity())
            .filter_map(|slot| self.slot_ids[slot].map(|id| (self.ages[slot], id, slot)))
            .collect();
        out.sort_unstable_by_key(|&(age, _, _)| age);
        out.into_iter().map(|(_, id, slot)| (id, slot)).collect()
    }

    pub fn feature_row(&self, slot: usize, k: usize) -> &[f64] {
        self.feats.row(slot * self.group + k)
    }

    /// Pool state footprint in bytes: the feature tensor plus one word of
    /// identity bookkeeping per slot. Independent of the dataset size.
    pub fn state_bytes(&self) -> u64 {
        (self.capacity() * self.group * self.dim * 8 + self.capacity() * 8) as u64
    }

    /// Inserts one identity batch of grouped gallery features.
    ///
    /// `feats` holds `ids.len() * group` rows, the K rows of each identity
    /// contiguous and unit-norm. New identities fill empty slots sequentially
    /// until the pool is full, then each evicts the oldest resident outside
    /// the current batch; an already-resident identity has its features
    /// refreshed in place without changing its queue position.
    pub fn insert_batch(&mut self, ids: &[u32], feats: &Mat) -> Result<()> {
        let cap = self.capacity();
        if ids.is_empty() {
            return Err(Error::Input("empty identity batch".into()));
        }
        if ids.len() > cap {
            return Err(Error::Capacity(format!(
                "identity batch of {} exceeds pool capacity {cap}",
                ids.len()
            )));
        }
        if feats.rows() != ids.len() * self.group || feats.cols() != self.dim {
            return Err(Error::Shape(format!(
                "features are {}x{}, expected {}x{}",
                feats.rows(),
                feats.cols(),
                ids.len() * self.group,
                self.dim
            )));
        }
        {
            let mut seen = std::collections::HashSet::with_capacity(ids.len());
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::Input(format!("duplicate identity {id} in batch")));
                }
            }
        }
        for r in 0..feats.rows() {
            if (l2_norm(feats.row(r)) - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("feature row {r} is not unit norm")));
            }
        }

        let batch_set: std::collections::HashSet<u32> = ids.iter().copied().collect();
        for (i, &id) in ids.iter().enumerate() {
            let block = i * self.group;
            let slot = if let Some(&slot) = self.id_to_slot.get(&id) {
                slot // refresh in place, age unchanged
            } else if self.fill < cap {
                let slot = self.fill;
                self.fill += 1;
                self.claim(slot, id);
                slot
            } else {
                let slot = self.oldest_outside(&batch_set)?;
                self.claim(slot, id);
                slot
            };
            for k in 0..self.group {
                self.feats.row_mut(slot * self.group + k).copy_from_slice(feats.row(block + k));
            }
        }
        Ok(())
    }

    /// Oldest occupied slot whose resident is not in the inserting batch.
    fn oldest_outside(&self, batch: &std::collections::HashSet<u32>) -> Result<usize> {
        let mut best: Option<(u64, usize)> = None;
        for slot in 0..self.capacity() {
            let Some(id) = self.slot_ids[slot] else { continue };
            if batch.contains(&id) {
                continue;
            }
            match best {
                Some((age, _)) if age <= self.ages[slot] => {}
                _ => best = Some((self.ages[slot], slot)),
            }
        }
        best.map(|(_, slot)| slot)
            .ok_or_else(|| Error::Capacity("no evictable slot outside the batch".into()))
    }

    fn claim(&mut self, slot: usize, id: u32) {
        if let Some(old) = self.slot_ids[slot].take() {
            self.id_to_slot.remove(&old);
        }
        self.slot_ids[slot] = Some(id);
        self.id_to_slot.insert(id, slot);
        self.ages[slot] = self.next_age;
        self.next_age += 1;
    }

    /// Pooled logits: scale times the K-axis mean inner product between each
    /// probe row and each slot's stored features. Unoccupied slots get a
    /// large negative sentinel so softmax ignores them.
    pub fn logits(&self, probe: &Mat) -> Result<Mat> {
        if probe.cols() != self.dim {
            return Err(Error::Shape(format!(
                "probe dim {} does not match pool dim {}",
                probe.cols(),
                self.dim
            )));
        }
        let centers = self.mean_centers();
        let mut out = probe.matmul_nt(&centers);
        out.scale_in_place(self.scale);
        let sentinel = EMPTY_SENTINEL * self.scale;
        for c in self.fill..self.capacity() {
            for r in 0..out.rows() {
                out.set(r, c, sentinel);
            }
        }
        Ok(out)
    }

    /// Chain rule from pooled logits back to probe embeddings; pool contents
    /// are constants. d_probe = scale * grad_logits * mean_centers.
    pub fn logits_backward(&self, grad_logits: &Mat) -> Result<Mat> {
        if grad_logits.cols() != self.capacity() {
            return Err(Error::Shape(format!(
                "grad has {} columns, pool capacity is {}",
                grad_logits.cols(),
                self.capacity()
            )));
        }
        let centers = self.mean_centers();
        let mut d = grad_logits.matmul_nn(&centers);
        d.scale_in_place(self.scale);
        Ok(d)
    }

    /// K-axis mean of the stored features, not renormalized.
    pub fn mean_centers(&self) -> Mat {
        let cap = self.capacity();
        let mut out = Mat::zeros(cap, self.dim);
        let inv = 1.0 / self.group as f64;
        for slot in 0..cap {
            let row = out.row_mut(slot);
            for k in 0..self.group {
                crate::mat::axpy(inv, self.feats.row(slot * self.group + k), row);
            }
        }
        out
    }

    /// Mean centers of occupied slots only, with their slot indices.
    pub fn mean_centers_occupied(&self) -> (Mat, Vec<usize>) {
        let slots: Vec<usize> = (0..self.fill).collect();
        let mut out = Mat::zeros(slots.len(), self.dim);
        let inv = 1.0 / self.group as f64;
        for (r, &slot) in slots.iter().enumerate() {
            let row = out.row_mut(r);
            for k in 0..self.group {
                crate::mat::axpy(inv, self.feats.row(slot * self.group + k), row);
            }
        }
        (out, slots)
    }

    /// Splits probe rows into pool residents (with their target slot) and the
    /// rest. The two lists partition 0..labels.len().
    pub fn partition(&self, labels: &[u32]) -> (Vec<(usize, usize)>, Vec<usize>) {
        let mut in_pool = Vec::new();
        let mut out_pool = Vec::new();
        for (row, &label) in labels.iter().enumerate() {
            match self.id_to_slot.get(&label) {
                Some(&slot) => in_pool.push((row, slot)),
                None => out_pool.push(row),
            }
        }
        (in_pool, out_pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, POOL_MAGIC)?;
        binio::write_u32(&mut w, POOL_VERSION)?;
        binio::write_u32(&mut w, self.capacity() as u32)?;
        binio::write_u32(&mut w, self.group as u32)?;
        binio::write_u32(&mut w, self.dim as u32)?;
        binio::write_u32(&mut w, self.fill as u32)?;
        binio::write_u64(&mut w, self.next_age)?;
        binio::write_f64(&mut w, self.scale)?;
        binio::write_f64_slice(&mut w, self.feats.data())?;
        for slot in 0..self.capacity() {
            binio::write_i64(&mut w, self.slot_ids[slot].map_or(-1, |id| id as i64))?;
            binio::write_u64(&mut w, self.ages[slot])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ClassPool> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, POOL_MAGIC, "pool snapshot")?;
        let version = binio::read_u32(&mut r)?;
        if version != POOL_VERSION {
            return Err(Error::Format(format!("unsupported pool version {version}")));
        }
        let capacity = binio::read_u32(&mut r)? as usize;
        let group = binio::read_u32(&mut r)? as usize;
        let dim = binio::read_u32(&mut r)? as usize;
        let fill = binio::read_u32(&mut r)? as usize;
        let next_age = binio::read_u64(&mut r)?;
        let scale = binio::read_f64(&mut r)?;
        let data = binio::read_f64_vec(&mut r, capacity * group * dim)?;
        let mut slot_ids = Vec::with_capacity(capacity);
        let mut ages = Vec::with_capacity(capacity);
        let mut id_to_slot = HashMap::new();
        for slot in 0..capacity {
            let v = binio::read_i64(&mut r)?;
            if v < 0 {
                slot_ids.push(None);
            } else {
                slot_ids.push(Some(v as u32));
                id_to_slot.insert(v as u32, slot);
            }
            ages.push(binio::read_u64(&mut r)?);
        }
        Ok(ClassPool {
            feats: Mat::from_vec(capacity * group, dim, data),
            slot_ids,
            ages,
            next_age,
            id_to_slot,
            fill,
            group,
            dim,
            scale,
        })
    }
}

/// Cosine of one probe row against one slot's mean feature (diagnostics; the
/// training path uses [`ClassPool::logits`]).
pub fn slot_similarity(pool: &ClassPool, probe_row: &[f64], slot: usize) -> f64 {
    let centers = pool.mean_centers();
    dot(probe_row, centers.row(slot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::proptest;

    fn unit_feats(ids: &[u32], group: usize, dim: usize, seed: u64) -> Mat {
        let mut rng = Rng::new(seed ^ 0xfeed);
        let mut m = Mat::zeros(ids.len() * group, dim);
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            for v in row.iter_mut() {
                *v = rng.normal();
            }
            normalize_in_place(row);
        }
        m
    }

    /// Literal shift-style reference: a queue of (id, feature block), oldest
    /// at the front. Residents refresh in place and keep their position; each
    /// new identity shifts out the oldest entry not belonging to the current
    /// batch and appends at the back.
    struct ShiftReference {
        capacity: usize,
        group: usize,
        queue: Vec<(u32, Vec<Vec<f64>>)>,
    }

    impl ShiftReference {
        fn new(capacity: usize, group: usize) -> Self {
            ShiftReference { capacity, group, queue: Vec::new() }
        }

        fn insert_batch(&mut self, ids: &[u32], feats: &Mat) {
            for (i, &id) in ids.iter().enumerate() {
                let block: Vec<Vec<f64>> =
                    (0..self.group).map(|k| feats.row(i * self.group + k).to_vec()).collect();
                if let Some(entry) = self.queue.iter_mut().find(|(qid, _)| *qid == id) {
                    entry.1 = block;
                    continue;
                }
                if self.queue.len() == self.capacity {
                    let victim = self
                        .queue
                        .iter()
                        .position(|(qid, _)| !ids.contains(qid))
                        .expect("batch cannot exceed capacity");
                    self.queue.remove(victim);
                }
                self.queue.push((id, block));
            }
        }
    }

    fn assert_pool_matches_reference(pool: &ClassPool, oracle: &ShiftReference) {
        let order = pool.residency_order();
        assert_eq!(order.len(), oracle.queue.len(), "occupancy differs");
        for ((pid, slot), (oid, block)) in order.iter().zip(&oracle.queue) {
            assert_eq!(pid, oid, "eviction order differs");
            for k in 0..pool.group() {
                assert_eq!(pool.feature_row(*slot, k), block[k].as_slice(), "features differ");
            }
        }
    }

    #[test]
    fn construction_shape_and_determinism() {
        let a = ClassPool::new(4, 2, 8, 30.0, 5).unwrap();
        assert_eq!(a.capacity(), 4);
        assert_eq!(a.fill_count(), 0);
        for slot in 0..4 {
            for k in 0..2 {
                assert!((l2_norm(a.feature_row(slot, k)) - 1.0).abs() < 1e-9);
            }
        }
        let b = ClassPool::new(4, 2, 8, 30.0, 5).unwrap();
        assert_eq!(a.feats, b.feats);
        assert!(ClassPool::new(0, 2, 8, 30.0, 5).is_err());
    }

    #[test]
    fn fifo_by_hand() {
        // C=4, K=1: insert A,B then C,D then E,F -> {E,F,C,D}, A and B evicted.
        let mut pool = ClassPool::new(4, 1, 4, 1.0, 0).unwrap();
        let ab = unit_feats(&[0, 1], 1, 4, 1);
        let cd = unit_feats(&[2, 3], 1, 4, 2);
        let ef = unit_feats(&[4, 5], 1, 4, 3);
        pool.insert_batch(&[0, 1], &ab).unwrap();
        pool.insert_batch(&[2, 3], &cd).unwrap();
        pool.insert_batch(&[4, 5], &ef).unwrap();
        let ids: Vec<Option<u32>> = (0..4).map(|s| pool.resident_id(s)).collect();
        assert_eq!(ids, vec![Some(4), Some(5), Some(2), Some(3)]);
        assert_eq!(pool.slot_of(0), None);
        assert_eq!(pool.slot_of(1), None);
    }

    #[test]
    fn residency_lasts_capacity_over_batch_steps() {
        let (c, b) = (8usize, 2usize);
        let mut pool = ClassPool::new(c, 1, 4, 1.0, 0).unwrap();
        let mut next_id = 0u32;
        let mut inserted_at: HashMap<u32, usize> = HashMap::new();
        for step in 0..50 {
            let ids: Vec<u32> = (0..b as u32).map(|i| next_id + i).collect();
            next_id += b as u32;
            let feats = unit_feats(&ids, 1, 4, step as u64);
            for &id in &ids {
                inserted_at.insert(id, step);
            }
            pool.insert_batch(&ids, &feats).unwrap();
            // Everything inserted within the last C/B steps is resident,
            // anything older is gone.
            for (&id, &t) in &inserted_at {
                let resident = pool.slot_of(id).is_some();
                assert_eq!(resident, step - t < c / b, "id {id} at step {step}");
            }
        }
    }

    #[test]
    fn refresh_keeps_age_and_fill() {
        let mut pool = ClassPool::new(4, 1, 4, 1.0, 0).unwrap();
        pool.insert_batch(&[0, 1], &unit_feats(&[0, 1], 1, 4, 1)).unwrap();
        let fill = pool.fill_count();
        let new_feats = unit_feats(&[0], 1, 4, 99);
        pool.insert_batch(&[0], &new_feats).unwrap();
        assert_eq!(pool.fill_count(), fill);
        let slot = pool.slot_of(0).unwrap();
        assert_eq!(pool.feature_row(slot, 0), new_feats.row(0));
        let order: Vec<u32> = pool.residency_order().iter().map(|(id, _)| *id).collect();
        assert_eq!(order, vec![0, 1], "refresh must not reset queue position");
    }

    #[test]
    fn eviction_never_hits_the_inserting_batch() {
        // Full pool {A, B}; inserting {A, X} refreshes A and must evict B,
        // not the just-refreshed A.
        let mut pool = ClassPool::new(2, 1, 4, 1.0, 0).unwrap();
        pool.insert_batch(&[0, 1], &unit_feats(&[0, 1], 1, 4, 1)).unwrap();
        pool.insert_batch(&[0, 9], &unit_feats(&[0, 9], 1, 4, 2)).unwrap();
        assert!(pool.slot_of(0).is_some());
        assert!(pool.slot_of(9).is_some());
        assert!(pool.slot_of(1).is_none());
        let order: Vec<u32> = pool.residency_order().iter().map(|(id, _)| *id).collect();
        assert_eq!(order, vec![0, 9], "refreshed identity keeps its (older) age");
    }

    #[test]
    fn input_validation() {
        let mut pool = ClassPool::new(3, 1, 4, 1.0, 0).unwrap();
        let feats = unit_feats(&[0, 1, 2, 3], 1, 4, 1);
        assert!(matches!(
            pool.insert_batch(&[0, 1, 2, 3], &feats),
            Err(Error::Capacity(_))
        ));
        let dup = unit_feats(&[0, 0], 1, 4, 1);
        assert!(matches!(pool.insert_batch(&[0, 0], &dup), Err(Error::Input(_))));
        let mut bad = unit_feats(&[0], 1, 4, 1);
        bad.row_mut(0)[0] *= 2.0;
        assert!(matches!(pool.insert_batch(&[0], &bad), Err(Error::Input(_))));
    }

    #[test]
    fn logits_arithmetic() {
        let mut pool = ClassPool::new(2, 2, 4, 1.0, 0).unwrap();
        // Slot 0: probe itself in both K rows -> logit 1. Slot 1: rows with
        // cosines 0.8 and 0.6 -> logit 0.7.
        let probe = Mat::from_vec(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
        let mut feats = Mat::zeros(4, 4);
        feats.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        feats.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        feats.row_mut(2).copy_from_slice(&[0.8, 0.6, 0.0, 0.0]);
        feats.row_mut(3).copy_from_slice(&[0.6, 0.8, 0.0, 0.0]);
        pool.insert_batch(&[10, 11], &feats).unwrap();
        let p = pool.logits(&probe).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((p.get(0, 1) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn logits_orthogonal_probe_and_sentinel() {
        let mut pool = ClassPool::new(3, 1, 4, 30.0, 0).unwrap();
        let mut feats = Mat::zeros(1, 4);
        feats.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        pool.insert_batch(&[7], &feats).unwrap();
        let probe = Mat::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]);
        let p = pool.logits(&probe).unwrap();
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(0, 1), EMPTY_SENTINEL * 30.0);
        assert_eq!(p.get(0, 2), EMPTY_SENTINEL * 30.0);
    }

    #[test]
    fn mean_centers_cases() {
        // K=1: centers equal the stored rows exactly.
        let mut pool = ClassPool::new(2, 1, 3, 1.0, 0).unwrap();
        let f = unit_feats(&[0, 1], 1, 3, 4);
        pool.insert_batch(&[0, 1], &f).unwrap();
        let c = pool.mean_centers();
        assert_eq!(c.row(0), f.row(0));
        assert_eq!(c.row(1), f.row(1));

        // K=2 with opposite rows cancels; equal rows are idempotent.
        let mut pool2 = ClassPool::new(1, 2, 3, 1.0, 0).unwrap();
        let mut f2 = Mat::zeros(2, 3);
        f2.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0]);
        f2.row_mut(1).copy_from_slice(&[-1.0, 0.0, 0.0]);
        pool2.insert_batch(&[5], &f2).unwrap();
        assert_eq!(pool2.mean_centers().row(0), &[0.0, 0.0, 0.0]);

        let mut pool3 = ClassPool::new(1, 2, 3, 1.0, 0).unwrap();
        let mut f3 = Mat::zeros(2, 3);
        f3.row_mut(0).copy_from_slice(&[0.0, 1.0, 0.0]);
        f3.row_mut(1).copy_from_slice(&[0.0, 1.0, 0.0]);
        pool3.insert_batch(&[6], &f3).unwrap();
        assert_eq!(pool3.mean_centers().row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn partition_boundaries() {
        let mut pool = ClassPool::new(4, 1, 4, 1.0, 0).unwrap();
        pool.insert_batch(&[1, 2], &unit_feats(&[1, 2], 1, 4, 0)).unwrap();
        let (inp, outp) = pool.partition(&[1, 2, 1]);
        assert_eq!(outp, Vec::<usize>::new());
        assert_eq!(inp.len(), 3);
        assert_eq!(inp[0].1, pool.slot_of(1).unwrap());
        let (inp2, outp2) = pool.partition(&[9, 8]);
        assert!(inp2.is_empty());
        assert_eq!(outp2, vec![0, 1]);
    }

    #[test]
    fn state_bytes_formula() {
        let pool = ClassPool::new(1000, 2, 32, 30.0, 0).unwrap();
        assert_eq!(pool.state_bytes(), 1000 * 2 * 32 * 8 + 1000 * 8);
        assert_eq!(pool.state_bytes(), 512_000 + 8_000);
    }

    #[test]
    fn logits_linear_in_probe_and_k_permutation_invariant() {
        let mut pool = ClassPool::new(3, 2, 5, 7.0, 2).unwrap();
        let ids = [4u32, 5, 6];
        let f = unit_feats(&ids, 2, 5, 9);
        pool.insert_batch(&ids, &f).unwrap();

        let a = unit_feats(&[0], 1, 5, 10);
        let b = unit_feats(&[0], 1, 5, 11);
        let mut combo = Mat::zeros(1, 5);
        for j in 0..5 {
            combo.set(0, j, 2.0 * a.get(0, j) - 0.5 * b.get(0, j));
        }
        let pa = pool.logits(&a).unwrap();
        let pb = pool.logits(&b).unwrap();
        let pc = pool.logits(&combo).unwrap();
        for c in 0..3 {
            assert!((pc.get(0, c) - (2.0 * pa.get(0, c) - 0.5 * pb.get(0, c))).abs() < 1e-9);
        }

        // Swap the K rows of every identity: logits unchanged.
        let mut swapped = Mat::zeros(6, 5);
        for i in 0..3 {
            swapped.row_mut(i * 2).copy_from_slice(f.row(i * 2 + 1));
            swapped.row_mut(i * 2 + 1).copy_from_slice(f.row(i * 2));
        }
        let mut pool2 = ClassPool::new(3, 2, 5, 7.0, 2).unwrap();
        pool2.insert_batch(&ids, &swapped).unwrap();
        let p1 = pool.logits(&a).unwrap();
        let p2 = pool2.logits(&a).unwrap();
        for c in 0..3 {
            assert!((p1.get(0, c) - p2.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.dcpt");
        let mut pool = ClassPool::new(5, 2, 6, 12.0, 3).unwrap();
        pool.insert_batch(&[3, 9], &unit_feats(&[3, 9], 2, 6, 8)).unwrap();
        pool.save(&path).unwrap();
        let back = ClassPool::load(&path).unwrap();
        assert_eq!(back.feats, pool.feats);
        assert_eq!(back.slot_ids, pool.slot_ids);
        assert_eq!(back.ages, pool.ages);
        assert_eq!(back.next_age, pool.next_age);
        assert_eq!(back.fill, pool.fill);
        assert_eq!(back.scale, pool.scale);
    }

    proptest! {
        /// Ring-buffer semantics match the literal shift reference across
        /// arbitrary insertion sequences, including resident refreshes.
        #[test]
        fn ring_matches_shift_reference(
            capacity in 1usize..12,
            group in 1usize..3,
            seed in 0u64..500,
            n_batches in 1usize..40,
        ) {
            let dim = 4;
            let mut pool = ClassPool::new(capacity, group, dim, 1.0, seed).unwrap();
            let mut oracle = ShiftReference::new(capacity, group);
            let mut rng = Rng::new(seed);
            for step in 0..n_batches {
                let b = 1 + rng.below(capacity.min(4));
                let mut ids: Vec<u32> = Vec::new();
                while ids.len() < b {
                    let id = rng.below(capacity * 3) as u32;
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                let feats = unit_feats(&ids, group, dim, (seed << 8) ^ step as u64);
                pool.insert_batch(&ids, &feats).unwrap();
                oracle.insert_batch(&ids, &feats);
                assert_pool_matches_reference(&pool, &oracle);
            }
        }
    }
}
