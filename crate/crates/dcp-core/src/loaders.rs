//! Dual data loaders and mixed-batch assembly.
//!
//! The instance loader walks a reshuffled permutation of all training
//! samples, so one instance-epoch touches every sample exactly once. The
//! identity loader walks a permutation of identities (without replacement
//! within its own epoch) and draws a fixed number of images per selected
//! identity. A training batch mixes both: each side (probe/gallery) gets half
//! of the instance rows, and the identity rows are split so probe and gallery
//! carry the same identity set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{tags, Rng};
use crate::synth_data::Dataset;

/// Walks all training samples in shuffled order, reshuffling at wrap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InstanceLoader {
    order: Vec<usize>,
    cursor: usize,
    epochs_completed: usize,
    rng: Rng,
}

impl InstanceLoader {
    pub fn new(indices: Vec<usize>, seed: u64) -> Result<InstanceLoader> {
        if indices.is_empty() {
            return Err(Error::Config("instance loader needs at least one sample".into()));
        }
        let mut rng = Rng::stream(seed, tags::LOADER_INSTANCE);
        let mut order = indices;
        rng.shuffle(&mut order);
        Ok(InstanceLoader { order, cursor: 0, epochs_completed: 0, rng })
    }

    pub fn for_dataset(ds: &Dataset, seed: u64) -> Result<InstanceLoader> {
        InstanceLoader::new(ds.train_indices(), seed)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    /// Next `b` sample indices, without replacement within an epoch. A batch
    /// may straddle the epoch boundary; the tail comes from the fresh
    /// permutation.
    pub fn next_batch(&mut self, b: usize) -> Result<Vec<usize>> {
        if b == 0 || b > self.order.len() {
            return Err(Error::Config(format!(
                "instance batch {b} outside 1..={}",
                self.order.len()
            )));
        }
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor == self.order.len() {
                self.epochs_completed += 1;
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let take = (b - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        Ok(out)
    }
}

/// One identity-loader draw: the selected identities and the sample indices
/// drawn for each.
#[derive(Clone, Debug)]
pub struct IdentityBatch {
    pub ids: Vec<u32>,
    pub samples: Vec<Vec<usize>>,
}

/// Walks identities without replacement within an identity-epoch, drawing
/// `images_per_identity` samples per selected identity (with replacement only
/// when the identity has fewer training images than requested).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityLoader {
    order: Vec<u32>,
    per_id: Vec<Vec<usize>>,
    cursor: usize,
    epochs_completed: usize,
    images_per_identity: usize,
    rng: Rng,
}

impl IdentityLoader {
    pub fn new(ds: &Dataset, images_per_identity: usize, seed: u64) -> Result<IdentityLoader> {
        if images_per_identity == 0 {
            return Err(Error::Config("images_per_identity must be >= 1".into()));
        }
        let mut order = Vec::new();
        let mut per_id = vec![Vec::new(); ds.n_id()];
        for id in 0..ds.n_id() {
            let train = ds.train_of(id);
            if !train.is_empty() {
                order.push(id as u32);
                per_id[id] = train.to_vec();
            }
        }
        if order.is_empty() {
            return Err(Error::Config("no identity has any training sample".into()));
        }
        let mut rng = Rng::stream(seed, tags::LOADER_IDENTITY);
        rng.shuffle(&mut order);
        Ok(IdentityLoader {
            order,
            per_id,
            cursor: 0,
            epochs_completed: 0,
            images_per_identity,
            rng,
        })
    }

    /// Number of identities with at least one training sample.
    pub fn n_identities(&self) -> usize {
        self.order.len()
    }

    pub fn epochs_completed(&self) -> usize {
        self.epochs_completed
    }

    pub fn images_per_identity(&self) -> usize {
        self.images_per_identity
    }

    pub fn next_batch(&mut self, b_id: usize) -> Result<IdentityBatch> {
        if b_id == 0 || b_id > self.order.len() {
            return Err(Error::Config(format!(
                "identity batch {b_id} outside 1..={}",
                self.order.len()
            )));
        }
        let mut ids: Vec<u32> = Vec::with_capacity(b_id);
        while ids.len() < b_id {
            if self.cursor == self.order.len() {
                self.epochs_completed += 1;
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            // A batch straddling the epoch wrap could re-draw an identity
            // already in this batch; defer such duplicates deeper into the
            // fresh permutation (they stay in the epoch, drawn later).
            if ids.contains(&self.order[self.cursor]) {
                let mut j = self.cursor + 1;
                while ids.contains(&self.order[j]) {
                    j += 1;
                }
                self.order.swap(self.cursor, j);
            }
            ids.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let mut samples = Vec::with_capacity(b_id);
        for &id in &ids {
            let pool = &self.per_id[id as usize];
            let draw = if pool.len() >= self.images_per_identity {
                let mut copy = pool.clone();
                self.rng.draw_distinct(&mut copy, self.images_per_identity)
            } else {
                (0..self.images_per_identity).map(|_| pool[self.rng.below(pool.len())]).collect()
            };
            samples.push(draw);
        }
        Ok(IdentityBatch { ids, samples })
    }
}

/// How identity images are split between probe and gallery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    /// K+1 images per identity: one probe image, K gallery images, so every
    /// pool sub-slot receives a distinct fresh feature.
    KFill,
    /// Two images per identity: one probe, one gallery; the single gallery
    /// feature is replicated across the pool's K axis at insertion.
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    Instance,
    Identity,
}

/// One training step's inputs. Probe and gallery sides both consist of an
/// instance half and the identity rows of the same identity set.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub probe_inputs: Mat,
    pub probe_labels: Vec<u32>,
    pub gallery_inputs: Mat,
    pub gallery_labels: Vec<u32>,
    pub batch_identities: Vec<u32>,
    /// For each batch identity, its gallery row indices.
    pub gallery_layout: Vec<Vec<usize>>,
    pub probe_origin: Vec<RowOrigin>,
    pub gallery_origin: Vec<RowOrigin>,
}

impl MixedBatch {
    pub fn probe_rows(&self) -> usize {
        self.probe_inputs.rows()
    }

    pub fn gallery_rows(&self) -> usize {
        self.gallery_inputs.rows()
    }
}

/// Builds a mixed batch: instance indices split into equal probe/gallery
/// halves, identity draws split per `mode`.
pub fn assemble(
    inst_indices: &[usize],
    id_batch: &IdentityBatch,
    mode: BatchMode,
    ds: &Dataset,
) -> Result<MixedBatch> {
    if inst_indices.len() % 2 != 0 {
        return Err(Error::Assembly(format!(
            "instance row count {} is odd",
            inst_indices.len()
        )));
    }
    if inst_indices.is_empty() && id_batch.ids.is_empty() {
        return Err(Error::Assembly("empty batch".into()));
    }
    for (i, s) in id_batch.samples.iter().enumerate() {
        let ok = match mode {
            BatchMode::Pair => s.len() == 2,
            BatchMode::KFill => s.len() >= 2,
        };
        if !ok {
            return Err(Error::Assembly(format!(
                "identity {} carries {} images, incompatible with {mode:?}",
                id_batch.ids[i],
                s.len()
            )));
        }
    }

    let half = inst_indices.len() / 2;
    let mut probe_idx: Vec<usize> = inst_indices[..half].to_vec();
    let mut gallery_idx: Vec<usize> = inst_indices[half..].to_vec();
    let mut probe_origin = vec![RowOrigin::Instance; half];
    let mut gallery_origin = vec![RowOrigin::Instance; half];
    let mut gallery_layout = Vec::with_capacity(id_batch.ids.len());
    for s in &id_batch.samples {
        probe_idx.push(s[0]);
        probe_origin.push(RowOrigin::Identity);
        let start = gallery_idx.len();
        gallery_idx.extend_from_slice(&s[1..]);
        gallery_layout.push((start..start + s.len() - 1).collect());
        for _ in 1..s.len() {
            gallery_origin.push(RowOrigin::Identity);
        }
    }

    let probe_labels: Vec<u32> = probe_idx.iter().map(|&i| ds.labels[i]).collect();
    let gallery_labels: Vec<u32> = gallery_idx.iter().map(|&i| ds.labels[i]).collect();
    Ok(MixedBatch {
        probe_inputs: ds.inputs.gather_rows(&probe_idx),
        probe_labels,
        gallery_inputs: ds.inputs.gather_rows(&gallery_idx),
        gallery_labels,
        batch_identities: id_batch.ids.clone(),
        gallery_layout,
        probe_origin,
        gallery_origin,
    })
}
