//! Reproducible synthetic identity datasets.
//!
//! Each identity is a unit-norm cluster center on the input hypersphere;
//! samples are the center plus isotropic Gaussian noise, re-normalized.
//! Per-identity counts are drawn uniformly from [k_min, k_max] (or from a
//! truncated long-tail distribution behind a flag), which is what the loader
//! update-speed analysis cares about. The last `holdout_per_id` samples of
//! each identity are reserved for verification pairs and never trained on.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::mat::{normalize_in_place, Mat};
use crate::rng::{tags, Rng};

const DATASET_MAGIC: &[u8; 4] = b"DCPD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_id: usize,
    pub d_in: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub noise_sigma: f64,
    pub holdout_per_id: usize,
    pub seed: u64,
    /// Long-tail (Zipf-like) per-identity counts instead of uniform.
    pub long_tail: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_id: 1000,
            d_in: 64,
            k_min: 2,
            k_max: 20,
            noise_sigma: 0.1,
            holdout_per_id: 2,
            seed: 1,
            long_tail: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_id == 0 {
            return Err(Error::Config("n_id must be >= 1".into()));
        }
        if self.d_in < 2 {
            return Err(Error::Config("d_in must be >= 2".into()));
        }
        if self.k_min < 1 {
            return Err(Error::Config("k_min must be >= 1".into()));
        }
        if self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "k_min ({}) must not exceed k_max ({})",
                self.k_min, self.k_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Labeled unit-norm input vectors grouped by identity.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Mat,
    pub labels: Vec<u32>,
    /// For each identity, its sample indices in generation order.
    pub per_identity_index: Vec<Vec<usize>>,
    /// Average images per identity, n_total / n_id.
    pub k_bar: f64,
    /// Trailing samples of each identity reserved for evaluation.
    pub holdout_per_id: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn n_id(&self) -> usize {
        self.per_identity_index.len()
    }

    pub fn n_total(&self) -> usize {
        self.labels.len()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn identity_count(&self, id: usize) -> usize {
        self.per_identity_index[id].len()
    }

    /// Held-out sample indices of one identity (empty if it has fewer than
    /// `holdout_per_id` samples).
    pub fn holdout_of(&self, id: usize) -> &[usize] {
        let idx = &self.per_identity_index[id];
        if idx.len() < self.holdout_per_id {
            &[]
        } else {
            &idx[idx.len() - self.holdout_per_id..]
        }
    }

    /// Training sample indices of one identity.
    pub fn train_of(&self, id: usize) -> &[usize] {
        let idx = &self.per_identity_index[id];
        if idx.len() < self.holdout_per_id {
            idx
        } else {
            &idx[..idx.len() - self.holdout_per_id]
        }
    }

    /// All training sample indices, ascending.
    pub fn train_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_total());
        for id in 0..self.n_id() {
            out.extend_from_slice(self.train_of(id));
        }
        out.sort_unstable();
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, DATASET_MAGIC)?;
        binio::write_u32(&mut w, DATASET_VERSION)?;
        binio::write_u32(&mut w, self.n_id() as u32)?;
        binio::write_u32(&mut w, self.d_in() as u32)?;
        binio::write_u64(&mut w, self.n_total() as u64)?;
        binio::write_u64(&mut w, self.seed)?;
        for &l in &self.labels {
            binio::write_u32(&mut w, l)?;
        }
        binio::write_f64_slice(&mut w, self.inputs.data())?;
        w.flush()?;
        Ok(())
    }

    /// Loads a dataset file. The holdout split is not part of the format;
    /// callers that evaluate set it afterwards via [`Dataset::with_holdout`].
    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, DATASET_MAGIC, "dataset")?;
        let version = binio::read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n_id = binio::read_u32(&mut r)? as usize;
        let d_in = binio::read_u32(&mut r)? as usize;
        let n_total = binio::read_u64(&mut r)? as usize;
        let seed = binio::read_u64(&mut r)?;
        let mut labels = Vec::with_capacity(n_total);
        for _ in 0..n_total {
            let l = binio::read_u32(&mut r)?;
            if l as usize >= n_id {
                return Err(Error::Format(format!("label {l} out of range (n_id={n_id})")));
            }
            labels.push(l);
        }
        let data = binio::read_f64_vec(&mut r, n_total * d_in)?;
        let inputs = Mat::from_vec(n_total, d_in, data);
        let per_identity_index = index_by_identity(&labels, n_id);
        let k_bar = n_total as f64 / n_id as f64;
        Ok(Dataset { inputs, labels, per_identity_index, k_bar, holdout_per_id: 0, seed })
    }

    pub fn with_holdout(mut self, holdout_per_id: usize) -> Dataset {
        self.holdout_per_id = holdout_per_id;
        self
    }

    /// CSV export: header `label,v0,...`, one row per sample.
    pub fn export_csv(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "label")?;
        for j in 0..self.d_in() {
            write!(w, ",v{j}")?;
        }
        writeln!(w)?;
        for i in 0..self.n_total() {
            write!(w, "{}", self.labels[i])?;
            for v in self.inputs.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn index_by_identity(labels: &[u32], n_id: usize) -> Vec<Vec<usize>> {
    let mut per = vec![Vec::new(); n_id];
    for (i, &l) in labels.iter().enumerate() {
        per[l as usize].push(i);
    }
    per
}

fn draw_count(cfg: &SynthConfig, rng: &mut Rng) -> usize {
    if !cfg.long_tail || cfg.k_min == cfg.k_max {
        return rng.range_inclusive(cfg.k_min, cfg.k_max);
    }
    // Truncated Zipf over [k_min, k_max]: weight 1/rank, rank 1 at k_min,
    // so small counts dominate.
    let span = cfg.k_max - cfg.k_min + 1;
    let total: f64 = (1..=span).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.next_f64() * total;
    for r in 1..=span {
        u -= 1.0 / r as f64;
        if u <= 0.0 {
            return cfg.k_min + r - 1;
        }
    }
    cfg.k_max
}

/// Generates a dataset; bit-identical for equal configs.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut center_rng = Rng::stream(cfg.seed, tags::DATA_CENTERS);
    let mut count_rng = Rng::stream(cfg.seed, tags::DATA_COUNTS);
    let mut noise_rng = Rng::stream(cfg.seed, tags::DATA_NOISE);

    let mut centers = Mat::zeros(cfg.n_id, cfg.d_in);
    for id in 0..cfg.n_id {
        let row = centers.row_mut(id);
        for v in row.iter_mut() {
            *v = center_rng.normal();
        }
        normalize_in_place(row);
    }

    let counts: Vec<usize> = (0..cfg.n_id).map(|_| draw_count(cfg, &mut count_rng)).collect();
    let n_total: usize = counts.iter().sum();

    let mut inputs = Mat::zeros(n_total, cfg.d_in);
    let mut labels = Vec::with_capacity(n_total);
    let mut row = 0;
    for (id, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            let out = inputs.row_mut(row);
            if cfg.noise_sigma == 0.0 {
                out.copy_from_slice(centers.row(id));
            } else {
                for (o, c) in out.iter_mut().zip(centers.row(id)) {
                    *o = c + cfg.noise_sigma * noise_rng.normal();
                }
                normalize_in_place(out);
            }
            labels.push(id as u32);
            row += 1;
        }
    }

    let per_identity_index = index_by_identity(&labels, cfg.n_id);
    Ok(Dataset {
        inputs,
        labels,
        per_identity_index,
        k_bar: n_total as f64 / cfg.n_id as f64,
        holdout_per_id: cfg.holdout_per_id,
        seed: cfg.seed,
    })
}

/// Verification pairs drawn from held-out samples only.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    /// (sample, sample) with equal labels.
    pub genuine: Vec<(usize, usize)>,
    /// (sample, sample) with unequal labels.
    pub impostor: Vec<(usize, usize)>,
}

/// Draws `n_genuine` same-identity pairs (distinct held-out samples of one
/// identity) and `n_impostor` cross-identity pairs (first held-out sample of
/// each side). No pair repeats; requesting every possible pair enumerates
/// them all deterministically.
pub fn split_eval_pairs(
    ds: &Dataset,
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<PairSet> {
    let mut rng = Rng::stream(seed, tags::EVAL_PAIRS);

    // Identities eligible for genuine pairs need >= 2 held-out samples.
    let genuine_ids: Vec<usize> =
        (0..ds.n_id()).filter(|&id| ds.holdout_of(id).len() >= 2).collect();
    let pairs_per_id: Vec<usize> = genuine_ids
        .iter()
        .map(|&id| {
            let h = ds.holdout_of(id).len();
            h * (h - 1) / 2
        })
        .collect();
    let total_genuine: usize = pairs_per_id.iter().sum();
    if n_genuine > total_genuine {
        return Err(Error::Pairing(format!(
            "requested {n_genuine} genuine pairs but only {total_genuine} exist \
             (holdout_per_id={})",
            ds.holdout_per_id
        )));
    }

    let genuine = if n_genuine == total_genuine {
        let mut all = Vec::with_capacity(total_genuine);
        for &id in &genuine_ids {
            let h = ds.holdout_of(id);
            for a in 0..h.len() {
                for b in a + 1..h.len() {
                    all.push((h[a], h[b]));
                }
            }
        }
        all
    } else {
        let mut chosen = HashSet::new();
        let mut out = Vec::with_capacity(n_genuine);
        while out.len() < n_genuine {
            let id = genuine_ids[rng.below(genuine_ids.len())];
            let h = ds.holdout_of(id);
            let a = rng.below(h.len());
            let mut b = rng.below(h.len() - 1);
            if b >= a {
                b += 1;
            }
            let pair = (h[a.min(b)], h[a.max(b)]);
            if chosen.insert(pair) {
                out.push(pair);
            }
        }
        out
    };

    // Impostor pairs use the first held-out sample of each identity.
    let impostor_ids: Vec<usize> =
        (0..ds.n_id()).filter(|&id| !ds.holdout_of(id).is_empty()).collect();
    let m = impostor_ids.len();
    let total_impostor = m * m.saturating_sub(1) / 2;
    if n_impostor > total_impostor {
        return Err(Error::Pairing(format!(
            "requested {n_impostor} impostor pairs but only {total_impostor} exist"
        )));
    }
    let impostor = if n_impostor == total_impostor {
        let mut all = Vec::with_capacity(total_impostor);
        for i in 0..m {
            for j in i + 1..m {
                all.push((ds.holdout_of(impostor_ids[i])[0], ds.holdout_of(impostor_ids[j])[0]));
            }
        }
        all
    } else {
        let mut chosen = HashSet::new();
        let mut out = Vec::with_capacity(n_impostor);
        while out.len() < n_impostor {
            let i = rng.below(m);
            let mut j = rng.below(m - 1);
            if j >= i {
                j += 1;
            }
            let key = (i.min(j), i.max(j));
            if chosen.insert(key) {
                out.push((ds.holdout_of(impostor_ids[key.0])[0], ds.holdout_of(impostor_ids[key.1])[0]));
            }
        }
        out
    };

    Ok(PairSet { genuine, impostor })
}
