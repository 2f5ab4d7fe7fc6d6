//! Verification metrics, loader update-speed analysis, and the classifier
//! memory / training throughput benchmarks.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embed_net::EmbedNet;
use crate::error::{Error, Result};
use crate::loaders::{IdentityLoader, InstanceLoader};
use crate::mat::{dot, Mat};
use crate::rng::tags;
use crate::synth_data::{generate, Dataset, PairSet, SynthConfig};
use crate::trainer::{Method, TrainConfig, Trainer};

pub const FAR_LEVELS: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub far: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyResult {
    pub auc: f64,
    /// (FAR level, TPR) rows at the desk-scale levels.
    pub tpr_at_far: Vec<(f64, f64)>,
    /// Full threshold sweep, FAR nondecreasing.
    pub roc: Vec<RocPoint>,
    pub n_genuine: usize,
    pub n_impostor: usize,
}

/// ROC sweep over all distinct score thresholds (ties grouped), plus the
/// trapezoidal AUC of that curve.
pub fn roc_from_scores(genuine: &[f64], impostor: &[f64]) -> Result<(Vec<RocPoint>, f64)> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Eval("ROC needs both genuine and impostor scores".into()));
    }
    if genuine.iter().chain(impostor).any(|v| !v.is_finite()) {
        return Err(Error::Eval("non-finite similarity score".into()));
    }
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let (n_g, n_i) = (genuine.len() as f64, impostor.len() as f64);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: score, tpr: tp as f64 / n_g, far: fp as f64 / n_i });
    }
    let mut auc = 0.0;
    let (mut prev_far, mut prev_tpr) = (0.0, 0.0);
    for p in &points {
        auc += (p.far - prev_far) * (p.tpr + prev_tpr) / 2.0;
        (prev_far, prev_tpr) = (p.far, p.tpr);
    }
    Ok((points, auc))
}

/// Rank-statistic AUC (ties get half credit); cross-checks the sweep.
pub fn mann_whitney_auc(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_genuine = 0.0;
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        let start = i;
        let mut genuine_in_tie = 0usize;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                genuine_in_tie += 1;
            }
            i += 1;
        }
        // Average rank of the tie group (ranks are 1-based).
        let avg_rank = (start + 1 + i) as f64 / 2.0;
        rank_sum_genuine += avg_rank * genuine_in_tie as f64;
    }
    let (n_g, n_i) = (genuine.len() as f64, impostor.len() as f64);
    (rank_sum_genuine - n_g * (n_g + 1.0) / 2.0) / (n_g * n_i)
}

/// Largest TPR attainable at false-accept rate <= `level`.
pub fn tpr_at_far(points: &[RocPoint], level: f64) -> f64 {
    let mut best = 0.0f64;
    for p in points {
        if p.far <= level {
            best = best.max(p.tpr);
        }
    }
    best
}

/// Embeds the pair samples with `net` and scores cosine similarity per pair.
pub fn verify(net: &EmbedNet, ds: &Dataset, pairs: &PairSet) -> Result<VerifyResult> {
    if pairs.genuine.is_empty() || pairs.impostor.is_empty() {
        return Err(Error::Eval("both genuine and impostor pairs are required".into()));
    }
    let mut index_of: HashMap<usize, usize> = HashMap::new();
    let mut uniq: Vec<usize> = Vec::new();
    for &(a, b) in pairs.genuine.iter().chain(&pairs.impostor) {
        for s in [a, b] {
            index_of.entry(s).or_insert_with(|| {
                uniq.push(s);
                uniq.len() - 1
            });
        }
    }
    let mut embeddings = Mat::zeros(uniq.len(), net.output_dim());
    for chunk in uniq.chunks(512) {
        let rows = ds.inputs.gather_rows(chunk);
        let out = net.forward_eval(&rows)?;
        let base = index_of[&chunk[0]];
        for r in 0..out.rows() {
            embeddings.row_mut(base + r).copy_from_slice(out.row(r));
        }
    }
    let score = |&(a, b): &(usize, usize)| dot(embeddings.row(index_of[&a]), embeddings.row(index_of[&b]));
    let genuine: Vec<f64> = pairs.genuine.iter().map(score).collect();
    let impostor: Vec<f64> = pairs.impostor.iter().map(score).collect();
    let (roc, auc) = roc_from_scores(&genuine, &impostor)?;
    let tpr = FAR_LEVELS.iter().map(|&lvl| (lvl, tpr_at_far(&roc, lvl))).collect();
    Ok(VerifyResult {
        auc,
        tpr_at_far: tpr,
        roc,
        n_genuine: genuine.len(),
        n_impostor: impostor.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoaderMode {
    InstanceOnly,
    IdentityOnly,
    Dual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpdateSpeedResult {
    pub mode: LoaderMode,
    pub batch: usize,
    pub steps: usize,
    /// Center-refresh events per identity over the simulated run.
    pub refresh_counts: Vec<u64>,
    pub min: u64,
    pub mean: f64,
    pub max: u64,
    /// Update-speed bounds k_bar*n_id/(M*k_max) .. k_bar*n_id/(M*k_min).
    pub bound_lower: f64,
    pub bound_upper: f64,
}

/// Simulates the chosen loader(s) for `steps` draws of `batch` rows, counting
/// how often each identity's center would refresh (any of its images drawn on
/// the gallery side). Dual mode splits the batch half instance, half identity.
pub fn update_speed_sim(
    ds: &Dataset,
    mode: LoaderMode,
    batch: usize,
    steps: usize,
    seed: u64,
) -> Result<UpdateSpeedResult> {
    if batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let n_id = ds.n_id();
    let mut counts = vec![0u64; n_id];
    let (inst_rows, id_rows) = match mode {
        LoaderMode::InstanceOnly => (batch, 0),
        LoaderMode::IdentityOnly => (0, batch),
        LoaderMode::Dual => (batch / 2, batch - batch / 2),
    };
    let mut inst = if inst_rows > 0 { Some(InstanceLoader::for_dataset(ds, seed)?) } else { None };
    let mut ident = if id_rows > 0 { Some(IdentityLoader::new(ds, 1, seed)?) } else { None };
    for _ in 0..steps {
        if let Some(l) = &mut inst {
            for idx in l.next_batch(inst_rows)? {
                counts[ds.labels[idx] as usize] += 1;
            }
        }
        if let Some(l) = &mut ident {
            for id in l.next_batch(id_rows)?.ids {
                counts[id as usize] += 1;
            }
        }
    }
    let k_max = (0..n_id).map(|i| ds.identity_count(i)).max().unwrap_or(1) as f64;
    let k_min = (0..n_id).map(|i| ds.identity_count(i)).min().unwrap_or(1).max(1) as f64;
    let min = *counts.iter().min().unwrap();
    let max = *counts.iter().max().unwrap();
    let mean = counts.iter().sum::<u64>() as f64 / n_id as f64;
    Ok(UpdateSpeedResult {
        mode,
        batch,
        steps,
        min,
        mean,
        max,
        refresh_counts: counts,
        bound_lower: ds.k_bar * n_id as f64 / (batch as f64 * k_max),
        bound_upper: ds.k_bar * n_id as f64 / (batch as f64 * k_min),
    })
}

/// Instance-only loader: whole epochs until every identity has refreshed at
/// least `target` times; returns the epoch count at which each identity
/// crossed the target.
pub fn instance_epochs_to_target(ds: &Dataset, target: u64, seed: u64) -> Result<Vec<usize>> {
    let n_id = ds.n_id();
    let mut counts = vec![0u64; n_id];
    let mut crossed = vec![0usize; n_id];
    let mut pending = n_id;
    let mut loader = InstanceLoader::for_dataset(ds, seed)?;
    let n = loader.len();
    let mut epoch = 0usize;
    while pending > 0 {
        epoch += 1;
        let mut seen = 0;
        while seen < n {
            let b = 128.min(n - seen);
            for idx in loader.next_batch(b)? {
                let id = ds.labels[idx] as usize;
                counts[id] += 1;
                if crossed[id] == 0 && counts[id] >= target {
                    crossed[id] = epoch;
                    pending -= 1;
                }
            }
            seen += b;
        }
    }
    Ok(crossed)
}

/// Classifier-state footprint in bytes for one method.
pub fn classifier_state_bytes(method: Method, n_id: usize, c: usize, k: usize, d: usize) -> u64 {
    match method {
        Method::Fc | Method::PartialFc => (n_id * d * 8) as u64,
        Method::Dcp => (c * k * d * 8 + c * 8) as u64,
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub n_ids: Vec<usize>,
    pub pool_size: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub instance_batch: usize,
    pub identity_batch: usize,
    /// Timed trials per row (after one warm-up trial). At least 3.
    pub trials: usize,
    /// Steps per trial; 0 calibrates so a trial lasts >= min_trial_secs.
    pub steps_per_trial: usize,
    pub min_trial_secs: f64,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec![Method::Dcp, Method::Fc],
            n_ids: vec![1_000, 10_000],
            pool_size: 1_000,
            k: 2,
            embed_dim: 32,
            d_in: 16,
            hidden: vec![64],
            instance_batch: 32,
            identity_batch: 16,
            trials: 3,
            steps_per_trial: 0,
            min_trial_secs: 0.2,
            threads: 1,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub n_id: usize,
    pub classifier_state_bytes: u64,
    pub steps_per_sec_mean: f64,
    pub steps_per_sec_std: f64,
    /// Fastest trial (minimum-time estimate; least scheduler interference).
    pub steps_per_sec_best: f64,
    pub images_per_sec_mean: f64,
    pub images_per_sec_std: f64,
    pub trials: usize,
    pub steps_per_trial: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

fn bench_dataset(n_id: usize, d_in: usize, seed: u64) -> Result<Dataset> {
    generate(&SynthConfig {
        n_id,
        d_in,
        k_min: 2,
        k_max: 2,
        noise_sigma: 0.05,
        holdout_per_id: 0,
        seed: seed ^ tags::BENCH_DATA,
        long_tail: false,
    })
}

fn bench_train_config(cfg: &BenchConfig, method: Method, n_id: usize) -> TrainConfig {
    TrainConfig {
        method,
        instance_batch: cfg.instance_batch,
        identity_batch: cfg.identity_batch,
        pool_size: cfg.pool_size.min(n_id),
        k: cfg.k,
        embed_dim: cfg.embed_dim,
        hidden: cfg.hidden.clone(),
        epochs: 1,
        lr_decay_epochs: vec![],
        sync_momentum: 0.9,
        seed: cfg.seed,
        ..TrainConfig::default()
    }
}

fn run_steps(trainer: &mut Trainer, steps: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..steps {
        let batch = trainer.next_batch()?;
        trainer.step(&batch)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Measures steps/sec (and images/sec) for every (method, n_id) grid point:
/// one calibration/warm-up trial, then `trials` timed trials. Step counts
/// auto-increase when a trial is too short to time reliably.
pub fn throughput_bench(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.trials < 3 {
        return Err(Error::Config("bench needs at least 3 timed trials".into()));
    }
    if cfg.methods.is_empty() || cfg.n_ids.is_empty() {
        return Err(Error::Config("bench grid is empty".into()));
    }
    let mut rows = Vec::new();
    for &n_id in &cfg.n_ids {
        let ds = bench_dataset(n_id, cfg.d_in, cfg.seed)?;
        for &method in &cfg.methods {
            let tc = bench_train_config(cfg, method, n_id);
            let images_per_step = {
                let probe = tc.instance_batch / 2 + tc.identity_batch;
                let gallery = tc.instance_batch / 2
                    + tc.identity_batch * (tc.resolved_images_per_identity() - 1);
                match method {
                    Method::Dcp => probe + gallery,
                    Method::Fc | Method::PartialFc => probe,
                }
            };

            let mut steps = cfg.steps_per_trial;
            if steps == 0 {
                let mut probe_trainer = Trainer::with_threads(tc.clone(), &ds, cfg.threads)?;
                let t1 = run_steps(&mut probe_trainer, 1)?.max(1e-9);
                steps = ((cfg.min_trial_secs / t1).ceil() as usize).clamp(3, 10_000);
            }

            let durations = loop {
                let mut trainer = Trainer::with_threads(tc.clone(), &ds, cfg.threads)?;
                run_steps(&mut trainer, steps)?; // warm-up
                let mut durations = Vec::with_capacity(cfg.trials);
                for _ in 0..cfg.trials {
                    durations.push(run_steps(&mut trainer, steps)?);
                }
                // Resolution guard: a trial under ~10ms is too noisy to trust.
                if durations.iter().all(|&d| d >= 0.01) || steps >= 1_000_000 {
                    break durations;
                }
                steps *= 2;
            };

            let rates: Vec<f64> = durations.iter().map(|&d| steps as f64 / d).collect();
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                / (rates.len() - 1) as f64;
            let std = var.sqrt();
            let best = rates.iter().fold(0.0f64, |m, &r| m.max(r));
            rows.push(BenchRow {
                method: method.as_str().to_string(),
                n_id,
                classifier_state_bytes: classifier_state_bytes(
                    method,
                    n_id,
                    tc.resolved_pool_size(n_id),
                    cfg.k,
                    cfg.embed_dim,
                ),
                steps_per_sec_mean: mean,
                steps_per_sec_std: std,
                steps_per_sec_best: best,
                images_per_sec_mean: mean * images_per_step as f64,
                images_per_sec_std: std * images_per_step as f64,
                trials: cfg.trials,
                steps_per_trial: steps,
                threads: cfg.threads,
            });
        }
    }
    Ok(BenchResult { rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Rounds to 6 significant digits; report files carry no more precision.
fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

const CSV_HEADER: &str = "method,n_id,classifier_state_bytes,steps_per_sec_mean,steps_per_sec_std,\
steps_per_sec_best,images_per_sec_mean,images_per_sec_std,trials,steps_per_trial,threads";

/// Writes the benchmark rows in CSV or JSON. Same inputs, same bytes.
pub fn emit_report(result: &BenchResult, w: &mut impl Write, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            writeln!(w, "{CSV_HEADER}")?;
            for r in &result.rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    r.method,
                    r.n_id,
                    r.classifier_state_bytes,
                    sig6(r.steps_per_sec_mean),
                    sig6(r.steps_per_sec_std),
                    sig6(r.steps_per_sec_best),
                    sig6(r.images_per_sec_mean),
                    sig6(r.images_per_sec_std),
                    r.trials,
                    r.steps_per_trial,
                    r.threads
                )?;
            }
        }
        ReportFormat::Json => {
            let rounded: Vec<serde_json::Value> = result
                .rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "method": r.method,
                        "n_id": r.n_id,
                        "classifier_state_bytes": r.classifier_state_bytes,
                        "steps_per_sec_mean": sig6(r.steps_per_sec_mean),
                        "steps_per_sec_std": sig6(r.steps_per_sec_std),
                        "steps_per_sec_best": sig6(r.steps_per_sec_best),
                        "images_per_sec_mean": sig6(r.images_per_sec_mean),
                        "images_per_sec_std": sig6(r.images_per_sec_std),
                        "trials": r.trials,
                        "steps_per_trial": r.steps_per_trial,
                        "threads": r.threads,
                    })
                })
                .collect();
            let text = serde_json::to_string_pretty(&rounded)
                .map_err(|e| Error::Format(format!("bench serialization: {e}")))?;
            writeln!(w, "{text}")?;
        }
    }
    Ok(())
}

pub fn emit_report_to_path(result: &BenchResult, path: &std::path::Path, format: ReportFormat) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    emit_report(result, &mut file, format)?;
    file.flush()?;
    Ok(())
}
