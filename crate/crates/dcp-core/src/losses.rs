//! Training objectives and their analytic gradients.
//!
//! - full softmax cross-entropy over every class (the FC baseline),
//! - masked softmax restricted to an optimization-queue subset of classes
//!   (the partial-FC baseline),
//! - cross-entropy over pooled logits for probe rows resident in the pool,
//! - a negative-cosine penalty pushing non-resident probe rows away from the
//!   pool's mean centers,
//! - and their weighted total.
//!
//! All softmaxes subtract the row max before exponentiating. Gradients are
//! exact; the test suite checks every one against central finite differences.

use crate::error::{Error, Result};
use crate::mat::{axpy, dot, l2_norm, Mat};
use crate::rng::Rng;

/// Any pooled logit at or below this is an unoccupied-slot sentinel.
const EMPTY_TARGET_THRESHOLD: f64 = -1e6;

/// Scalar loss with the gradient of whichever argument the operation
/// differentiates (logits or features) and the number of contributing rows.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Mat,
    pub count: usize,
}

/// Classifier cross-entropy output: gradients w.r.t. the class matrix and
/// the input features.
#[derive(Clone, Debug)]
pub struct CeLoss {
    pub value: f64,
    pub grad_w: Mat,
    pub grad_x: Mat,
    pub count: usize,
}

fn check_ce_shapes(w: &Mat, x: &Mat, y: &[u32]) -> Result<()> {
    if w.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "classifier dim {} does not match feature dim {}",
            w.cols(),
            x.cols()
        )));
    }
    if y.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    if x.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    for &label in y {
        if label as usize >= w.rows() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                w.rows()
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of softmax(W x_i) against the labels, with gradients
/// for both the classifier rows and the inputs.
pub fn softmax_ce_full(w: &Mat, x: &Mat, y: &[u32]) -> Result<CeLoss> {
    check_ce_shapes(w, x, y)?;
    let n = x.rows();
    let mut grad_z = x.matmul_nt(w);
    let mut value = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = grad_z.row_mut(i);
        let target = y[i] as usize;
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        value += lse - row[target];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv_n;
        }
        row[target] -= inv_n;
    }
    let grad_w = grad_z.matmul_tn(x);
    let grad_x = grad_z.matmul_nn(w);
    Ok(CeLoss { value: value * inv_n, grad_w, grad_x, count: n })
}

/// Closed-form classifier gradient of the full softmax loss.
pub fn softmax_ce_grad_w(w: &Mat, x: &Mat, y: &[u32]) -> Result<Mat> {
    Ok(softmax_ce_full(w, x, y)?.grad_w)
}

/// Which classes are in the optimization queue. Exactly `active_count` ones.
#[derive(Clone, Debug)]
pub struct QueueMask {
    mask: Vec<bool>,
    active_count: usize,
}

impl QueueMask {
    pub fn from_flags(mask: Vec<bool>) -> QueueMask {
        let active_count = mask.iter().filter(|&&b| b).count();
        QueueMask { mask, active_count }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.active_count
    }

    pub fn contains(&self, class: usize) -> bool {
        self.mask[class]
    }

    pub fn flags(&self) -> &[bool] {
        &self.mask
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&c| self.mask[c]).collect()
    }
}

/// Selects an optimization queue of exactly `active` classes containing every
/// label in `must_include`, the remainder drawn uniformly without replacement.
pub fn select_queue(
    n_classes: usize,
    active: usize,
    must_include: &[u32],
    rng: &mut Rng,
) -> Result<QueueMask> {
    if active > n_classes {
        return Err(Error::Config(format!(
            "queue length {active} exceeds class count {n_classes}"
        )));
    }
    let mut mask = vec![false; n_classes];
    let mut included = 0usize;
    for &label in must_include {
        let c = label as usize;
        if c >= n_classes {
            return Err(Error::Input(format!("label {c} out of range")));
        }
        if !mask[c] {
            mask[c] = true;
            included += 1;
        }
    }
    if included > active {
        return Err(Error::Config(format!(
            "queue length {active} is smaller than the {included} distinct batch labels"
        )));
    }
    let need = active - included;
    if need > 0 {
        let mut candidates: Vec<usize> = (0..n_classes).filter(|&c| !mask[c]).collect();
        for &c in &rng.draw_distinct(&mut candidates, need) {
            mask[c] = true;
        }
    }
    Ok(QueueMask { mask, active_count: active })
}

/// Masked softmax cross-entropy: the denominator runs over queue classes
/// only. Every row's positive class must be in the queue.
pub fn masked_softmax_ce(w: &Mat, queue: &QueueMask, x: &Mat, y: &[u32]) -> Result<CeLoss> {
    check_ce_shapes(w, x, y)?;
    if queue.len() != w.rows() {
        return Err(Error::Shape(format!(
            "mask length {} does not match class count {}",
            queue.len(),
            w.rows()
        )));
    }
    for &label in y {
        if !queue.contains(label as usize) {
            return Err(Error::Input(format!(
                "positive class {label} is masked out of the optimization queue"
            )));
        }
    }
    let n = x.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad_z = x.matmul_nt(w);
    let mut value = 0.0;
    for i in 0..n {
        let row = grad_z.row_mut(i);
        let target = y[i] as usize;
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if queue.contains(j) && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in row.iter().enumerate() {
            if queue.contains(j) {
                sum += (*v - max).exp();
            }
        }
        let lse = max + sum.ln();
        value += lse - row[target];
        for (j, v) in row.iter_mut().enumerate() {
            *v = if queue.contains(j) { (*v - lse).exp() * inv_n } else { 0.0 };
        }
        row[target] -= inv_n;
    }
    let grad_w = grad_z.matmul_tn(x);
    let grad_x = grad_z.matmul_nn(w);
    Ok(CeLoss { value: value * inv_n, grad_w, grad_x, count: n })
}

/// Cross-entropy over pooled logits. Targets are occupied pool slots; the
/// gradient is w.r.t. the logits (chain through the pool to reach probe
/// embeddings).
pub fn pool_ce(logits: &Mat, slot_targets: &[usize]) -> Result<LossOutput> {
    if slot_targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} logit rows",
            slot_targets.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Input("empty pooled batch".into()));
    }
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad = logits.clone();
    let mut value = 0.0;
    for i in 0..n {
        let target = slot_targets[i];
        if target >= logits.cols() {
            return Err(Error::Input(format!("slot target {target} out of range")));
        }
        if logits.get(i, target) <= EMPTY_TARGET_THRESHOLD {
            return Err(Error::Input(format!("target slot {target} is empty")));
        }
        let row = grad.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        value += lse - row[target];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv_n;
        }
        row[target] -= inv_n;
    }
    Ok(LossOutput { value: value * inv_n, grad, count: n })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CosReduction {
    /// Average cosine against all centers.
    Mean,
    /// Cosine against the most similar center only.
    Max,
}

/// Negative-cosine penalty for probe rows whose identity is not resident:
/// minimizes the (mean or max) cosine similarity between each row and the
/// pool's mean centers. Returns the loss with its feature gradient plus the
/// number of degenerate (zero-norm) centers that were skipped.
pub fn cos_neg(
    features: &Mat,
    centers: &Mat,
    reduction: CosReduction,
    hinge: bool,
) -> Result<(LossOutput, usize)> {
    if features.rows() == 0 {
        return Ok((
            LossOutput { value: 0.0, grad: Mat::zeros(0, features.cols()), count: 0 },
            0,
        ));
    }
    if centers.cols() != features.cols() {
        return Err(Error::Shape(format!(
            "centers dim {} does not match feature dim {}",
            centers.cols(),
            features.cols()
        )));
    }
    // Precompute unit centers, skipping degenerate rows.
    let mut unit_centers: Vec<(usize, Vec<f64>)> = Vec::with_capacity(centers.rows());
    let mut skipped = 0usize;
    for c in 0..centers.rows() {
        let norm = l2_norm(centers.row(c));
        if norm <= 1e-12 {
            skipped += 1;
            continue;
        }
        let unit: Vec<f64> = centers.row(c).iter().map(|v| v / norm).collect();
        unit_centers.push((c, unit));
    }
    let n = features.rows();
    let mut grad = Mat::zeros(n, features.cols());
    if unit_centers.is_empty() {
        return Ok((LossOutput { value: 0.0, grad, count: n }, skipped));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    for i in 0..n {
        let x = features.row(i);
        let nx = l2_norm(x).max(1e-12);
        let xhat: Vec<f64> = x.iter().map(|v| v / nx).collect();
        match reduction {
            CosReduction::Mean => {
                let inv_c = 1.0 / unit_centers.len() as f64;
                let mut phi = 0.0;
                let g = grad.row_mut(i);
                for (_, t) in &unit_centers {
                    let cos = dot(&xhat, t);
                    if hinge && cos <= 0.0 {
                        continue;
                    }
                    phi += cos;
                    let coef = inv_n * inv_c / nx;
                    for ((gj, &tj), &xj) in g.iter_mut().zip(t).zip(&xhat) {
                        *gj += coef * (tj - cos * xj);
                    }
                }
                value += phi * inv_c;
            }
            CosReduction::Max => {
                let mut best = f64::NEG_INFINITY;
                let mut best_t: Option<&[f64]> = None;
                for (_, t) in &unit_centers {
                    let cos = dot(&xhat, t);
                    if cos > best {
                        best = cos;
                        best_t = Some(t);
                    }
                }
                if hinge && best <= 0.0 {
                    continue;
                }
                value += best;
                let t = best_t.unwrap();
                let coef = inv_n / nx;
                let g = grad.row_mut(i);
                for ((gj, &tj), &xj) in g.iter_mut().zip(t).zip(&xhat) {
                    *gj = coef * (tj - best * xj);
                }
            }
        }
    }
    Ok((LossOutput { value: value * inv_n, grad, count: n }, skipped))
}

/// Combines the pooled cross-entropy and the cosine penalty:
/// value = ce + lambda * cos, gradients scattered by probe-row index into one
/// matrix of `n_rows` rows. Both inputs must carry feature-space gradients.
pub fn total_loss(
    ce: &LossOutput,
    ce_rows: &[usize],
    cos: &LossOutput,
    cos_rows: &[usize],
    lambda: f64,
    n_rows: usize,
    dim: usize,
) -> Result<LossOutput> {
    if ce.grad.rows() != ce_rows.len() || cos.grad.rows() != cos_rows.len() {
        return Err(Error::Shape("gradient rows do not match row index lists".into()));
    }
    let mut grad = Mat::zeros(n_rows, dim);
    for (r, &row) in ce_rows.iter().enumerate() {
        if row >= n_rows {
            return Err(Error::Input(format!("row index {row} out of range")));
        }
        axpy(1.0, ce.grad.row(r), grad.row_mut(row));
    }
    for (r, &row) in cos_rows.iter().enumerate() {
        if row >= n_rows {
            return Err(Error::Input(format!("row index {row} out of range")));
        }
        axpy(lambda, cos.grad.row(r), grad.row_mut(row));
    }
    Ok(LossOutput {
        value: ce.value + lambda * cos.value,
        grad,
        count: ce.count + cos.count,
    })
}
