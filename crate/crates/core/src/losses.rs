//! Loss functions with hand-derived gradients.
//!
//! `memclr_loss` is the memory-guided contrastive objective: each student
//! feature is pulled toward its memory read-out and pushed away from its
//! mined negatives. Gradients flow into the student features directly and,
//! through the read attention, into the query projection `W_q`. Memory
//! items are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryBank, ReadResult};
use crate::numerics::{dot, norm, DenseMatrix, NORM_EPS};

/// How per-anchor ratios are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastForm {
    /// `−log(mean_i r_i)`
    LogOfMean,
    /// `−mean_i log r_i`, the usual InfoNCE aggregation.
    MeanOfLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemClrConfig {
    pub temperature: f64,
    /// Compare L2-normalized features (cosine) instead of raw dot products.
    pub normalize_features: bool,
    pub form: ContrastForm,
}

impl Default for MemClrConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            normalize_features: true,
            form: ContrastForm::LogOfMean,
        }
    }
}

/// Gradients of the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MemClrGradients {
    /// `N_f × C`, w.r.t. the student features.
    pub d_features: DenseMatrix,
    /// `C × C`, w.r.t. the query projection.
    pub d_wq: DenseMatrix,
}

/// Gradients of the full student objective w.r.t. every trained parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub d_encoder: DenseMatrix,
    pub d_classifier: DenseMatrix,
    pub d_wq: DenseMatrix,
}

/// Per-step objective value with its components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub pl: f64,
    pub memclr: f64,
}

pub fn total_loss(pl: f64, memclr: f64) -> LossValue {
    LossValue {
        total: pl + memclr,
        pl,
        memclr,
    }
}

struct Normalized {
    unit: Vec<f64>,
    /// `None` when normalization is disabled.
    norm: Option<f64>,
}

fn maybe_normalize(v: &[f64], enabled: bool, what: &'static str) -> Result<Normalized> {
    if !enabled {
        return Ok(Normalized {
            unit: v.to_vec(),
            norm: None,
        });
    }
    let n = norm(v);
    if n <= NORM_EPS {
        log::debug!("{what} has degenerate norm {n:e}");
        return Err(Error::DegenerateNorm(n));
    }
    Ok(Normalized {
        unit: v.iter().map(|x| x / n).collect(),
        norm: Some(n),
    })
}

/// Pulls a gradient w.r.t. `x̂ = x/‖x‖` back to `x`.
fn unnormalize_grad(n: &Normalized, d_unit: &[f64]) -> Vec<f64> {
    match n.norm {
        None => d_unit.to_vec(),
        Some(len) => {
            let proj = dot(&n.unit, d_unit);
            d_unit
                .iter()
                .zip(&n.unit)
                .map(|(d, u)| (d - u * proj) / len)
                .collect()
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Memory-guided contrastive loss and its gradients.
///
/// `read` must come from `bank.read(student_feats, proj, _)` with `w_q` the
/// query projection used there.
pub fn memclr_loss(
    student_feats: &DenseMatrix,
    read: &ReadResult,
    bank: &MemoryBank,
    w_q: &DenseMatrix,
    cfg: &MemClrConfig,
) -> Result<(f64, MemClrGradients)> {
    let (n_f, c) = student_feats.shape();
    let items = bank.items();
    if n_f == 0 {
        return Err(Error::invalid("contrastive loss needs at least one anchor"));
    }
    if read.positives.shape() != (n_f, c)
        || read.attention.shape() != (n_f, bank.n_items())
        || read.negative_indices.len() != n_f
        || items.cols() != c
        || w_q.shape() != (c, c)
    {
        return Err(Error::shape(
            "memclr_loss",
            format!("read result for {n_f}x{c} features over {} items", bank.n_items()),
            format!(
                "positives {:?}, attention {:?}, {} negative lists, W_q {:?}",
                read.positives.shape(),
                read.attention.shape(),
                read.negative_indices.len(),
                w_q.shape()
            ),
        ));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {}", cfg.temperature)));
    }
    let tau = cfg.temperature;

    let mut log_ratios = Vec::with_capacity(n_f);
    // per anchor: (f̂, p̂, negatives m̂, softmax over [pos, negs...])
    let mut cache = Vec::with_capacity(n_f);
    for i in 0..n_f {
        let negs = &read.negative_indices[i];
        if negs.is_empty() {
            return Err(Error::invalid(format!("anchor {i} has no mined negatives")));
        }
        let f = maybe_normalize(student_feats.row(i), cfg.normalize_features, "student feature")?;
        let p = maybe_normalize(read.positives.row(i), cfg.normalize_features, "positive")?;
        let neg_units = negs
            .iter()
            .map(|&n| maybe_normalize(items.row(n), cfg.normalize_features, "negative").map(|x| x.unit))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::with_capacity(1 + negs.len());
        scores.push(dot(&f.unit, &p.unit) / tau);
        scores.extend(neg_units.iter().map(|m| dot(&f.unit, m) / tau));
        let lse = log_sum_exp(&scores);
        log_ratios.push(scores[0] - lse);
        let probs: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
        cache.push((f, p, neg_units, probs));
    }

    let n = n_f as f64;
    let (loss, weights): (f64, Vec<f64>) = match cfg.form {
        ContrastForm::LogOfMean => {
            let lse = log_sum_exp(&log_ratios);
            // ∂L/∂log r_i = −r_i / Σ r
            let w = log_ratios.iter().map(|lr| -(lr - lse).exp()).collect();
            (n.ln() - lse, w)
        }
        ContrastForm::MeanOfLog => (-log_ratios.iter().sum::<f64>() / n, vec![-1.0 / n; n_f]),
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("memclr loss"));
    }

    let mut d_features = DenseMatrix::zeros(n_f, c);
    let mut d_wq = DenseMatrix::zeros(c, c);
    for (i, (f, p, neg_units, probs)) in cache.iter().enumerate() {
        let coeff = weights[i];
        // ∂log r/∂s_pos = 1 − π_pos, ∂log r/∂s_n = −π_n
        let g_pos = coeff * (1.0 - probs[0]) / tau;
        let mut d_f_unit: Vec<f64> = p.unit.iter().map(|x| g_pos * x).collect();
        for (m, &pi) in neg_units.iter().zip(&probs[1..]) {
            let g = -coeff * pi / tau;
            for (d, x) in d_f_unit.iter_mut().zip(m) {
                *d += g * x;
            }
        }
        let d_p_unit: Vec<f64> = f.unit.iter().map(|x| g_pos * x).collect();
        let mut d_f = unnormalize_grad(f, &d_f_unit);
        let d_p = unnormalize_grad(p, &d_p_unit);

        // positive = Σ_j a_j m_j with a = softmax_j(q · m_j), q = W_q f
        let a = read.attention.row(i);
        let d_a: Vec<f64> = items.row_iter().map(|m| dot(m, &d_p)).collect();
        let centered = dot(a, &d_a);
        let mut d_q = vec![0.0; c];
        for (j, m) in items.row_iter().enumerate() {
            let d_logit = a[j] * (d_a[j] - centered);
            if d_logit != 0.0 {
                for (dq, x) in d_q.iter_mut().zip(m) {
                    *dq += d_logit * x;
                }
            }
        }
        let f_raw = student_feats.row(i);
        for (r, &dq_r) in d_q.iter().enumerate() {
            let row = d_wq.row_mut(r);
            for (dw, x) in row.iter_mut().zip(f_raw) {
                *dw += dq_r * x;
            }
            // d_f += W_qᵀ d_q
            for (df, w) in d_f.iter_mut().zip(w_q.row(r)) {
                *df += w * dq_r;
            }
        }
        d_features.row_mut(i).copy_from_slice(&d_f);
    }
    d_features.ensure_finite("memclr feature gradient")?;
    d_wq.ensure_finite("memclr W_q gradient")?;
    Ok((loss, MemClrGradients { d_features, d_wq }))
}

/// Cosine similarity with a zero-norm guard.
fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::DegenerateNorm(na.min(nb)));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Batch contrastive (NT-Xent) loss over `2N` views with cosine
/// similarity and unit temperature, averaged over all `2N` anchors.
/// Diagnostic only; no gradient.
pub fn simclr_loss(anchors: &DenseMatrix, positives: &DenseMatrix) -> Result<f64> {
    if anchors.shape() != positives.shape() {
        return Err(Error::shape(
            "simclr_loss",
            format!("{:?}", anchors.shape()),
            format!("{:?}", positives.shape()),
        ));
    }
    let n = anchors.rows();
    if n == 0 {
        return Err(Error::invalid("simclr_loss needs at least one pair"));
    }
    // z_{2k} = anchor k, z_{2k+1} = positive k
    let views: Vec<&[f64]> = (0..n).flat_map(|k| [anchors.row(k), positives.row(k)]).collect();
    let mut total = 0.0;
    for (i, zi) in views.iter().enumerate() {
        let partner = i ^ 1;
        let mut sims = Vec::with_capacity(2 * n - 1);
        let mut pos = 0.0;
        for (l, zl) in views.iter().enumerate() {
            if l == i {
                continue;
            }
            let s = cosine(zi, zl)?;
            if l == partner {
                pos = s;
            }
            sims.push(s);
        }
        total += log_sum_exp(&sims) - pos;
    }
    Ok(total / (2 * n) as f64)
}

/// Mean cross-entropy of `logits` rows against `(instance, class)` labels,
/// and its gradient w.r.t. the logits. No labels gives zero loss and zero
/// gradient.
pub fn pseudo_label_loss(logits: &DenseMatrix, labels: &[(usize, usize)]) -> Result<(f64, DenseMatrix)> {
    let (n, k) = logits.shape();
    let mut grad = DenseMatrix::zeros(n, k);
    if labels.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    for &(i, class) in labels {
        if i >= n || class >= k {
            return Err(Error::invalid(format!(
                "pseudo-label ({i}, {class}) out of range for {n} instances and {k} classes"
            )));
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[class];
        let g = grad.row_mut(i);
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj += scale * (z - lse).exp();
        }
        g[class] -= scale;
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("pseudo-label loss"));
    }
    Ok((loss, grad))
}
