//! Training objectives.
//!
//! Each term has a pure kernel over probability arrays that returns its value
//! and its gradient with respect to those probabilities. The model-level
//! evaluator [`evaluate_loss`] runs the network on a [`TrainBatchItem`],
//! combines the kernels, and backpropagates into the parameters when asked.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field_model::{FieldModel, Heads};
use crate::geometry::{PointCloud, QueryGrid, RigidTransform, Vec3};
use crate::trainer::TrainBatchItem;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the
/// cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Added to both norms in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Query points with binary surface labels.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyBatch {
    pub queries: Vec<Vec3>,
    /// 1.0 for points taken from the cloud, 0.0 for uniform cube samples.
    pub labels: Vec<f64>,
}

impl OccupancyBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// `n_pos` distinct cloud points labelled 1 followed by `n_neg` uniform
/// samples of the canonical cube labelled 0. Negatives are not filtered
/// against the surface.
pub fn sample_occupancy_batch<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<OccupancyBatch> {
    if n_pos > cloud.len() {
        return Err(Error::invalid(
            "n_pos",
            format!("{n_pos} positives requested from {} points", cloud.len()),
        ));
    }
    let mut queries: Vec<Vec3> = index::sample(rng, cloud.len(), n_pos)
        .into_iter()
        .map(|i| cloud.points()[i])
        .collect();
    for _ in 0..n_neg {
        queries.push(Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5)));
    }
    let mut labels = vec![1.0; n_pos];
    labels.resize(n_pos + n_neg, 0.0);
    Ok(OccupancyBatch { queries, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_o: f64,
    pub l_r: f64,
    pub l_m: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_o: f64, l_r: f64, l_m: f64, l_s: f64, weights: &LossWeights) -> Self {
        Self {
            l_o,
            l_r,
            l_m,
            l_s,
            total: weights.o * l_o + weights.r * l_r + weights.m * l_m + weights.s * l_s,
        }
    }

    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_o += r.l_o;
            m.l_r += r.l_r;
            m.l_m += r.l_m;
            m.l_s += r.l_s;
            m.total += r.total;
        }
        m.l_o /= n;
        m.l_r /= n;
        m.l_m /= n;
        m.l_s /= n;
        m.total /= n;
        m
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_o", self.l_o),
            ("l_r", self.l_r),
            ("l_m", self.l_m),
            ("l_s", self.l_s),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-term multipliers of the total loss. All 1.0 by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub o: f64,
    pub r: f64,
    pub m: f64,
    pub s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            o: 1.0,
            r: 1.0,
            m: 1.0,
            s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub thr_o: f64,
    pub weights: LossWeights,
    /// Also score the reverse pairing (grids on the second view).
    pub symmetric: bool,
}

impl LossOptions {
    pub fn new(thr_o: f64) -> Self {
        Self {
            thr_o,
            weights: LossWeights::default(),
            symmetric: false,
        }
    }
}

fn check_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { what, left: a, right: b });
    }
    Ok(())
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
pub fn occupancy_loss_grad(pred: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("predictions vs labels", pred.len(), labels.len())?;
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / pred.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.iter().zip(labels) {
        let c = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
        let inside = p > BCE_CLAMP && p < 1.0 - BCE_CLAMP;
        grad.push(if inside { inv * ((1.0 - y) / (1.0 - c) - y / c) } else { 0.0 });
    }
    Ok((sum * inv, grad))
}

pub fn occupancy_loss(pred: &[f64], labels: &[f64]) -> Result<f64> {
    occupancy_loss_grad(pred, labels).map(|(v, _)| v)
}

/// Mean of `(1 - occ) * sal`, with gradients for both inputs.
pub fn surface_constraint_grad(occ: &[f64], sal: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_len("occupancy vs saliency", occ.len(), sal.len())?;
    if occ.is_empty() {
        return Ok((0.0, Vec::new(), Vec::new()));
    }
    let inv = 1.0 / occ.len() as f64;
    let value = occ.iter().zip(sal).map(|(o, s)| (1.0 - o) * s).sum::<f64>() * inv;
    let d_occ = sal.iter().map(|s| -s * inv).collect();
    let d_sal = occ.iter().map(|o| (1.0 - o) * inv).collect();
    Ok((value, d_occ, d_sal))
}

pub fn surface_constraint_loss(occ: &[f64], sal: &[f64]) -> Result<f64> {
    surface_constraint_grad(occ, sal).map(|(v, _, _)| v)
}

/// Consecutive slices of `values` with the given lengths.
fn split<'a>(values: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(&values[at..at + n]);
        at += n;
    }
    out
}

fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (da, db) = (na + COSINE_EPS, nb + COSINE_EPS);
    let c = dot / (da * db);
    // d|a|/da = a/|a|, taken as zero at a = 0.
    let ka = if na > 0.0 { c / (na * da) } else { 0.0 };
    let kb = if nb > 0.0 { c / (nb * db) } else { 0.0 };
    let ga = a.iter().zip(b).map(|(x, y)| y / (da * db) - ka * x).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (da * db) - kb * y).collect();
    (c, ga, gb)
}

/// `1 - mean_i cos(first_i, second_i)` over paired grids, with gradients for
/// the two flattened saliency arrays.
fn repeatability_flat(first: &[f64], second: &[f64], sizes: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = sizes.len();
    let mut d_first = Vec::with_capacity(first.len());
    let mut d_second = Vec::with_capacity(second.len());
    let mut sum = 0.0;
    for (a, b) in split(first, sizes).into_iter().zip(split(second, sizes)) {
        let (c, ga, gb) = cosine_grad(a, b);
        sum += c;
        d_first.extend(ga.into_iter().map(|g| -g / n as f64));
        d_second.extend(gb.into_iter().map(|g| -g / n as f64));
    }
    (1.0 - sum / n as f64, d_first, d_second)
}

/// Repeatability term from per-grid saliency vectors of the two views.
pub fn repeatability_from_saliency(first: &[Vec<f64>], second: &[Vec<f64>]) -> Result<f64> {
    check_len("grid count", first.len(), second.len())?;
    if first.is_empty() {
        return Err(Error::invalid("grids", "need at least one grid"));
    }
    for (a, b) in first.iter().zip(second) {
        check_len("grid size", a.len(), b.len())?;
    }
    let sizes: Vec<usize> = first.iter().map(Vec::len).collect();
    let (v, _, _) = repeatability_flat(&first.concat(), &second.concat(), &sizes);
    Ok(v)
}

/// Which grid points passed the occupancy filter and which one is the peak.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsitySelection {
    pub survivors: Vec<usize>,
    pub argmax: Option<usize>,
}

/// Sparsity term and its saliency gradient. The occupancy mask is treated as
/// a constant.
fn sparsity_flat(occ: &[f64], sal: &[f64], sizes: &[usize], thr_o: f64) -> (f64, Vec<f64>, Vec<SparsitySelection>) {
    let mut selection = Vec::with_capacity(sizes.len());
    let mut peaks = Vec::new();
    for (o, s) in split(occ, sizes).into_iter().zip(split(sal, sizes)) {
        let survivors: Vec<usize> = (0..o.len()).filter(|&j| o[j] > 1.0 - thr_o).collect();
        let mut argmax = None;
        if !survivors.is_empty() {
            let mut best = survivors[0];
            for &j in &survivors[1..] {
                if s[j] > s[best] {
                    best = j;
                }
            }
            argmax = Some(best);
            let mean = survivors.iter().map(|&j| s[j]).sum::<f64>() / survivors.len() as f64;
            peaks.push(s[best] - mean);
        }
        selection.push(SparsitySelection { survivors, argmax });
    }
    let mut grad = vec![0.0; sal.len()];
    if peaks.is_empty() {
        return (1.0, grad, selection);
    }
    let inv_n = 1.0 / peaks.len() as f64;
    let value = 1.0 - peaks.iter().sum::<f64>() * inv_n;
    let mut at = 0;
    for (sel, &size) in selection.iter().zip(sizes) {
        if let Some(best) = sel.argmax {
            let share = inv_n / sel.survivors.len() as f64;
            for &j in &sel.survivors {
                grad[at + j] += share;
            }
            grad[at + best] -= inv_n;
        }
        at += size;
    }
    (value, grad, selection)
}

/// Sparsity term from per-grid occupancy and saliency vectors.
pub fn sparsity_from_grids(occ: &[Vec<f64>], sal: &[Vec<f64>], thr_o: f64) -> Result<f64> {
    check_thr_o(thr_o)?;
    check_len("grid count", occ.len(), sal.len())?;
    for (a, b) in occ.iter().zip(sal) {
        check_len("grid size", a.len(), b.len())?;
    }
    let sizes: Vec<usize> = occ.iter().map(Vec::len).collect();
    Ok(sparsity_flat(&occ.concat(), &sal.concat(), &sizes, thr_o).0)
}

fn check_thr_o(thr_o: f64) -> Result<()> {
    if !(thr_o > 0.0 && thr_o <= 0.5) {
        return Err(Error::invalid("thr_o", format!("{thr_o} outside (0, 0.5]")));
    }
    Ok(())
}

fn grid_points(grids: &[QueryGrid]) -> (Vec<Vec3>, Vec<usize>) {
    let points = grids.iter().flat_map(|g| g.points.iter().copied()).collect();
    (points, grids.iter().map(QueryGrid::len).collect())
}

/// Repeatability term of a model on `grids` (on `p`) and their images under
/// `transform` (on `tp`).
pub fn repeatability_loss(
    model: &FieldModel,
    p: &PointCloud,
    tp: &PointCloud,
    grids: &[QueryGrid],
    transform: &RigidTransform,
) -> Result<f64> {
    if grids.is_empty() {
        return Err(Error::invalid("grids", "need at least one grid"));
    }
    let (q, sizes) = grid_points(grids);
    let tq: Vec<Vec3> = q.iter().map(|x| transform.apply(x)).collect();
    let (_, s1) = model.query_volume(&model.encode(p)?, &q, Heads::SALIENCY)?;
    let (_, s2) = model.query_volume(&model.encode(tp)?, &tq, Heads::SALIENCY)?;
    Ok(repeatability_flat(&s1, &s2, &sizes).0)
}

/// Sparsity term of a model on `grids` around `p`.
pub fn sparsity_loss(model: &FieldModel, p: &PointCloud, grids: &[QueryGrid], thr_o: f64) -> Result<f64> {
    check_thr_o(thr_o)?;
    let (q, sizes) = grid_points(grids);
    let (occ, sal) = model.query_volume(&model.encode(p)?, &q, Heads::BOTH)?;
    Ok(sparsity_flat(&occ, &sal, &sizes, thr_o).0)
}

/// Result of [`evaluate_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossEvaluation {
    pub report: LossReport,
    /// Occupancy filter and peak per grid on the first view; a different
    /// selection means a different smooth piece of the sparsity term.
    pub selection: Vec<SparsitySelection>,
}

fn axpy(out: &mut [f64], w: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += w * v);
}

/// Loss of one training item. When `grads` is given, the gradient of
/// `report.total` is accumulated into it (scaled by `grad_scale`).
pub fn evaluate_loss(
    model: &FieldModel,
    item: &TrainBatchItem,
    opts: &LossOptions,
    grads: Option<&mut [f64]>,
    grad_scale: f64,
) -> Result<LossEvaluation> {
    check_thr_o(opts.thr_o)?;
    if item.grids.is_empty() {
        return Err(Error::invalid("grids", "need at least one grid"));
    }
    let w = opts.weights;
    let enc_p = model.encode_traced(&item.p)?;
    let enc_tp = model.encode_traced(&item.tp)?;

    let occ_t = model.query_traced(&enc_p.volume, &item.occupancy.queries, Heads::BOTH)?;
    let (l_o, d_o) = occupancy_loss_grad(&occ_t.occupancy, &item.occupancy.labels)?;
    let (l_m, dm_occ, dm_sal) = surface_constraint_grad(&occ_t.occupancy, &occ_t.saliency)?;

    let (q, sizes) = grid_points(&item.grids);
    let tq: Vec<Vec3> = q.iter().map(|x| item.transform.apply(x)).collect();
    let sal_p = model.query_traced(&enc_p.volume, &q, Heads::SALIENCY)?;
    let (occ_grid, _) = model.query_volume(&enc_p.volume, &q, Heads::OCCUPANCY)?;
    let sal_tp = model.query_traced(&enc_tp.volume, &tq, Heads::SALIENCY)?;
    let (mut l_r, mut dr_p, mut dr_tp) = repeatability_flat(&sal_p.saliency, &sal_tp.saliency, &sizes);
    let (l_s, ds, selection) = sparsity_flat(&occ_grid, &sal_p.saliency, &sizes, opts.thr_o);

    // Reverse pairing: grids on the second view, mapped back by T^-1.
    let reverse = match (&item.reverse_grids, opts.symmetric) {
        (Some(rg), true) if !rg.is_empty() => {
            let (rq, rsizes) = grid_points(rg);
            let inv = item.transform.inverse();
            let rq_p: Vec<Vec3> = rq.iter().map(|x| inv.apply(x)).collect();
            let r_tp = model.query_traced(&enc_tp.volume, &rq, Heads::SALIENCY)?;
            let r_p = model.query_traced(&enc_p.volume, &rq_p, Heads::SALIENCY)?;
            let (l_rev, d_rtp, d_rp) = repeatability_flat(&r_tp.saliency, &r_p.saliency, &rsizes);
            l_r = 0.5 * (l_r + l_rev);
            dr_p.iter_mut().chain(dr_tp.iter_mut()).for_each(|g| *g *= 0.5);
            Some((r_tp, r_p, d_rtp, d_rp))
        }
        _ => None,
    };

    let report = LossReport::new(l_o, l_r, l_m, l_s, &w);
    if let Some(grads) = grads {
        let k = grad_scale;
        let mut dv_p = vec![0.0; enc_p.volume.values().len()];
        let mut dv_tp = vec![0.0; enc_tp.volume.values().len()];

        let mut g_occ = vec![0.0; d_o.len()];
        axpy(&mut g_occ, k * w.o, &d_o);
        axpy(&mut g_occ, k * w.m, &dm_occ);
        let g_sal: Vec<f64> = dm_sal.iter().map(|d| k * w.m * d).collect();
        model.query_backward(&enc_p.volume, &occ_t, Some(&g_occ), Some(&g_sal), Some(grads), Some(&mut dv_p), false);

        let mut g_grid = vec![0.0; ds.len()];
        axpy(&mut g_grid, k * w.r, &dr_p);
        axpy(&mut g_grid, k * w.s, &ds);
        model.query_backward(&enc_p.volume, &sal_p, None, Some(&g_grid), Some(grads), Some(&mut dv_p), false);

        let g_tp: Vec<f64> = dr_tp.iter().map(|d| k * w.r * d).collect();
        model.query_backward(&enc_tp.volume, &sal_tp, None, Some(&g_tp), Some(grads), Some(&mut dv_tp), false);

        if let Some((r_tp, r_p, d_rtp, d_rp)) = &reverse {
            let g: Vec<f64> = d_rtp.iter().map(|d| 0.5 * k * w.r * d).collect();
            model.query_backward(&enc_tp.volume, r_tp, None, Some(&g), Some(grads), Some(&mut dv_tp), false);
            let g: Vec<f64> = d_rp.iter().map(|d| 0.5 * k * w.r * d).collect();
            model.query_backward(&enc_p.volume, r_p, None, Some(&g), Some(grads), Some(&mut dv_p), false);
        }

        model.encode_backward(&enc_p, &dv_p, grads);
        model.encode_backward(&enc_tp, &dv_tp, grads);
    }
    Ok(LossEvaluation { report, selection })
}

/// All four terms of one training item.
pub fn total_loss(model: &FieldModel, item: &TrainBatchItem, opts: &LossOptions) -> Result<LossReport> {
    evaluate_loss(model, item, opts, None, 1.0).map(|e| e.report)
}
