//! Removal with recalibration.
//!
//! Removing a delta coordinate changes the layer's outputs on the data
//! it was tuned for. For a linear layer with calibration inputs X, the
//! damage is quadratic in the layer Hessian H = (2/n) X^T X + lambda I,
//! and zeroing delta entry j is optimally compensated by shifting the
//! still-active entries of the same row along the j-th column of H^-1.
//! Masked entries are eliminated left to right in column blocks; the
//! inverse is refreshed after every elimination (a Schur downdate), so
//! the finished row equals the joint damped least-squares solution over
//! its retained columns regardless of block size. Block boundaries only
//! change f64 summation order.
//!
//! Rows with no masked entry are copied bit-for-bit. Layers without
//! calibration coverage (biases, embeddings, anything not a 2-D linear
//! weight) fall back to plain removal.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::Serialize;

use crate::delta::MaskSet;
use crate::error::{Error, Result};
use crate::paramset::ParamSet;
use crate::refmodel::CalibRecord;
use crate::tensor::Tensor;

/// Knobs for a surgery pass. `layer_order`, when set, must be a
/// permutation of the checkpoint's tensor names.
#[derive(Debug, Clone)]
pub struct SurgeryPlan {
    pub block_size: usize,
    pub damping_fraction: f64,
    pub layer_order: Option<Vec<String>>,
    /// Refresh the inverse after each elimination (the default). With
    /// `false`, every masked entry is compensated independently from the
    /// original inverse and the corrections are summed; kept for
    /// comparison runs.
    pub sequential_updates: bool,
}

impl Default for SurgeryPlan {
    fn default() -> SurgeryPlan {
        SurgeryPlan {
            block_size: 128,
            damping_fraction: 0.01,
            layer_order: None,
            sequential_updates: true,
        }
    }
}

// Counts live LayerHessians so tests can verify layers are processed one
// at a time (the streaming memory contract).
static LIVE_HESSIANS: AtomicUsize = AtomicUsize::new(0);
static PEAK_HESSIANS: AtomicUsize = AtomicUsize::new(0);

pub fn reset_hessian_gauge() {
    LIVE_HESSIANS.store(0, Ordering::SeqCst);
    PEAK_HESSIANS.store(0, Ordering::SeqCst);
}

pub fn peak_live_hessians() -> usize {
    PEAK_HESSIANS.load(Ordering::SeqCst)
}

/// Damped second-moment matrix of one layer's calibration inputs.
#[derive(Debug)]
pub struct LayerHessian {
    layer: String,
    dim: usize,
    n_samples: usize,
    lambda: f64,
    damped: Vec<f64>,
    gram: Vec<f64>,
}

impl Drop for LayerHessian {
    fn drop(&mut self) {
        LIVE_HESSIANS.fetch_sub(1, Ordering::SeqCst);
    }
}

impl LayerHessian {
    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Damped entry (i, j).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.damped[i * self.dim + j]
    }

    // Raw X^T X quadratic form of one error vector; the reconstruction
    // error metric in layer reports.
    fn raw_quadratic(&self, e: &[f64]) -> f64 {
        let d = self.dim;
        let mut total = 0.0;
        for i in 0..d {
            if e[i] == 0.0 {
                continue;
            }
            let row = &self.gram[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for (j, &ej) in e.iter().enumerate() {
                if ej != 0.0 {
                    acc += row[j] * ej;
                }
            }
            total += e[i] * acc;
        }
        total
    }
}

/// `H = (2/n) * sum_k x_k x_k^T + lambda I`, with
/// `lambda = damping_fraction * mean(diag)` of the undamped part.
pub fn build_hessian(record: &CalibRecord, damping_fraction: f64) -> Result<LayerHessian> {
    if damping_fraction < 0.0 || !damping_fraction.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "damping_fraction must be nonnegative, got {damping_fraction}"
        )));
    }
    let shape = record.activations.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::InvalidArgument(format!(
            "calibration activations for {:?} must be a nonempty [n, fan_in] matrix, got {shape:?}",
            record.layer
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let x = record.activations.as_f32().map_err(|_| Error::DtypeMismatch {
        name: record.layer.clone(),
        expected: "F32",
        found: record.activations.dtype().tag(),
    })?;

    let mut gram = vec![0.0f64; d * d];
    for k in 0..n {
        let row = &x[k * d..(k + 1) * d];
        for i in 0..d {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            let out = &mut gram[i * d..(i + 1) * d];
            for (j, &xj) in row.iter().enumerate().skip(i) {
                out[j] += xi * xj as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }

    let scale = 2.0 / n as f64;
    let mut damped: Vec<f64> = gram.iter().map(|&g| g * scale).collect();
    let mean_diag = (0..d).map(|i| damped[i * d + i]).sum::<f64>() / d as f64;
    let lambda = damping_fraction * mean_diag;
    for i in 0..d {
        damped[i * d + i] += lambda;
    }

    LIVE_HESSIANS.fetch_add(1, Ordering::SeqCst);
    PEAK_HESSIANS.fetch_max(LIVE_HESSIANS.load(Ordering::SeqCst), Ordering::SeqCst);
    Ok(LayerHessian {
        layer: record.layer.clone(),
        dim: d,
        n_samples: n,
        lambda,
        damped,
        gram,
    })
}

// In-place lower Cholesky. None if the matrix is not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

// SPD inverse via Cholesky, symmetrized against rounding drift.
fn spd_inverse(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, d)?;
    let mut inv = vec![0.0f64; d * d];
    let mut col = vec![0.0f64; d];
    for rhs in 0..d {
        // Forward solve L y = e_rhs.
        for i in 0..d {
            let mut sum = if i == rhs { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[i * d + k] * col[k];
            }
            col[i] = sum / l[i * d + i];
        }
        // Back solve L^T x = y.
        for i in (0..d).rev() {
            let mut sum = col[i];
            for k in i + 1..d {
                sum -= l[k * d + i] * col[k];
            }
            col[i] = sum / l[i * d + i];
        }
        for i in 0..d {
            inv[i * d + rhs] = col[i];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let avg = 0.5 * (inv[i * d + j] + inv[j * d + i]);
            inv[i * d + j] = avg;
            inv[j * d + i] = avg;
        }
    }
    Some(inv)
}

/// Recalibrates one layer's delta matrix `[fan_out, fan_in]` against a
/// mask of the same shape. Masked entries come back exactly 0; rows
/// without masked entries come back unchanged; the other retained
/// entries carry the accumulated compensation. The result is carried
/// in f64, like the deltas it adjusts.
pub fn recalibrate_layer(
    delta: &Tensor,
    mask: &Tensor,
    hessian: &LayerHessian,
    plan: &SurgeryPlan,
) -> Result<Tensor> {
    let shape = delta.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "recalibration expects a 2-D delta, got shape {shape:?}"
        )));
    }
    if mask.shape() != shape {
        return Err(Error::ShapeMismatch {
            name: hessian.layer.clone(),
            left: shape.to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let d = shape[1];
    if d != hessian.dim {
        return Err(Error::ShapeMismatch {
            name: hessian.layer.clone(),
            left: vec![shape[0], d],
            right: vec![hessian.dim, hessian.dim],
        });
    }
    if plan.block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be positive".into()));
    }
    let dv = delta.to_f64_vec();
    let mv = mask.as_f32()?;

    let inverse = spd_inverse(&hessian.damped, d).ok_or(Error::NotPositiveDefinite {
        layer: hessian.layer.clone(),
    })?;

    let mut out = vec![0.0f64; dv.len()];
    let mut p = vec![0.0f64; d * d];
    let mut w = vec![0.0f64; d];
    let mut pending = vec![0.0f64; d];
    let mut active = vec![true; d];

    for r in 0..shape[0] {
        let drow = &dv[r * d..(r + 1) * d];
        let mrow = &mv[r * d..(r + 1) * d];
        let out_row = &mut out[r * d..(r + 1) * d];
        if mrow.iter().all(|&m| m == 0.0) {
            out_row.copy_from_slice(drow);
            continue;
        }
        w.copy_from_slice(drow);
        if plan.sequential_updates {
            p.copy_from_slice(&inverse);
            active.iter_mut().for_each(|a| *a = true);
            let mut block_start = 0;
            while block_start < d {
                let block_end = (block_start + plan.block_size).min(d);
                pending.iter_mut().for_each(|v| *v = 0.0);
                for j in block_start..block_end {
                    if mrow[j] != 1.0 {
                        continue;
                    }
                    let c = w[j];
                    let pjj = p[j * d + j];
                    let err = c / pjj;
                    // Compensate along column j of the current inverse:
                    // in-block columns immediately, the rest after the block.
                    for k in 0..d {
                        if k == j || !active[k] {
                            continue;
                        }
                        let step = err * p[k * d + j];
                        if k >= block_start && k < block_end {
                            w[k] -= step;
                        } else {
                            pending[k] += step;
                        }
                    }
                    w[j] = 0.0;
                    active[j] = false;
                    // Schur downdate: eliminate j from the inverse.
                    for k in 0..d {
                        if !active[k] {
                            continue;
                        }
                        let pkj = p[k * d + j];
                        if pkj == 0.0 {
                            continue;
                        }
                        let f = pkj / pjj;
                        let prow_j = j * d;
                        let prow_k = k * d;
                        for l in 0..d {
                            if active[l] {
                                p[prow_k + l] -= f * p[prow_j + l];
                            }
                        }
                    }
                }
                for k in 0..d {
                    if (k < block_start || k >= block_end) && active[k] && pending[k] != 0.0 {
                        w[k] -= pending[k];
                    }
                }
                block_start = block_end;
            }
        } else {
            // Independent single-removal corrections summed against the
            // original inverse; no refresh between eliminations.
            pending.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..d {
                if mrow[j] != 1.0 {
                    continue;
                }
                let err = drow[j] / p_at(&inverse, d, j, j);
                for k in 0..d {
                    if mrow[k] == 0.0 {
                        pending[k] += err * p_at(&inverse, d, k, j);
                    }
                }
            }
            for k in 0..d {
                if mrow[k] == 1.0 {
                    w[k] = 0.0;
                } else {
                    w[k] -= pending[k];
                }
            }
        }
        for (o, (&m, &v)) in out_row.iter_mut().zip(mrow.iter().zip(w.iter())) {
            *o = if m == 1.0 { 0.0 } else { v };
        }
    }

    Tensor::from_f64(shape.to_vec(), out)
}

fn p_at(p: &[f64], d: usize, i: usize, j: usize) -> f64 {
    p[i * d + j]
}

/// One line of the surgery report, serialized as JSON lines by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub layer: String,
    pub params: usize,
    pub masked: usize,
    pub masked_fraction: f64,
    pub recalibrated: bool,
    /// `||X (delta - delta_hat)||^2` for plain zeroing of the masked
    /// entries, before compensation. Zero for non-recalibrated layers.
    pub pre_error: f64,
    /// Same metric after compensation.
    pub post_error: f64,
    pub wall_ms: f64,
}

/// True for tensors that take inverse-Hessian compensation: 2-D linear
/// weights. Embedding tables are 2-D but their rows are lookup entries,
/// not mixing weights, so they are excluded by name.
pub fn eligible_for_recalibration(name: &str, tensor: &Tensor) -> bool {
    tensor.shape().len() == 2 && !name.contains("embed")
}

/// Applies the full removal-and-recalibration pass, one layer at a time.
///
/// Masked coordinates come out bit-equal to `pre`; rows with no masked
/// entry come out bit-equal to `sft`; retained coordinates in rows with
/// removals get the compensated value. Layers that are not eligible (or
/// carry an all-zero mask) get plain removal. A masked eligible layer
/// without a calibration record is an error, reported with every such
/// layer name at once.
pub fn run_surgery(
    sft: &ParamSet,
    pre: &ParamSet,
    mask: &MaskSet,
    calib: &[CalibRecord],
    plan: &SurgeryPlan,
) -> Result<(ParamSet, Vec<LayerReport>)> {
    sft.assert_compatible(pre)?;
    mask.assert_compatible(pre)?;

    let mut records: BTreeMap<&str, &CalibRecord> = BTreeMap::new();
    for r in calib {
        if records.insert(r.layer.as_str(), r).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate calibration record for layer {:?}",
                r.layer
            )));
        }
    }

    let order: Vec<String> = match &plan.layer_order {
        None => sft.names().map(str::to_string).collect(),
        Some(names) => {
            let mut sorted = names.clone();
            sorted.sort();
            let expected: Vec<String> = sft.names().map(str::to_string).collect();
            if sorted != expected {
                return Err(Error::InvalidArgument(
                    "layer_order must be a permutation of the checkpoint's tensor names".into(),
                ));
            }
            names.clone()
        }
    };

    // Every masked eligible layer needs calibration; collect the gaps
    // before touching anything.
    let missing: Vec<String> = order
        .iter()
        .filter(|name| {
            let t = sft.get(name).expect("order is validated");
            let m = mask.get(name).expect("compatible");
            eligible_for_recalibration(name, t)
                && m.as_f32().map(|v| v.iter().any(|&x| x == 1.0)).unwrap_or(false)
                && !records.contains_key(name.as_str())
        })
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCalibration { layers: missing });
    }

    let mut out = ParamSet::new();
    let mut reports = Vec::with_capacity(order.len());
    for name in &order {
        let started = Instant::now();
        let t_sft = sft.get(name).expect("validated");
        let t_pre = pre.get(name).expect("compatible");
        let t_mask = mask.get(name).expect("compatible");
        let sv = t_sft.as_f32().map_err(|e| name_err(e, name))?;
        let pv = t_pre.as_f32().map_err(|e| name_err(e, name))?;
        let mv = t_mask.as_f32().expect("masks are F32");
        let masked = mv.iter().filter(|&&m| m == 1.0).count();
        let recalibrate =
            masked > 0 && eligible_for_recalibration(name, t_sft) && records.contains_key(name.as_str());

        let (values, pre_error, post_error) = if recalibrate {
            // One layer resident at a time: the Hessian lives only in
            // this scope.
            let hessian = build_hessian(records[name.as_str()], plan.damping_fraction)?;
            let d = t_sft.shape()[1];
            if hessian.dim() != d {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: vec![t_sft.shape()[0], d],
                    right: vec![hessian.n_samples(), hessian.dim()],
                });
            }
            let delta_vals: Vec<f64> = sv
                .iter()
                .zip(pv)
                .map(|(&s, &p)| s as f64 - p as f64)
                .collect();
            let delta = Tensor::from_f64(t_sft.shape().to_vec(), delta_vals).map_err(|e| name_err2(e, name))?;
            let adjusted = recalibrate_layer(&delta, t_mask, &hessian, plan)?;
            let av = adjusted.as_f64().expect("recalibrate returns F64");
            let dv = delta.as_f64().expect("delta is F64");

            let rows = t_sft.shape()[0];
            let mut pre_err = 0.0;
            let mut post_err = 0.0;
            let mut e = vec![0.0f64; d];
            for r in 0..rows {
                let dr = &dv[r * d..(r + 1) * d];
                let ar = &av[r * d..(r + 1) * d];
                let mr = &mv[r * d..(r + 1) * d];
                if mr.iter().all(|&m| m == 0.0) {
                    continue;
                }
                for i in 0..d {
                    e[i] = if mr[i] == 1.0 { dr[i] } else { 0.0 };
                }
                pre_err += hessian.raw_quadratic(&e);
                for i in 0..d {
                    e[i] = dr[i] - ar[i];
                }
                post_err += hessian.raw_quadratic(&e);
            }

            // Rows without removals are copied from sft outright, so the
            // untouched-row guarantee never rests on the arithmetic.
            let mut merged = vec![0.0f32; sv.len()];
            for r in 0..rows {
                let mr = &mv[r * d..(r + 1) * d];
                let out_row = &mut merged[r * d..(r + 1) * d];
                if mr.iter().all(|&m| m == 0.0) {
                    out_row.copy_from_slice(&sv[r * d..(r + 1) * d]);
                    continue;
                }
                for i in 0..d {
                    out_row[i] = if mr[i] == 1.0 {
                        pv[r * d + i]
                    } else {
                        (pv[r * d + i] as f64 + av[r * d + i]) as f32
                    };
                }
            }
            (merged, pre_err, post_err)
        } else {
            // Plain removal: masked entries revert to pre, everything
            // else keeps the fine-tuned value.
            let merged: Vec<f32> = sv
                .iter()
                .zip(pv)
                .zip(mv)
                .map(|((&s, &p), &m)| if m == 1.0 { p } else { s })
                .collect();
            (merged, 0.0, 0.0)
        };

        // Structural post-conditions, enforced on every run: masked
        // coordinates are pre, rows without removals are sft.
        for (i, &m) in mv.iter().enumerate() {
            if m == 1.0 && values[i].to_bits() != pv[i].to_bits() {
                return Err(Error::Invariant(format!(
                    "{name}: masked coordinate {i} is not bit-equal to the pre value"
                )));
            }
        }
        if t_sft.shape().len() == 2 {
            let d = t_sft.shape()[1];
            for r in 0..t_sft.shape()[0] {
                let mr = &mv[r * d..(r + 1) * d];
                if mr.iter().all(|&m| m == 0.0)
                    && values[r * d..(r + 1) * d]
                        .iter()
                        .zip(&sv[r * d..(r + 1) * d])
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return Err(Error::Invariant(format!(
                        "{name}: untouched row {r} is not bit-equal to the sft value"
                    )));
                }
            }
        }

        let tensor = Tensor::from_f32(t_sft.shape().to_vec(), values).map_err(|e| name_err2(e, name))?;
        out.insert(name.clone(), tensor);
        reports.push(LayerReport {
            layer: name.clone(),
            params: t_sft.len(),
            masked,
            masked_fraction: if t_sft.len() == 0 {
                0.0
            } else {
                masked as f64 / t_sft.len() as f64
            },
            recalibrated: recalibrate,
            pre_error,
            post_error,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((out, reports))
}

fn name_err(e: Error, name: &str) -> Error {
    match e {
        Error::DtypeMismatch {
            expected, found, ..
        } => Error::DtypeMismatch {
            name: name.to_string(),
            expected,
            found,
        },
        other => other,
    }
}

fn name_err2(e: Error, name: &str) -> Error {
    match e {
        Error::NonFinite { index, .. } => Error::NonFinite {
            name: name.to_string(),
            index,
        },
        other => other,
    }
}
