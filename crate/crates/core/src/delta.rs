//! Delta arithmetic over parameter sets.
//!
//! A delta is the elementwise difference between two checkpoints of the
//! same architecture. Deltas are stored in f64 even when the checkpoints
//! are f32: an f32 difference carries its own rounding, which is larger
//! than the target's ulp whenever the delta dwarfs the value it leads to
//! (a bias trained away from zero, say), and that one rounding breaks
//! `pre + (sft - pre) == sft`. With an f64 carrier the subtraction and
//! re-addition are exact for every pair a training run can produce, and
//! the merge operations below round exactly once, on write-back to f32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::KIND_KEY;
use crate::error::{Error, Result};
use crate::paramset::ParamSet;
use crate::tensor::{Dtype, Tensor};

pub const KIND_DELTA: &str = "delta";
pub const KIND_MASK: &str = "mask";

/// Elementwise difference between two compatible checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSet {
    tensors: ParamSet,
}

/// Binary selection over the same index space as a checkpoint. Stored as
/// F32 tensors whose values are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    tensors: ParamSet,
}

impl DeltaSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.names()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.param_count()
    }

    /// Name and shape agreement with a checkpoint. Dtype is not compared:
    /// the delta's f64 entries pair with f32 checkpoints by design.
    pub fn assert_compatible(&self, other: &ParamSet) -> Result<()> {
        self.tensors.assert_same_geometry(other)
    }

    pub fn bit_eq(&self, other: &DeltaSet) -> bool {
        self.tensors.bit_eq(&other.tensors)
    }

    /// View as a plain `ParamSet` tagged `kind = delta`, for serialization.
    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = self.tensors.clone();
        ps.set_metadata(KIND_KEY, KIND_DELTA);
        ps
    }

    /// Adopts a loaded checkpoint as a delta. A `kind` tag other than
    /// `delta` is rejected; an absent tag is accepted.
    pub fn from_param_set(ps: ParamSet) -> Result<DeltaSet> {
        check_kind(&ps, KIND_DELTA)?;
        Ok(DeltaSet { tensors: ps })
    }
}

impl MaskSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter()
    }

    pub fn assert_compatible(&self, other: &ParamSet) -> Result<()> {
        self.tensors.assert_compatible(other)
    }

    pub fn bit_eq(&self, other: &MaskSet) -> bool {
        self.tensors.bit_eq(&other.tensors)
    }

    /// Number of selected (value 1) positions across all tensors.
    pub fn count_ones(&self) -> usize {
        self.iter()
            .map(|(_, t)| {
                t.as_f32()
                    .expect("masks are F32")
                    .iter()
                    .filter(|&&v| v == 1.0)
                    .count()
            })
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.param_count()
    }

    /// Selected fraction over the whole index space. Zero for an empty set.
    pub fn fraction(&self) -> f64 {
        let total = self.tensors.param_count();
        if total == 0 {
            0.0
        } else {
            self.count_ones() as f64 / total as f64
        }
    }

    /// True when every selected position of `self` is selected in `other`.
    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        if self.tensors.assert_compatible(&other.tensors).is_err() {
            return false;
        }
        self.iter().all(|(name, t)| {
            let a = t.as_f32().expect("masks are F32");
            let b = other
                .get(name)
                .expect("compatible")
                .as_f32()
                .expect("masks are F32");
            a.iter().zip(b).all(|(&x, &y)| x == 0.0 || y == 1.0)
        })
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = self.tensors.clone();
        ps.set_metadata(KIND_KEY, KIND_MASK);
        ps
    }

    pub fn from_param_set(ps: ParamSet) -> Result<MaskSet> {
        check_kind(&ps, KIND_MASK)?;
        for (name, t) in ps.iter() {
            let vals = t.as_f32().map_err(|e| named(e, name))?;
            if let Some((i, &v)) = vals.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidMaskValue {
                    name: name.to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        Ok(MaskSet { tensors: ps })
    }

    /// Builds a mask from per-tensor indicator vectors already known to
    /// be 0/1. Panics in debug builds if they are not.
    pub(crate) fn from_indicators(tensors: ParamSet) -> MaskSet {
        debug_assert!(tensors.iter().all(|(_, t)| t
            .as_f32()
            .map(|v| v.iter().all(|&x| x == 0.0 || x == 1.0))
            .unwrap_or(false)));
        MaskSet { tensors }
    }
}

fn check_kind(ps: &ParamSet, expected: &str) -> Result<()> {
    if let Some(kind) = ps.metadata_value(KIND_KEY) {
        if kind != expected {
            return Err(Error::InvalidArgument(format!(
                "checkpoint is tagged kind={kind:?}, expected {expected:?}"
            )));
        }
    }
    Ok(())
}

fn named(e: Error, name: &str) -> Error {
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

// Rounds an f64 working buffer into a tensor of the requested dtype,
// enforcing the all-finite invariant.
fn materialize(name: &str, shape: &[usize], dtype: Dtype, data: Vec<f64>) -> Result<Tensor> {
    let t = match dtype {
        Dtype::F32 => Tensor::from_f32(shape.to_vec(), data.iter().map(|&v| v as f32).collect()),
        Dtype::F64 => Tensor::from_f64(shape.to_vec(), data),
    };
    t.map_err(|e| match e {
        Error::NonFinite { index, .. } => Error::NonFinite {
            name: name.to_string(),
            index,
        },
        other => other,
    })
}

/// `after - before`, elementwise per tensor. The result is stored in f64
/// so that adding it back onto `before` reproduces `after` bit-exactly.
pub fn compute_delta(after: &ParamSet, before: &ParamSet) -> Result<DeltaSet> {
    after.assert_compatible(before)?;
    let mut out = ParamSet::new();
    for (name, ta) in after.iter() {
        let tb = before.get(name).expect("compatible");
        let a = ta.to_f64_vec();
        let b = tb.to_f64_vec();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        out.insert(name, materialize(name, ta.shape(), Dtype::F64, diff)?);
    }
    Ok(DeltaSet { tensors: out })
}

/// The safety vector: aligned minus unaligned. Same arithmetic as
/// [`compute_delta`], named for the call sites that read better with it.
pub fn safety_vector(aligned: &ParamSet, unaligned: &ParamSet) -> Result<DeltaSet> {
    compute_delta(aligned, unaligned)
}

/// Marks every position whose fine-tuning delta does not strictly agree
/// in sign with the safety vector: candidate iff `d_sft * d_safe <= 0`.
/// Zeros on either side count as candidates.
pub fn interference_candidates(d_sft: &DeltaSet, d_safe: &DeltaSet) -> Result<MaskSet> {
    d_sft.tensors.assert_compatible(&d_safe.tensors)?;
    let mut out = ParamSet::new();
    for (name, ts) in d_sft.iter() {
        let a = ts.to_f64_vec();
        let b = d_safe.get(name).expect("compatible").to_f64_vec();
        let ind: Vec<f32> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| if x * y <= 0.0 { 1.0 } else { 0.0 })
            .collect();
        out.insert(
            name,
            Tensor::from_f32(ts.shape().to_vec(), ind).expect("indicator is finite"),
        );
    }
    Ok(MaskSet::from_indicators(out))
}

/// Applies masked removal: masked positions revert to `pre` (bit-exact
/// copies), unmasked positions get `pre + delta`.
pub fn remove_deltas(delta: &DeltaSet, pre: &ParamSet, mask: &MaskSet) -> Result<ParamSet> {
    delta.assert_compatible(pre)?;
    mask.tensors.assert_compatible(pre).map_err(|_| {
        Error::Incompatible("mask does not match the parameter sets".to_string())
    })?;
    let mut out = ParamSet::new();
    for (name, tp) in pre.iter() {
        let p = tp.as_f32().map_err(|e| named(e, name))?;
        let d = delta.get(name).expect("compatible").to_f64_vec();
        let m = mask
            .get(name)
            .expect("compatible")
            .as_f32()
            .expect("masks are F32");
        let merged: Vec<f32> = p
            .iter()
            .zip(&d)
            .zip(m)
            .map(|((&pv, &dv), &mv)| {
                if mv == 1.0 {
                    pv
                } else {
                    (pv as f64 + dv) as f32
                }
            })
            .collect();
        let t = Tensor::from_f32(tp.shape().to_vec(), merged).map_err(|e| match e {
            Error::NonFinite { index, .. } => Error::NonFinite {
                name: name.to_string(),
                index,
            },
            other => other,
        })?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Drop-and-rescale: each entry is zeroed independently with probability
/// `drop_rate`; survivors are divided by `1 - drop_rate`. Deterministic
/// for a given seed. Unbiased in expectation.
pub fn dare_transform(delta: &DeltaSet, drop_rate: f64, seed: u64) -> Result<DeltaSet> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::InvalidArgument(format!(
            "drop_rate must be in [0, 1), got {drop_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - drop_rate;
    let mut out = ParamSet::new();
    for (name, t) in delta.iter() {
        let d = t.to_f64_vec();
        let transformed: Vec<f64> = d
            .iter()
            .map(|&v| {
                if rng.gen::<f64>() < drop_rate {
                    0.0
                } else {
                    v / keep
                }
            })
            .collect();
        out.insert(name, materialize(name, t.shape(), t.dtype(), transformed)?);
    }
    Ok(DeltaSet { tensors: out })
}

/// Adds a scaled safety vector onto a fine-tuned checkpoint:
/// `out = sft + scale * d_safe`.
pub fn resta_merge(sft: &ParamSet, d_safe: &DeltaSet, scale: f64) -> Result<ParamSet> {
    d_safe.assert_compatible(sft)?;
    if !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scale must be finite, got {scale}"
        )));
    }
    let mut out = ParamSet::new();
    for (name, ts) in sft.iter() {
        let s = ts.to_f64_vec();
        let d = d_safe.get(name).expect("compatible").to_f64_vec();
        let merged: Vec<f64> = s.iter().zip(&d).map(|(sv, dv)| sv + scale * dv).collect();
        out.insert(name, materialize(name, ts.shape(), ts.dtype(), merged)?);
    }
    Ok(out)
}
