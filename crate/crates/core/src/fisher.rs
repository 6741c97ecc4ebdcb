//! Diagonal Fisher estimation and score thresholds.
//!
//! The importance score of a coordinate is the average over safety
//! samples of the squared log-likelihood gradient, computed one sample
//! at a time (squaring happens inside the average, so batching the
//! gradient first would give a different, wrong quantity). Scores are
//! estimated on the aligned model and are independent of any fine-tune,
//! so one estimate serves every downstream run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::KIND_KEY;
use crate::delta::MaskSet;
use crate::error::{Error, Result};
use crate::paramset::ParamSet;
use crate::refmodel::{loss_and_grads, Batch, RefModelConfig};
use crate::tensor::Tensor;

pub const KIND_FISHER: &str = "fisher";
const N_SAMPLES_KEY: &str = "n_samples";

/// Per-coordinate nonnegative importance scores, shaped like the model.
/// Stored in f64: the squared-gradient accumulation is a 64-bit path.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    entries: BTreeMap<String, Tensor>,
    n_samples: usize,
}

impl FisherDiag {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut ps: ParamSet = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ps.set_metadata(KIND_KEY, KIND_FISHER);
        ps.set_metadata(N_SAMPLES_KEY, self.n_samples.to_string());
        ps
    }

    pub fn from_param_set(ps: ParamSet) -> Result<FisherDiag> {
        if let Some(kind) = ps.metadata_value(KIND_KEY) {
            if kind != KIND_FISHER {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint is tagged kind={kind:?}, expected {KIND_FISHER:?}"
                )));
            }
        }
        let n_samples = ps
            .metadata_value(N_SAMPLES_KEY)
            .ok_or_else(|| Error::InvalidArgument("fisher file lacks n_samples".into()))?
            .parse::<usize>()
            .map_err(|e| Error::InvalidArgument(format!("bad n_samples: {e}")))?;
        let mut entries = BTreeMap::new();
        for (name, t) in ps.iter() {
            let vals = t.as_f64().map_err(|_| Error::DtypeMismatch {
                name: name.to_string(),
                expected: "F64",
                found: t.dtype().tag(),
            })?;
            if let Some(i) = vals.iter().position(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "fisher entry {name:?} is negative at flat index {i}"
                )));
            }
            entries.insert(name.to_string(), t.clone());
        }
        Ok(FisherDiag { entries, n_samples })
    }

    /// Names and shapes must mirror `other`; dtypes intentionally differ
    /// (scores are f64, checkpoints f32).
    pub fn assert_shapes_match(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.len() {
            return Err(Error::Incompatible(format!(
                "fisher has {} tensors, parameter set has {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (name, t) in &self.entries {
            let o = other
                .get(name)
                .ok_or_else(|| Error::Incompatible(format!("fisher has extra tensor {name:?}")))?;
            if t.shape() != o.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    left: t.shape().to_vec(),
                    right: o.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Averages squared per-sample log-likelihood gradients of `model` over
/// every row of `safety_batches`. The NLL gradient is the negated
/// log-likelihood gradient, so squaring uses it directly.
pub fn estimate_fisher(
    model: &ParamSet,
    cfg: &RefModelConfig,
    safety_batches: &[Batch],
) -> Result<FisherDiag> {
    let total: usize = safety_batches.iter().map(Batch::n_samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "fisher estimation needs at least one sample".into(),
        ));
    }
    let mut sums: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for batch in safety_batches {
        for (tokens, target) in batch.rows() {
            let single = Batch::new(batch.context_len(), tokens.to_vec(), vec![target])?;
            let (_, grads) = loss_and_grads(model, cfg, &single)?;
            for (name, g) in &grads {
                let gv = g.as_f64().expect("gradients are f64");
                let entry = sums
                    .entry(name.clone())
                    .or_insert_with(|| (g.shape().to_vec(), vec![0.0; gv.len()]));
                for (acc, &v) in entry.1.iter_mut().zip(gv) {
                    *acc += v * v;
                }
            }
        }
    }
    let inv = 1.0 / total as f64;
    let mut entries = BTreeMap::new();
    for (name, (shape, sum)) in sums {
        let avg: Vec<f64> = sum.iter().map(|&v| v * inv).collect();
        entries.insert(name, Tensor::from_f64(shape, avg)?);
    }
    Ok(FisherDiag {
        entries,
        n_samples: total,
    })
}

/// Threshold scope: rank scores within each tensor or across the whole
/// candidate pool at once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    #[default]
    PerTensor,
    Global,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scope> {
        match s {
            "per-tensor" => Ok(Scope::PerTensor),
            "global" => Ok(Scope::Global),
            other => Err(Error::InvalidArgument(format!(
                "scope must be per-tensor or global, got {other:?}"
            ))),
        }
    }
}

// Smallest k covering at least rho percent of n. The epsilon guards
// against float noise pushing an exact integer product over its ceiling.
fn top_k_count(rho: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (rho * n as f64 / 100.0 - 1e-9).ceil() as usize;
    k.min(n)
}

/// The score of the parameter at the top rho percent position among
/// candidates, per scope. rho 0 (or an empty candidate pool) yields the
/// +infinity sentinel, which no finite score passes; rho 100 yields the
/// candidate minimum. Every tensor name gets an entry.
pub fn topk_threshold(
    fisher: &FisherDiag,
    candidates: &MaskSet,
    rho: f64,
    scope: Scope,
) -> Result<BTreeMap<String, f64>> {
    if !(0.0..=100.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "rho must be in [0, 100], got {rho}"
        )));
    }
    let cand_ps = candidates.to_param_set();
    fisher.assert_shapes_match(&cand_ps)?;

    let candidate_scores = |name: &str| -> Vec<f64> {
        let f = fisher.get(name).expect("checked").as_f64().expect("f64");
        let c = candidates
            .get(name)
            .expect("checked")
            .as_f32()
            .expect("masks are F32");
        f.iter()
            .zip(c)
            .filter(|(_, &cv)| cv == 1.0)
            .map(|(&fv, _)| fv)
            .collect()
    };

    let mut out = BTreeMap::new();
    match scope {
        Scope::PerTensor => {
            for name in fisher.names() {
                let scores = candidate_scores(name);
                out.insert(name.to_string(), kth_largest(scores, rho));
            }
        }
        Scope::Global => {
            let mut pool = Vec::new();
            for name in fisher.names() {
                pool.extend(candidate_scores(name));
            }
            let threshold = kth_largest(pool, rho);
            for name in fisher.names() {
                out.insert(name.to_string(), threshold);
            }
        }
    }
    Ok(out)
}

// k-th largest score via quickselect; the test suite pins this against a
// full sort.
fn kth_largest(mut scores: Vec<f64>, rho: f64) -> f64 {
    let k = top_k_count(rho, scores.len());
    if k == 0 {
        return f64::INFINITY;
    }
    let (_, kth, _) = scores.select_nth_unstable_by(k - 1, |a, b| {
        b.partial_cmp(a).expect("fisher scores are finite")
    });
    *kth
}
