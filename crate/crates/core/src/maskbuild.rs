//! Mask construction: which delta coordinates get removed.
//!
//! A coordinate is masked when it is an interference candidate and its
//! importance score clears the top-rho-percent threshold. Ties at the
//! threshold are all selected, so the realized fraction can exceed rho
//! under duplicate scores.

use crate::delta::MaskSet;
use crate::error::{Error, Result};
use crate::fisher::{topk_threshold, FisherDiag, Scope};
use crate::paramset::ParamSet;
use crate::tensor::Tensor;

pub fn build_mask(
    candidates: &MaskSet,
    fisher: &FisherDiag,
    rho: f64,
    scope: Scope,
) -> Result<MaskSet> {
    let thresholds = topk_threshold(fisher, candidates, rho, scope)?;
    let mut out = ParamSet::new();
    for (name, cand) in candidates.iter() {
        let c = cand.as_f32().expect("masks are F32");
        let f = fisher.get(name).expect("shapes checked").as_f64().expect("f64");
        let s = thresholds[name];
        let m: Vec<f32> = c
            .iter()
            .zip(f)
            .map(|(&cv, &fv)| if cv == 1.0 && fv >= s { 1.0 } else { 0.0 })
            .collect();
        out.insert(
            name,
            Tensor::from_f32(cand.shape().to_vec(), m).expect("indicator is finite"),
        );
    }
    Ok(MaskSet::from_indicators(out))
}

/// Denominator for the extra-removal percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtraBasis {
    /// Percent of the non-candidate positions (the default).
    NonCandidates,
    /// Percent of the whole parameter space.
    AllParams,
}

/// Extends a full-candidate mask by the `extra` percent of non-candidate
/// positions with the LOWEST importance scores. Ties resolve by tensor
/// name, then flat index. The input mask must already cover every
/// candidate (i.e. be a rho = 100 mask).
pub fn extend_mask_more(
    mask: &MaskSet,
    candidates: &MaskSet,
    fisher: &FisherDiag,
    extra: f64,
    basis: ExtraBasis,
) -> Result<MaskSet> {
    if !(0.0..=100.0).contains(&extra) {
        return Err(Error::InvalidArgument(format!(
            "extra must be in [0, 100], got {extra}"
        )));
    }
    let mask_ps = mask.to_param_set();
    fisher.assert_shapes_match(&mask_ps)?;
    if !candidates.is_subset_of(mask) {
        return Err(Error::InvalidArgument(
            "extension requires a mask that already covers every candidate".into(),
        ));
    }

    // Pool the unmasked positions; they are exactly the non-candidates
    // because the mask covers candidates and build_mask never selects
    // outside them.
    let mut pool: Vec<(f64, &str, usize)> = Vec::new();
    let mut total_params = 0usize;
    for (name, m) in mask.iter() {
        let mv = m.as_f32().expect("masks are F32");
        total_params += mv.len();
        let f = fisher.get(name).expect("shapes checked").as_f64().expect("f64");
        for (i, (&sel, &score)) in mv.iter().zip(f).enumerate() {
            if sel == 0.0 {
                pool.push((score, name, i));
            }
        }
    }
    pool.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("fisher scores are finite")
            .then_with(|| a.1.cmp(b.1))
            .then_with(|| a.2.cmp(&b.2))
    });

    let denom = match basis {
        ExtraBasis::NonCandidates => pool.len(),
        ExtraBasis::AllParams => total_params,
    };
    let k = ((extra * denom as f64 / 100.0 + 1e-9).floor() as usize).min(pool.len());

    let mut out = mask.to_param_set();
    for (_, name, idx) in pool.into_iter().take(k) {
        let t = out.get(name).expect("present");
        let mut vals = t.as_f32().expect("masks are F32").to_vec();
        vals[idx] = 1.0;
        out.insert(
            name,
            Tensor::from_f32(t.shape().to_vec(), vals).expect("indicator is finite"),
        );
    }
    out.set_metadata(crate::checkpoint::KIND_KEY, crate::delta::KIND_MASK);
    MaskSet::from_param_set(out)
}
