//! Run orchestration: config parsing, the five-stage realignment
//! pipeline, tradeoff sweeps, and the synthetic harmful-fine-tuning
//! scenario.
//!
//! Reports always echo the full config and the SHA-256 of every input
//! file, so a run can be reproduced byte-for-byte from its report alone.
//! Sweep tables carry no timings; with a fixed seed they are
//! byte-identical across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::delta::{
    compute_delta, dare_transform, interference_candidates, remove_deltas, resta_merge,
    safety_vector, DeltaSet, MaskSet,
};
use crate::error::{Error, Result};
use crate::fisher::{estimate_fisher, FisherDiag, Scope};
use crate::maskbuild::{build_mask, extend_mask_more, ExtraBasis};
use crate::paramset::ParamSet;
use crate::refmodel::{eval_suite, forward, init_model, train, Batch, CalibRecord, EvalReport, RefModelConfig};
use crate::surgery::{run_surgery, LayerReport, SurgeryPlan};
use crate::tensor::Tensor;
use crate::world::{read_batch, write_batch, World};

/// Sentence embedded in every report so the numbers cannot be mistaken
/// for judge-scored safety results.
pub const SAFETY_METRIC_NOTE: &str = "refusal_rate is the fraction of held-out synthetic harmful \
     prompts answered with the designated refuse token; it is a desk-scale stand-in for \
     judge-scored safety, not a benchmark result";

fn default_calib_samples() -> usize {
    128
}
fn default_block_size() -> usize {
    128
}
fn default_damping() -> f64 {
    0.01
}
fn default_resta_scales() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}
fn default_dare_drop() -> f64 {
    0.9
}

/// Everything a run needs, loadable from a TOML file. CLI flags override
/// individual fields after loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Pre-trained base checkpoint.
    pub pre: PathBuf,
    /// Fine-tuned checkpoint to repair.
    pub sft: PathBuf,
    /// Safety-aligned checkpoint.
    pub align: PathBuf,
    /// Unaligned counterpart of `align`; `align - unalign` is the safety
    /// vector.
    pub unalign: PathBuf,
    /// Precomputed importance diagonal. Exactly one of `fisher` and
    /// `safety_data` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher: Option<PathBuf>,
    /// Harmful-prompt/refusal dataset for estimating importance on the
    /// aligned model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety_data: Option<PathBuf>,
    /// Downstream-task dataset whose activations calibrate the
    /// per-layer Hessians.
    pub calib_data: PathBuf,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
    /// Held-out harmful prompts for the refusal metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_safety: Option<PathBuf>,
    /// Held-out task prompts for the accuracy metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_task: Option<PathBuf>,
    /// Mask ratios in percent. `realign` uses the first entry; `sweep`
    /// uses all of them.
    pub rho: Vec<f64>,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub scope: Scope,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub refuse_token: u32,
    /// Safety-vector scales traced by the addition baseline.
    #[serde(default = "default_resta_scales")]
    pub resta_scales: Vec<f64>,
    /// Drop rate for the drop-and-rescale baseline.
    #[serde(default = "default_dare_drop")]
    pub dare_drop: f64,
    /// Extra-removal percentages (of non-candidate coordinates) swept on
    /// top of the full-candidate mask. Empty disables those rows.
    #[serde(default)]
    pub irr_more_extra: Vec<f64>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    /// Checks ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        if self.rho.is_empty() {
            return Err(Error::Config("rho list must not be empty".into()));
        }
        for &r in &self.rho {
            if !(0.0..=100.0).contains(&r) {
                return Err(Error::Config(format!("rho {r} outside [0, 100]")));
            }
        }
        for &e in &self.irr_more_extra {
            if !(0.0..=100.0).contains(&e) {
                return Err(Error::Config(format!("irr_more extra {e} outside [0, 100]")));
            }
        }
        if !(0.0..1.0).contains(&self.dare_drop) {
            return Err(Error::Config(format!(
                "dare_drop {} outside [0, 1)",
                self.dare_drop
            )));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be positive".into()));
        }
        if self.damping < 0.0 || !self.damping.is_finite() {
            return Err(Error::Config(format!("damping {} is invalid", self.damping)));
        }
        if self.calib_samples == 0 {
            return Err(Error::Config("calib_samples must be positive".into()));
        }
        match (&self.fisher, &self.safety_data) {
            (None, None) => {
                return Err(Error::Config(
                    "set either a fisher checkpoint or a safety dataset".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "fisher and safety_data are mutually exclusive; set one".into(),
                ))
            }
            _ => {}
        }
        let mut inputs: Vec<&Path> = vec![&self.pre, &self.sft, &self.align, &self.unalign, &self.calib_data];
        for p in [&self.fisher, &self.safety_data, &self.eval_safety, &self.eval_task]
            .into_iter()
            .flatten()
        {
            inputs.push(p);
        }
        for p in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn input_paths(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = vec![
            ("pre", &self.pre),
            ("sft", &self.sft),
            ("align", &self.align),
            ("unalign", &self.unalign),
            ("calib_data", &self.calib_data),
        ];
        if let Some(p) = &self.fisher {
            v.push(("fisher", p));
        }
        if let Some(p) = &self.safety_data {
            v.push(("safety_data", p));
        }
        if let Some(p) = &self.eval_safety {
            v.push(("eval_safety", p));
        }
        if let Some(p) = &self.eval_task {
            v.push(("eval_task", p));
        }
        v
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn input_hashes(config: &RunConfig) -> Result<BTreeMap<String, String>> {
    config
        .input_paths()
        .into_iter()
        .map(|(k, p)| Ok((k.to_string(), sha256_file(p)?)))
        .collect()
}

// Removes the files it was given on drop unless disarmed; keeps failed
// runs from leaving partial outputs behind.
struct OutputGuard {
    paths: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> OutputGuard {
        OutputGuard {
            paths: Vec::new(),
            armed: true,
        }
    }

    fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: f64,
}

// Everything realign loads before editing: the four checkpoints, the
// importance diagonal, and captured calibration activations.
struct PipelineInputs {
    pre: ParamSet,
    sft: ParamSet,
    align: ParamSet,
    unalign: ParamSet,
    fisher: FisherDiag,
    calib: Vec<CalibRecord>,
    calib_batch: Batch,
}

fn capture_calibration(model: &ParamSet, batch: &Batch) -> Result<Vec<CalibRecord>> {
    let cfg = RefModelConfig::infer(model, batch.context_len() as u64)?;
    let (_, records) = forward(model, &cfg, batch, true)?;
    Ok(records.expect("capture was requested"))
}

fn load_inputs(config: &RunConfig) -> Result<PipelineInputs> {
    let pre = stage("load", load_checkpoint(&config.pre))?;
    let sft = stage("load", load_checkpoint(&config.sft))?;
    let align = stage("load", load_checkpoint(&config.align))?;
    let unalign = stage("load", load_checkpoint(&config.unalign))?;
    stage("load", sft.assert_compatible(&pre))?;
    stage("load", align.assert_compatible(&unalign))?;
    stage("load", align.assert_compatible(&sft))?;

    let fisher = match (&config.fisher, &config.safety_data) {
        (Some(path), None) => {
            let ps = stage("importance", load_checkpoint(path))?;
            let f = stage("importance", FisherDiag::from_param_set(ps))?;
            stage("importance", f.assert_shapes_match(&align))?;
            f
        }
        (None, Some(path)) => {
            let batch = stage("importance", read_batch(path))?;
            let cfg = stage(
                "importance",
                RefModelConfig::infer(&align, batch.context_len() as u64),
            )?;
            stage("importance", estimate_fisher(&align, &cfg, &[batch]))?
        }
        _ => return Err(Error::Config("set either fisher or safety_data".into()).in_stage("importance")),
    };

    // Calibration activations are captured from the model being edited:
    // compensation must preserve what that model computes on task data.
    let calib_batch = stage("calibrate", read_batch(&config.calib_data))?.take(config.calib_samples);
    let calib = stage("calibrate", capture_calibration(&sft, &calib_batch))?;

    Ok(PipelineInputs {
        pre,
        sft,
        align,
        unalign,
        fisher,
        calib,
        calib_batch,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RealignReport {
    pub config: RunConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub safety_metric_note: String,
    pub rho: f64,
    pub masked_total: usize,
    pub masked_fraction: f64,
    pub stages: Vec<StageTiming>,
    pub layers: Vec<LayerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

pub struct RealignOutcome {
    pub checkpoint_path: PathBuf,
    pub report_path: PathBuf,
    pub model: ParamSet,
    pub report: RealignReport,
}

/// The five-stage pipeline: load, diff, identify, calibrate, operate.
/// Uses the first rho in the config. Writes the repaired checkpoint and
/// a JSON report into `out_dir`; on error no partial outputs remain.
pub fn realign(config: &RunConfig) -> Result<RealignOutcome> {
    config.validate()?;
    let rho = config.rho[0];
    let hashes = input_hashes(config)?;
    let mut stages = Vec::new();
    let clock = Instant::now();

    let inputs = load_inputs(config)?;
    push_timing(&mut stages, "load", clock);

    let t = Instant::now();
    let d_sft = stage("diff", compute_delta(&inputs.sft, &inputs.pre))?;
    let d_safe = stage("diff", safety_vector(&inputs.align, &inputs.unalign))?;
    push_timing(&mut stages, "diff", t);

    let t = Instant::now();
    let candidates = stage("identify", interference_candidates(&d_sft, &d_safe))?;
    let mask = stage("identify", build_mask(&candidates, &inputs.fisher, rho, config.scope))?;
    push_timing(&mut stages, "identify", t);

    let t = Instant::now();
    let plan = SurgeryPlan {
        block_size: config.block_size,
        damping_fraction: config.damping,
        ..SurgeryPlan::default()
    };
    let (model, layers) = stage(
        "operate",
        run_surgery(&inputs.sft, &inputs.pre, &mask, &inputs.calib, &plan),
    )?;
    push_timing(&mut stages, "operate", t);

    let t = Instant::now();
    let eval = match (&config.eval_safety, &config.eval_task) {
        (Some(s), Some(task)) => {
            let safety = stage("report", read_batch(s))?;
            let task = stage("report", read_batch(task))?;
            let cfg = stage(
                "report",
                RefModelConfig::infer(&model, safety.context_len() as u64),
            )?;
            Some(stage(
                "report",
                eval_suite(&model, &cfg, &safety, &task, config.refuse_token),
            )?)
        }
        _ => None,
    };
    push_timing(&mut stages, "report", t);

    let report = RealignReport {
        config: config.clone(),
        input_hashes: hashes,
        safety_metric_note: SAFETY_METRIC_NOTE.to_string(),
        rho,
        masked_total: mask.count_ones(),
        masked_fraction: mask.fraction(),
        stages,
        layers,
        eval,
    };

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let checkpoint_path = config.out_dir.join("realigned.ckpt");
    let report_path = config.out_dir.join("realign_report.json");
    let mut guard = OutputGuard::new();
    guard.track(&checkpoint_path);
    guard.track(&report_path);
    stage("report", save_checkpoint(&model, &checkpoint_path))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    stage(
        "report",
        fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e)),
    )?;
    guard.disarm();

    Ok(RealignOutcome {
        checkpoint_path,
        report_path,
        model,
        report,
    })
}

fn push_timing(stages: &mut Vec<StageTiming>, name: &str, since: Instant) {
    stages.push(StageTiming {
        stage: name.to_string(),
        wall_ms: since.elapsed().as_secs_f64() * 1e3,
    });
}

/// One sweep table row. Unused knobs stay `None` and render as empty
/// CSV cells.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<f64>,
    pub masked_fraction: f64,
    pub refusal_rate: f64,
    pub task_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config: RunConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub safety_metric_note: String,
    /// Metrics of the untouched inputs, for reference lines.
    pub reference: BTreeMap<String, EvalReport>,
    pub rows: Vec<SweepRow>,
}

pub struct SweepOutcome {
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub report: SweepReport,
}

// Random mask with the same per-tensor counts as `like`, uniform over
// each tensor's coordinates. The identify-ablation control.
fn random_mask_matching(like: &MaskSet, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ParamSet::new();
    for (name, t) in like.iter() {
        let v = t.as_f32().expect("masks are F32");
        let ones = v.iter().filter(|&&x| x == 1.0).count();
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut rng);
        let mut m = vec![0.0f32; v.len()];
        for &i in idx.iter().take(ones) {
            m[i] = 1.0;
        }
        out.insert(
            name.to_string(),
            Tensor::from_f32(t.shape().to_vec(), m).expect("indicator is finite"),
        );
    }
    MaskSet::from_param_set(out).expect("built as indicators")
}

// All-ones candidate set: importance-only selection, no interference
// screen. The sign-ablation control.
fn all_candidates(like: &ParamSet) -> MaskSet {
    let ones: ParamSet = like
        .iter()
        .map(|(n, t)| {
            let v = vec![1.0f32; t.len()];
            (n.to_string(), Tensor::from_f32(t.shape().to_vec(), v).expect("finite"))
        })
        .collect();
    MaskSet::from_param_set(ones).expect("indicators")
}

fn zero_mask(like: &ParamSet) -> MaskSet {
    let zeros: ParamSet = like
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec(), t.dtype())))
        .collect();
    MaskSet::from_param_set(zeros).expect("indicators")
}

/// Applies a delta everywhere (no mask), yielding `pre + delta`.
pub fn apply_delta(pre: &ParamSet, delta: &DeltaSet) -> Result<ParamSet> {
    remove_deltas(delta, pre, &zero_mask(pre))
}

struct Evaluator {
    safety: Batch,
    task: Batch,
    refuse_token: u32,
}

impl Evaluator {
    fn run(&self, model: &ParamSet) -> Result<EvalReport> {
        let cfg = RefModelConfig::infer(model, self.safety.context_len() as u64)?;
        eval_suite(model, &cfg, &self.safety, &self.task, self.refuse_token)
    }
}

/// Traces the safety/task tradeoff: every rho in the config crossed with
/// the repair variants, the safety-vector scale grid, and the
/// drop-and-rescale baseline. Writes `sweep.csv` and `sweep.json`;
/// byte-identical for identical configs and seeds.
pub fn sweep(config: &RunConfig) -> Result<SweepOutcome> {
    config.validate()?;
    let (eval_safety, eval_task) = match (&config.eval_safety, &config.eval_task) {
        (Some(s), Some(t)) => (s, t),
        _ => {
            return Err(Error::Config(
                "sweep needs eval_safety and eval_task datasets".into(),
            ))
        }
    };
    let hashes = input_hashes(config)?;
    let inputs = load_inputs(config)?;
    let evaluator = Evaluator {
        safety: stage("report", read_batch(eval_safety))?,
        task: stage("report", read_batch(eval_task))?,
        refuse_token: config.refuse_token,
    };

    let d_sft = stage("diff", compute_delta(&inputs.sft, &inputs.pre))?;
    let d_safe = stage("diff", safety_vector(&inputs.align, &inputs.unalign))?;
    let candidates = stage("identify", interference_candidates(&d_sft, &d_safe))?;
    let everything = all_candidates(&inputs.pre);
    let plan = SurgeryPlan {
        block_size: config.block_size,
        damping_fraction: config.damping,
        ..SurgeryPlan::default()
    };

    // The dropped-and-rescaled delta is rho-independent; its model and
    // calibration capture are shared by every dare_irr row.
    let d_dare = stage("diff", dare_transform(&d_sft, config.dare_drop, config.seed))?;
    let sft_dare = stage("diff", apply_delta(&inputs.pre, &d_dare))?;
    let cand_dare = stage("identify", interference_candidates(&d_dare, &d_safe))?;
    let calib_dare = stage("calibrate", capture_calibration(&sft_dare, &inputs.calib_batch))?;

    let mut reference = BTreeMap::new();
    reference.insert("pre".to_string(), evaluator.run(&inputs.pre)?);
    reference.insert("sft".to_string(), evaluator.run(&inputs.sft)?);
    reference.insert("align".to_string(), evaluator.run(&inputs.align)?);
    reference.insert("unalign".to_string(), evaluator.run(&inputs.unalign)?);

    let mut rows = Vec::new();
    for (ri, &rho) in config.rho.iter().enumerate() {
        let mask = stage("identify", build_mask(&candidates, &inputs.fisher, rho, config.scope))?;

        // Full method: interference screen, importance ranking,
        // compensated removal.
        let (irr_model, _) = stage(
            "operate",
            run_surgery(&inputs.sft, &inputs.pre, &mask, &inputs.calib, &plan),
        )?;
        rows.push(row_rho("irr", rho, &mask, evaluator.run(&irr_model)?));

        // Same mask, no compensation.
        let plain = stage("operate", remove_deltas(&d_sft, &inputs.pre, &mask))?;
        rows.push(row_rho("irr_no_recal", rho, &mask, evaluator.run(&plain)?));

        // Importance-only selection (no sign screen), compensated.
        let mask_si = stage(
            "identify",
            build_mask(&everything, &inputs.fisher, rho, config.scope),
        )?;
        let (model_si, _) = stage(
            "operate",
            run_surgery(&inputs.sft, &inputs.pre, &mask_si, &inputs.calib, &plan),
        )?;
        rows.push(row_rho("irr_no_si", rho, &mask_si, evaluator.run(&model_si)?));

        // Random selection with matched per-tensor counts, compensated.
        let mask_id = random_mask_matching(&mask, config.seed.wrapping_mul(0x9e3779b9).wrapping_add(ri as u64));
        let (model_id, _) = stage(
            "operate",
            run_surgery(&inputs.sft, &inputs.pre, &mask_id, &inputs.calib, &plan),
        )?;
        rows.push(row_rho("irr_no_id", rho, &mask_id, evaluator.run(&model_id)?));

        // Drop-and-rescale the delta first, then repair what remains.
        let mask_dare = stage("identify", build_mask(&cand_dare, &inputs.fisher, rho, config.scope))?;
        let (model_dare, _) = stage(
            "operate",
            run_surgery(&sft_dare, &inputs.pre, &mask_dare, &calib_dare, &plan),
        )?;
        let mut r = row_rho("dare_irr", rho, &mask_dare, evaluator.run(&model_dare)?);
        r.drop_rate = Some(config.dare_drop);
        rows.push(r);
    }

    // Extra removal beyond the candidate set, lowest importance first.
    if !config.irr_more_extra.is_empty() {
        let full = stage("identify", build_mask(&candidates, &inputs.fisher, 100.0, config.scope))?;
        for &extra in &config.irr_more_extra {
            let mask_more = stage(
                "identify",
                extend_mask_more(&full, &candidates, &inputs.fisher, extra, ExtraBasis::NonCandidates),
            )?;
            let (model_more, _) = stage(
                "operate",
                run_surgery(&inputs.sft, &inputs.pre, &mask_more, &inputs.calib, &plan),
            )?;
            let mut r = row_rho("irr_more", 100.0, &mask_more, evaluator.run(&model_more)?);
            r.extra = Some(extra);
            rows.push(r);
        }
    }

    // Safety-vector addition at each scale; no removal, so no mask.
    for &scale in &config.resta_scales {
        let merged = stage("operate", resta_merge(&inputs.sft, &d_safe, scale))?;
        let e = evaluator.run(&merged)?;
        rows.push(SweepRow {
            method: "resta".to_string(),
            rho: None,
            scale: Some(scale),
            drop_rate: None,
            extra: None,
            masked_fraction: 0.0,
            refusal_rate: e.refusal_rate,
            task_accuracy: e.task_accuracy,
        });
    }

    // Drop-and-rescale alone.
    let e = evaluator.run(&sft_dare)?;
    rows.push(SweepRow {
        method: "dare".to_string(),
        rho: None,
        scale: None,
        drop_rate: Some(config.dare_drop),
        extra: None,
        masked_fraction: 0.0,
        refusal_rate: e.refusal_rate,
        task_accuracy: e.task_accuracy,
    });

    let report = SweepReport {
        config: config.clone(),
        input_hashes: hashes,
        safety_metric_note: SAFETY_METRIC_NOTE.to_string(),
        reference,
        rows,
    };

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let csv_path = config.out_dir.join("sweep.csv");
    let json_path = config.out_dir.join("sweep.json");
    let mut guard = OutputGuard::new();
    guard.track(&csv_path);
    guard.track(&json_path);
    fs::write(&csv_path, render_csv(&report.rows)).map_err(|e| Error::io(&csv_path, e))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    guard.disarm();

    Ok(SweepOutcome {
        csv_path,
        json_path,
        report,
    })
}

fn row_rho(method: &str, rho: f64, mask: &MaskSet, e: EvalReport) -> SweepRow {
    SweepRow {
        method: method.to_string(),
        rho: Some(rho),
        scale: None,
        drop_rate: None,
        extra: None,
        masked_fraction: mask.fraction(),
        refusal_rate: e.refusal_rate,
        task_accuracy: e.task_accuracy,
    }
}

fn render_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("method,rho,scale,drop_rate,extra,masked_fraction,refusal_rate,task_accuracy\n");
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            num(r.rho),
            num(r.scale),
            num(r.drop_rate),
            num(r.extra),
            r.masked_fraction,
            r.refusal_rate,
            r.task_accuracy
        ));
    }
    out
}

/// Trained checkpoints, datasets, and the sweep for the synthetic
/// harmful-fine-tuning story.
pub struct ScenarioOutcome {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub sweep: SweepOutcome,
    /// init / align / unalign / sft_benign / sft (harmful-mix) metrics.
    pub reference: BTreeMap<String, EvalReport>,
}

// Training recipe constants. Sized so the whole scenario stays in the
// tens of seconds while leaving clear gaps between aligned, degraded,
// and repaired behavior. The aligned model learns refusal on harmful
// prompts and generic chat on benign ones, but never the task answers:
// the fine-tune is what teaches the task, so reverting toward the base
// has a real cost for repair methods to trade against.
const HIDDEN: [usize; 2] = [24, 24];
const ALIGN_SAFETY_SAMPLES: usize = 300;
const ALIGN_CHAT_SAMPLES: usize = 300;
const ALIGN_EPOCHS: usize = 12;
const ALIGN_LR: f64 = 0.4;
const UNALIGN_SAMPLES: usize = 300;
const UNALIGN_EPOCHS: usize = 6;
const UNALIGN_LR: f64 = 0.3;
const SFT_TASK_SAMPLES: usize = 500;
const SFT_HARMFUL_SAMPLES: usize = 80;
const SFT_EPOCHS: usize = 5;
const SFT_LR: f64 = 0.3;
const FISHER_SAMPLES: usize = 128;
const CALIB_POOL: usize = 256;
const EVAL_SAMPLES: usize = 400;

/// Builds the whole story from one seed: align a fresh model, break its
/// refusals by fine-tuning on a task mixed with harmful compliance, then
/// sweep every repair method over the rho grid. The aligned model is the
/// base the fine-tunes start from, so it doubles as the revert target for
/// removal. All artifacts (datasets, checkpoints, tables, report) land
/// under `out`.
pub fn scenario_harmful_ft(seed: u64, out: &Path) -> Result<ScenarioOutcome> {
    let w = World::standard();
    let cfg = w.model_config(HIDDEN.to_vec(), seed);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Seed layout: one stream per dataset/phase, all derived from the
    // scenario seed so a seed change moves everything together.
    let ds = |k: u64| seed.wrapping_mul(6364136223846793005).wrapping_add(k);

    let align_data = stage(
        "train",
        w.harmful_refusal_batch(ALIGN_SAFETY_SAMPLES, ds(2))
            .concat(&w.benign_chat_batch(ALIGN_CHAT_SAMPLES, ds(1))),
    )?;
    let unalign_data = w.harmful_comply_batch(UNALIGN_SAMPLES, ds(3));
    let benign_data = w.task_batch(SFT_TASK_SAMPLES, ds(4));
    let harmful_mix = stage(
        "train",
        w.task_batch(SFT_TASK_SAMPLES, ds(4))
            .concat(&w.harmful_comply_batch(SFT_HARMFUL_SAMPLES, ds(5))),
    )?;
    let safety_data = w.harmful_refusal_batch(FISHER_SAMPLES, ds(6));
    let calib_data = w.task_batch(CALIB_POOL, ds(7));
    let eval_safety = w.harmful_refusal_batch(EVAL_SAMPLES, ds(8));
    let eval_task = w.task_batch(EVAL_SAMPLES, ds(9));

    let init = init_model(&cfg);
    let align = stage("train", train(&init, &cfg, &align_data, ALIGN_LR, ALIGN_EPOCHS, ds(10)))?;
    let unalign = stage("train", train(&align, &cfg, &unalign_data, UNALIGN_LR, UNALIGN_EPOCHS, ds(11)))?;
    let sft_benign = stage("train", train(&align, &cfg, &benign_data, SFT_LR, SFT_EPOCHS, ds(12)))?;
    let sft_harmful = stage("train", train(&align, &cfg, &harmful_mix, SFT_LR, SFT_EPOCHS, ds(13)))?;

    // The safety vector must move the unaligned model back onto the
    // aligned one exactly; catches checkpoint mixups immediately.
    let d_safe = stage("diff", safety_vector(&align, &unalign))?;
    let restored = stage("diff", resta_merge(&unalign, &d_safe, 1.0))?;
    if !restored.bit_eq(&align) {
        return Err(Error::Invariant(
            "unalign + safety vector failed to reproduce align bit-exactly".into(),
        ));
    }

    let ckpt_dir = out.join("checkpoints");
    let data_dir = out.join("data");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let ckpt = |name: &str| ckpt_dir.join(name);
    save_checkpoint(&init, &ckpt("init.ckpt"))?;
    save_checkpoint(&align, &ckpt("align.ckpt"))?;
    save_checkpoint(&unalign, &ckpt("unalign.ckpt"))?;
    save_checkpoint(&sft_benign, &ckpt("sft_benign.ckpt"))?;
    save_checkpoint(&sft_harmful, &ckpt("sft_harmful.ckpt"))?;
    save_checkpoint(&d_safe.to_param_set(), &ckpt("d_safe.ckpt"))?;
    let datum = |name: &str| data_dir.join(name);
    write_batch(&safety_data, &datum("safety.txt"))?;
    write_batch(&calib_data, &datum("calib.txt"))?;
    write_batch(&eval_safety, &datum("eval_safety.txt"))?;
    write_batch(&eval_task, &datum("eval_task.txt"))?;

    // The fine-tunes start from the aligned model, so it is also the
    // base that removal reverts toward.
    let config = RunConfig {
        pre: ckpt("align.ckpt"),
        sft: ckpt("sft_harmful.ckpt"),
        align: ckpt("align.ckpt"),
        unalign: ckpt("unalign.ckpt"),
        fisher: None,
        safety_data: Some(datum("safety.txt")),
        calib_data: datum("calib.txt"),
        calib_samples: 128,
        eval_safety: Some(datum("eval_safety.txt")),
        eval_task: Some(datum("eval_task.txt")),
        rho: (0..=10).map(|i| i as f64 * 10.0).collect(),
        block_size: 128,
        damping: 0.01,
        scope: Scope::PerTensor,
        out_dir: out.to_path_buf(),
        seed,
        refuse_token: w.refuse_token,
        resta_scales: default_resta_scales(),
        dare_drop: 0.9,
        irr_more_extra: vec![25.0, 50.0, 75.0, 100.0],
    };

    let outcome = sweep(&config)?;

    let mut reference = outcome.report.reference.clone();
    let ecfg = RefModelConfig::infer(&sft_benign, eval_safety.context_len() as u64)?;
    reference.insert(
        "sft_benign".to_string(),
        eval_suite(&sft_benign, &ecfg, &eval_safety, &eval_task, w.refuse_token)?,
    );
    reference.insert(
        "init".to_string(),
        eval_suite(&init, &ecfg, &eval_safety, &eval_task, w.refuse_token)?,
    );

    // The story only exists if the harmful mix actually degraded
    // refusals; fail loudly rather than report a flat sweep.
    let align_refusal = reference["align"].refusal_rate;
    let harmed_refusal = reference["sft"].refusal_rate;
    if harmed_refusal >= align_refusal {
        return Err(Error::Invariant(format!(
            "harmful-mix fine-tune did not reduce refusal rate ({harmed_refusal} vs {align_refusal})"
        )));
    }

    // Full extension must revert every coordinate: mask = all ones, so
    // the output is the aligned base, bit for bit.
    let d_sft = compute_delta(&sft_harmful, &align)?;
    let candidates = interference_candidates(&d_sft, &d_safe)?;
    let fisher = {
        let fcfg = RefModelConfig::infer(&align, safety_data.context_len() as u64)?;
        estimate_fisher(&align, &fcfg, &[safety_data.clone()])?
    };
    let full = build_mask(&candidates, &fisher, 100.0, config.scope)?;
    let all = extend_mask_more(&full, &candidates, &fisher, 100.0, ExtraBasis::NonCandidates)?;
    let reverted = remove_deltas(&d_sft, &align, &all)?;
    if !reverted.bit_eq(&align) {
        return Err(Error::Invariant(
            "full extension mask did not revert the model to the aligned base exactly".into(),
        ));
    }

    let report_path = out.join("scenario_report.json");
    #[derive(Serialize)]
    struct ScenarioReport<'a> {
        seed: u64,
        safety_metric_note: &'a str,
        config: &'a RunConfig,
        reference: &'a BTreeMap<String, EvalReport>,
    }
    let json = serde_json::to_string_pretty(&ScenarioReport {
        seed,
        safety_metric_note: SAFETY_METRIC_NOTE,
        config: &config,
        reference: &reference,
    })
    .expect("report serializes");
    fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;

    Ok(ScenarioOutcome {
        dir: out.to_path_buf(),
        config,
        sweep: outcome,
        reference,
    })
}
