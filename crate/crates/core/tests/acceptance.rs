//! Acceptance gate for the realignment toolkit. Each test checks one
//! release criterion against an oracle implemented here from scratch
//! (full sorts, finite differences, dense Gaussian elimination, a
//! second backprop) rather than against the library's own internals.
//! Every test prints a `PASS <name>` line with its measured runtime,
//! visible under `--nocapture`; a failed criterion panics with the
//! offending coordinates. Runtime budgets are asserted, not advisory.

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use realign_core::checkpoint::{self, KIND_KEY};
use realign_core::pipeline::{scenario_harmful_ft, sweep, RunConfig};
use realign_core::refmodel::{bias_name, weight_name, EMBED_NAME};
use realign_core::world::{write_batch, World};
use realign_core::{
    build_hessian, build_mask, compute_delta, dare_transform, estimate_fisher, init_model,
    interference_candidates, load_checkpoint, loss_and_grads, recalibrate_layer, remove_deltas,
    resta_merge, run_surgery, safety_vector, save_checkpoint, train, Batch, CalibRecord,
    FisherDiag, ParamSet, RefModelConfig, Scope, SurgeryPlan, Tensor,
};

fn budget(name: &str, started: Instant, limit: Duration) {
    let elapsed = started.elapsed();
    assert!(
        elapsed <= limit,
        "{name} took {elapsed:.2?}, budget is {limit:.2?}"
    );
    println!("PASS {name} ({elapsed:.2?})");
}

fn rand_f32(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// Random checkpoint over a fixed geometry; values stay in (-2, 2) so
// every delta is reconstructible exactly after the f32 round-trip.
fn random_params(geometry: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    for (name, shape) in geometry {
        let n: usize = shape.iter().product();
        ps.insert(
            name.to_string(),
            Tensor::from_f32(shape.clone(), rand_f32(rng, n, -2.0, 2.0)).unwrap(),
        );
    }
    ps
}

fn synthetic_fisher(geometry: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> FisherDiag {
    let mut ps = ParamSet::new();
    for (name, shape) in geometry {
        let n: usize = shape.iter().product();
        // A dose of exact duplicates so threshold ties actually occur.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < 0.1 {
                    0.5
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        ps.insert(name.to_string(), Tensor::from_f64(shape.clone(), scores).unwrap());
    }
    ps.set_metadata(KIND_KEY, realign_core::fisher::KIND_FISHER);
    ps.set_metadata("n_samples", "7");
    FisherDiag::from_param_set(ps).unwrap()
}

// Straight-line rendition of the identify/rank/remove chain: widen to
// f64, flag sign disagreements, rank candidate scores with a full sort,
// revert selected coordinates. No shared code with the library path.
fn straight_line_removal(
    pre: &ParamSet,
    sft: &ParamSet,
    align: &ParamSet,
    unalign: &ParamSet,
    fisher: &FisherDiag,
    rho: f64,
    scope: Scope,
) -> ParamSet {
    let mut d_sft: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut cand: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (name, tp) in pre.iter() {
        let p = tp.as_f32().unwrap();
        let s = sft.get(name).unwrap().as_f32().unwrap();
        let a = align.get(name).unwrap().as_f32().unwrap();
        let u = unalign.get(name).unwrap().as_f32().unwrap();
        let ds: Vec<f64> = s.iter().zip(p).map(|(&x, &y)| x as f64 - y as f64).collect();
        let dsafe: Vec<f64> = a.iter().zip(u).map(|(&x, &y)| x as f64 - y as f64).collect();
        cand.insert(name, ds.iter().zip(&dsafe).map(|(&x, &y)| x * y <= 0.0).collect());
        d_sft.insert(name, ds);
    }

    // Threshold: smallest score among the top ceil(rho% of pool) after a
    // full descending sort; ties at the cut are all admitted later by
    // the >= comparison.
    let cut = |mut pool: Vec<f64>| -> f64 {
        let k = ((rho * pool.len() as f64 / 100.0 - 1e-9).ceil() as usize).min(pool.len());
        if k == 0 {
            return f64::INFINITY;
        }
        pool.sort_by(|a, b| b.partial_cmp(a).unwrap());
        pool[k - 1]
    };
    let scores_of = |name: &str| -> Vec<f64> {
        let f = fisher.get(name).unwrap().as_f64().unwrap();
        f.iter()
            .zip(&cand[name])
            .filter(|(_, &c)| c)
            .map(|(&v, _)| v)
            .collect()
    };
    let thresholds: BTreeMap<&str, f64> = match scope {
        Scope::PerTensor => pre.names().map(|n| (n, cut(scores_of(n)))).collect(),
        Scope::Global => {
            let mut pool = Vec::new();
            for n in pre.names() {
                pool.extend(scores_of(n));
            }
            let t = cut(pool);
            pre.names().map(|n| (n, t)).collect()
        }
    };

    let mut out = ParamSet::new();
    for (name, tp) in pre.iter() {
        let p = tp.as_f32().unwrap();
        let f = fisher.get(name).unwrap().as_f64().unwrap();
        let t = thresholds[name];
        let merged: Vec<f32> = (0..p.len())
            .map(|i| {
                if cand[name][i] && f[i] >= t {
                    p[i]
                } else {
                    (p[i] as f64 + d_sft[name][i]) as f32
                }
            })
            .collect();
        out.insert(name.to_string(), Tensor::from_f32(tp.shape().to_vec(), merged).unwrap());
    }
    out
}

#[test]
fn a1_removal_matches_straight_line_reference() {
    let started = Instant::now();
    let geometry: [(&str, Vec<usize>); 4] = [
        ("a.weight", vec![37, 19]),
        ("b.bias", vec![211]),
        ("c.weight", vec![64, 100]),
        ("d.scale", vec![1000]),
    ];
    let total: usize = geometry.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert!(total <= 10_000);

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let pre = random_params(&geometry, &mut rng);
    let sft = random_params(&geometry, &mut rng);
    let align = random_params(&geometry, &mut rng);
    let unalign = random_params(&geometry, &mut rng);
    let fisher = synthetic_fisher(&geometry, &mut rng);

    let d_sft = compute_delta(&sft, &pre).unwrap();
    let d_safe = safety_vector(&align, &unalign).unwrap();
    let candidates = interference_candidates(&d_sft, &d_safe).unwrap();

    for scope in [Scope::PerTensor, Scope::Global] {
        for rho in [0.0, 13.0, 37.5, 50.0, 100.0] {
            let mask = build_mask(&candidates, &fisher, rho, scope).unwrap();
            let got = remove_deltas(&d_sft, &pre, &mask).unwrap();
            let want = straight_line_removal(&pre, &sft, &align, &unalign, &fisher, rho, scope);
            assert!(
                got.bit_eq(&want),
                "pipeline and straight-line outputs differ at rho {rho}, scope {scope:?}"
            );
        }
    }

    // rho 0 never selects anything, so the fine-tune survives untouched.
    let empty = build_mask(&candidates, &fisher, 0.0, Scope::PerTensor).unwrap();
    let untouched = remove_deltas(&d_sft, &pre, &empty).unwrap();
    assert!(untouched.bit_eq(&sft), "rho 0 must return the sft model bit-exactly");

    // rho 100 reverts exactly the candidate coordinates.
    let full = build_mask(&candidates, &fisher, 100.0, Scope::PerTensor).unwrap();
    let reverted = remove_deltas(&d_sft, &pre, &full).unwrap();
    for (name, t) in reverted.iter() {
        let r = t.as_f32().unwrap();
        let p = pre.get(name).unwrap().as_f32().unwrap();
        let s = sft.get(name).unwrap().as_f32().unwrap();
        let c = candidates.get(name).unwrap().as_f32().unwrap();
        for i in 0..r.len() {
            let want = if c[i] == 1.0 { p[i] } else { s[i] };
            assert_eq!(
                r[i].to_bits(),
                want.to_bits(),
                "{name}[{i}]: rho 100 revert mismatch"
            );
        }
    }

    budget("removal matches straight-line reference", started, Duration::from_secs(1));
}

// Second, independently structured implementation of the classifier:
// flat f64 buffers, explicit matvec helpers, softmax via direct
// exponentials. Used to recompute per-sample gradients from scratch.
struct FlatNet {
    vocab: usize,
    dims: Vec<usize>,
    embed: Vec<f64>,
    ws: Vec<Vec<f64>>,
    bs: Vec<Vec<f64>>,
}

impl FlatNet {
    fn read(model: &ParamSet, cfg: &RefModelConfig) -> FlatNet {
        let layers = cfg.hidden_dims.len();
        FlatNet {
            vocab: cfg.vocab_size,
            dims: cfg.hidden_dims.clone(),
            embed: model.get(EMBED_NAME).unwrap().to_f64_vec(),
            ws: (1..=layers)
                .map(|l| model.get(&weight_name(l)).unwrap().to_f64_vec())
                .collect(),
            bs: (1..=layers)
                .map(|l| model.get(&bias_name(l)).unwrap().to_f64_vec())
                .collect(),
        }
    }

    fn out_dim(&self, layer: usize) -> usize {
        self.bs[layer].len()
    }

    // Activations per stage: pooled embedding, then each layer output
    // (tanh applied except on the head).
    fn forward(&self, tokens: &[u32]) -> Vec<Vec<f64>> {
        let h0 = self.dims[0];
        let mut pooled = vec![0.0f64; h0];
        for &t in tokens {
            for (acc, e) in pooled.iter_mut().zip(&self.embed[t as usize * h0..]) {
                *acc += e;
            }
        }
        for v in &mut pooled {
            *v /= tokens.len() as f64;
        }
        let mut acts = vec![pooled];
        for l in 0..self.ws.len() {
            let x = acts.last().unwrap();
            let fan_in = x.len();
            let mut z = vec![0.0f64; self.out_dim(l)];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = self.bs[l][o];
                for (i, &xi) in x.iter().enumerate() {
                    acc += self.ws[l][o * fan_in + i] * xi;
                }
                *zo = if l + 1 < self.ws.len() { acc.tanh() } else { acc };
            }
            acts.push(z);
        }
        acts
    }

    // Gradient of this sample's NLL for every parameter tensor.
    fn sample_grads(&self, tokens: &[u32], target: u32) -> BTreeMap<String, Vec<f64>> {
        let acts = self.forward(tokens);
        let logits = acts.last().unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let z_sum: f64 = exps.iter().sum();
        let mut dz: Vec<f64> = exps.iter().map(|&e| e / z_sum).collect();
        dz[target as usize] -= 1.0;

        let mut out = BTreeMap::new();
        let layers = self.ws.len();
        for l in (0..layers).rev() {
            let x = &acts[l];
            let fan_in = x.len();
            let mut gw = vec![0.0f64; self.ws[l].len()];
            let mut dx = vec![0.0f64; fan_in];
            for (o, &d) in dz.iter().enumerate() {
                for i in 0..fan_in {
                    gw[o * fan_in + i] = d * x[i];
                    dx[i] += d * self.ws[l][o * fan_in + i];
                }
            }
            out.insert(weight_name(l + 1), gw);
            out.insert(bias_name(l + 1), dz.clone());
            if l > 0 {
                // acts[l] holds tanh outputs for every non-head layer.
                dz = dx.iter().zip(&acts[l]).map(|(&d, &a)| d * (1.0 - a * a)).collect();
            } else {
                let h0 = self.dims[0];
                let mut ge = vec![0.0f64; self.vocab * h0];
                for &t in tokens {
                    for (i, &d) in dx.iter().enumerate() {
                        ge[t as usize * h0 + i] += d / tokens.len() as f64;
                    }
                }
                out.insert(EMBED_NAME.to_string(), ge);
            }
        }
        out
    }
}

fn random_batch(cfg: &RefModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let tokens = (0..n * cfg.context_len)
        .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
        .collect();
    let targets = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
    Batch::new(cfg.context_len, tokens, targets).unwrap()
}

#[test]
fn a2_fisher_matches_independent_per_sample_recompute() {
    let started = Instant::now();
    for (case, &n) in [1usize, 8, 64].iter().enumerate() {
        let cfg = RefModelConfig::new(8, 4, vec![6, 5], 100 + case as u64).unwrap();
        let model = init_model(&cfg);
        assert!(model.param_count() <= 500);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + case as u64);
        let batch = random_batch(&cfg, n, &mut rng);

        let fisher = estimate_fisher(&model, &cfg, &[batch.clone()]).unwrap();
        assert_eq!(fisher.n_samples(), n);

        let net = FlatNet::read(&model, &cfg);
        let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (tokens, target) in batch.rows() {
            for (name, g) in net.sample_grads(tokens, target) {
                let acc = sums.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v * v;
                }
            }
        }

        for (name, t) in fisher.iter() {
            let got = t.as_f64().unwrap();
            let want = &sums[name];
            for i in 0..got.len() {
                let w = want[i] / n as f64;
                let tol = 1e-10 * got[i].abs().max(w.abs()).max(1.0);
                assert!(
                    (got[i] - w).abs() <= tol,
                    "fisher {name}[{i}] (n={n}): got {}, recomputed {w}",
                    got[i]
                );
            }
        }
    }
    budget(
        "fisher matches independent per-sample recompute",
        started,
        Duration::from_secs(10),
    );
}

#[test]
fn a3_gradients_match_central_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    for case in 0..22u64 {
        let vocab = rng.gen_range(4..10usize);
        let context = rng.gen_range(1..6usize);
        let mut dims = vec![rng.gen_range(3..8usize)];
        if rng.gen::<bool>() {
            dims.push(rng.gen_range(3..8usize));
        }
        let cfg = RefModelConfig::new(vocab, context, dims, case).unwrap();

        // Carry the model in f64 so both the analytic gradient and the
        // finite differences probe the identical smooth function, with
        // no f32 quantization between them.
        let model: ParamSet = init_model(&cfg)
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Tensor::from_f64(t.shape().to_vec(), t.to_f64_vec()).unwrap(),
                )
            })
            .collect();
        let batch = random_batch(&cfg, 6, &mut rng);
        let (_, grads) = loss_and_grads(&model, &cfg, &batch).unwrap();

        for (name, gt) in &grads {
            let g = gt.as_f64().unwrap();
            let base = model.get(name).unwrap().to_f64_vec();
            for i in 0..base.len() {
                let h = 1e-4 * base[i].abs().max(1.0);
                let probe = |v: f64| -> f64 {
                    let mut bumped = base.clone();
                    bumped[i] = v;
                    let mut m2: ParamSet = model
                        .iter()
                        .map(|(n, t)| (n.to_string(), t.clone()))
                        .collect();
                    m2.insert(
                        name.clone(),
                        Tensor::from_f64(gt.shape().to_vec(), bumped).unwrap(),
                    );
                    loss_and_grads(&m2, &cfg, &batch).unwrap().0
                };
                let fd = (probe(base[i] + h) - probe(base[i] - h)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "case {case} {name}[{i}]: analytic {} vs fd {fd}, rel {rel}",
                    g[i]
                );
            }
        }
    }
    budget(
        "analytic gradients match central finite differences",
        started,
        Duration::from_secs(30),
    );
}

// Dense solve of `a x = b` with partial pivoting; the oracle's only
// linear-algebra dependency.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, d: usize) -> Vec<f64> {
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().partial_cmp(&a[j * d + col].abs()).unwrap())
            .unwrap();
        if pivot != col {
            for k in 0..d {
                a.swap(col * d + k, pivot * d + k);
            }
            b.swap(col, pivot);
        }
        let p = a[col * d + col];
        for row in col + 1..d {
            let f = a[row * d + col] / p;
            if f == 0.0 {
                continue;
            }
            for k in col..d {
                a[row * d + k] -= f * a[col * d + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; d];
    for row in (0..d).rev() {
        let mut sum = b[row];
        for k in row + 1..d {
            sum -= a[row * d + k] * x[k];
        }
        x[row] = sum / a[row * d + row];
    }
    x
}

#[test]
fn a4_single_row_recalibration_matches_damped_least_squares() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let plan = SurgeryPlan::default();
    for case in 0..120 {
        let d = rng.gen_range(2..=16usize);
        let n = rng.gen_range(1..=64usize);
        let x = rand_f32(&mut rng, n * d, -1.0, 1.0);
        let record = CalibRecord {
            layer: "layer.1.weight".to_string(),
            activations: Tensor::from_f32(vec![n, d], x.clone()).unwrap(),
        };
        let delta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut mask: Vec<f32> = (0..d).map(|_| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
        mask[rng.gen_range(0..d)] = 1.0;

        let hessian = build_hessian(&record, plan.damping_fraction).unwrap();
        let got = recalibrate_layer(
            &Tensor::from_f64(vec![1, d], delta.clone()).unwrap(),
            &Tensor::from_f32(vec![1, d], mask.clone()).unwrap(),
            &hessian,
            &plan,
        )
        .unwrap();
        let got = got.as_f64().unwrap();

        // Independent Hessian: H = (2/n) X^T X + lambda I with lambda
        // pinned to the configured fraction of the mean diagonal.
        let mut h = vec![0.0f64; d * d];
        for k in 0..n {
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += 2.0 / n as f64 * x[k * d + i] as f64 * x[k * d + j] as f64;
                }
            }
        }
        let mean_diag = (0..d).map(|i| h[i * d + i]).sum::<f64>() / d as f64;
        for i in 0..d {
            h[i * d + i] += plan.damping_fraction * mean_diag;
        }

        // Constrained minimum of (v - delta)^T H (v - delta) with the
        // masked block forced to zero: solve H_RR c = H_RM delta_M and
        // add the correction to the retained deltas.
        let retained: Vec<usize> = (0..d).filter(|&i| mask[i] == 0.0).collect();
        let removed: Vec<usize> = (0..d).filter(|&i| mask[i] == 1.0).collect();
        let want: Vec<f64> = if retained.is_empty() {
            Vec::new()
        } else {
            let r = retained.len();
            let mut hrr = vec![0.0f64; r * r];
            for (ai, &i) in retained.iter().enumerate() {
                for (aj, &j) in retained.iter().enumerate() {
                    hrr[ai * r + aj] = h[i * d + j];
                }
            }
            let rhs: Vec<f64> = retained
                .iter()
                .map(|&i| removed.iter().map(|&j| h[i * d + j] * delta[j]).sum())
                .collect();
            let corr = solve_dense(hrr, rhs, r);
            retained.iter().zip(&corr).map(|(&i, &c)| delta[i] + c).collect()
        };

        for (slot, &i) in retained.iter().enumerate() {
            let diff = (got[i] - want[slot]).abs();
            assert!(
                diff / want[slot].abs().max(1e-9) < 1e-6 || diff < 1e-12,
                "case {case} coord {i}: recalibrated {} vs oracle {}",
                got[i],
                want[slot]
            );
        }
        for &i in &removed {
            assert_eq!(got[i], 0.0, "case {case}: masked coord {i} must zero its delta");
        }

        // Compensation must never reconstruct worse than plain zeroing.
        let recon = |adjusted: &dyn Fn(usize) -> f64| -> f64 {
            (0..n)
                .map(|k| {
                    let e: f64 = (0..d)
                        .map(|i| x[k * d + i] as f64 * (delta[i] - adjusted(i)))
                        .sum();
                    e * e
                })
                .sum()
        };
        let err_recal = recon(&|i| got[i]);
        let err_naive = recon(&|i| if mask[i] == 1.0 { 0.0 } else { delta[i] });
        assert!(
            err_recal <= err_naive,
            "case {case}: recalibration error {err_recal} exceeds naive {err_naive}"
        );
    }
    budget(
        "single-row recalibration matches damped least squares",
        started,
        Duration::from_secs(30),
    );
}

// Fixture for surgery runs: one eligible wide layer plus bystander
// tensors, random mask over the layer, random calibration capture.
fn surgery_fixture(
    fan_out: usize,
    fan_in: usize,
    n_calib: usize,
    seed: u64,
) -> (ParamSet, ParamSet, realign_core::MaskSet, Vec<CalibRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry: [(&str, Vec<usize>); 3] = [
        ("layer.0.embed", vec![4, 3]),
        ("layer.1.weight", vec![fan_out, fan_in]),
        ("layer.1.bias", vec![fan_out]),
    ];
    let pre = random_params(&geometry, &mut rng);
    let sft = random_params(&geometry, &mut rng);
    let mut mask_ps = ParamSet::new();
    for (name, shape) in &geometry {
        let n: usize = shape.iter().product();
        let vals = if *name == "layer.1.weight" {
            (0..n).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect()
        } else {
            vec![0.0f32; n]
        };
        mask_ps.insert(name.to_string(), Tensor::from_f32(shape.clone(), vals).unwrap());
    }
    let mask = realign_core::MaskSet::from_param_set(mask_ps).unwrap();
    let calib = vec![CalibRecord {
        layer: "layer.1.weight".to_string(),
        activations: Tensor::from_f32(
            vec![n_calib, fan_in],
            rand_f32(&mut rng, n_calib * fan_in, -1.0, 1.0),
        )
        .unwrap(),
    }];
    (sft, pre, mask, calib)
}

#[test]
fn a5_surgery_is_block_size_invariant() {
    let started = Instant::now();
    for seed in [50u64, 51, 52] {
        let (sft, pre, mask, calib) = surgery_fixture(6, 256, 40, seed);
        let mut outputs = Vec::new();
        for block_size in [1usize, 16, 128] {
            let plan = SurgeryPlan {
                block_size,
                ..SurgeryPlan::default()
            };
            let (model, _) = run_surgery(&sft, &pre, &mask, &calib, &plan).unwrap();
            outputs.push((block_size, model));
        }
        let (_, reference) = &outputs[outputs.len() - 1];
        for (bs, model) in &outputs {
            for (name, t) in model.iter() {
                let a = t.as_f32().unwrap();
                let b = reference.get(name).unwrap().as_f32().unwrap();
                for i in 0..a.len() {
                    let rel = (a[i] as f64 - b[i] as f64).abs()
                        / (a[i].abs() as f64).max(b[i].abs() as f64).max(1.0);
                    assert!(
                        rel < 1e-6,
                        "seed {seed} block {bs} vs 128, {name}[{i}]: {} vs {}",
                        a[i],
                        b[i]
                    );
                }
            }
        }
    }
    budget("surgery is block-size invariant", started, Duration::from_secs(60));
}

#[test]
fn a6_surgery_preserves_masked_and_untouched_bits() {
    let started = Instant::now();
    let (sft, pre, mask, calib) = surgery_fixture(8, 32, 20, 60);
    let (model, _) = run_surgery(&sft, &pre, &mask, &calib, &SurgeryPlan::default()).unwrap();

    for (name, t) in model.iter() {
        let out = t.as_f32().unwrap();
        let p = pre.get(name).unwrap().as_f32().unwrap();
        let s = sft.get(name).unwrap().as_f32().unwrap();
        let m = mask.get(name).unwrap().as_f32().unwrap();
        for i in 0..out.len() {
            if m[i] == 1.0 {
                assert_eq!(
                    out[i].to_bits(),
                    p[i].to_bits(),
                    "{name}[{i}]: masked coordinate must carry the pre bits"
                );
            }
        }
        if t.shape().len() == 2 {
            let d = t.shape()[1];
            for r in 0..t.shape()[0] {
                if m[r * d..(r + 1) * d].iter().all(|&v| v == 0.0) {
                    for i in r * d..(r + 1) * d {
                        assert_eq!(
                            out[i].to_bits(),
                            s[i].to_bits(),
                            "{name} row {r}: untouched row must carry the sft bits"
                        );
                    }
                }
            }
        } else {
            for i in 0..out.len() {
                if m[i] == 0.0 {
                    assert_eq!(
                        out[i].to_bits(),
                        s[i].to_bits(),
                        "{name}[{i}]: unmasked coordinate of a flat tensor must stay sft"
                    );
                }
            }
        }
    }
    budget(
        "surgery preserves masked and untouched bits",
        started,
        Duration::from_secs(10),
    );
}

#[test]
fn a7_harmful_finetune_scenario_recovers_the_tradeoff() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let outcome = scenario_harmful_ft(0, dir.path()).unwrap();

    let align = outcome.reference["align"];
    let sft = outcome.reference["sft"];
    assert!(
        align.refusal_rate - sft.refusal_rate >= 0.30,
        "harmful-mix fine-tune dropped refusal only {:.3} -> {:.3}",
        align.refusal_rate,
        sft.refusal_rate
    );

    let rows = &outcome.sweep.report.rows;
    let band = align.refusal_rate - 0.10;
    let best_in_band = |method: &str| -> Option<f64> {
        rows.iter()
            .filter(|r| r.method == method && r.refusal_rate >= band)
            .map(|r| r.task_accuracy)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    };
    let irr_task = best_in_band("irr").expect("no irr row restored refusal into the 10-point band");
    let no_id_task = best_in_band("irr_no_id")
        .expect("no random-mask row reached the refusal band; matched comparison impossible");
    assert!(
        irr_task > no_id_task,
        "irr best task {irr_task} not strictly above random-mask {no_id_task} at matched refusal"
    );

    let by_rho = |method: &str| -> BTreeMap<u64, f64> {
        rows.iter()
            .filter(|r| r.method == method)
            .map(|r| (r.rho.unwrap().to_bits(), r.task_accuracy))
            .collect()
    };
    let irr = by_rho("irr");
    for (rho_bits, no_recal_task) in by_rho("irr_no_recal") {
        let with = irr[&rho_bits];
        assert!(
            no_recal_task <= with,
            "at rho {}, skipping recalibration improved task accuracy {} > {}",
            f64::from_bits(rho_bits),
            no_recal_task,
            with
        );
    }

    budget(
        "harmful fine-tune scenario recovers the tradeoff",
        started,
        Duration::from_secs(600),
    );
}

#[test]
fn a8_baseline_transforms_obey_their_laws() {
    let started = Instant::now();
    let geometry: [(&str, Vec<usize>); 2] = [("w", vec![40, 25]), ("b", vec![500])];
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let pre = random_params(&geometry, &mut rng);
    let sft = random_params(&geometry, &mut rng);
    let delta = compute_delta(&sft, &pre).unwrap();

    let kept = dare_transform(&delta, 0.0, 9).unwrap();
    assert!(kept.bit_eq(&delta), "drop rate 0 must be the identity");

    let p = 0.25;
    let dropped = dare_transform(&delta, p, 9).unwrap();
    let mut survivors = 0usize;
    let mut zeroed = 0usize;
    for (name, t) in dropped.iter() {
        let out = t.as_f64().unwrap();
        let original = delta.get(name).unwrap().as_f64().unwrap();
        for i in 0..out.len() {
            if out[i] == 0.0 {
                zeroed += 1;
            } else {
                survivors += 1;
                let want = original[i] / (1.0 - p);
                assert_eq!(
                    out[i].to_bits(),
                    want.to_bits(),
                    "{name}[{i}]: survivor must be scaled by exactly 1/(1-p)"
                );
            }
        }
    }
    assert!(survivors > 0 && zeroed > 0, "drop rate {p} should both keep and drop");

    let align = random_params(&geometry, &mut rng);
    let unalign = random_params(&geometry, &mut rng);
    let d_safe = safety_vector(&align, &unalign).unwrap();
    let restored = resta_merge(&unalign, &d_safe, 1.0).unwrap();
    assert!(
        restored.bit_eq(&align),
        "unalign + full safety vector must reproduce align bit-exactly"
    );

    budget("baseline transforms obey their laws", started, Duration::from_secs(1));
}

#[test]
fn a9_round_trip_and_sweep_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    // Container round-trip across both dtypes plus metadata.
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    ps.insert("m.weight", Tensor::from_f32(vec![7, 5], rand_f32(&mut rng, 35, -3.0, 3.0)).unwrap());
    ps.insert(
        "m.scores",
        Tensor::from_f64(vec![11], (0..11).map(|_| rng.gen::<f64>()).collect()).unwrap(),
    );
    ps.set_metadata("kind", "model");
    ps.set_metadata("note", "round-trip fixture");
    let first = dir.path().join("first.ckpt");
    let second = dir.path().join("second.ckpt");
    save_checkpoint(&ps, &first).unwrap();
    let loaded = load_checkpoint(&first).unwrap();
    assert!(loaded.bit_eq(&ps), "load must reproduce every tensor bit");
    assert_eq!(loaded.metadata(), ps.metadata());
    save_checkpoint(&loaded, &second).unwrap();
    assert_eq!(
        fs::read(&first).unwrap(),
        fs::read(&second).unwrap(),
        "save-load-save must emit identical bytes"
    );
    assert_eq!(
        checkpoint::checkpoint_bytes(&ps),
        fs::read(&first).unwrap(),
        "in-memory encoding must match the file"
    );

    // A small end-to-end sweep executed twice into the same directory:
    // every output byte, including the JSON config echo, must repeat.
    let world = World::standard();
    let cfg = world.model_config(vec![8], 1);
    let pre = init_model(&cfg);
    let align = train(
        &pre,
        &cfg,
        &world.harmful_refusal_batch(24, 901).concat(&world.benign_chat_batch(24, 902)).unwrap(),
        0.3,
        2,
        903,
    )
    .unwrap();
    let unalign = train(&align, &cfg, &world.harmful_comply_batch(24, 904), 0.3, 1, 905).unwrap();
    let sft = train(&align, &cfg, &world.task_batch(32, 906), 0.3, 1, 907).unwrap();

    let path = |name: &str| dir.path().join(name);
    save_checkpoint(&pre, &path("pre.ckpt")).unwrap();
    save_checkpoint(&sft, &path("sft.ckpt")).unwrap();
    save_checkpoint(&align, &path("align.ckpt")).unwrap();
    save_checkpoint(&unalign, &path("unalign.ckpt")).unwrap();
    write_batch(&world.harmful_refusal_batch(16, 908), &path("safety.txt")).unwrap();
    write_batch(&world.task_batch(16, 909), &path("calib.txt")).unwrap();
    write_batch(&world.harmful_refusal_batch(32, 910), &path("eval_safety.txt")).unwrap();
    write_batch(&world.task_batch(32, 911), &path("eval_task.txt")).unwrap();

    let config = RunConfig {
        pre: path("pre.ckpt"),
        sft: path("sft.ckpt"),
        align: path("align.ckpt"),
        unalign: path("unalign.ckpt"),
        fisher: None,
        safety_data: Some(path("safety.txt")),
        calib_data: path("calib.txt"),
        calib_samples: 16,
        eval_safety: Some(path("eval_safety.txt")),
        eval_task: Some(path("eval_task.txt")),
        rho: vec![0.0, 50.0, 100.0],
        block_size: 8,
        damping: 0.01,
        scope: Scope::PerTensor,
        out_dir: dir.path().join("sweep"),
        seed: 11,
        refuse_token: world.refuse_token,
        resta_scales: vec![0.5, 1.0],
        dare_drop: 0.5,
        irr_more_extra: vec![50.0],
    };

    let first_run = sweep(&config).unwrap();
    let csv_once = fs::read(&first_run.csv_path).unwrap();
    let json_once = fs::read(&first_run.json_path).unwrap();
    let second_run = sweep(&config).unwrap();
    assert_eq!(
        csv_once,
        fs::read(&second_run.csv_path).unwrap(),
        "rerunning the sweep changed the CSV"
    );
    assert_eq!(
        json_once,
        fs::read(&second_run.json_path).unwrap(),
        "rerunning the sweep changed the JSON report"
    );

    budget("round trip and sweep determinism", started, Duration::from_secs(5));
}
