//! Bound oracle, finite-difference gradients and masked-loss properties.

use afa_core::{FeatureMask, JointAction};
use afa_models::nn::LstmState;
use afa_models::policy::n_step_returns;
use afa_models::vae::LatentDistribution;
use afa_models::{a3c_loss, elbo, A3cHyper, ActorCritic, ParamStore, PolicyConfig, PolicyInput, Rollout, SupervisionMode};
use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;
use crate::tiny::{instance, randomize, Instance};
use crate::Outcome;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn elbo_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let inst = instance(&mut rng, None);
        let out = elbo(&inst.vae(), &inst.batch(), &inst.eps_tensor()).map_err(|e| e.to_string())?;
        let o = oracle::elbo(&inst.cfg, &inst.params, &inst.desc, &inst.records, &inst.sups, &inst.eps);
        let g = out.diagnostics;
        for (name, a, b) in [
            ("loss", g.loss, o.loss),
            ("recon_obs", g.recon_obs, o.recon_obs),
            ("recon_unobs", g.recon_unobs, o.recon_unobs),
            ("kl", g.kl, o.kl),
        ] {
            let e = rel_err(a, b);
            worst = worst.max(e);
            if e >= 1e-6 {
                return Err(format!("case {case} ({:?}, {:?}): {name} {a} vs oracle {b}", inst.cfg.kind, inst.mode));
            }
        }
    }
    Ok(format!("50 instances, max relative error {worst:.2e}"))
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).expect("scalar")
}

fn read(var: &Var) -> Vec<f64> {
    var.as_tensor().flatten_all().and_then(|t| t.to_vec1()).expect("f64 values")
}

fn write(var: &Var, v: Vec<f64>) {
    let t = Tensor::from_vec(v, var.dims(), &Device::Cpu).expect("values");
    var.set(&t).expect("set");
}

/// Central difference of `f` along one coordinate of `var`, refined by one
/// Richardson step so the truncation error is fourth order in `h`.
fn central(var: &Var, idx: usize, h: f64, f: &mut dyn FnMut() -> f64) -> f64 {
    let base = read(var);
    let mut diff = |h: f64| {
        let mut v = base.clone();
        v[idx] = base[idx] + h;
        write(var, v.clone());
        let up = f();
        v[idx] = base[idx] - h;
        write(var, v);
        let down = f();
        (up - down) / (2.0 * h)
    };
    let (coarse, fine) = (diff(h), diff(h / 2.0));
    write(var, base);
    (4.0 * fine - coarse) / 3.0
}

/// Relative error with the denominator floored at 1e-5, so gradients
/// that are zero up to rounding compare on an absolute 1e-9 scale.
fn grad_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

const STEP: f64 = 1e-5;

fn probe(params: &ParamStore, rng: &mut ChaCha8Rng) -> (String, usize) {
    let names: Vec<String> = params.names().map(String::from).collect();
    let name = names[rng.random_range(0..names.len())].clone();
    let n = params.get(&name).expect("name").elem_count();
    (name, rng.random_range(0..n))
}

/// Rectifier pattern of the oracle bound with coordinate `idx` of `var`
/// shifted by `delta`.
fn shifted_pattern(inst: &Instance, var: &Var, idx: usize, delta: f64) -> Vec<bool> {
    let base = read(var);
    let mut v = base.clone();
    v[idx] += delta;
    write(var, v);
    let pattern = oracle::relu_pattern(|| {
        oracle::elbo(&inst.cfg, &inst.params, &inst.desc, &inst.records, &inst.sups, &inst.eps);
    });
    write(var, base);
    pattern
}

/// Returns `(checked probes, probes skipped at rectifier kinks, worst error)`.
fn elbo_gradients(rng: &mut ChaCha8Rng) -> Result<(usize, usize, f64), String> {
    let (mut probes, mut kinks, mut worst) = (0usize, 0usize, 0f64);
    while probes < 120 {
        let mut inst: Instance = instance(rng, None);
        let batch = inst.batch();
        let eps = inst.eps_tensor();
        let trainable = inst.vae_trainable();
        let grads = elbo(&trainable, &batch, &eps)
            .and_then(|o| Ok(o.loss.backward()?))
            .map_err(|e| e.to_string())?;
        let loss = |inst: &Instance| -> Result<Tensor, String> {
            Ok(elbo(&inst.vae(), &batch, &eps).map_err(|e| e.to_string())?.loss)
        };
        for _ in 0..12 {
            let (name, idx) = probe(&inst.params, rng);
            let var = inst.params.get(&name).expect("name");
            if shifted_pattern(&inst, var, idx, -STEP) != shifted_pattern(&inst, var, idx, STEP) {
                kinks += 1;
                continue;
            }
            let analytic = grads.get(var.as_tensor()).map(|g| g.flatten_all().and_then(|g| g.to_vec1::<f64>()).expect("grad")[idx]).unwrap_or(0.0);
            let numeric = central(var, idx, STEP, &mut || scalar(&loss(&inst).expect("loss")));
            let e = grad_err(analytic, numeric);
            worst = worst.max(e);
            if e >= 1e-4 {
                return Err(format!("bound: {name}[{idx}] analytic {analytic} vs numeric {numeric}"));
            }
            probes += 1;
        }
    }
    Ok((probes, kinks, worst))
}

fn policy_gradients(rng: &mut ChaCha8Rng) -> Result<(usize, f64), String> {
    let (mut probes, mut worst) = (0usize, 0f64);
    while probes < 120 {
        let cfg = PolicyConfig {
            input: PolicyInput::Belief,
            input_dim: rng.random_range(1..=3),
            encoder: if rng.random_bool(0.5) { vec![afa_models::nn::LayerSpec::dense(3, false)] } else { vec![] },
            lstm_hidden: rng.random_range(2..=4),
            n_controls: rng.random_range(2..=4),
            n_features: rng.random_range(1..=3),
        };
        let mut params = ParamStore::new(DType::F64);
        {
            let mut init = params.initializer(rng.random());
            ActorCritic::new(&cfg, &mut init).map_err(|e| e.to_string())?;
        }
        randomize(&params, rng, 0.8);
        let t = rng.random_range(2..=6usize);
        let inputs: Vec<f64> = (0..t * cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = Tensor::from_vec(inputs, (t, 1, cfg.input_dim), &Device::Cpu).map_err(|e| e.to_string())?;
        let dones: Vec<bool> = (0..t).map(|_| rng.random_bool(0.3)).collect();
        let keep: Vec<f64> = (0..t).map(|s| if s > 0 && dones[s - 1] { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (t, 1), &Device::Cpu).map_err(|e| e.to_string())?;
        let actions: Vec<JointAction> = (0..t)
            .map(|_| {
                JointAction::new(
                    rng.random_range(0..cfg.n_controls),
                    FeatureMask::new((0..cfg.n_features).map(|_| rng.random_bool(0.5)).collect()),
                )
            })
            .collect();
        let rewards: Vec<f64> = (0..t).map(|_| [-1.0, 0.0, 1.0][rng.random_range(0..3)]).collect();
        let costs: Vec<f64> = actions.iter().map(|a| 0.01 * a.acquisition.count() as f64).collect();
        let bootstrap = rng.random_range(-1.0..1.0);
        let gamma = 0.99;
        let hyper = A3cHyper {
            value_coef: 0.5,
            entropy_coef: 0.01,
            train_acquisition: true,
        };
        let unroll = |net: &ActorCritic| -> Result<(Tensor, Tensor, Tensor), String> {
            let start: LstmState = net.initial_state(1).map_err(|e| e.to_string())?;
            let (c, a, v, _) = net.unroll(&inputs, &start, &keep).map_err(|e| e.to_string())?;
            Ok((c, a, v))
        };
        let heads = |params: &ParamStore| -> Result<(Tensor, Tensor, Tensor), String> {
            unroll(&ActorCritic::new(&cfg, &mut params.frozen()).map_err(|e| e.to_string())?)
        };
        let trainable = ActorCritic::new(&cfg, &mut params.initializer(0)).map_err(|e| e.to_string())?;
        let (c, a, v) = unroll(&trainable)?;
        let rollout = Rollout {
            control_logits: c.clone(),
            acq_logits: a.clone(),
            values: v.clone(),
            actions: actions.clone(),
            rewards: rewards.clone(),
            costs: costs.clone(),
            dones: dones.clone(),
            bootstrap,
        };
        let loss = a3c_loss(&rollout, gamma, &hyper).map_err(|e| e.to_string())?;
        let g = oracle::returns(&rewards, &costs, &dones, bootstrap, gamma);
        let g_impl = n_step_returns(&rewards, &costs, &dones, bootstrap, gamma);
        if g.iter().zip(&g_impl).any(|(x, y)| (x - y).abs() > 1e-12) {
            return Err(format!("returns {g_impl:?} vs oracle {g:?}"));
        }
        let v0: Vec<f64> = v.detach().to_vec1().map_err(|e| e.to_string())?;
        let adv: Vec<f64> = g.iter().zip(&v0).map(|(g, v)| g - v).collect();
        let surrogate = |params: &ParamStore| -> f64 {
            let (c, a, v) = heads(params).expect("heads");
            oracle::a3c_surrogate(
                &c.to_vec2().expect("logits"),
                &a.to_vec2().expect("logits"),
                &v.to_vec1().expect("values"),
                &actions,
                &g,
                &adv,
                hyper.value_coef,
                hyper.entropy_coef,
            )
        };
        let total = scalar(&loss.total);
        let direct = surrogate(&params);
        if rel_err(total, direct) > 1e-9 {
            return Err(format!("actor-critic loss {total} vs oracle {direct}"));
        }
        let grads = loss.total.backward().map_err(|e| e.to_string())?;
        for _ in 0..12 {
            let (name, idx) = probe(&params, rng);
            let var = params.get(&name).expect("name");
            let analytic = grads.get(var.as_tensor()).map(|g| g.flatten_all().and_then(|g| g.to_vec1::<f64>()).expect("grad")[idx]).unwrap_or(0.0);
            let numeric = central(var, idx, STEP, &mut || surrogate(&params));
            let e = grad_err(analytic, numeric);
            worst = worst.max(e);
            if e >= 1e-4 {
                return Err(format!("actor-critic: {name}[{idx}] analytic {analytic} vs numeric {numeric}"));
            }
            probes += 1;
        }
    }
    Ok((probes, worst))
}

pub fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (n1, k1, w1) = elbo_gradients(&mut rng)?;
    let (n2, w2) = policy_gradients(&mut rng)?;
    Ok(format!(
        "bound: {n1} probes, max error {w1:.2e}, {k1} skipped at rectifier kinks; actor-critic: {n2} probes, max error {w2:.2e}"
    ))
}

fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases: 200,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    )
}

fn perturb_hidden(inst: &Instance, rng: &mut ChaCha8Rng) -> Tensor {
    let batch = inst.batch();
    let obs: Vec<Vec<Vec<f64>>> = batch.obs.to_vec3().expect("obs");
    let mask: Vec<Vec<Vec<f64>>> = batch.mask.to_vec3().expect("mask");
    let (b, t, d) = (obs.len(), obs[0].len(), obs[0][0].len());
    let mut flat = Vec::with_capacity(b * t * d);
    for i in 0..b {
        for s in 0..t {
            for k in 0..d {
                flat.push(if mask[i][s][k] > 0.5 { obs[i][s][k] } else { rng.random_range(-1e3..1e3) });
            }
        }
    }
    Tensor::from_vec(flat, (b, t, d), &Device::Cpu).expect("obs")
}

pub fn masked_loss() -> Outcome {
    let mut invariance = runner();
    invariance
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = instance(&mut rng, Some(SupervisionMode::Partial));
            let batch = inst.batch();
            let eps = inst.eps_tensor();
            let vae = inst.vae();
            let base = elbo(&vae, &batch, &eps).expect("bound").diagnostics;
            let moved = elbo(&vae, &batch.with_obs(perturb_hidden(&inst, &mut rng)), &eps)
                .expect("bound")
                .diagnostics;
            prop_assert_eq!(base.loss.to_bits(), moved.loss.to_bits());
            prop_assert_eq!(base.recon_unobs, 0.0);
            Ok(())
        })
        .map_err(|e| format!("partial-mode invariance: {e}"))?;

    let mut decomposition = runner();
    let worst_gap = std::cell::Cell::new(0f64);
    decomposition
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = instance(&mut rng, Some(SupervisionMode::Full));
            let g = elbo(&inst.vae(), &inst.batch(), &inst.eps_tensor()).expect("bound").diagnostics;
            let gap = (g.recon_obs + g.recon_unobs - g.recon_total).abs();
            worst_gap.set(worst_gap.get().max(gap));
            prop_assert!(gap <= 1e-9, "gap {}", gap);
            Ok(())
        })
        .map_err(|e| format!("decomposition: {e}"))?;

    let mut kl = runner();
    kl.run(
        &(proptest::collection::vec((-50.0f64..50.0, -30.0f64..30.0), 1..64), any::<bool>()),
        |(pairs, tiny_var)| {
            let (mean, log_var): (Vec<f64>, Vec<f64>) = pairs
                .into_iter()
                .map(|(m, lv)| if tiny_var { (m * 1e-6, lv * 1e-9) } else { (m, lv) })
                .unzip();
            let n = mean.len();
            for dtype in [DType::F64, DType::F32] {
                let q = LatentDistribution {
                    mean: Tensor::from_vec(mean.clone(), n, &Device::Cpu).and_then(|t| t.to_dtype(dtype)).expect("mean"),
                    log_var: Tensor::from_vec(log_var.clone(), n, &Device::Cpu).and_then(|t| t.to_dtype(dtype)).expect("log_var"),
                };
                let k: Vec<f64> = q.kl_elements().expect("kl").to_dtype(DType::F64).and_then(|t| t.to_vec1()).expect("kl");
                prop_assert!(k.iter().all(|v| *v >= 0.0), "negative KL element in {:?}", k);
            }
            Ok(())
        },
    )
    .map_err(|e| format!("KL sign: {e}"))?;
    let mut posterior = runner();
    posterior
        .run(&any::<u64>(), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = instance(&mut rng, None);
            let out = elbo(&inst.vae(), &inst.batch(), &inst.eps_tensor()).expect("bound");
            let k: Vec<f64> = out.posterior.kl_elements().expect("kl").flatten_all().and_then(|t| t.to_vec1()).expect("kl");
            prop_assert!(k.iter().all(|v| *v >= 0.0));
            Ok(())
        })
        .map_err(|e| format!("posterior KL sign: {e}"))?;
    Ok(format!("200 cases per property, max decomposition gap {:.1e}", worst_gap.get()))
}
