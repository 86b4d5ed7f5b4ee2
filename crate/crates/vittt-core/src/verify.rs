//! Property suites: dual-form equivalence, the two theorem oracles, the
//! naive-oracle sweep, and whole-model gradient checking. The CLI `verify`
//! command and the acceptance tests both run these.
//!
//! Random instances are scaled (token std `0.5 / sqrt(d)`) so the inner
//! descent stays contractive and the comparisons are numerically meaningful
//! at the stated tolerances.

use crate::autodiff::Tape;
use crate::backbone::{ModelConfig, ModelParams};
use crate::backend::{Backend, Eval};
use crate::block::{GateKind, ParamKind, W0Mode};
use crate::error::Result;
use crate::oracles::{adapted_value_ref, compare_outputs, linear_attention_ref, ttt_naive};
use crate::tensor::Tensor;
use crate::ttt::{
    scan_head, ttt_forward_dual, ttt_forward_primal, DescentMode, Form, HeadStateVars, InnerModel,
    TttConfig, TttParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub label: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: Vec<CaseResult>,
    pub pass: bool,
    pub elapsed_s: f64,
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn build(suite: &str, cases: Vec<CaseResult>, started: Instant, notes: Vec<String>) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            pass: cases.iter().all(|c| c.pass),
            cases,
            elapsed_s: started.elapsed().as_secs_f64(),
            notes,
        }
    }

    pub fn worst_rel(&self) -> f64 {
        self.cases.iter().fold(0.0f64, |m, c| m.max(c.max_rel))
    }

    pub fn worst_abs(&self) -> f64 {
        self.cases.iter().fold(0.0f64, |m, c| m.max(c.max_abs))
    }

    /// Flat `key = value` report body, one line per case.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("suite = {}\n", self.suite));
        out.push_str(&format!("pass = {}\n", self.pass));
        out.push_str(&format!("cases = {}\n", self.cases.len()));
        out.push_str(&format!("elapsed_s = {:.3}\n", self.elapsed_s));
        for n in &self.notes {
            out.push_str(&format!("note = {n}\n"));
        }
        for c in &self.cases {
            out.push_str(&format!(
                "case {} : max_abs = {:.3e} max_rel = {:.3e} pass = {}\n",
                c.label, c.max_abs, c.max_rel, c.pass
            ));
        }
        out
    }
}

fn layer_params_uniform_eta(
    cfg: &TttConfig,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> TttParams {
    let d_model = cfg.embed_dim();
    let mut params = TttParams::init(cfg, rng);
    // sigmoid(0) = 1/2, so a zero gate with eta_base = 2 eta is exactly
    // uniform eta per token
    params.proj.eta_proj = Tensor::zeros(&[d_model, cfg.num_heads]);
    params.proj.eta_base = Tensor::scalar(2.0 * eta);
    params.proj.theta_kq = Tensor::randn(&[d_model, d_model], 1.0 / (d_model as f64).sqrt(), rng);
    params.proj.theta_v = Tensor::randn(&[d_model, d_model], 1.0 / (d_model as f64).sqrt(), rng);
    // small perturbation on top of the delta taps keeps the conv path active
    let noise_k = Tensor::randn(&[4, d_model], 0.1, rng);
    let noise_q = Tensor::randn(&[4, d_model], 0.1, rng);
    params.proj.conv1d_k = params.proj.conv1d_k.add(&noise_k).unwrap();
    params.proj.conv1d_q = params.proj.conv1d_q.add(&noise_q).unwrap();
    params
}

/// Acceptance sweep 1: primal and dual forms agree for the plain linear
/// inner model under uniform eta.
pub fn dual_form_suite(instances: usize, base_seed: u64) -> SuiteReport {
    let started = Instant::now();
    let tol = 1e-9;
    let cases: Vec<CaseResult> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
            let t = rng.gen_range(1..=64);
            let nh = [1, 2, 4][rng.gen_range(0..3)];
            let d = [4, 8, 16][rng.gen_range(0..3)];
            let batch = match rng.gen_range(0..4) {
                0 => 1,
                1 => 4,
                2 => 16,
                _ => t,
            };
            let eta = rng.gen_range(0.1..0.5);
            let mut cfg = TttConfig::new(nh, d);
            cfg.minibatch_size = batch;
            cfg.inner_model = InnerModel::PlainLinear;
            let params = layer_params_uniform_eta(&cfg, eta, &mut rng);
            let x = Tensor::randn(&[t, nh * d], 0.5 / (d as f64).sqrt(), &mut rng);
            let (zp, _) = ttt_forward_primal(&x, &params, &cfg).expect("primal forward");
            let (zd, _) = ttt_forward_dual(&x, &params, &cfg).expect("dual forward");
            let report = compare_outputs(&zd, &zp, d, tol).expect("comparable shapes");
            CaseResult {
                label: format!("seed={} T={t} b={batch} nh={nh} d={d}", base_seed + i as u64),
                max_abs: report.max_abs_dev,
                max_rel: report.max_rel_dev,
                pass: report.pass,
            }
        })
        .collect();
    SuiteReport::build("dual_form", cases, started, vec![format!("tolerance = {tol:.0e} (relative)")])
}

fn theorem_views(
    t: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor, Tensor) {
    let std = 0.5 / (d as f64).sqrt();
    (
        Tensor::randn(&[t, d], std, rng),
        Tensor::randn(&[t, d], std, rng),
        Tensor::randn(&[t, d], std, rng),
    )
}

fn scan_once(
    xk: &Tensor,
    xq: &Tensor,
    xv: &Tensor,
    batch: usize,
    form: Form,
) -> Tensor {
    let (t, d) = xk.dims2().unwrap();
    let mut b = Eval::<f64>::new();
    let hs = HeadStateVars {
        w0: b.parameter(&Tensor::zeros(&[d, d])),
        b_inner: b.parameter(&Tensor::zeros(&[1, d])),
        ln_gamma: b.parameter(&Tensor::filled(&[1, d], 1.0)),
        ln_beta: b.parameter(&Tensor::zeros(&[1, d])),
    };
    let eta = Tensor::filled(&[t, 1], 0.5);
    let (z, _) = scan_head(
        &mut b,
        xk,
        xq,
        xv,
        &eta,
        &hs,
        batch,
        InnerModel::PlainLinear,
        form,
        None,
    )
    .expect("scan");
    z
}

/// Acceptance sweep 2: batch-mode TTT (`b = T`, eta = 1/2, `W0 = 0`) equals
/// causal linear attention, in both forms.
pub fn theorem1_suite(instances: usize, max_t: usize, base_seed: u64) -> SuiteReport {
    let started = Instant::now();
    let tol = 1e-10;
    let cases: Vec<CaseResult> = (0..instances)
        .into_par_iter()
        .flat_map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
            let t = rng.gen_range(1..=max_t);
            let d = [4, 8, 16][rng.gen_range(0..3)];
            let (xk, xq, xv) = theorem_views(t, d, &mut rng);
            let oracle = linear_attention_ref(&xk, &xq, &xv).expect("oracle");
            [Form::Primal, Form::Dual]
                .into_iter()
                .map(|form| {
                    let z = scan_once(&xk, &xq, &xv, t, form);
                    let max_abs = z
                        .data()
                        .iter()
                        .zip(oracle.data())
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    let report = compare_outputs(&z, &oracle, d, tol).expect("shapes");
                    CaseResult {
                        label: format!(
                            "seed={} T={t} d={d} form={form:?}",
                            base_seed + i as u64
                        ),
                        max_abs,
                        max_rel: report.max_rel_dev,
                        pass: max_abs < tol,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    SuiteReport::build(
        "theorem1",
        cases,
        started,
        vec![format!("tolerance = {tol:.0e} (absolute)")],
    )
}

/// Acceptance sweep 3: online-mode TTT (`b = 1`, eta = 1/2, `W0 = 0`) equals
/// the adapted-value recursion, and the two theorem oracles genuinely differ
/// at `T = 8`.
pub fn theorem2_suite(instances: usize, max_t: usize, base_seed: u64) -> SuiteReport {
    let started = Instant::now();
    let tol = 1e-10;
    let mut cases: Vec<CaseResult> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
            let t = rng.gen_range(1..=max_t);
            let d = [4, 8, 16][rng.gen_range(0..3)];
            let (xk, xq, xv) = theorem_views(t, d, &mut rng);
            let oracle = adapted_value_ref(&xk, &xq, &xv, None).expect("oracle");
            let z = scan_once(&xk, &xq, &xv, 1, Form::Primal);
            let max_abs = z
                .data()
                .iter()
                .zip(oracle.data())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let report = compare_outputs(&z, &oracle, d, tol).expect("shapes");
            CaseResult {
                label: format!("seed={} T={t} d={d}", base_seed + i as u64),
                max_abs,
                max_rel: report.max_rel_dev,
                pass: max_abs < tol,
            }
        })
        .collect();

    // distinguishing batch from online semantics
    let mut distinct = 0usize;
    let probes = 100usize;
    for i in 0..probes {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ 0xD15C0 ^ i as u64);
        let (xk, xq, xv) = theorem_views(8, 4, &mut rng);
        let z1 = linear_attention_ref(&xk, &xq, &xv).expect("thm1");
        let z2 = adapted_value_ref(&xk, &xq, &xv, None).expect("thm2");
        let dev = z1
            .data()
            .iter()
            .zip(z2.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if dev > 1e-6 {
            distinct += 1;
        }
    }
    cases.push(CaseResult {
        label: format!("theorem1-vs-theorem2 distinct on {distinct}/{probes} T=8 instances"),
        max_abs: distinct as f64,
        max_rel: distinct as f64 / probes as f64,
        pass: distinct >= 95,
    });
    SuiteReport::build(
        "theorem2",
        cases,
        started,
        vec![format!("tolerance = {tol:.0e} (absolute)")],
    )
}

/// Acceptance sweep 4: the scalar-loop naive layer agrees with the fast
/// path for every descent mode and inner model, dual form included where
/// defined.
pub fn oracle_suite(instances: usize, base_seed: u64) -> SuiteReport {
    let started = Instant::now();
    let tol = 1e-10;
    let combos = [
        (DescentMode::Online, InnerModel::PlainLinear),
        (DescentMode::MiniBatch, InnerModel::PlainLinear),
        (DescentMode::Batch, InnerModel::PlainLinear),
        (DescentMode::Online, InnerModel::LnResidual),
        (DescentMode::MiniBatch, InnerModel::LnResidual),
        (DescentMode::Batch, InnerModel::LnResidual),
    ];
    let cases: Vec<CaseResult> = (0..instances)
        .into_par_iter()
        .flat_map(|i| {
            let (mode, inner) = combos[i % combos.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed + i as u64);
            let nh = [1, 2][rng.gen_range(0..2)];
            let d = 4;
            let t = rng.gen_range(1..=16);
            let mut cfg = TttConfig::new(nh, d);
            cfg.descent_mode = mode;
            cfg.minibatch_size = 4;
            cfg.inner_model = inner;
            let mut params = TttParams::init(&cfg, &mut rng);
            params.proj.eta_proj = Tensor::randn(&[nh * d, nh], 0.5, &mut rng);
            params.state.b_inner = Tensor::randn(&[nh, d], 0.2, &mut rng);
            params.state.w0 = Tensor::randn(&[nh, d, d], 0.3, &mut rng);
            let x = Tensor::randn(&[t, nh * d], 0.5 / (d as f64).sqrt(), &mut rng);
            let naive = ttt_naive(&x, &params, &cfg).expect("naive");

            let mut out = Vec::new();
            let (zp, _) = ttt_forward_primal(&x, &params, &cfg).expect("primal");
            let rp = compare_outputs(&zp, &naive, d, tol).expect("shapes");
            out.push(CaseResult {
                label: format!("seed={} {mode:?}/{inner:?} primal T={t}", base_seed + i as u64),
                max_abs: rp.max_abs_dev,
                max_rel: rp.max_rel_dev,
                pass: rp.pass,
            });
            if inner == InnerModel::PlainLinear {
                let (zd, _) = ttt_forward_dual(&x, &params, &cfg).expect("dual");
                let rd = compare_outputs(&zd, &naive, d, tol).expect("shapes");
                out.push(CaseResult {
                    label: format!("seed={} {mode:?}/{inner:?} dual T={t}", base_seed + i as u64),
                    max_abs: rd.max_abs_dev,
                    max_rel: rd.max_rel_dev,
                    pass: rd.pass,
                });
            }
            out
        })
        .collect();
    SuiteReport::build(
        "oracle",
        cases,
        started,
        vec![format!("tolerance = {tol:.0e} (relative)")],
    )
}

/// Gradcheck model: 2 blocks, 16 tokens, 16 features.
pub fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::micro();
    cfg.embed_dim = 16;
    cfg.ttt = TttConfig::new(2, 8);
    cfg.ttt.minibatch_size = 4;
    cfg.gate = GateKind::Gelu;
    cfg.w0_mode = W0Mode::DualLearnable;
    cfg
}

/// Deviation of an autodiff gradient from finite differences: worst
/// per-coordinate relative deviation over coordinates with magnitude above
/// `1e-8`, with the same threshold as an absolute floor (the FD round-off
/// at `h = 1e-5` makes smaller deviations unmeasurable).
pub fn gradcheck_dev(auto: &Tensor, fd: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, f) in auto.data().iter().zip(fd.data()) {
        let mag = a.abs().max(f.abs());
        if mag > 1e-8 {
            worst = worst.max((a - f).abs() / mag.max(1e-4));
        }
    }
    worst
}

/// Acceptance sweep 5: every learnable parameter gradient of the micro
/// 2-block model matches central finite differences.
///
/// The check point is generic: the inner states (`W0`, `b_inner`) are
/// randomized so the inner layer norm is probed away from its zero-variance
/// point, where curvature would swamp the `h = 1e-5` truncation error.
pub fn gradcheck_suite(seed: u64) -> SuiteReport {
    let started = Instant::now();
    let cfg = gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng).expect("init");
    for blk in &mut params.blocks {
        for dir in [&mut blk.vittt.forth, &mut blk.vittt.back] {
            let nh = cfg.ttt.num_heads;
            let d = cfg.ttt.head_dim;
            dir.state.w0 = Tensor::randn(&[nh, d, d], 0.3, &mut rng);
            dir.state.b_inner = Tensor::randn(&[nh, d], 0.3, &mut rng);
            dir.proj.eta_proj = Tensor::randn(&[cfg.embed_dim, nh], 0.3, &mut rng);
        }
    }
    let images: Vec<Tensor> = (0..2)
        .map(|_| Tensor::randn(&[16, 16, 3], 0.5, &mut rng))
        .collect();
    let labels = [0usize, 2usize];

    // autodiff gradients
    let mut tape = Tape::new();
    let (vars, registry) = params.bind(&mut tape).expect("bind");
    let mut loss_acc = None;
    for (img, &label) in images.iter().zip(&labels) {
        let image = tape.constant(img.clone());
        let y = crate::backbone::encoder_forward(&mut tape, &image, &vars, &cfg, None).expect("fwd");
        let logits = crate::backbone::classify(&mut tape, &y, &vars, &cfg).expect("cls");
        let ce = Backend::cross_entropy(&mut tape, &logits, label).expect("ce");
        loss_acc = Some(match loss_acc {
            None => ce,
            Some(acc) => Backend::add(&mut tape, &acc, &ce).expect("add"),
        });
    }
    let loss = Backend::scale(&mut tape, &loss_acc.unwrap(), 0.5).expect("scale");
    tape.backward(loss).expect("backward");

    // finite differences per learnable tensor
    let tol = 1e-4;
    let h = 1e-5;
    let loss_of = |p: &ModelParams| -> f64 {
        let mut total = 0.0;
        for (img, &label) in images.iter().zip(&labels) {
            let logits = crate::backbone::model_logits(p, &cfg, img).expect("logits");
            let z = logits.data();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[label];
        }
        total / images.len() as f64
    };

    let mut names_in_order: Vec<String> = Vec::new();
    params.visit(&mut |name, t, kind| {
        if kind == ParamKind::Learnable && !t.is_empty() {
            names_in_order.push(name);
        }
    });

    let cases: Vec<CaseResult> = names_in_order
        .par_iter()
        .map(|name| {
            let auto = registry
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, var)| tape.grad(*var).expect("grad"))
                .expect("registered leaf");
            // FD over every coordinate of this tensor
            let mut base = params.clone();
            let shape: Vec<usize> = {
                let mut s = Vec::new();
                params.visit(&mut |n, t, _| {
                    if &n == name {
                        s = t.shape().to_vec();
                    }
                });
                s
            };
            let n: usize = shape.iter().product();
            let mut fd = Tensor::zeros(&[n.max(1)]);
            for j in 0..n {
                let probe = |delta: f64, base: &mut ModelParams| -> f64 {
                    base.visit_mut(&mut |nm, t, _| {
                        if &nm == name {
                            t.data_mut()[j] += delta;
                        }
                    });
                    let v = loss_of(base);
                    base.visit_mut(&mut |nm, t, _| {
                        if &nm == name {
                            t.data_mut()[j] -= delta;
                        }
                    });
                    v
                };
                let plus = probe(h, &mut base);
                let minus = probe(-h, &mut base);
                fd.data_mut()[j] = (plus - minus) / (2.0 * h);
            }
            let dev = gradcheck_dev(&auto.reshape(&[n.max(1)]).expect("flat"), &fd);
            CaseResult {
                label: name.clone(),
                max_abs: dev,
                max_rel: dev,
                pass: dev < tol,
            }
        })
        .collect();

    SuiteReport::build(
        "gradcheck",
        cases,
        started,
        vec![
            format!("tolerance = {tol:.0e} relative on coordinates with |grad| > 1e-8"),
            format!("fd step = {h:.0e}"),
            "deviation floor 1e-8 absolute (fd round-off at this step size)".to_string(),
        ],
    )
}

pub fn suite_by_name(name: &str, seeds: usize, base_seed: u64) -> Result<SuiteReport> {
    match name {
        "dual_form" => Ok(dual_form_suite(seeds, base_seed)),
        "theorem1" => Ok(theorem1_suite(seeds, 64, base_seed)),
        "theorem2" => Ok(theorem2_suite(seeds, 64, base_seed)),
        "oracle" => Ok(oracle_suite(seeds, base_seed)),
        "gradcheck" => Ok(gradcheck_suite(base_seed)),
        other => Err(crate::error::Error::Config(format!("unknown suite `{other}`"))),
    }
}
