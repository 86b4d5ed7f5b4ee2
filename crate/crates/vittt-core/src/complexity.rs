//! Analytic computation and memory complexity models, cross-checked against
//! the instrumented multiply-accumulate counter.
//!
//! Per-mechanism formulas (one block's sequence-mixing path):
//!
//! ```text
//!   vit:   4 T D^2 + 2 T^2 D
//!   vim:   6 T D^2 + 18 T (2D) N
//!   vittt: 6 T D^2 + 6 T D d + 4 b T D
//! ```
//!
//! Measurement counts multiply-accumulates in matmul/conv kernels only,
//! matching what the formulas count; the analytic form neglects terms below
//! `o(bTD)` (the depthwise convolutions and the eta gate), which the
//! measured-vs-analytic tolerance band absorbs.

use crate::backend::Eval;
use crate::block::{block_forward, BlockConfig, TokenLayout, VitttBlockParams, W0Mode};
use crate::error::{Error, Result};
use crate::tensor::{macs, Scalar, TensorOf};
use crate::ttt::{Form, InnerModel, TttConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Vit,
    Vim,
    Vittt,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Vit => "vit",
            Arch::Vim => "vim",
            Arch::Vittt => "vittt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Arch::Vit),
            "vim" => Ok(Arch::Vim),
            "vittt" => Ok(Arch::Vittt),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

/// Exact integer evaluation of the per-mechanism computation formulas.
/// `head_dim` and `minibatch` enter only the vittt formula, `state_n` only
/// the vim formula.
pub fn flops_formula(arch: Arch, t: u64, d: u64, head_dim: u64, minibatch: u64, state_n: u64) -> u64 {
    match arch {
        Arch::Vit => 4 * t * d * d + 2 * t * t * d,
        Arch::Vim => 6 * t * d * d + 18 * t * (2 * d) * state_n,
        Arch::Vittt => 6 * t * d * d + 6 * t * d * head_dim + 4 * minibatch * t * d,
    }
}

/// One labeled term of an asymptotic memory model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemTerm {
    pub label: String,
    pub value: u64,
}

#[derive(Debug, Clone)]
pub struct MemModel {
    pub arch: Arch,
    pub terms: Vec<MemTerm>,
    /// Footprint after kernel fusion + recomputation, where applicable.
    pub reduced: Option<MemTerm>,
    /// Ratio by which recomputation shrinks the dominant state term (`d/b`
    /// for vittt).
    pub reduction_factor: Option<f64>,
}

pub fn mem_model(
    arch: Arch,
    batch: u64,
    t: u64,
    d: u64,
    head_dim: u64,
    minibatch: u64,
    state_n: u64,
) -> MemModel {
    let term = |label: &str, value: u64| MemTerm {
        label: label.to_string(),
        value,
    };
    match arch {
        Arch::Vit => MemModel {
            arch,
            terms: vec![term("BTD", batch * t * d), term("BT^2", batch * t * t)],
            reduced: None,
            reduction_factor: None,
        },
        Arch::Vim => MemModel {
            arch,
            terms: vec![
                term("BTD", batch * t * d),
                term("BTDN", batch * t * d * state_n),
            ],
            reduced: Some(term("BTD", batch * t * d)),
            reduction_factor: None,
        },
        Arch::Vittt => MemModel {
            arch,
            terms: vec![
                term("BTD", batch * t * d),
                term("BTd", batch * t * head_dim),
                term("BTDd/b", batch * t * d * head_dim / minibatch),
            ],
            reduced: Some(term("BTD", batch * t * d)),
            reduction_factor: Some(head_dim as f64 / minibatch as f64),
        },
    }
}

// ---------------------------------------------------------------------------
// measurement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub arch: Arch,
    pub t: usize,
    pub d: usize,
    pub head_dim: usize,
    pub minibatch: usize,
    pub batch: usize,
    pub flops_analytic: u64,
    pub flops_measured: Option<u64>,
    pub wallclock_ms: Option<f64>,
    pub threads: usize,
}

/// Largest grid factorization `gh * gw == t` with `gh <= gw`.
pub fn square_ish_grid(t: usize) -> (usize, usize) {
    let mut gh = (t as f64).sqrt() as usize;
    while gh > 1 && t % gh != 0 {
        gh -= 1;
    }
    (gh.max(1), t / gh.max(1))
}

/// Wall-clock protocol: `warmups` runs discarded, median of `reps` taken.
fn timed_median<S: Scalar>(
    mut run: impl FnMut() -> Result<TensorOf<S>>,
    warmups: usize,
    reps: usize,
) -> Result<f64> {
    for _ in 0..warmups {
        run()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}

/// Measures the Vittt block's sequence-mixing path (dual-direction TTT in
/// dual form, gating, projections) at the given sequence lengths.
#[allow(clippy::too_many_arguments)]
pub fn measure_vittt_block<S: Scalar>(
    ts: &[usize],
    d_model: usize,
    num_heads: usize,
    head_dim: usize,
    minibatch: usize,
    seed: u64,
    warmups: usize,
    reps: usize,
) -> Result<Vec<ComplexityReport>> {
    let mut cfg = TttConfig::new(num_heads, head_dim);
    cfg.minibatch_size = minibatch;
    cfg.inner_model = InnerModel::PlainLinear;
    cfg.form = Form::Dual;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = VitttBlockParams::init(&cfg, W0Mode::DualLearnable, &mut rng);
    let block_cfg = BlockConfig::default();

    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        let (gh, gw) = square_ish_grid(t);
        let layout = TokenLayout::grid_only(gh, gw);
        let x = TensorOf::<S>::randn(&[t, d_model], 0.02, &mut rng);
        let mut backend = Eval::<S>::new();
        let vars = params.bind_eval(&mut backend)?;

        let mut run = || {
            block_forward(
                &mut backend,
                &x,
                &layout,
                &vars,
                &cfg,
                &block_cfg,
                None,
            )
        };
        let (first, measured) = macs::counted(&mut run);
        first?;
        let wallclock = timed_median(run, warmups, reps)?;
        out.push(ComplexityReport {
            arch: Arch::Vittt,
            t,
            d: d_model,
            head_dim,
            minibatch,
            batch: 1,
            flops_analytic: flops_formula(
                Arch::Vittt,
                t as u64,
                d_model as u64,
                head_dim as u64,
                minibatch as u64,
                16,
            ),
            flops_measured: Some(measured),
            wallclock_ms: Some(wallclock),
            threads: 1,
        });
    }
    Ok(out)
}

/// Single-layer causal softmax attention, the quadratic reference: K/Q/V
/// and output projections (`4 T D^2` MACs) plus the two attention-map
/// products (`2 T^2 D` MACs). Softmax itself is elementwise and uncounted.
pub fn quadratic_attention_forward<S: Scalar>(
    x: &TensorOf<S>,
    wq: &TensorOf<S>,
    wk: &TensorOf<S>,
    wv: &TensorOf<S>,
    wo: &TensorOf<S>,
) -> Result<TensorOf<S>> {
    let (t, d) = x.dims2()?;
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let v = x.matmul(wv)?;
    let mut scores = q.matmul(&k.transpose()?)?;
    // causal row softmax over s <= t
    let scale = 1.0 / (d as f64).sqrt();
    for r in 0..t {
        let row = &mut scores.data_mut()[r * t..(r + 1) * t];
        let mut max = f64::NEG_INFINITY;
        for item in row.iter().take(r + 1) {
            max = max.max(item.to_f64() * scale);
        }
        let mut sum = 0.0;
        for item in row.iter_mut().take(r + 1) {
            let e = (item.to_f64() * scale - max).exp();
            *item = S::from_f64(e);
            sum += e;
        }
        for item in row.iter_mut().take(r + 1) {
            *item = S::from_f64(item.to_f64() / sum);
        }
        for item in row.iter_mut().skip(r + 1) {
            *item = S::ZERO;
        }
    }
    let ctx = scores.matmul(&v)?;
    ctx.matmul(wo)
}

pub fn measure_quadratic_attention<S: Scalar>(
    ts: &[usize],
    d_model: usize,
    seed: u64,
    warmups: usize,
    reps: usize,
) -> Result<Vec<ComplexityReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wq = TensorOf::<S>::randn(&[d_model, d_model], 0.02, &mut rng);
    let wk = TensorOf::<S>::randn(&[d_model, d_model], 0.02, &mut rng);
    let wv = TensorOf::<S>::randn(&[d_model, d_model], 0.02, &mut rng);
    let wo = TensorOf::<S>::randn(&[d_model, d_model], 0.02, &mut rng);
    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        let x = TensorOf::<S>::randn(&[t, d_model], 0.02, &mut rng);
        let mut run = || quadratic_attention_forward(&x, &wq, &wk, &wv, &wo);
        let (first, measured) = macs::counted(&mut run);
        first?;
        let wallclock = timed_median(run, warmups, reps)?;
        out.push(ComplexityReport {
            arch: Arch::Vit,
            t,
            d: d_model,
            head_dim: d_model,
            minibatch: t,
            batch: 1,
            flops_analytic: flops_formula(Arch::Vit, t as u64, d_model as u64, 0, 0, 0),
            flops_measured: Some(measured),
            wallclock_ms: Some(wallclock),
            threads: 1,
        });
    }
    Ok(out)
}

/// Analytic-only report (vim is never executed).
pub fn analytic_report(
    arch: Arch,
    t: usize,
    d: usize,
    head_dim: usize,
    minibatch: usize,
    state_n: usize,
) -> ComplexityReport {
    ComplexityReport {
        arch,
        t,
        d,
        head_dim,
        minibatch,
        batch: 1,
        flops_analytic: flops_formula(
            arch,
            t as u64,
            d as u64,
            head_dim as u64,
            minibatch as u64,
            state_n as u64,
        ),
        flops_measured: None,
        wallclock_ms: None,
        threads: 1,
    }
}

/// CSV header shared by the bench command and tests.
pub const REPORT_CSV_HEADER: &str =
    "arch,T,D,d,b,B,flops_analytic,flops_measured,wallclock_ms,threads";

pub fn report_csv_row(r: &ComplexityReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.arch.name(),
        r.t,
        r.d,
        r.head_dim,
        r.minibatch,
        r.batch,
        r.flops_analytic,
        r.flops_measured.map(|v| v.to_string()).unwrap_or_default(),
        r.wallclock_ms
            .map(|v| format!("{v:.3}"))
            .unwrap_or_default(),
        r.threads
    )
}
