//! Interpretability extractors: per-token gradient magnitude maps, per-layer
//! reconstruction-loss traces, and effective receptive fields.
//!
//! All extraction is read-only: a forward pass with diagnostics enabled is
//! bit-identical to one without.

use crate::autodiff::Tape;
use crate::backbone::{
    encoder_forward, image_dims, model_forward_with_diag, ModelConfig, ModelParams,
};
use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ttt::TttDiag;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forth,
    Back,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Forth => "forth",
            Direction::Back => "back",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forth" => Ok(Direction::Forth),
            "back" => Ok(Direction::Back),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

/// Per-token gradient-norm field over the patch grid.
#[derive(Debug, Clone)]
pub struct GradMagnitudeMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Head-summed Frobenius norm of `G_t` per patch token, raster order.
    pub values: Vec<f64>,
    pub per_head: Vec<Vec<f64>>,
    /// Tokens in the top `top_percent` by value.
    pub top_mask: Vec<bool>,
    pub top_percent: f64,
}

impl GradMagnitudeMap {
    /// Ratio of standard deviation to mean of the map entries; reported, not
    /// asserted (the flatness of fresh maps is a qualitative observation).
    pub fn coefficient_of_variation(&self) -> f64 {
        let n = self.values.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = self.values.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return 0.0;
        }
        let var = self.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt() / mean
    }
}

fn direction_diag<'a>(
    diag: &'a crate::block::BlockDiag,
    direction: Direction,
) -> Result<&'a TttDiag> {
    match direction {
        Direction::Forth => Ok(&diag.forth),
        Direction::Back => diag
            .back
            .as_ref()
            .ok_or_else(|| Error::Config("back direction disabled in this model".into())),
    }
}

/// Extracts the gradient magnitude map of one layer and direction.
///
/// Per-head entries are the rank-one norms `|G_t|_F = |xk_t| |g_t|`
/// collected during the scan; heads are aggregated by summation. Class
/// tokens do not appear on the grid.
pub fn gmm_extract(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    layer: usize,
    direction: Direction,
    top_percent: f64,
) -> Result<GradMagnitudeMap> {
    if layer >= cfg.depth {
        return Err(Error::Config(format!(
            "layer {layer} out of range (depth {})",
            cfg.depth
        )));
    }
    let (_, _, diag) = model_forward_with_diag(params, cfg, image, false)?;
    let block = &diag.blocks[layer];
    let tdiag = direction_diag(block, direction)?;

    let layout = cfg.layout();
    let t_total = layout.total_tokens();
    let t_patch = layout.patch_tokens();
    let nh = cfg.ttt.num_heads;

    let mut per_head = vec![vec![0.0; t_patch]; nh];
    let mut values = vec![0.0; t_patch];
    for (h, hd) in tdiag.heads.iter().enumerate() {
        if hd.g_norms.len() != t_total {
            return Err(Error::Shape(format!(
                "diagnostics length {} vs {t_total} tokens",
                hd.g_norms.len()
            )));
        }
        for raster in 0..t_patch {
            let seq = layout.patch_row(raster);
            // the back scan runs on the flipped sequence
            let idx = match direction {
                Direction::Forth => seq,
                Direction::Back => t_total - 1 - seq,
            };
            per_head[h][raster] = hd.g_norms[idx];
            values[raster] += hd.g_norms[idx];
        }
    }

    let top_mask = top_percent_mask(&values, top_percent);
    Ok(GradMagnitudeMap {
        grid_h: layout.grid_h,
        grid_w: layout.grid_w,
        values,
        per_head,
        top_mask,
        top_percent,
    })
}

fn top_percent_mask(values: &[f64], percent: f64) -> Vec<bool> {
    let n = values.len();
    let k = ((n as f64) * percent / 100.0).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in order.iter().take(k.min(n)) {
        mask[i] = true;
    }
    mask
}

// ---------------------------------------------------------------------------
// reconstruction-loss traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer: usize,
    pub direction: Direction,
    /// `[head][mini-batch]` mean reconstruction loss at the entering state.
    pub per_head: Vec<Vec<f64>>,
}

/// Exports the inner reconstruction-loss trace of every layer and direction.
pub fn recon_trace(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<Vec<LayerTrace>> {
    let (_, _, diag) = model_forward_with_diag(params, cfg, image, false)?;
    let mut traces = Vec::new();
    for (l, block) in diag.blocks.iter().enumerate() {
        traces.push(LayerTrace {
            layer: l,
            direction: Direction::Forth,
            per_head: block.forth.heads.iter().map(|h| h.recon_loss.clone()).collect(),
        });
        if let Some(back) = &block.back {
            traces.push(LayerTrace {
                layer: l,
                direction: Direction::Back,
                per_head: back.heads.iter().map(|h| h.recon_loss.clone()).collect(),
            });
        }
    }
    Ok(traces)
}

// ---------------------------------------------------------------------------
// effective receptive field
// ---------------------------------------------------------------------------

/// Normalized per-pixel gradient magnitude of the central output token.
#[derive(Debug, Clone)]
pub struct ErfMap {
    pub h: usize,
    pub w: usize,
    /// Channel-aggregated (L2) gradient magnitude, max-normalized to 1.
    pub values: Vec<f64>,
}

/// Raster index of the central patch token.
pub fn center_token_raster(cfg: &ModelConfig) -> usize {
    let (gh, gw) = cfg.grid();
    (gh / 2) * gw + gw / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErfProbe {
    Autodiff,
    FiniteDiff,
}

/// Scalar ERF probe: the summed features of the central output token of the
/// encoder (a linear readout, so one backward pass suffices).
fn erf_probe_value(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<f64> {
    let mut b = crate::backend::Eval::<f64>::new();
    let (vars, _) = params.bind(&mut b)?;
    let y = encoder_forward(&mut b, image, &vars, cfg, None)?;
    let layout = cfg.layout();
    let center = layout.patch_row(center_token_raster(cfg));
    let row = y.slice_rows(center, 1)?;
    Ok(row.sum_all().data()[0])
}

pub fn erf_compute(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    probe: ErfProbe,
) -> Result<ErfMap> {
    match probe {
        ErfProbe::Autodiff => erf_autodiff(params, cfg, image),
        ErfProbe::FiniteDiff => erf_finite_diff(params, cfg, image, 1 << 14),
    }
}

pub fn erf_autodiff(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<ErfMap> {
    let (h, w, c) = image_dims(image)?;
    let mut tape = Tape::new();
    let img_var = tape.leaf(image.clone(), true);
    let (vars, _) = params.bind(&mut tape)?;
    let y = encoder_forward(&mut tape, &img_var, &vars, cfg, None)?;
    let layout = cfg.layout();
    let center = layout.patch_row(center_token_raster(cfg));
    let row = Backend::slice_rows(&mut tape, &y, center, 1)?;
    let probe = Backend::sum_all(&mut tape, &row)?;
    tape.backward(probe)?;
    let grad = tape.grad(img_var)?;
    Ok(aggregate_erf(h, w, c, grad.data()))
}

/// Central-difference ERF; guarded by a maximum forward-evaluation budget
/// because the cost is `2 * H * W * C` encoder passes.
pub fn erf_finite_diff(
    params: &ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    max_evals: usize,
) -> Result<ErfMap> {
    let (h, w, c) = image_dims(image)?;
    let evals = 2 * h * w * c;
    if evals > max_evals {
        return Err(Error::Config(format!(
            "finite-diff ERF needs {evals} forwards, budget is {max_evals}"
        )));
    }
    let step = 1e-4;
    let mut grads = vec![0.0; h * w * c];
    for i in 0..h * w * c {
        let mut plus = image.clone();
        plus.data_mut()[i] += step;
        let mut minus = image.clone();
        minus.data_mut()[i] -= step;
        grads[i] = (erf_probe_value(params, cfg, &plus)? - erf_probe_value(params, cfg, &minus)?)
            / (2.0 * step);
    }
    Ok(aggregate_erf(h, w, c, &grads))
}

fn aggregate_erf(h: usize, w: usize, c: usize, grads: &[f64]) -> ErfMap {
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let g = grads[(y * w + x) * c + ch];
                acc += g * g;
            }
            values[y * w + x] = acc.sqrt();
        }
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    ErfMap { h, w, values }
}
