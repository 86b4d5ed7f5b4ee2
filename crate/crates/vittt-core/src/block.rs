//! The bidirectional Vittt block.
//!
//! Forward order (one block):
//!
//! ```text
//!   x_pre = DWConv2d(y_prev) + y_prev        // dataset preprocessing
//!   x     = LN(x_pre)
//!   gate  = GELU(x . W_g)                    // sigmoid selectable
//!   z_f   = TTT(x)                           // forth dataset
//!   z_b   = TTT(flip(x))                     // back dataset
//!   y     = (gate * z_f + gate * flip(z_b)) . W_o + x
//! ```
//!
//! The back direction is a pure index reversal of the 1-D token order.
//! Class tokens, when present, bypass the 2-D convolution (there is no grid
//! cell for them) and participate in everything else.

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorOf};
use crate::ttt::{trunc_normal, TttConfig, TttDiag, TttParams, TttVars, W0Binding, LN_EPS};
use rand::Rng;

/// Kernel size of the depthwise 2-D convolution. Forced by the reported
/// per-block parameter deltas (9 * D per block).
pub const CONV2D_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Gelu,
    Sigmoid,
}

/// How the initial inner states of the two directions are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W0Mode {
    /// One-time zero initialization, not trained; both directions read it.
    Fixed,
    /// One learnable tensor shared by forth and back.
    SharedLearnable,
    /// Two independent learnable tensors.
    DualLearnable,
}

/// Placement of tokens in the sequence: a raster-ordered patch grid plus
/// optional class-token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sequence indices holding class tokens, strictly increasing.
    pub class_positions: Vec<usize>,
}

impl TokenLayout {
    pub fn grid_only(grid_h: usize, grid_w: usize) -> Self {
        TokenLayout {
            grid_h,
            grid_w,
            class_positions: Vec::new(),
        }
    }

    pub fn patch_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn total_tokens(&self) -> usize {
        self.patch_tokens() + self.class_positions.len()
    }

    /// Sequence index of the patch token at raster position `p`.
    pub fn patch_row(&self, p: usize) -> usize {
        let mut idx = p;
        for &c in &self.class_positions {
            if c <= idx {
                idx += 1;
            }
        }
        idx
    }

    /// Maximal runs of consecutive patch tokens as
    /// `(seq_start, len, raster_start)`.
    pub fn patch_runs(&self) -> Vec<(usize, usize, usize)> {
        let total = self.total_tokens();
        let mut runs = Vec::new();
        let mut seq = 0;
        let mut raster = 0;
        while seq < total {
            if self.class_positions.contains(&seq) {
                seq += 1;
                continue;
            }
            let start = seq;
            let raster_start = raster;
            while seq < total && !self.class_positions.contains(&seq) {
                seq += 1;
                raster += 1;
            }
            runs.push((start, seq - start, raster_start));
        }
        runs
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.total_tokens();
        let mut prev = None;
        for &c in &self.class_positions {
            if c >= total {
                return Err(Error::Config(format!("class position {c} out of {total}")));
            }
            if let Some(p) = prev {
                if c <= p {
                    return Err(Error::Config("class positions must be increasing".into()));
                }
            }
            prev = Some(c);
        }
        Ok(())
    }
}

/// Learnable weights of one block.
#[derive(Debug, Clone)]
pub struct VitttBlockParams {
    pub dwconv2d_kernel: Tensor, // [3 x 3 x D]
    pub pre_norm_gamma: Tensor,  // [D]
    pub pre_norm_beta: Tensor,   // [D]
    pub gate_proj: Tensor,       // [D x D]
    pub out_proj: Tensor,        // [D x D]
    pub forth: TttParams,
    pub back: TttParams,
    pub w0_mode: W0Mode,
}

impl VitttBlockParams {
    pub fn init<R: Rng>(cfg: &TttConfig, w0_mode: W0Mode, rng: &mut R) -> Self {
        let d = cfg.embed_dim();
        VitttBlockParams {
            dwconv2d_kernel: Tensor::zeros(&[CONV2D_K, CONV2D_K, d]),
            pre_norm_gamma: Tensor::filled(&[d], 1.0),
            pre_norm_beta: Tensor::zeros(&[d]),
            gate_proj: trunc_normal(&[d, d], 0.02, rng),
            out_proj: trunc_normal(&[d, d], 0.02, rng),
            forth: TttParams::init(cfg, rng),
            back: TttParams::init(cfg, rng),
            w0_mode,
        }
    }

    /// The initial state the back direction actually reads: its own under
    /// `DualLearnable`, the forth tensor otherwise.
    pub fn back_w0(&self) -> &Tensor {
        match self.w0_mode {
            W0Mode::DualLearnable => &self.back.state.w0,
            _ => &self.forth.state.w0,
        }
    }

    pub fn back_w0_mut(&mut self) -> &mut Tensor {
        match self.w0_mode {
            W0Mode::DualLearnable => &mut self.back.state.w0,
            _ => &mut self.forth.state.w0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub gate: GateKind,
    pub dual_direction: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            gate: GateKind::Gelu,
            dual_direction: true,
        }
    }
}

pub struct BlockVars<V> {
    pub dwconv2d_kernel: V,
    pub pre_norm_gamma: V,
    pub pre_norm_beta: V,
    pub gate_proj: V,
    pub out_proj: V,
    pub forth: TttVars<V>,
    pub back: TttVars<V>,
}

impl VitttBlockParams {
    pub fn bind<B: Backend>(
        &self,
        b: &mut B,
        prefix: &str,
        reg: &mut Vec<(String, B::Value)>,
    ) -> Result<BlockVars<B::Value>> {
        let forth_w0 = match self.w0_mode {
            W0Mode::Fixed => W0Binding::Frozen,
            _ => W0Binding::Learnable,
        };
        let forth = self.forth.bind(b, forth_w0, &format!("{prefix}.forth"), reg)?;
        let back_w0 = match self.w0_mode {
            W0Mode::DualLearnable => W0Binding::Learnable,
            _ => W0Binding::Shared(forth.w0.clone()),
        };
        let back = self.back.bind(b, back_w0, &format!("{prefix}.back"), reg)?;
        let mut bindp = |b: &mut B, name: &str, t: &Tensor| {
            let v = b.parameter(t);
            reg.push((format!("{prefix}.{name}"), v.clone()));
            v
        };
        Ok(BlockVars {
            dwconv2d_kernel: bindp(b, "dwconv2d_kernel", &self.dwconv2d_kernel),
            pre_norm_gamma: bindp(b, "pre_norm.gamma", &self.pre_norm_gamma),
            pre_norm_beta: bindp(b, "pre_norm.beta", &self.pre_norm_beta),
            gate_proj: bindp(b, "gate_proj", &self.gate_proj),
            out_proj: bindp(b, "out_proj", &self.out_proj),
            forth,
            back,
        })
    }

    pub fn bind_eval<B: Backend>(&self, b: &mut B) -> Result<BlockVars<B::Value>> {
        let mut reg = Vec::new();
        self.bind(b, "block", &mut reg)
    }
}

/// Per-block diagnostics: reconstruction traces and gradient norms of both
/// directions. Back-direction token indices follow the flipped order; the
/// interpretability extractors unflip them.
#[derive(Debug, Clone, Default)]
pub struct BlockDiag {
    pub forth: TttDiag,
    pub back: Option<TttDiag>,
}

impl BlockDiag {
    pub fn capturing() -> Self {
        BlockDiag {
            forth: TttDiag::capturing(),
            back: Some(TttDiag::capturing()),
        }
    }
}

/// Depthwise 2-D convolution over the patch tokens, with class tokens (if
/// any) contributing and receiving nothing.
fn conv2d_over_layout<B: Backend>(
    b: &mut B,
    y: &B::Value,
    layout: &TokenLayout,
    kernel: &B::Value,
) -> Result<B::Value> {
    if layout.class_positions.is_empty() {
        return b.dwconv2d(y, layout.grid_h, layout.grid_w, kernel);
    }
    let runs = layout.patch_runs();
    let parts: Vec<B::Value> = runs
        .iter()
        .map(|&(seq_start, len, _)| b.slice_rows(y, seq_start, len))
        .collect::<Result<_>>()?;
    let patches = b.concat_rows(&parts)?;
    let conv = b.dwconv2d(&patches, layout.grid_h, layout.grid_w, kernel)?;

    // rebuild the full sequence with zero rows at class positions
    let d = b.peek(y).dims2()?.1;
    let total = layout.total_tokens();
    let mut parts: Vec<B::Value> = Vec::new();
    let mut seq = 0;
    let mut run_iter = runs.iter().peekable();
    while seq < total {
        if let Some(&&(seq_start, len, raster_start)) = run_iter.peek() {
            if seq == seq_start {
                parts.push(b.slice_rows(&conv, raster_start, len)?);
                seq += len;
                run_iter.next();
                continue;
            }
        }
        parts.push(b.constant(TensorOf::zeros(&[1, d])));
        seq += 1;
    }
    b.concat_rows(&parts)
}

/// Full block forward per the algorithm above. `y_prev` is `[T_total x D]`.
pub fn block_forward<B: Backend>(
    b: &mut B,
    y_prev: &B::Value,
    layout: &TokenLayout,
    vars: &BlockVars<B::Value>,
    ttt_cfg: &TttConfig,
    block_cfg: &BlockConfig,
    diag: Option<&mut BlockDiag>,
) -> Result<B::Value> {
    layout.validate()?;
    let (t_len, _d) = b.peek(y_prev).dims2()?;
    if t_len != layout.total_tokens() {
        return Err(Error::Shape(format!(
            "block_forward: {t_len} tokens vs layout {}",
            layout.total_tokens()
        )));
    }

    let conv = conv2d_over_layout(b, y_prev, layout, &vars.dwconv2d_kernel)?;
    let x_pre = b.add(&conv, y_prev)?;
    let x = b.layer_norm(&x_pre, &vars.pre_norm_gamma, &vars.pre_norm_beta, LN_EPS)?;

    let gate = {
        let pre = b.matmul(&x, &vars.gate_proj)?;
        match block_cfg.gate {
            GateKind::Gelu => b.gelu(&pre)?,
            GateKind::Sigmoid => b.sigmoid(&pre)?,
        }
    };

    let (diag_forth, diag_back) = match diag {
        Some(d) => (Some(&mut d.forth), d.back.as_mut()),
        None => (None, None),
    };

    let forth = crate::ttt::ttt_layer(b, &x, &vars.forth, ttt_cfg, diag_forth)?;
    let merged = if block_cfg.dual_direction {
        let x_rev = b.flip_rows(&x)?;
        let back = crate::ttt::ttt_layer(b, &x_rev, &vars.back, ttt_cfg, diag_back)?;
        let z_back = b.flip_rows(&back.z)?;
        let a = b.mul(&forth.z, &gate)?;
        let c = b.mul(&z_back, &gate)?;
        b.add(&a, &c)?
    } else {
        b.mul(&forth.z, &gate)?
    };

    let proj = b.matmul(&merged, &vars.out_proj)?;
    let y = b.add(&proj, &x)?;
    b.peek(&y).ensure_finite("block_forward")?;
    Ok(y)
}

// ---------------------------------------------------------------------------
// parameter accounting
// ---------------------------------------------------------------------------

/// Itemized exact parameter count of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockParamBreakdown {
    pub conv2d: u64,
    pub pre_norm: u64,
    pub gate_proj: u64,
    pub out_proj: u64,
    pub projections: u64,
    pub inner_state: u64,
}

impl BlockParamBreakdown {
    pub fn total(&self) -> u64 {
        self.conv2d + self.pre_norm + self.gate_proj + self.out_proj + self.projections + self.inner_state
    }
}

/// Closed-form learnable-parameter count of one block.
pub fn block_param_count(
    d_model: u64,
    num_heads: u64,
    head_dim: u64,
    k_conv1d: u64,
    k_conv2d: u64,
    w0_mode: W0Mode,
) -> BlockParamBreakdown {
    let per_dir_proj = 2 * d_model * d_model        // theta_kq, theta_v
        + 2 * k_conv1d * d_model                    // conv1d_k, conv1d_q
        + d_model * num_heads                       // eta_proj
        + 1; // eta_base
    let w0 = num_heads * head_dim * head_dim;
    let per_dir_state = 3 * num_heads * head_dim; // b_inner, ln_gamma, ln_beta
    let w0_count = match w0_mode {
        W0Mode::Fixed => 0,
        W0Mode::SharedLearnable => w0,
        W0Mode::DualLearnable => 2 * w0,
    };
    BlockParamBreakdown {
        conv2d: k_conv2d * k_conv2d * d_model,
        pre_norm: 2 * d_model,
        gate_proj: d_model * d_model,
        out_proj: d_model * d_model,
        projections: 2 * per_dir_proj,
        inner_state: 2 * per_dir_state + w0_count,
    }
}

/// Parameter visiting, shared by counting, checkpointing, binding and the
/// optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

impl VitttBlockParams {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(format!("{prefix}.dwconv2d_kernel"), &self.dwconv2d_kernel, ParamKind::Learnable);
        f(format!("{prefix}.pre_norm.gamma"), &self.pre_norm_gamma, ParamKind::Learnable);
        f(format!("{prefix}.pre_norm.beta"), &self.pre_norm_beta, ParamKind::Learnable);
        f(format!("{prefix}.gate_proj"), &self.gate_proj, ParamKind::Learnable);
        f(format!("{prefix}.out_proj"), &self.out_proj, ParamKind::Learnable);
        let w0_kind = match self.w0_mode {
            W0Mode::Fixed => ParamKind::Buffer,
            _ => ParamKind::Learnable,
        };
        visit_direction(&self.forth, &format!("{prefix}.forth"), Some(w0_kind), f);
        let back_w0 = match self.w0_mode {
            W0Mode::DualLearnable => Some(ParamKind::Learnable),
            _ => None, // shared or fixed: the back direction reads forth's tensor
        };
        visit_direction(&self.back, &format!("{prefix}.back"), back_w0, f);
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor, ParamKind),
    ) {
        f(format!("{prefix}.dwconv2d_kernel"), &mut self.dwconv2d_kernel, ParamKind::Learnable);
        f(format!("{prefix}.pre_norm.gamma"), &mut self.pre_norm_gamma, ParamKind::Learnable);
        f(format!("{prefix}.pre_norm.beta"), &mut self.pre_norm_beta, ParamKind::Learnable);
        f(format!("{prefix}.gate_proj"), &mut self.gate_proj, ParamKind::Learnable);
        f(format!("{prefix}.out_proj"), &mut self.out_proj, ParamKind::Learnable);
        let w0_kind = match self.w0_mode {
            W0Mode::Fixed => ParamKind::Buffer,
            _ => ParamKind::Learnable,
        };
        visit_direction_mut(&mut self.forth, &format!("{prefix}.forth"), Some(w0_kind), f);
        let back_w0 = match self.w0_mode {
            W0Mode::DualLearnable => Some(ParamKind::Learnable),
            _ => None,
        };
        visit_direction_mut(&mut self.back, &format!("{prefix}.back"), back_w0, f);
    }
}

fn visit_direction<'a>(
    dir: &'a TttParams,
    prefix: &str,
    w0: Option<ParamKind>,
    f: &mut dyn FnMut(String, &'a Tensor, ParamKind),
) {
    f(format!("{prefix}.theta_kq"), &dir.proj.theta_kq, ParamKind::Learnable);
    f(format!("{prefix}.theta_v"), &dir.proj.theta_v, ParamKind::Learnable);
    f(format!("{prefix}.conv1d_k"), &dir.proj.conv1d_k, ParamKind::Learnable);
    f(format!("{prefix}.conv1d_q"), &dir.proj.conv1d_q, ParamKind::Learnable);
    f(format!("{prefix}.eta_proj"), &dir.proj.eta_proj, ParamKind::Learnable);
    f(format!("{prefix}.eta_base"), &dir.proj.eta_base, ParamKind::Learnable);
    if let Some(kind) = w0 {
        f(format!("{prefix}.w0"), &dir.state.w0, kind);
    }
    f(format!("{prefix}.b_inner"), &dir.state.b_inner, ParamKind::Learnable);
    f(format!("{prefix}.ln_gamma"), &dir.state.ln_gamma, ParamKind::Learnable);
    f(format!("{prefix}.ln_beta"), &dir.state.ln_beta, ParamKind::Learnable);
}

fn visit_direction_mut(
    dir: &mut TttParams,
    prefix: &str,
    w0: Option<ParamKind>,
    f: &mut dyn FnMut(String, &mut Tensor, ParamKind),
) {
    f(format!("{prefix}.theta_kq"), &mut dir.proj.theta_kq, ParamKind::Learnable);
    f(format!("{prefix}.theta_v"), &mut dir.proj.theta_v, ParamKind::Learnable);
    f(format!("{prefix}.conv1d_k"), &mut dir.proj.conv1d_k, ParamKind::Learnable);
    f(format!("{prefix}.conv1d_q"), &mut dir.proj.conv1d_q, ParamKind::Learnable);
    f(format!("{prefix}.eta_proj"), &mut dir.proj.eta_proj, ParamKind::Learnable);
    f(format!("{prefix}.eta_base"), &mut dir.proj.eta_base, ParamKind::Learnable);
    if let Some(kind) = w0 {
        f(format!("{prefix}.w0"), &mut dir.state.w0, kind);
    }
    f(format!("{prefix}.b_inner"), &mut dir.state.b_inner, ParamKind::Learnable);
    f(format!("{prefix}.ln_gamma"), &mut dir.state.ln_gamma, ParamKind::Learnable);
    f(format!("{prefix}.ln_beta"), &mut dir.state.ln_beta, ParamKind::Learnable);
}
